import argparse
import asyncio
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from config import config
from experiment import (
    BenchConfig,
    CodebookConfig,
    ConfigError,
    ExperimentConfig,
    SweepConfig,
    load_config,
    run_experiment,
)
from param_opt import InfeasibleError
from quantizer import CodebookError
from storage import build_registry


logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedvqcs", description="FedVQCS: сжатие обновлений и симулятор FL")
    commands = parser.add_subparsers(dest="command", required=True)

    codebook = commands.add_parser("codebook", help="кодовые книги")
    codebook_cmd = codebook.add_subparsers(dest="action", required=True)
    build = codebook_cmd.add_parser("build", help="построить и сохранить в кеш")
    build.add_argument("--dim", type=int, required=True, help="размерность подвектора L")
    bits = build.add_mutually_exclusive_group(required=True)
    bits.add_argument("--shape-bits", type=int, help="Q_s для shape-книги")
    bits.add_argument("--gain-bits", type=int, help="Q_h для gain-книги")
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--budget", type=int, default=None, help="итерации уточнения упаковки")
    build.add_argument("--output", default=None)

    bench = commands.add_parser("bench", help="микробенчмарки")
    bench_cmd = bench.add_subparsers(dest="action", required=True)
    vq = bench_cmd.add_parser("vq", help="эмпирическая MSE против модели")
    vq.add_argument("--dim", type=int, default=BenchConfig.L)
    vq.add_argument("--q", type=_floats, default=BenchConfig.Q, help="список Q через запятую")
    vq.add_argument("--samples", type=int, default=BenchConfig.samples)
    vq.add_argument("--seed", type=int, default=0)
    vq.add_argument("--output", default=None)

    rec = bench_cmd.add_parser("recover", help="доля точного восстановления носителя")
    rec.add_argument("--config", default=None, help="INI со сценарием recover-sweep")
    rec.add_argument("--n", type=int, default=SweepConfig.N)
    rec.add_argument("--trials", type=int, default=SweepConfig.trials)
    rec.add_argument("--caps", type=_ints, default=SweepConfig.caps)
    rec.add_argument("--ratios", type=_floats, default=None)
    rec.add_argument("--algorithms", type=_words, default=SweepConfig.algorithms)
    rec.add_argument("--quantize", action="store_true")
    rec.add_argument("--seed", type=int, default=None)
    rec.add_argument("--output", default=None)

    fl = commands.add_parser("fl", help="федеративное обучение")
    fl_cmd = fl.add_subparsers(dest="action", required=True)
    run = fl_cmd.add_parser("run", help="запуск по INI-конфигу")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None, help="переопределяет seed из конфига")
    run.add_argument("--data-dir", default=None)
    return parser


def _output(args, scenario: str) -> str:
    return args.output or os.path.join(config.output_dir, scenario)


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """ExperimentConfig для подкоманды; INI читается только там, где он задан."""
    if args.command == "fl" or (args.command == "bench" and args.action == "recover" and args.config):
        data_dir = getattr(args, "data_dir", None) or os.getenv("FEDVQCS_DATA_DIR")
        cfg = load_config(args.config, data_dir)
        if args.command == "bench" and cfg.scenario != "recover-sweep":
            raise ConfigError(f"bench recover ожидает сценарий recover-sweep, в конфиге {cfg.scenario}")
        return cfg if args.seed is None else cfg.with_seed(args.seed)

    if args.command == "codebook":
        cfg = ExperimentConfig(
            scenario="codebook-build",
            seed=args.seed,
            output_dir=_output(args, "codebook-build"),
            codebook=CodebookConfig(args.dim, args.shape_bits, args.gain_bits),
            codebook_seed=args.seed,
        )
        if args.budget is not None:
            cfg = replace(cfg, codebook_budget=args.budget)
        return cfg

    if args.action == "vq":
        return ExperimentConfig(
            scenario="vq-bench",
            seed=args.seed,
            output_dir=_output(args, "vq-bench"),
            bench=BenchConfig(args.dim, args.q, args.samples),
        ).with_seed(args.seed)

    defaults = SweepConfig()
    seed = 0 if args.seed is None else args.seed
    return ExperimentConfig(
        scenario="recover-sweep",
        seed=seed,
        output_dir=_output(args, "recover-sweep"),
        sweep=SweepConfig(
            N=args.n,
            trials=args.trials,
            caps=args.caps,
            ratios=args.ratios or defaults.ratios,
            algorithms=args.algorithms,
            quantize=args.quantize,
        ),
    ).with_seed(seed)


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (ConfigError, CodebookError)):
        return EXIT_CONFIG
    if isinstance(error, FileNotFoundError):
        return EXIT_DATA
    if isinstance(error, InfeasibleError):
        return EXIT_INFEASIBLE
    return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, config.log_level.upper(), logging.INFO),
        format="[%(levelname)s] %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = experiment_from_args(args)
        logger.info("[BOOT] scenario=%s, seed=%d, output=%s, registry=%s", cfg.scenario, cfg.seed, cfg.output_dir, config.registry_backend)
        summary = asyncio.run(run_experiment(cfg, build_registry()))
    except Exception as e:
        code = exit_code_for(e)
        if code == EXIT_FAILURE:
            logger.exception("Запуск завершился ошибкой")
        print(f"fedvqcs: {type(e).__name__}: {e}", file=sys.stderr)
        return code
    print(json.dumps(summary, ensure_ascii=False, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
