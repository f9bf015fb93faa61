"""
Сценарии экспериментов: загрузка INI-конфига, запуск, запись CSV и манифеста.
"""
from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Optional, Sequence

import bitstruct
import numpy as np
import scipy

import compressor
import datasets
import fl_sim
import quantizer
import reconstructor
from config import config
from fl_sim import RoundConfig, RoundMetrics
from param_opt import CandidateRatios, SubvectorPolicy, max_sparsity, optimal_q
from quantizer import CodebookCache


logger = logging.getLogger(__name__)

SCENARIOS = ("fl-mnist", "fl-synthetic", "recover-sweep", "vq-bench", "codebook-build")

METRICS_COLUMNS = (
    "round",
    "train_loss",
    "test_acc",
    "bits_per_entry",
    "mean_block_nmse",
    "mean_bound",
    "wall_time_ms",
)
SELECTION_COLUMNS = (
    "round", "device", "block", "C", "R", "Q", "S", "M", "L", "shape_bits", "gain_bits", "objective", "bits",
)
RECOVERY_COLUMNS = (
    "round", "block", "group", "algorithm", "iters_used", "nmse_vs_truth", "bound_value", "wall_time_ms",
)
SWEEP_COLUMNS = (
    "N", "cap", "R", "S", "M", "algorithm", "trials", "exact_support_rate", "mean_nmse", "mean_iters", "wall_time_ms",
)
VQ_COLUMNS = (
    "L", "Q", "shape_bits", "gain_bits", "model_mse", "empirical_mse", "shape_mse", "gain_mse", "ratio",
)

TAG_SWEEP = 11


class ConfigError(ValueError):
    """Ошибка в конфигурации эксперимента."""


@dataclass(frozen=True)
class SweepConfig:
    N: int = 1024
    trials: int = 20
    caps: tuple[int, ...] = (1, 2, 3, 4)
    ratios: tuple[float, ...] = CandidateRatios().values
    algorithms: tuple[str, ...] = ("iht", "gamp")
    quantize: bool = False
    capacity: float = 0.1


@dataclass(frozen=True)
class BenchConfig:
    L: int = 4
    Q: tuple[float, ...] = (1.0, 2.0, 3.0)
    samples: int = 100_000


@dataclass(frozen=True)
class CodebookConfig:
    dim: int = 4
    shape_bits: Optional[int] = None
    gain_bits: Optional[int] = None


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    seed: int
    output_dir: str
    round: RoundConfig = field(default_factory=RoundConfig)
    data_dir: str = config.data_dir
    train_limit: Optional[int] = None
    test_limit: Optional[int] = 2000
    cache_dir: str = config.cache_dir
    codebook_seed: int = 0
    codebook_budget: int = quantizer.DEFAULT_BUDGET
    sweep: SweepConfig = field(default_factory=SweepConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    source: dict[str, dict[str, str]] = field(default_factory=dict)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, round=replace(self.round, seed=seed))

    def echo(self) -> dict[str, Any]:
        data = asdict(self)
        data.pop("source")
        data["round"]["candidates"] = list(self.round.candidates.values)
        return data


# ---------------------------------------------------------------------------
# Разбор INI
# ---------------------------------------------------------------------------


def _get(parser: configparser.ConfigParser, section: str, key: str) -> Optional[str]:
    if not parser.has_section(section):
        return None
    raw = parser.get(section, key, fallback=None)
    if raw is None:
        return None
    raw = raw.strip()
    return raw or None


def _typed(parser, section, key, kind, default):
    raw = _get(parser, section, key)
    if raw is None:
        return default
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: ожидалось {kind.__name__}, получено {raw!r}")


def _tuple(parser, section, key, kind, default):
    raw = _get(parser, section, key)
    if raw is None:
        return default
    try:
        return tuple(kind(part.strip()) for part in raw.replace(";", ",").split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: не удалось разобрать список {raw!r}")


def parse_config(text: str, data_dir_override: Optional[str] = None) -> ExperimentConfig:
    """ExperimentConfig из текста INI; проверяет обязательные поля и диапазоны."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"Некорректный INI: {e}") from e

    scenario = _get(parser, "experiment", "scenario")
    if scenario not in SCENARIOS:
        raise ConfigError(f"Неизвестный сценарий {scenario!r}; допустимы: {', '.join(SCENARIOS)}")
    seed = _typed(parser, "experiment", "seed", int, None)
    if seed is None:
        raise ConfigError("[experiment] seed обязателен: запуски без seed невоспроизводимы")

    candidates_raw = _tuple(parser, "compression", "candidates", float, None)
    try:
        candidates = CandidateRatios(candidates_raw) if candidates_raw else CandidateRatios()
        d = RoundConfig()
        round_cfg = RoundConfig(
            K=_typed(parser, "training", "K", int, d.K),
            T=_typed(parser, "training", "T", int, d.T),
            E=_typed(parser, "training", "E", int, d.E),
            batch=_typed(parser, "training", "batch", int, d.batch),
            local_lr=_typed(parser, "training", "local_lr", float, d.local_lr),
            global_lr=_typed(parser, "training", "global_lr", float, d.global_lr),
            optimizer=_typed(parser, "training", "optimizer", str, d.optimizer),
            adam_lr=_typed(parser, "training", "adam_lr", float, d.adam_lr),
            hidden=_typed(parser, "training", "hidden", int, d.hidden),
            samples_per_device=_typed(parser, "training", "samples_per_device", int, d.samples_per_device),
            classes_per_device=_typed(parser, "training", "classes_per_device", int, d.classes_per_device),
            B=_typed(parser, "compression", "B", int, d.B),
            cap=_typed(parser, "compression", "cap", int, d.cap),
            candidates=candidates,
            capacity=_typed(parser, "compression", "capacity", float, d.capacity),
            capacity_set=_tuple(parser, "compression", "capacity_set", float, d.capacity_set),
            compression=_typed(parser, "compression", "enabled", bool, d.compression),
            quantize=_typed(parser, "compression", "quantize", bool, d.quantize),
            fixed_ratio=_typed(parser, "compression", "fixed_ratio", float, d.fixed_ratio),
            fixed_sparsity=_typed(parser, "compression", "fixed_sparsity", int, d.fixed_sparsity),
            fixed_subvector_dim=_typed(parser, "compression", "fixed_subvector_dim", int, d.fixed_subvector_dim),
            reseed_per_round=_typed(parser, "compression", "reseed_per_round", bool, d.reseed_per_round),
            algorithm=_typed(parser, "recovery", "algorithm", str, d.algorithm),
            step_policy=_typed(parser, "recovery", "step_policy", str, d.step_policy),
            iht_iters=_typed(parser, "recovery", "iht_iters", int, d.iht_iters),
            gamp_iters=_typed(parser, "recovery", "gamp_iters", int, d.gamp_iters),
            synthetic_dim=_typed(parser, "synthetic", "dim", int, d.synthetic_dim),
            synthetic_rate=_typed(parser, "synthetic", "rate", float, d.synthetic_rate),
            record_timing=_typed(parser, "experiment", "record_timing", bool, d.record_timing),
            seed=seed,
        )
        sd = SweepConfig()
        sweep = SweepConfig(
            N=_typed(parser, "recover-sweep", "N", int, sd.N),
            trials=_typed(parser, "recover-sweep", "trials", int, sd.trials),
            caps=_tuple(parser, "recover-sweep", "caps", int, sd.caps),
            ratios=_tuple(parser, "recover-sweep", "ratios", float, candidates.values),
            algorithms=_tuple(parser, "recover-sweep", "algorithms", str, sd.algorithms),
            quantize=_typed(parser, "recover-sweep", "quantize", bool, sd.quantize),
            capacity=_typed(parser, "recover-sweep", "capacity", float, sd.capacity),
        )
        bd = BenchConfig()
        bench = BenchConfig(
            L=_typed(parser, "vq-bench", "L", int, bd.L),
            Q=_tuple(parser, "vq-bench", "Q", float, bd.Q),
            samples=_typed(parser, "vq-bench", "samples", int, bd.samples),
        )
        codebook = CodebookConfig(
            dim=_typed(parser, "codebook", "dim", int, CodebookConfig.dim),
            shape_bits=_typed(parser, "codebook", "shape_bits", int, None),
            gain_bits=_typed(parser, "codebook", "gain_bits", int, None),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e

    if sweep.N < 2 or sweep.trials < 1 or not sweep.caps or min(sweep.caps) < 1:
        raise ConfigError("[recover-sweep] N ≥ 2, trials ≥ 1 и K′ ≥ 1 обязательны")
    for algorithm in sweep.algorithms:
        if algorithm not in reconstructor.ALGORITHMS:
            raise ConfigError(f"[recover-sweep] неизвестный алгоритм {algorithm!r}")
    if bench.L < 1 or bench.samples < 1 or not bench.Q:
        raise ConfigError("[vq-bench] L ≥ 1, samples ≥ 1 и хотя бы одно Q обязательны")
    if scenario == "codebook-build" and (codebook.shape_bits is None) == (codebook.gain_bits is None):
        raise ConfigError("[codebook] нужно ровно одно из shape_bits / gain_bits")

    data_dir = data_dir_override or _get(parser, "experiment", "data_dir") or config.data_dir
    if scenario == "fl-mnist" and not os.path.isdir(data_dir):
        raise FileNotFoundError(data_dir)

    return ExperimentConfig(
        scenario=scenario,
        seed=seed,
        output_dir=_get(parser, "experiment", "output_dir") or os.path.join(config.output_dir, scenario),
        round=round_cfg,
        data_dir=data_dir,
        train_limit=_typed(parser, "experiment", "train_limit", int, None),
        test_limit=_typed(parser, "experiment", "test_limit", int, 2000),
        cache_dir=_get(parser, "experiment", "cache_dir") or config.cache_dir,
        codebook_seed=_typed(parser, "experiment", "codebook_seed", int, 0),
        codebook_budget=_typed(parser, "experiment", "codebook_budget", int, quantizer.DEFAULT_BUDGET),
        sweep=sweep,
        bench=bench,
        codebook=codebook,
        source={s: dict(parser.items(s)) for s in parser.sections()},
    )


def load_config(path: str, data_dir_override: Optional[str] = None) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"Файл конфигурации не найден: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), data_dir_override)


# ---------------------------------------------------------------------------
# Вывод
# ---------------------------------------------------------------------------


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return f"{value:.10g}"
    return str(value)


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def metrics_rows(history: Sequence[RoundMetrics]) -> list[tuple]:
    return [
        (m.round, m.train_loss, m.test_acc, m.bits_per_entry, m.mean_block_nmse, m.mean_bound, m.wall_time_ms)
        for m in history
    ]


def write_run_outputs(output_dir: str, history: Sequence[RoundMetrics]) -> None:
    """metrics.csv, selections.csv и recovery.csv одного FL-запуска."""
    os.makedirs(output_dir, exist_ok=True)
    write_csv(os.path.join(output_dir, "metrics.csv"), METRICS_COLUMNS, metrics_rows(history))
    write_csv(
        os.path.join(output_dir, "selections.csv"),
        SELECTION_COLUMNS,
        (
            (s.round, s.device, s.block, s.C, s.R, s.Q, s.S, s.M, s.L, s.shape_bits, s.gain_bits, s.objective, s.bits)
            for m in history
            for s in m.selections
        ),
    )
    write_csv(
        os.path.join(output_dir, "recovery.csv"),
        RECOVERY_COLUMNS,
        (
            (r.round, r.block, r.group, r.algorithm, r.iterations, r.nmse, r.bound, r.wall_time_ms)
            for m in history
            for r in m.recoveries
        ),
    )


def write_manifest(output_dir: str, cfg: ExperimentConfig, run_id: str, summary: dict[str, Any]) -> None:
    manifest = {
        "run_id": run_id,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "config": cfg.echo(),
        "source": cfg.source,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "bitstruct": getattr(bitstruct, "__version__", "unknown"),
            "codebook_format": quantizer.CODEBOOK_VERSION,
        },
        "summary": summary,
    }
    os.makedirs(output_dir, exist_ok=True)
    with open(os.path.join(output_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, ensure_ascii=False, default=str)
        fh.write("\n")


def run_id_for(cfg: ExperimentConfig) -> str:
    return f"{cfg.scenario}-s{cfg.seed}-{os.path.basename(os.path.normpath(cfg.output_dir))}"


# ---------------------------------------------------------------------------
# Сценарии
# ---------------------------------------------------------------------------


def codebook_cache(cfg: ExperimentConfig) -> CodebookCache:
    return CodebookCache(cfg.cache_dir, cfg.codebook_seed, cfg.codebook_budget)


async def run_fl(cfg: ExperimentConfig, registry, run_id: str) -> dict[str, Any]:
    """fl-mnist / fl-synthetic: T раундов, метрики в CSV и реестр."""
    cache = codebook_cache(cfg)
    if cfg.scenario == "fl-mnist":
        train, test = datasets.load_mnist(cfg.data_dir, cfg.train_limit, cfg.test_limit)
        state = fl_sim.setup_simulation(cfg.round, train, test, cache)
    else:
        state = fl_sim.setup_synthetic(cfg.round, cache)

    history: list[RoundMetrics] = []
    for _ in range(cfg.round.T):
        state, metrics = await fl_sim.run_round(state)
        history.append(metrics)
        await registry.add_round(run_id, metrics)

    write_run_outputs(cfg.output_dir, history)
    last = history[-1]
    return {
        "rounds": len(history),
        "final_train_loss": last.train_loss,
        "final_test_acc": last.test_acc,
        "feedback_violations": sum(m.feedback_violations for m in history),
        "capacity_violations": sum(m.capacity_violations for m in history),
        "gamp_fallbacks": sum(m.gamp_fallbacks for m in history),
    }


@dataclass(frozen=True, eq=False)
class RecoveryTrial:
    observation: reconstructor.AggregatedObservation
    truth: np.ndarray
    support: np.ndarray


def make_recovery_trial(
    N: int,
    cap: int,
    R: float,
    rng: np.random.Generator,
    quantize: bool = False,
    capacity: float = 0.1,
    cache: Optional[CodebookCache] = None,
    seed: int = 0,
) -> RecoveryTrial:
    """
    K′ устройств с точно S-разреженными гауссовскими блоками, S = max_sparsity.

    Без квантования y = A·Σρg̃; с квантованием полный путь compress_block
    и групповая агрегация.
    """
    S = max_sparsity(N, cap, R)
    weights = np.full(cap, 1.0 / cap)
    blocks = []
    for _ in range(cap):
        g = np.zeros(N)
        g[rng.choice(N, size=S, replace=False)] = rng.standard_normal(S)
        blocks.append(g)
    truth = sum(w * g for w, g in zip(weights, blocks))
    support = np.flatnonzero(truth)

    if not quantize:
        M = int(round(N / R))
        A = compressor.projection_rows(seed, M, N)
        observation = reconstructor.AggregatedObservation(
            y=A @ truth, A=A, noise_energy_model=0.0, devices=tuple(range(cap)), sparsity=min(cap * S, M),
            support_hint=support,
        )
        return RecoveryTrial(observation, truth, support)

    cache = cache or CodebookCache()
    Q = optimal_q(capacity, R)
    L, allocation = SubvectorPolicy().choose(Q)
    params = compressor.CompressionParams.build(N, capacity, R, S, L, allocation.shape_bits, allocation.gain_bits)
    codebooks = cache.pair(L, allocation.shape_bits, allocation.gain_bits)
    A = compressor.projection_rows(seed, params.M, N)
    contributions = []
    for k, g in enumerate(blocks):
        payload, _, _ = compressor.compress_block(
            compressor.BlockUpdate(0, 0, g), compressor.ResidualState.zeros(N), params, codebooks, seed
        )
        contributions.append(reconstructor.DeviceContribution(k, payload, params, float(weights[k]), codebooks))
    observation = reconstructor.aggregate_group(contributions, A, cap, support)
    return RecoveryTrial(observation, truth, support)


def support_recovered(estimate: np.ndarray, support: np.ndarray) -> bool:
    """Носитель найден точно: |T| наибольших по модулю элементов совпадают с T."""
    top = np.argsort(-np.abs(estimate), kind="stable")[: support.shape[0]]
    return bool(np.array_equal(np.sort(top), np.sort(support)))


def run_recover_sweep(cfg: ExperimentConfig) -> dict[str, Any]:
    sweep = cfg.sweep
    cache = codebook_cache(cfg) if sweep.quantize else None
    rows = []
    for R_index, R in enumerate(sweep.ratios):
        for cap in sweep.caps:
            try:
                S = max_sparsity(sweep.N, cap, R)
                trials = [
                    make_recovery_trial(
                        sweep.N,
                        cap,
                        R,
                        fl_sim._rng(cfg.seed, TAG_SWEEP, R_index, cap, trial),
                        sweep.quantize,
                        sweep.capacity,
                        cache,
                        seed=cfg.seed + trial,
                    )
                    for trial in range(sweep.trials)
                ]
            except ValueError as e:
                logger.info("[SWEEP] R=%.3f K′=%d skipped: %s", R, cap, e)
                continue
            for algorithm in sweep.algorithms:
                hits = 0
                nmse = []
                iters = []
                started = time.perf_counter()
                for trial in trials:
                    result = reconstructor.recover(
                        trial.observation, algorithm, cfg.round.iht_iters, cfg.round.gamp_iters, cfg.round.step_policy
                    )
                    hits += support_recovered(result.estimate, trial.support)
                    err = result.estimate - trial.truth
                    nmse.append(float(err @ err) / float(trial.truth @ trial.truth))
                    iters.append(result.iterations)
                wall = (time.perf_counter() - started) * 1000.0 if cfg.round.record_timing else 0.0
                M = trials[0].observation.A.shape[0]
                rows.append(
                    (sweep.N, cap, R, S, M, algorithm, sweep.trials, hits / sweep.trials,
                     float(np.mean(nmse)), float(np.mean(iters)), wall)
                )
                logger.info("[SWEEP] R=%.3f K′=%d %s: exact=%.2f nmse=%.3e", R, cap, algorithm, hits / sweep.trials, np.mean(nmse))
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_csv(os.path.join(cfg.output_dir, "recovery.csv"), SWEEP_COLUMNS, rows)
    return {"rows": len(rows)}


def run_vq_bench(cfg: ExperimentConfig) -> dict[str, Any]:
    """Эмпирическая MSE shape-gain квантователя против модели для каждого Q."""
    bench = cfg.bench
    cache = codebook_cache(cfg)
    rows = []
    for Q in bench.Q:
        allocation = quantizer.optimal_bit_allocation(bench.L, Q)
        shape_cb, gain_cb = cache.pair(bench.L, allocation.shape_bits, allocation.gain_bits)
        measured = quantizer.measure_vq_mse(shape_cb, gain_cb, bench.samples, cfg.seed)
        rows.append(
            (bench.L, Q, allocation.shape_bits, allocation.gain_bits, allocation.modeled_mse,
             measured["mse"], measured["shape_mse"], measured["gain_mse"], measured["mse"] / allocation.modeled_mse)
        )
        logger.info("[BENCH] L=%d Q=%.3f: model=%.4f empirical=%.4f", bench.L, Q, allocation.modeled_mse, measured["mse"])
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_csv(os.path.join(cfg.output_dir, "vq_bench.csv"), VQ_COLUMNS, rows)
    return {"rows": len(rows)}


def run_codebook_build(cfg: ExperimentConfig) -> dict[str, Any]:
    cache = codebook_cache(cfg)
    spec = cfg.codebook
    if spec.shape_bits is not None:
        codebook = cache.shape(spec.dim, spec.shape_bits)
        return {"kind": "shape", "dim": spec.dim, "bits": spec.shape_bits, "size": codebook.size,
                "min_chordal": codebook.achieved_min_chordal, "path": cache.shape_path(spec.dim, spec.shape_bits)}
    codebook = cache.gain(spec.dim, spec.gain_bits)
    return {"kind": "gain", "dim": spec.dim, "bits": spec.gain_bits, "size": codebook.size,
            "path": cache.gain_path(spec.dim, spec.gain_bits)}


async def run_experiment(cfg: ExperimentConfig, registry) -> dict[str, Any]:
    """Запуск сценария с регистрацией в реестре и манифестом."""
    run_id = run_id_for(cfg)
    await registry.init()
    await registry.create_run(run_id, cfg.scenario, cfg.seed, cfg.echo(), cfg.output_dir)
    try:
        if cfg.scenario in ("fl-mnist", "fl-synthetic"):
            summary = await run_fl(cfg, registry, run_id)
        elif cfg.scenario == "recover-sweep":
            summary = run_recover_sweep(cfg)
        elif cfg.scenario == "vq-bench":
            summary = run_vq_bench(cfg)
        else:
            summary = run_codebook_build(cfg)
    except Exception as e:
        await registry.finish_run(run_id, "failed", f"{type(e).__name__}: {e}")
        raise
    write_manifest(cfg.output_dir, cfg, run_id, summary)
    await registry.finish_run(run_id, "ok")
    return summary
