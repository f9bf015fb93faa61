"""
Симуляция федеративного обучения с FedVQCS-сжатием обновлений.

Устройства обучают MLP локальным mini-batch SGD, сжимают блоки обновлений,
сервер восстанавливает сумму по группам и делает глобальный шаг.
"""
from __future__ import annotations

import asyncio
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

import compressor
import quantizer
import reconstructor
from compressor import BlockUpdate, CompressedBlockPayload, CompressionParams, ProjectionBank, ResidualState
from config import config
from datasets import Dataset
from param_opt import CandidateRatios, SubvectorPolicy, max_sparsity, select_ratio
from quantizer import CodebookCache


logger = logging.getLogger(__name__)

# Метки потоков случайности: (seed, метка, раунд, устройство).
TAG_INIT = 1
TAG_PARTITION = 2
TAG_LOCAL = 3
TAG_CAPACITY = 4
TAG_SYNTHETIC = 5

OPTIMIZERS = ("sgd", "adam")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


# ---------------------------------------------------------------------------
# Модель
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpModel:
    """Полносвязная сеть: ReLU на скрытых слоях, softmax на выходе."""

    layer_sizes: tuple[int, ...] = (784, 20, 10)

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        chunks = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            limit = math.sqrt(6.0 / fan_in)
            chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def unpack(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if w.shape[0] != self.num_params:
            raise ValueError(f"Длина вектора параметров {w.shape[0]} вместо {self.num_params}")
        layers = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = w[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = w[offset:offset + fan_out]
            offset += fan_out
            layers.append((W, b))
        return layers

    def forward(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        a = X
        layers = self.unpack(w)
        for i, (W, b) in enumerate(layers):
            z = a @ W + b
            a = special.softmax(z, axis=1) if i == len(layers) - 1 else np.maximum(z, 0.0)
        return a

    def loss_and_grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Средняя кросс-энтропия и её градиент по плоскому вектору параметров."""
        layers = self.unpack(w)
        activations = [X]
        pre = []
        a = X
        for i, (W, b) in enumerate(layers):
            z = a @ W + b
            pre.append(z)
            a = special.softmax(z, axis=1) if i == len(layers) - 1 else np.maximum(z, 0.0)
            activations.append(a)

        n = X.shape[0]
        probs = activations[-1]
        loss = -float(np.mean(special.log_softmax(pre[-1], axis=1)[np.arange(n), y]))
        delta = probs.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n

        grads: list[np.ndarray] = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads.append(delta.sum(axis=0))
            grads.append((activations[i].T @ delta).reshape(-1))
            if i > 0:
                delta = (delta @ W.T) * (pre[i - 1] > 0)
        return loss, np.concatenate(grads[::-1])

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        z = X
        layers = self.unpack(w)
        for i, (W, b) in enumerate(layers):
            z = z @ W + b
            if i < len(layers) - 1:
                z = np.maximum(z, 0.0)
        return -float(np.mean(special.log_softmax(z, axis=1)[np.arange(X.shape[0]), y]))

    def accuracy(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(np.argmax(self.forward(w, X), axis=1) == y))


# ---------------------------------------------------------------------------
# Данные устройств
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DevicePartition:
    device: int
    indices: np.ndarray
    classes: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(self.indices.shape[0])


def partition_dataset(
    labels: np.ndarray,
    K: int,
    count: int,
    classes_per_device: int = 2,
    rng: Optional[np.random.Generator] = None,
    num_classes: Optional[int] = None,
) -> list[DevicePartition]:
    """
    Непересекающиеся выборки по count примеров на устройство из
    classes_per_device классов. Набор классов выбирается случайно среди тех,
    где ещё хватает примеров; объём делится между классами поровну.
    """
    rng = rng or np.random.default_rng(0)
    labels = np.asarray(labels)
    num_classes = num_classes or int(labels.max()) + 1
    if not 1 <= classes_per_device <= num_classes:
        raise ValueError(f"classes_per_device={classes_per_device} вне [1, {num_classes}]")
    if K * count > labels.shape[0]:
        raise ValueError(f"Нужно {K * count} примеров, в наборе {labels.shape[0]}")

    pools = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in range(num_classes)}
    shares = [count // classes_per_device + (1 if i < count % classes_per_device else 0) for i in range(classes_per_device)]

    partitions = []
    for device in range(K):
        if classes_per_device == num_classes:
            # Все классы: без балансировки, равномерно из остатка.
            remaining = np.array(sorted(itertools.chain.from_iterable(pools.values())), dtype=np.int64)
            if remaining.shape[0] < count:
                raise ValueError(f"Устройству {device} не хватает примеров")
            chosen = np.sort(rng.choice(remaining, size=count, replace=False))
            taken = set(chosen.tolist())
            pools = {c: [i for i in pool if i not in taken] for c, pool in pools.items()}
            classes = tuple(sorted({int(c) for c in labels[chosen]}))
            partitions.append(DevicePartition(device, chosen, classes))
            continue

        feasible = [
            combo
            for combo in itertools.combinations(range(num_classes), classes_per_device)
            if all(len(pools[c]) >= share for c, share in zip(combo, shares))
        ]
        if not feasible:
            raise ValueError(f"Устройству {device} не хватает примеров ни в одной паре классов")
        combo = feasible[int(rng.integers(len(feasible)))]
        picked = []
        for c, share in zip(combo, shares):
            picked.extend(pools[c][:share])
            pools[c] = pools[c][share:]
        partitions.append(DevicePartition(device, np.sort(np.array(picked, dtype=np.int64)), combo))
    return partitions


# ---------------------------------------------------------------------------
# Локальное и глобальное обновления
# ---------------------------------------------------------------------------


def local_update(
    model: MlpModel,
    w: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    E: int,
    batch: int,
    lr: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """E шагов mini-batch SGD от w; возвращает g = (w − w_E)/(η·E)."""
    if E < 1:
        raise ValueError(f"Число локальных итераций должно быть ≥ 1, получено {E}")
    n = X.shape[0]
    if n == 0:
        raise ValueError("Пустая локальная выборка")
    w_local = w.copy()
    for _ in range(E):
        if batch >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=batch, replace=False)
        _, grad = model.loss_and_grad(w_local, X[idx], y[idx])
        w_local = w_local - lr * grad
    return (w - w_local) / (lr * E)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0


def global_update(
    w: np.ndarray, g_hat: np.ndarray, gamma: float, optimizer: Optional[AdamState] = None
) -> np.ndarray:
    """SGD: w − γ·ĝ; с AdamState шаг ADAM с ĝ в роли градиента и γ в роли lr."""
    if w.shape != g_hat.shape:
        raise ValueError(f"Размерности не совпадают: {w.shape} vs {g_hat.shape}")
    if optimizer is None:
        return w - gamma * g_hat
    if optimizer.m is None:
        optimizer.m = np.zeros_like(w)
        optimizer.v = np.zeros_like(w)
    optimizer.step += 1
    optimizer.m = optimizer.beta1 * optimizer.m + (1.0 - optimizer.beta1) * g_hat
    optimizer.v = optimizer.beta2 * optimizer.v + (1.0 - optimizer.beta2) * g_hat * g_hat
    m_hat = optimizer.m / (1.0 - optimizer.beta1**optimizer.step)
    v_hat = optimizer.v / (1.0 - optimizer.beta2**optimizer.step)
    return w - gamma * m_hat / (np.sqrt(v_hat) + optimizer.eps)


# ---------------------------------------------------------------------------
# Конфигурация и состояние
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundConfig:
    K: int = 15
    T: int = 30
    E: int = 3
    batch: int = 10
    local_lr: float = 0.01
    global_lr: float = 0.05
    optimizer: str = "sgd"
    adam_lr: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    B: int = 10
    cap: int = 3
    candidates: CandidateRatios = field(default_factory=CandidateRatios)
    capacity: float = 0.1
    # Непустой набор: C_k тянется равномерно из него для каждого устройства.
    capacity_set: tuple[float, ...] = ()
    samples_per_device: int = 500
    classes_per_device: int = 2
    hidden: int = 20
    seed: int = 0
    compression: bool = True
    quantize: bool = True
    algorithm: str = "iht"
    step_policy: str = "niht"
    iht_iters: int = 500
    gamp_iters: int = 50
    fixed_ratio: Optional[float] = None
    fixed_sparsity: Optional[int] = None
    fixed_subvector_dim: Optional[int] = None
    reseed_per_round: bool = False
    synthetic_dim: int = 15910
    synthetic_rate: float = 0.02
    record_timing: bool = False

    def __post_init__(self):
        for name in ("K", "T", "E", "batch", "B", "cap", "samples_per_device", "hidden", "synthetic_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} должно быть положительным, получено {getattr(self, name)}")
        for name in ("local_lr", "global_lr", "adam_lr", "capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} должно быть положительным, получено {getattr(self, name)}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"Неизвестный оптимизатор сервера: {self.optimizer}")
        if self.algorithm not in reconstructor.ALGORITHMS:
            raise ValueError(f"Неизвестный алгоритм восстановления: {self.algorithm}")
        if self.step_policy not in reconstructor.STEP_POLICIES:
            raise ValueError(f"Неизвестная политика шага IHT: {self.step_policy}")
        if any(c <= 0 for c in self.capacity_set):
            raise ValueError(f"Ёмкости канала должны быть положительными: {self.capacity_set}")
        if not 0 < self.synthetic_rate < 1:
            raise ValueError(f"Доля ненулевых элементов должна быть в (0, 1): {self.synthetic_rate}")


@dataclass(frozen=True)
class SelectionRecord:
    round: int
    device: int
    block: int
    C: float
    R: float
    Q: float
    S: int
    M: int
    L: int
    shape_bits: int
    gain_bits: int
    objective: float
    bits: int


@dataclass(frozen=True)
class RecoveryRecord:
    round: int
    block: int
    group: int
    algorithm: str
    iterations: int
    nmse: float
    bound: float
    fell_back: bool
    conditioning: float
    wall_time_ms: float


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    train_loss: float
    test_acc: float
    bits_per_entry: float
    mean_block_nmse: float
    mean_bound: float
    wall_time_ms: float
    delta: float
    feedback_violations: int
    capacity_violations: int
    gamp_fallbacks: int
    device_bits: tuple[int, ...] = ()
    selections: tuple[SelectionRecord, ...] = ()
    recoveries: tuple[RecoveryRecord, ...] = ()


@dataclass(eq=False)
class SimState:
    cfg: RoundConfig
    dim: int
    block_len: int
    capacities: np.ndarray
    residuals: list[list[ResidualState]]
    bank: ProjectionBank
    cache: CodebookCache
    model: Optional[MlpModel] = None
    weights: Optional[np.ndarray] = None
    partitions: list[DevicePartition] = field(default_factory=list)
    train: Optional[Dataset] = None
    test: Optional[Dataset] = None
    adam: Optional[AdamState] = None
    last_estimate: Optional[np.ndarray] = None
    round: int = 1

    @property
    def synthetic(self) -> bool:
        return self.model is None


def _capacities(cfg: RoundConfig) -> np.ndarray:
    if cfg.capacity_set:
        rng = _rng(cfg.seed, TAG_CAPACITY)
        return rng.choice(np.array(cfg.capacity_set, dtype=np.float64), size=cfg.K)
    return np.full(cfg.K, cfg.capacity)


def _base_state(cfg: RoundConfig, dim: int, cache: CodebookCache) -> SimState:
    block_len = math.ceil(dim / cfg.B)
    return SimState(
        cfg=cfg,
        dim=dim,
        block_len=block_len,
        capacities=_capacities(cfg),
        residuals=[[ResidualState.zeros(block_len) for _ in range(cfg.B)] for _ in range(cfg.K)],
        bank=ProjectionBank(cfg.seed, block_len, cfg.reseed_per_round),
        cache=cache,
    )


def setup_simulation(cfg: RoundConfig, train: Dataset, test: Dataset, cache: CodebookCache) -> SimState:
    """Модель, начальные веса, разбиение данных и пустые остатки."""
    model = MlpModel((train.images.shape[1], cfg.hidden, train.num_classes))
    state = _base_state(cfg, model.num_params, cache)
    state.model = model
    state.weights = model.init_params(_rng(cfg.seed, TAG_INIT))
    state.partitions = partition_dataset(
        train.labels,
        cfg.K,
        cfg.samples_per_device,
        cfg.classes_per_device,
        _rng(cfg.seed, TAG_PARTITION),
        train.num_classes,
    )
    state.train = train
    state.test = test
    if cfg.optimizer == "adam":
        state.adam = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    logger.info(
        "[SIM] setup: K=%d, N̄=%d, B=%d, N=%d, capacities=%s",
        cfg.K,
        state.dim,
        cfg.B,
        state.block_len,
        sorted(set(state.capacities.tolist())),
    )
    return state


def setup_synthetic(cfg: RoundConfig, cache: CodebookCache) -> SimState:
    """Нагрузка без обучения: блочные обновления генерируются напрямую."""
    return _base_state(cfg, cfg.synthetic_dim, cache)


def synthetic_update(cfg: RoundConfig, round_index: int, device: int) -> np.ndarray:
    """Бернулли-гауссовское обновление длины synthetic_dim."""
    rng = _rng(cfg.seed, TAG_SYNTHETIC, round_index, device)
    mask = rng.random(cfg.synthetic_dim) < cfg.synthetic_rate
    return rng.standard_normal(cfg.synthetic_dim) * mask


# ---------------------------------------------------------------------------
# Раунд
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _BlockRecord:
    device: int
    block: int
    params: CompressionParams
    payload: CompressedBlockPayload
    codebooks: Optional[tuple]
    g_bar: np.ndarray
    g_tilde: np.ndarray
    sparsification_error: float
    feedback_ok: bool
    selection_objective: float


def _choose_params(cfg: RoundConfig, g_bar: np.ndarray, C: float, N: int) -> tuple[CompressionParams, float]:
    if not cfg.quantize:
        R = cfg.fixed_ratio or 1.0
        S = min(cfg.fixed_sparsity, N) if cfg.fixed_sparsity else max_sparsity(N, cfg.cap, R)
        return CompressionParams.build(N, C, R, S, 1, 0, 0, quantize=False), math.nan
    candidates = CandidateRatios((cfg.fixed_ratio,)) if cfg.fixed_ratio else cfg.candidates
    selection = select_ratio(
        g_bar,
        C,
        N,
        cfg.cap,
        SubvectorPolicy(fixed=cfg.fixed_subvector_dim),
        candidates,
        cfg.fixed_sparsity,
    )
    return selection.params(), selection.objective


def feedback_holds(
    g: np.ndarray, residual: ResidualState, g_tilde: np.ndarray, new_residual: ResidualState, S: int
) -> bool:
    """g + Δ = g̃ + Δ' побитово для переданного g̃, и в g̃ не больше S ненулевых."""
    if np.count_nonzero(g_tilde) > S:
        return False
    return bool(np.array_equal(g + residual.values, g_tilde + new_residual.values))


def _compress_device(state: SimState, device: int, g: np.ndarray, round_index: int) -> list[_BlockRecord]:
    cfg = state.cfg
    N = state.block_len
    padded = np.zeros(cfg.B * N)
    padded[: g.shape[0]] = g
    blocks = padded.reshape(cfg.B, N)
    C = float(state.capacities[device])

    records = []
    for b in range(cfg.B):
        residual = state.residuals[device][b]
        g_block = blocks[b]
        g_bar = g_block + residual.values
        params, objective = _choose_params(cfg, g_bar, C, N)
        codebooks = state.cache.pair(params.L, params.shape_bits, params.gain_bits) if params.quantize else None
        payload, new_residual, g_tilde = compressor.compress_block(
            BlockUpdate(round_index, b, g_block), residual, params, codebooks, cfg.seed, state.bank
        )
        feedback_ok = feedback_holds(g_block, residual, g_tilde, new_residual, params.S)
        state.residuals[device][b] = new_residual
        records.append(
            _BlockRecord(
                device=device,
                block=b,
                params=params,
                payload=payload,
                codebooks=codebooks,
                g_bar=g_bar,
                g_tilde=g_tilde,
                sparsification_error=float(new_residual.values @ new_residual.values),
                feedback_ok=feedback_ok,
                selection_objective=objective,
            )
        )
    return records


@dataclass(eq=False)
class _BlockResult:
    estimate: np.ndarray
    truth: np.ndarray
    nmse: float
    bound: float
    recoveries: list[RecoveryRecord]


def _ratio(num: float, den: float) -> float:
    if den > 0:
        return num / den
    return 0.0 if num == 0 else math.inf


def _reconstruct_block(
    state: SimState, block: int, records: Sequence[_BlockRecord], weights: np.ndarray, round_index: int
) -> _BlockResult:
    cfg = state.cfg
    N = state.block_len
    by_device = {rec.device: rec for rec in records}
    keys = {rec.device: (rec.params.R, rec.params.M) for rec in records}
    plan = reconstructor.assign_groups(keys, cfg.cap)

    observations = []
    truths = []
    bounds = []
    for members in plan.groups:
        group = [by_device[k] for k in members]
        truth = np.zeros(N)
        for rec in group:
            truth += weights[rec.device] * rec.g_tilde
        support = np.flatnonzero(np.any(np.stack([rec.g_tilde != 0 for rec in group]), axis=0))
        A = state.bank.rows(block, group[0].params.M, round_index)
        contributions = [
            reconstructor.DeviceContribution(rec.device, rec.payload, rec.params, float(weights[rec.device]), rec.codebooks)
            for rec in group
        ]
        observations.append(reconstructor.aggregate_group(contributions, A, cfg.cap, support))
        truths.append(truth)
        terms = [
            reconstructor.DeviceBoundTerm(
                sparsification_error=rec.sparsification_error,
                S=rec.params.S,
                R=rec.params.R,
                alpha=rec.payload.alpha,
                weight=float(weights[rec.device]),
                sigma2=(
                    quantizer.shape_gain_mse_model(rec.params.L, rec.params.shape_bits, rec.params.gain_bits)
                    if rec.params.quantize
                    else 0.0
                ),
                L=rec.params.L,
            )
            for rec in group
        ]
        bounds.append(reconstructor.theorem2_bound(terms, N, cfg.cap))

    started = time.perf_counter()
    estimate, results = reconstructor.reconstruct_global_block(
        observations, cfg.algorithm, cfg.iht_iters, cfg.gamp_iters, cfg.step_policy
    )
    elapsed = (time.perf_counter() - started) * 1000.0 if cfg.record_timing else 0.0

    rows = []
    for g, (obs, result, truth, bound) in enumerate(zip(observations, results, truths, bounds)):
        truth_energy = float(truth @ truth)
        err = result.estimate - truth
        rows.append(
            RecoveryRecord(
                round=round_index,
                block=block,
                group=g,
                algorithm=result.algorithm,
                iterations=result.iterations,
                nmse=_ratio(float(err @ err), truth_energy),
                bound=_ratio(bound, truth_energy),
                fell_back=result.fell_back,
                conditioning=obs.conditioning,
                wall_time_ms=elapsed / len(results),
            )
        )
    truth = np.sum(truths, axis=0)
    truth_energy = float(truth @ truth)
    err = estimate - truth
    return _BlockResult(
        estimate=estimate,
        truth=truth,
        nmse=_ratio(float(err @ err), truth_energy),
        bound=_ratio(float(sum(bounds)), truth_energy),
        recoveries=rows,
    )


async def _in_threads(jobs: Sequence[Callable[[], object]], limit: int) -> list:
    """Запуск задач в потоках с ограничением; порядок результатов = порядок задач."""
    semaphore = asyncio.Semaphore(max(1, limit))

    async def run(job):
        async with semaphore:
            return await asyncio.to_thread(job)

    return list(await asyncio.gather(*(run(job) for job in jobs)))


def _local_updates_jobs(state: SimState, round_index: int) -> list[Callable[[], np.ndarray]]:
    cfg = state.cfg
    if state.synthetic:
        return [lambda k=k: synthetic_update(cfg, round_index, k) for k in range(cfg.K)]
    w = state.weights
    jobs = []
    for part in state.partitions:
        X = state.train.images[part.indices]
        y = state.train.labels[part.indices]
        rng = _rng(cfg.seed, TAG_LOCAL, round_index, part.device)
        jobs.append(
            lambda X=X, y=y, rng=rng: local_update(state.model, w, X, y, cfg.E, cfg.batch, cfg.local_lr, rng)
        )
    return jobs


def device_weights(state: SimState) -> np.ndarray:
    """ρ_k: доля примеров устройства во всех локальных мини-батчах раунда."""
    cfg = state.cfg
    if state.synthetic:
        sizes = np.full(cfg.K, float(cfg.E * cfg.batch))
    else:
        sizes = np.array([cfg.E * min(cfg.batch, part.size) for part in state.partitions], dtype=np.float64)
    return sizes / sizes.sum()


def _evaluate_model(state: SimState) -> tuple[float, float]:
    if state.synthetic:
        return math.nan, math.nan
    pool = np.concatenate([part.indices for part in state.partitions])
    loss = state.model.loss(state.weights, state.train.images[pool], state.train.labels[pool])
    acc = state.model.accuracy(state.weights, state.test.images, state.test.labels)
    return loss, acc


async def run_round(state: SimState) -> tuple[SimState, RoundMetrics]:
    """Один раунд: локальные обновления → сжатие → групповое восстановление → глобальный шаг."""
    cfg = state.cfg
    t = state.round
    started = time.perf_counter()
    workers = config.workers

    updates = await _in_threads(_local_updates_jobs(state, t), workers)
    weights = device_weights(state)
    perfect = sum(weights[k] * updates[k] for k in range(cfg.K))

    if not cfg.compression:
        g_hat = perfect
        device_bits = tuple(32 * state.dim for _ in range(cfg.K))
        nmse = bound = delta = 0.0
        feedback_violations = capacity_violations = fallbacks = 0
        selections: tuple[SelectionRecord, ...] = ()
        recoveries: tuple[RecoveryRecord, ...] = ()
    else:
        per_device = await _in_threads(
            [lambda k=k: _compress_device(state, k, updates[k], t) for k in range(cfg.K)], workers
        )
        block_results = await _in_threads(
            [
                lambda b=b: _reconstruct_block(state, b, [recs[b] for recs in per_device], weights, t)
                for b in range(cfg.B)
            ],
            workers,
        )
        g_hat = np.concatenate([res.estimate for res in block_results])[: state.dim]
        truth = np.concatenate([res.truth for res in block_results])[: state.dim]

        device_bits = tuple(sum(rec.payload.bits for rec in recs) for recs in per_device)
        feedback_violations = sum(not rec.feedback_ok for recs in per_device for rec in recs)
        capacity_violations = sum(
            bits > state.capacities[k] * state.dim + 32 * cfg.B for k, bits in enumerate(device_bits)
        )
        recoveries = tuple(row for res in block_results for row in res.recoveries)
        fallbacks = sum(row.fell_back for row in recoveries)
        nmse = float(np.mean([res.nmse for res in block_results]))
        bound = float(np.mean([res.bound for res in block_results]))
        err = truth - g_hat
        delta = _ratio(float(err @ err), float(perfect @ perfect))
        selections = tuple(
            SelectionRecord(
                round=t,
                device=rec.device,
                block=rec.block,
                C=float(state.capacities[rec.device]),
                R=rec.params.R,
                Q=rec.params.Q,
                S=rec.params.S,
                M=rec.params.M,
                L=rec.params.L,
                shape_bits=rec.params.shape_bits,
                gain_bits=rec.params.gain_bits,
                objective=rec.selection_objective,
                bits=rec.payload.bits,
            )
            for recs in per_device
            for rec in recs
        )

    if not state.synthetic:
        gamma = cfg.adam_lr if state.adam is not None else cfg.global_lr
        state.weights = global_update(state.weights, g_hat, gamma, state.adam)
    state.last_estimate = g_hat
    train_loss, test_acc = _evaluate_model(state)
    wall = (time.perf_counter() - started) * 1000.0 if cfg.record_timing else 0.0

    metrics = RoundMetrics(
        round=t,
        train_loss=train_loss,
        test_acc=test_acc,
        bits_per_entry=float(np.mean(device_bits)) / state.dim,
        mean_block_nmse=nmse,
        mean_bound=bound,
        wall_time_ms=wall,
        delta=delta,
        feedback_violations=feedback_violations,
        capacity_violations=capacity_violations,
        gamp_fallbacks=fallbacks,
        device_bits=device_bits,
        selections=selections,
        recoveries=recoveries,
    )
    logger.info(
        "[ROUND] t=%d loss=%.4f acc=%.4f bits/entry=%.4f nmse=%.3e bound=%.3e delta=%.3e",
        t,
        train_loss,
        test_acc,
        metrics.bits_per_entry,
        nmse,
        bound,
        delta,
    )
    if feedback_violations:
        logger.error("[ROUND] t=%d: error-feedback identity violated %d times", t, feedback_violations)
    state.round = t + 1
    return state, metrics


async def run_training(state: SimState, rounds: Optional[int] = None) -> list[RoundMetrics]:
    history = []
    for _ in range(rounds or state.cfg.T):
        state, metrics = await run_round(state)
        history.append(metrics)
    return history
