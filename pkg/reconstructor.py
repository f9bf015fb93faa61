"""
Восстановление глобального блочного обновления на сервере (BlkReconst).

Групповая агрегация декодированных проекций, восстановление разреженного
сигнала (oracle-LS, IHT, EM-BG-GAMP) и оценка ошибки сверху.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import linalg, special

import compressor
import quantizer
from compressor import CompressedBlockPayload, CompressionParams


logger = logging.getLogger(__name__)

ALGORITHMS = ("oracle", "iht", "gamp")
STEP_POLICIES = ("niht", "fixed")

IHT_TOL = 1e-6
NIHT_SHRINK = 2.0
NIHT_C = 0.01
GAMP_DAMPING = 0.7
GAMP_TOL = 1e-6
DIVERGENCE_FACTOR = 10.0


class RecoveryError(ValueError):
    """Несовместимые параметры группы или вырожденный носитель."""


@dataclass(frozen=True)
class GroupPlan:
    groups: tuple[tuple[int, ...], ...]
    ratios: tuple[Hashable, ...]
    cap: int

    @property
    def G(self) -> int:
        return len(self.groups)


@dataclass(frozen=True, eq=False)
class DeviceContribution:
    device: int
    payload: CompressedBlockPayload
    params: CompressionParams
    weight: float
    codebooks: Optional[tuple[quantizer.ShapeCodebook, quantizer.GainCodebook]] = None


@dataclass(frozen=True, eq=False)
class AggregatedObservation:
    y: np.ndarray
    A: np.ndarray
    noise_energy_model: float
    devices: tuple[int, ...] = ()
    # Бюджет разреженности для IHT: K′·max S_k.
    sparsity: int = 0
    # max(ρ/α) / min(ρ/α) по устройствам без нулевого маркера.
    conditioning: float = 1.0
    # Истинный носитель суммы (только в симуляции, для oracle).
    support_hint: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class RecoveryResult:
    estimate: np.ndarray
    algorithm: str
    iterations: int = 0
    converged: bool = True
    fell_back: bool = False


@dataclass(frozen=True)
class DeviceBoundTerm:
    """Слагаемые оценки ошибки для одного устройства."""

    sparsification_error: float
    S: int
    R: float
    alpha: float
    weight: float
    sigma2: float
    L: int


def assign_groups(device_ratios: Mapping[int, Hashable], cap: int) -> GroupPlan:
    """
    Устройства с одинаковой размерностью проекции попадают в одну корзину;
    корзина режется на группы по ≤ K′ в порядке возрастания id.
    """
    if cap < 1:
        raise ValueError(f"K′ должно быть ≥ 1, получено {cap}")
    buckets: dict[Hashable, list[int]] = defaultdict(list)
    for device in sorted(device_ratios):
        buckets[device_ratios[device]].append(device)

    groups: list[tuple[int, ...]] = []
    ratios: list[Hashable] = []
    for key in sorted(buckets, key=lambda k: (buckets[k][0], repr(k))):
        members = buckets[key]
        for start in range(0, len(members), cap):
            groups.append(tuple(members[start:start + cap]))
            ratios.append(key)
    return GroupPlan(tuple(groups), tuple(ratios), cap)


def aggregate_group(
    contributions: Sequence[DeviceContribution],
    A: np.ndarray,
    cap: int,
    support_hint: Optional[np.ndarray] = None,
) -> AggregatedObservation:
    """y = Σ (ρ_k/α_k)·x̂_k; устройства с нулевым маркером ничего не добавляют."""
    if not contributions:
        raise RecoveryError("Пустая группа")
    M = contributions[0].params.M
    quantize = contributions[0].params.quantize
    for item in contributions:
        if item.params.M != M or item.params.quantize != quantize:
            raise RecoveryError(
                f"Устройство {item.device}: параметры группы не совпадают (M={item.params.M}, ожидалось {M})"
            )
        if item.weight <= 0:
            raise RecoveryError(f"Вес устройства {item.device} должен быть положительным")
    if A.shape[0] != M:
        raise RecoveryError(f"Матрица проекции имеет {A.shape[0]} строк, ожидалось {M}")

    y = np.zeros(M)
    noise = 0.0
    scales: list[float] = []
    for item in contributions:
        if item.payload.is_zero:
            continue
        scale = item.weight / item.payload.alpha
        x_hat = compressor.decode_block(item.payload, item.params, item.codebooks)
        if x_hat.shape[0] != M:
            raise RecoveryError(f"Устройство {item.device}: длина x̂ {x_hat.shape[0]} вместо {M}")
        y += scale * x_hat
        scales.append(scale)
        if quantize:
            sigma2 = quantizer.shape_gain_mse_model(item.params.L, item.params.shape_bits, item.params.gain_bits)
            noise += scale * scale * (M / item.params.L) * sigma2
    conditioning = max(scales) / min(scales) if scales else 1.0
    sparsity = min(cap * max(item.params.S for item in contributions), A.shape[1], M)
    return AggregatedObservation(
        y=y,
        A=A,
        noise_energy_model=cap * noise,
        devices=tuple(item.device for item in contributions),
        sparsity=sparsity,
        conditioning=conditioning,
        support_hint=support_hint,
    )


# ---------------------------------------------------------------------------
# Алгоритмы восстановления
# ---------------------------------------------------------------------------


def oracle_ls_recover(A: np.ndarray, y: np.ndarray, support: Iterable[int]) -> np.ndarray:
    """МНК на известном носителе T, нули вне T."""
    support = np.unique(np.asarray(list(support), dtype=np.int64))
    estimate = np.zeros(A.shape[1])
    if support.size == 0:
        return estimate
    if support.size > A.shape[0]:
        raise RecoveryError(f"Носитель |T|={support.size} больше числа измерений M={A.shape[0]}")
    solution, _, rank, _ = linalg.lstsq(A[:, support], y)
    if rank < support.size:
        raise RecoveryError(f"A_T вырождена: ранг {rank} < |T|={support.size}")
    estimate[support] = solution
    return estimate


def _hard_threshold(v: np.ndarray, sparsity: int) -> tuple[np.ndarray, np.ndarray]:
    keep = np.sort(np.argsort(-np.abs(v), kind="stable")[:sparsity])
    out = np.zeros_like(v)
    out[keep] = v[keep]
    return out, keep


def spectral_norm_sq(A: np.ndarray, iters: int = 100, seed: int = 0) -> float:
    """‖A‖²_op степенным методом."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    value = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - value) <= 1e-9 * norm:
            value = norm
            break
        value = norm
    return value


def _debias(A: np.ndarray, y: np.ndarray, keep: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    try:
        return oracle_ls_recover(A, y, keep)
    except RecoveryError:
        return fallback


def iht_recover(
    A: np.ndarray,
    y: np.ndarray,
    sparsity: int,
    iters: int = 500,
    step: str = "niht",
    warm_support: Optional[Iterable[int]] = None,
    tol: float = IHT_TOL,
) -> RecoveryResult:
    """
    Жёсткая пороговая итерация с отбором sparsity наибольших элементов.

    niht: адаптивный шаг с возвратом при смене носителя (по умолчанию),
    fixed: шаг 1/‖A‖². В конце МНК на найденном носителе.
    """
    if step not in STEP_POLICIES:
        raise ValueError(f"Неизвестная политика шага: {step}")
    M, N = A.shape
    if sparsity < 1 or sparsity > M:
        raise ValueError(f"Бюджет разреженности {sparsity} должен быть в [1, M={M}]")
    y_norm = float(np.linalg.norm(y))
    if y_norm == 0.0:
        return RecoveryResult(np.zeros(N), "iht", 0, True)

    if warm_support is not None:
        x = oracle_ls_recover(A, y, warm_support)
        x, keep = _hard_threshold(x, sparsity)
    else:
        x, keep = _hard_threshold(A.T @ y, sparsity)
        x = np.zeros(N)
    fixed_mu = 1.0 / spectral_norm_sq(A) if step == "fixed" else 0.0

    residual = y - A @ x
    res_norm = float(np.linalg.norm(residual))
    converged = False
    it = 0
    for it in range(1, iters + 1):
        grad = A.T @ residual
        if step == "fixed":
            mu = fixed_mu
            x_new, keep_new = _hard_threshold(x + mu * grad, sparsity)
        else:
            g_keep = grad[keep]
            denom = float(np.sum((A[:, keep] @ g_keep) ** 2))
            mu = float(g_keep @ g_keep) / denom if denom > 0 else 1.0 / spectral_norm_sq(A)
            x_new, keep_new = _hard_threshold(x + mu * grad, sparsity)
            if not np.array_equal(keep_new, keep):
                for _ in range(60):
                    diff = x_new - x
                    denom = float(np.sum((A @ diff) ** 2))
                    omega = (1.0 - NIHT_C) * float(diff @ diff) / denom if denom > 0 else math.inf
                    if mu <= omega:
                        break
                    mu /= NIHT_SHRINK * (1.0 - NIHT_C)
                    x_new, keep_new = _hard_threshold(x + mu * grad, sparsity)

        x, keep = x_new, keep_new
        residual = y - A @ x
        new_norm = float(np.linalg.norm(residual))
        if new_norm <= 1e-12 * y_norm or abs(res_norm - new_norm) < tol * max(res_norm, 1e-300):
            res_norm = new_norm
            converged = True
            break
        res_norm = new_norm

    return RecoveryResult(_debias(A, y, keep, x), "iht", it, converged)


def _bg_denoise(r: np.ndarray, v_r: np.ndarray, rate: float, theta: float):
    """Апостериорные моменты для априорного (1−λ)δ0 + λN(0, θ)."""
    log_ratio = (
        math.log(rate / (1.0 - rate))
        + 0.5 * np.log(v_r / (theta + v_r))
        + 0.5 * r * r * (1.0 / v_r - 1.0 / (theta + v_r))
    )
    active = special.expit(log_ratio)
    gain = theta / (theta + v_r)
    mean_on = gain * r
    var_on = gain * v_r
    x_hat = active * mean_on
    v_x = active * (var_on + mean_on * mean_on) - x_hat * x_hat
    return x_hat, np.maximum(v_x, 1e-300), active, mean_on, var_on


def gamp_recover(
    A: np.ndarray,
    y: np.ndarray,
    sparsity_rate: float,
    noise_var: float,
    iters: int = 50,
    signal_var: Optional[float] = None,
    damping: float = GAMP_DAMPING,
    tol: float = GAMP_TOL,
    fallback_sparsity: Optional[int] = None,
) -> RecoveryResult:
    """
    GAMP с бернулли-гауссовским денойзером и EM-оценкой (λ, θ, ψ).

    При расходимости (невязка выросла в 10 раз относительно ‖y‖)
    результат берётся из IHT, факт отката отмечается в RecoveryResult.
    """
    M, N = A.shape
    y_norm_sq = float(y @ y)
    if y_norm_sq == 0.0:
        return RecoveryResult(np.zeros(N), "gamp", 0, True)

    rate = float(np.clip(sparsity_rate, 1.0 / N, 1.0 - 1e-6))
    if signal_var is None:
        signal_var = y_norm_sq / (M * N * rate)
    theta = max(signal_var, 1e-300)
    noise_floor = 1e-10 * y_norm_sq / M
    psi = max(noise_var, noise_floor)

    A2 = A * A
    x_hat = np.zeros(N)
    v_x = np.full(N, rate * theta)
    s_hat = np.zeros(M)
    y_norm = math.sqrt(y_norm_sq)
    converged = False
    diverged = False
    it = 0
    for it in range(1, iters + 1):
        v_p = A2 @ v_x
        p_hat = A @ x_hat - v_p * s_hat
        s_new = (y - p_hat) / (v_p + psi)
        v_s = 1.0 / (v_p + psi)
        s_hat = damping * s_new + (1.0 - damping) * s_hat

        v_r = 1.0 / np.maximum(A2.T @ v_s, 1e-300)
        r_hat = x_hat + v_r * (A.T @ s_hat)
        x_new, v_new, active, mean_on, var_on = _bg_denoise(r_hat, v_r, rate, theta)

        change = float(np.sum((x_new - x_hat) ** 2))
        x_hat = damping * x_new + (1.0 - damping) * x_hat
        v_x = damping * v_new + (1.0 - damping) * v_x

        # EM-обновления гиперпараметров.
        rate = float(np.clip(np.mean(active), 1.0 / N, 1.0 - 1e-6))
        weight = float(np.sum(active))
        if weight > 0:
            theta = max(float(np.sum(active * (var_on + mean_on * mean_on))) / weight, 1e-300)
        z_hat = p_hat + v_p * s_new
        v_z = v_p * psi / (v_p + psi)
        psi = max(float(np.mean((y - z_hat) ** 2 + v_z)), noise_floor)

        residual = float(np.linalg.norm(y - A @ x_hat))
        if not np.all(np.isfinite(x_hat)) or residual > DIVERGENCE_FACTOR * y_norm:
            diverged = True
            break
        x_energy = float(x_hat @ x_hat)
        if x_energy > 0 and change / x_energy < tol:
            converged = True
            break

    if diverged:
        budget = fallback_sparsity or max(1, min(M, int(round(sparsity_rate * N))))
        logger.warning("[RECOVER] GAMP diverged after %d iterations, falling back to IHT", it)
        fallback = iht_recover(A, y, min(budget, M))
        return RecoveryResult(fallback.estimate, "gamp", it, fallback.converged, fell_back=True)
    return RecoveryResult(x_hat, "gamp", it, converged)


def recover(
    observation: AggregatedObservation,
    algorithm: str,
    iht_iters: int = 500,
    gamp_iters: int = 50,
    step: str = "niht",
) -> RecoveryResult:
    """Восстановление одной группы выбранным алгоритмом."""
    A, y = observation.A, observation.y
    M, N = A.shape
    if algorithm == "oracle":
        if observation.support_hint is None:
            raise RecoveryError("Для oracle-восстановления нужен истинный носитель")
        return RecoveryResult(oracle_ls_recover(A, y, observation.support_hint), "oracle")
    if algorithm == "iht":
        return iht_recover(A, y, max(1, observation.sparsity), iht_iters, step)
    if algorithm == "gamp":
        return gamp_recover(
            A,
            y,
            sparsity_rate=max(observation.sparsity, 1) / N,
            noise_var=observation.noise_energy_model / M,
            iters=gamp_iters,
            fallback_sparsity=max(1, observation.sparsity),
        )
    raise ValueError(f"Неизвестный алгоритм восстановления: {algorithm}")


def reconstruct_global_block(
    observations: Sequence[AggregatedObservation],
    algorithm: str,
    iht_iters: int = 500,
    gamp_iters: int = 50,
    step: str = "niht",
) -> tuple[np.ndarray, list[RecoveryResult]]:
    """ĝ_K = Σ_g ĝ_{K_g}; результаты по группам возвращаются для диагностики."""
    if not observations:
        raise RecoveryError("Нет ни одной группы для восстановления")
    N = observations[0].A.shape[1]
    total = np.zeros(N)
    results = []
    for observation in observations:
        result = recover(observation, algorithm, iht_iters, gamp_iters, step)
        total += result.estimate
        results.append(result)
    return total, results


def theorem2_bound(terms: Sequence[DeviceBoundTerm], N: int, cap: int) -> float:
    """
    K′·Σ ρ_k²·{‖ḡ_k − g̃_k‖² + K′·S_k·R_k·σ²_k/(N·L·α_k²)}.

    Нулевой маркер α = 0 означает g̃ = 0: квантовой ошибки нет.
    """
    total = 0.0
    for term in terms:
        quant = 0.0
        if term.alpha != 0.0:
            quant = cap * term.S * term.R * term.sigma2 / (N * term.L * term.alpha**2)
        total += term.weight**2 * (term.sparsification_error + quant)
    return cap * total
