"""
Локальный выбор (R, Q, S, L, Q_s, Q_h) для устройства при ограничении канала C.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

import quantizer
from compressor import CompressionParams, projected_dim
from quantizer import BitAllocation, CodebookError


logger = logging.getLogger(__name__)

DEFAULT_CANDIDATES = tuple(1.5 + 0.25 * r for r in range(7))
SUBVECTOR_CEILING = 64
CODEBOOK_BUDGET_EXPONENT = 15
# Наименьший ⌊Q·L⌋ допустимого кандидата.
MIN_SUBVECTOR_BITS = 2


class InfeasibleError(ValueError):
    """Нет допустимого S, L или кандидата R."""


@dataclass(frozen=True)
class CandidateRatios:
    values: tuple[float, ...] = DEFAULT_CANDIDATES

    def __post_init__(self):
        values = tuple(sorted(float(v) for v in self.values))
        if not values:
            raise ValueError("Набор кандидатов R пуст")
        if values[0] < 1.0:
            raise ValueError(f"Все кандидаты R должны быть ≥ 1: {values}")
        object.__setattr__(self, "values", values)

    @classmethod
    def parse(cls, text: str) -> "CandidateRatios":
        """'1.5, 1.75, 2' → CandidateRatios."""
        parts = [p.strip() for p in text.replace(";", ",").split(",") if p.strip()]
        return cls(tuple(float(p) for p in parts))

    def __iter__(self):
        return iter(self.values)


def optimal_q(C: float, R: float) -> float:
    """Q* = C·R бит на элемент проекции."""
    if C <= 0 or R < 1:
        raise ValueError(f"Нужно C > 0 и R ≥ 1, получено C={C}, R={R}")
    return C * R


def max_sparsity(N: int, cap: int, R: float) -> int:
    """
    Наибольшее S с R < N / (2·K′·S·ln(N/(K′·S))) и K′·S < N.

    S перебирается снизу вверх до первого нарушения: при K′S → N логарифм
    стремится к нулю и неравенство снова выполняется, эта ветка не годится.
    """
    if N < 2 or cap < 1 or R < 1:
        raise ValueError(f"Нужно N ≥ 2, K′ ≥ 1, R ≥ 1: N={N}, K′={cap}, R={R}")
    best = 0
    S = 1
    while cap * S < N:
        limit = N / (2.0 * cap * S * math.log(N / (cap * S)))
        if not R < limit:
            break
        best = S
        S += 1
    if best == 0:
        raise InfeasibleError(f"R={R} слишком велико: нет S ≥ 1 при N={N}, K′={cap}")
    return best


def subvector_dim(
    shape_bits_for: Callable[[int], int],
    ceiling: int = SUBVECTOR_CEILING,
    budget_exponent: int = CODEBOOK_BUDGET_EXPONENT,
) -> int:
    """Наибольшее L ≤ ceiling с L·2^{Q_s(L)} ≤ 2^budget_exponent."""
    limit = 2**budget_exponent
    for L in range(ceiling, 0, -1):
        try:
            shape_bits = shape_bits_for(L)
        except CodebookError:
            continue
        if L * 2**shape_bits <= limit:
            return L
    raise InfeasibleError("Нет размерности подвектора, удовлетворяющей бюджету кодовой книги")


@dataclass(frozen=True)
class SubvectorPolicy:
    """Правило выбора L: скан вниз от ceiling либо фиксированное значение."""

    ceiling: int = SUBVECTOR_CEILING
    budget_exponent: int = CODEBOOK_BUDGET_EXPONENT
    fixed: Optional[int] = None

    def choose(self, Q: float) -> tuple[int, BitAllocation]:
        if self.fixed is not None:
            try:
                return self.fixed, quantizer.optimal_bit_allocation(self.fixed, Q)
            except CodebookError as e:
                raise InfeasibleError(str(e)) from e
        L = subvector_dim(
            lambda dim: quantizer.optimal_bit_allocation(dim, Q).shape_bits,
            self.ceiling,
            self.budget_exponent,
        )
        return L, quantizer.optimal_bit_allocation(L, Q)


@dataclass(frozen=True)
class CandidateEvaluation:
    R: float
    feasible: bool
    Q: float = math.nan
    S: int = 0
    M: int = 0
    L: int = 0
    shape_bits: int = 0
    gain_bits: int = 0
    sparsification_error: float = math.nan
    reconstruction_term: float = math.nan
    reason: str = ""

    @property
    def objective(self) -> float:
        return self.sparsification_error + self.reconstruction_term


@dataclass(frozen=True)
class RatioSelection:
    """Выбранный кандидат и оценки всех кандидатов."""

    C: float
    R: float
    Q: float
    S: int
    M: int
    L: int
    shape_bits: int
    gain_bits: int
    objective: float
    evaluations: tuple[CandidateEvaluation, ...] = field(default=())

    def params(self, quantize: bool = True) -> CompressionParams:
        return CompressionParams(
            C=self.C,
            R=self.R,
            Q=self.Q,
            S=self.S,
            M=self.M,
            L=self.L,
            P=self.M // self.L,
            shape_bits=self.shape_bits,
            gain_bits=self.gain_bits,
            quantize=quantize,
        )


def _evaluate(
    R: float,
    C: float,
    N: int,
    cap: int,
    policy: SubvectorPolicy,
    energies: np.ndarray,
    fixed_sparsity: Optional[int],
) -> CandidateEvaluation:
    try:
        Q = optimal_q(C, R)
        S = min(fixed_sparsity, N) if fixed_sparsity else max_sparsity(N, cap, R)
        L, allocation = policy.choose(Q)
    except InfeasibleError as e:
        return CandidateEvaluation(R, False, reason=str(e))
    if quantizer.total_bits(L, Q) < MIN_SUBVECTOR_BITS:
        return CandidateEvaluation(R, False, Q=Q, S=S, L=L, reason=f"⌊Q·L⌋ < {MIN_SUBVECTOR_BITS} при R={R}")
    M = projected_dim(N, R, L, C, Q)
    if M < L:
        return CandidateEvaluation(R, False, Q=Q, S=S, L=L, reason=f"M < L при R={R}")

    kept = float(np.sum(energies[:S]))
    error = float(np.sum(energies[S:]))
    # α = 1/‖Sparse_S(ḡ)‖, поэтому 1/α² = ‖g̃‖².
    reconstruction = cap * S * R * allocation.modeled_mse * kept / (N * L)
    return CandidateEvaluation(
        R,
        True,
        Q=Q,
        S=S,
        M=M,
        L=L,
        shape_bits=allocation.shape_bits,
        gain_bits=allocation.gain_bits,
        sparsification_error=error,
        reconstruction_term=reconstruction,
    )


def select_ratio(
    g_bar: np.ndarray,
    C: float,
    N: int,
    cap: int,
    policy: Optional[SubvectorPolicy] = None,
    candidates: Optional[CandidateRatios] = None,
    fixed_sparsity: Optional[int] = None,
) -> RatioSelection:
    """
    Минимум ‖ḡ − Sparse_S(ḡ)‖² + K′·S·R·σ²_{L,Q}/(N·L·α²) по кандидатам R.

    При равенстве выигрывает меньший R; недопустимые кандидаты пропускаются.
    """
    g_bar = np.asarray(g_bar, dtype=np.float64)
    if g_bar.shape[0] != N:
        raise ValueError(f"Длина ḡ {g_bar.shape[0]} не равна N={N}")
    policy = policy or SubvectorPolicy()
    candidates = candidates or CandidateRatios()

    energies = np.sort(g_bar * g_bar)[::-1]
    evaluations = tuple(
        _evaluate(R, C, N, cap, policy, energies, fixed_sparsity) for R in candidates
    )

    best: Optional[CandidateEvaluation] = None
    for ev in evaluations:
        if not ev.feasible:
            logger.debug("[PARAM] candidate R=%.3f skipped: %s", ev.R, ev.reason)
            continue
        if best is None or ev.objective < best.objective:
            best = ev
    if best is None:
        raise InfeasibleError(f"Ни один кандидат R не допустим при C={C}, N={N}, K′={cap}")
    return RatioSelection(
        C=C,
        R=best.R,
        Q=best.Q,
        S=best.S,
        M=best.M,
        L=best.L,
        shape_bits=best.shape_bits,
        gain_bits=best.gain_bits,
        objective=best.objective,
        evaluations=evaluations,
    )
