"""
Shape-gain векторный квантователь для L-мерных гауссовских подвекторов.

Форма (направление) кодируется чётной грассмановой кодовой книгой,
модуль (gain) скалярным квантователем Ллойда–Макса для chi-распределения.
Здесь же модель MSE и оптимальное распределение бит между формой и модулем.
"""
from __future__ import annotations

import logging
import math
import os
import struct
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import special, stats


logger = logging.getLogger(__name__)

CODEBOOK_VERSION = 1
CACHE_MAGIC = b"SGVQ"
CACHE_HEADER = struct.Struct("<4sHHH")

MAX_SHAPE_LINES = 2**20
MAX_GAIN_BITS = 16
RANDOM_STARTS = 64
DEFAULT_BUDGET = 200
UNIT_TOL = 1e-6

# Расписание отжига для soft-min по квадратам хордовых расстояний.
TAU_START, TAU_END = 20.0, 2000.0
STEP_START, STEP_END = 0.05, 0.0005

GAIN_TAIL_MASS = 1e-12
LLOYD_TOL = 1e-9
LLOYD_MAX_ITERS = 10_000
_CHUNK = 1024


class CodebookError(ValueError):
    """Некорректные параметры, входы или файл кодовой книги."""


@dataclass(frozen=True, eq=False)
class ShapeCodebook:
    """Положительная половина C_s^+ чётной кодовой книги формы."""

    dim: int
    bits: int
    lines: np.ndarray
    achieved_min_chordal: float

    @property
    def size(self) -> int:
        return int(self.lines.shape[0])


@dataclass(frozen=True, eq=False)
class GainCodebook:
    """Уровни и пороги скалярного квантователя модуля."""

    dim: int
    bits: int
    levels: np.ndarray
    boundaries: np.ndarray

    @property
    def size(self) -> int:
        return int(self.levels.shape[0])


@dataclass(frozen=True)
class BitAllocation:
    dim: int
    bits_per_entry: float
    shape_bits: int
    gain_bits: int
    modeled_mse: float
    # Непрерывный оптимум (H, F); для L = 1 не определён.
    h_value: float = math.nan
    f_value: float = math.nan


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=np.float64)
    array.setflags(write=False)
    return array


# ---------------------------------------------------------------------------
# Замкнутые формы
# ---------------------------------------------------------------------------


def expected_gain(L: int) -> float:
    """E[h] = sqrt(2)·Γ((L+1)/2)/Γ(L/2)."""
    return math.sqrt(2.0) * math.exp(special.gammaln((L + 1) / 2) - special.gammaln(L / 2))


def gain_mse_zero_bits(L: int) -> float:
    """MSE модуля при Q_h = 0: L − 2π/β²(L/2, 1/2)."""
    return L - 2.0 * math.pi * math.exp(-2.0 * special.betaln(L / 2, 0.5))


def chi_constant(L: int) -> float:
    return math.exp(
        (L / 2) * math.log(3.0)
        + 3.0 * special.gammaln((L + 2) / 6)
        - math.log(2.0)
        - special.gammaln(L / 2)
    )


def shape_mse_upper(L: int, shape_bits: int) -> float:
    if L == 1:
        return 0.0
    return 2.0 ** (-2.0 * (shape_bits - 1) / (L - 1) + 1.0)


def lemma1_bounds(L: int, shape_bits: int) -> tuple[float, float]:
    """Нижняя и верхняя оценки MSE формы для чётной грассмановой книги."""
    if L == 1:
        return 0.0, 0.0
    base = 2.0 ** (-2.0 * (shape_bits - 1) / (L - 1))
    lower = 2.0 - 2.0 * math.sqrt(max(0.0, 1.0 - (L - 1) / (L + 1) * base))
    return lower, 2.0 * base


def shape_gain_mse_model(L: int, shape_bits: int, gain_bits: int) -> float:
    """Модельная MSE shape-gain квантователя на один L-мерный подвектор."""
    if L < 1 or shape_bits < 1 or gain_bits < 0:
        raise CodebookError(f"Недопустимые параметры модели: L={L}, Q_s={shape_bits}, Q_h={gain_bits}")
    shape_term = L * shape_mse_upper(L, shape_bits)
    if gain_bits > 0:
        gain_term = chi_constant(L) * 2.0 ** (-2.0 * (gain_bits + 1))
    else:
        gain_term = gain_mse_zero_bits(L)
    return shape_term + gain_term


def _continuous_allocation(L: int, Q: float) -> tuple[float, float]:
    """H_{L,Q} и F_{L,Q}: внутренний оптимум и его проигрыш разбиению (QL, 0)."""
    if L == 1:
        return math.nan, math.nan
    chi = chi_constant(L)
    a = (L - 1) / (2 * L)
    h_value = a * math.log2(a * chi) + Q - 1.0
    all_shape = L * 2.0 ** (-2.0 * (Q * L - 1) / (L - 1) + 1.0)
    f_value = (
        all_shape * (2.0 ** (2.0 * h_value / (L - 1)) - 1.0)
        + chi * 2.0 ** (-2.0 * (h_value + 1.0))
        - gain_mse_zero_bits(L)
    )
    return h_value, f_value


def total_bits(L: int, Q: float) -> int:
    """floor(Q·L) с защитой от ошибок округления вида 28.999999."""
    return int(math.floor(Q * L + 1e-9))


@lru_cache(maxsize=4096)
def optimal_bit_allocation(L: int, Q: float) -> BitAllocation:
    """
    Оптимальное целочисленное разбиение floor(QL) бит на форму и модуль.

    Перебираются все разбиения с Q_s ≥ 1; при равенстве MSE выигрывает
    больший Q_s.
    """
    if L < 1:
        raise CodebookError(f"Размерность подвектора должна быть ≥ 1, получено {L}")
    budget = total_bits(L, Q)
    if budget < 1:
        raise CodebookError(f"Q·L = {Q * L:.4f} < 1: кодовая книга невозможна")

    h_value, f_value = _continuous_allocation(L, Q)
    best: Optional[tuple[int, int, float]] = None
    for shape_bits in range(budget, 0, -1):
        gain_bits = budget - shape_bits
        mse = shape_gain_mse_model(L, shape_bits, gain_bits)
        if best is None or mse < best[2]:
            best = (shape_bits, gain_bits, mse)
    assert best is not None
    return BitAllocation(
        dim=L,
        bits_per_entry=Q,
        shape_bits=best[0],
        gain_bits=best[1],
        modeled_mse=best[2],
        h_value=h_value,
        f_value=f_value,
    )


def sigma2(L: int, Q: float) -> float:
    """σ²_{L,Q}: модельная MSE квантователя при оптимальном разбиении бит."""
    return optimal_bit_allocation(L, Q).modeled_mse


# ---------------------------------------------------------------------------
# Кодовая книга формы
# ---------------------------------------------------------------------------


def min_chordal_distance(lines: np.ndarray) -> float:
    """Минимальное попарное хордовое расстояние; для одной прямой это 1."""
    n = lines.shape[0]
    if n < 2:
        return 1.0
    max_inner = 0.0
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        block = np.abs(lines[start:stop] @ lines.T)
        rows = np.arange(stop - start)
        block[rows, rows + start] = 0.0
        max_inner = max(max_inner, float(block.max()))
    return math.sqrt(max(0.0, 1.0 - max_inner * max_inner))


def _random_lines(rng: np.random.Generator, n: int, L: int) -> np.ndarray:
    lines = rng.standard_normal((n, L))
    return lines / np.linalg.norm(lines, axis=1, keepdims=True)


def _softmin_gradient(lines: np.ndarray, tau: float) -> tuple[np.ndarray, float]:
    """Градиент soft-min(1 − (c_i·c_j)²) по строкам и текущий минимум d²."""
    n = lines.shape[0]
    min_d2 = 1.0
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        gram = lines[start:stop] @ lines.T
        d2 = 1.0 - gram * gram
        rows = np.arange(stop - start)
        d2[rows, rows + start] = np.inf
        min_d2 = min(min_d2, float(d2.min()))

    grad = np.empty_like(lines)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        gram = lines[start:stop] @ lines.T
        exponent = -tau * (1.0 - gram * gram - min_d2)
        rows = np.arange(stop - start)
        # Диагональ маскируется до exp: иначе переполнение.
        exponent[rows, rows + start] = -np.inf
        weights = np.exp(exponent)
        grad[start:stop] = -2.0 * (weights * gram) @ lines
    # Убираем радиальную составляющую: шаг идёт по сфере.
    grad -= np.sum(grad * lines, axis=1, keepdims=True) * lines
    return grad, min_d2


def _refine_packing(lines: np.ndarray, budget: int) -> tuple[np.ndarray, float]:
    best = lines
    best_d = min_chordal_distance(lines)
    current = lines.copy()
    for it in range(budget):
        frac = it / max(budget - 1, 1)
        tau = TAU_START * (TAU_END / TAU_START) ** frac
        step = STEP_START * (STEP_END / STEP_START) ** frac
        grad, min_d2 = _softmin_gradient(current, tau)
        current_d = math.sqrt(max(0.0, min_d2))
        if current_d > best_d:
            best, best_d = current.copy(), current_d
        scale = float(np.max(np.linalg.norm(grad, axis=1)))
        if scale == 0.0:
            break
        current = current + (step / scale) * grad
        current /= np.linalg.norm(current, axis=1, keepdims=True)
    final_d = min_chordal_distance(current)
    if final_d > best_d:
        best, best_d = current, final_d
    return best, min_chordal_distance(best)


def build_shape_codebook(
    L: int, shape_bits: int, seed: int = 0, budget: int = DEFAULT_BUDGET
) -> ShapeCodebook:
    """
    Упаковка 2^(Q_s−1) прямых в R^L с максимальным минимальным хордовым расстоянием.

    L = 2: равноугольная упаковка (известный оптимум); L ≥ 3: лучший из
    64 случайных стартов, затем проекционный градиентный подъём по soft-min.
    """
    if L < 1 or shape_bits < 1:
        raise CodebookError(f"Недопустимые параметры книги формы: L={L}, Q_s={shape_bits}")
    if shape_bits - 1 > int(math.log2(MAX_SHAPE_LINES)):
        raise CodebookError(f"Книга формы из 2^{shape_bits - 1} прямых превышает лимит 2^20")
    n = 2 ** (shape_bits - 1)

    if L == 1:
        if n != 1:
            raise CodebookError("Одномерной форме (знаку) достаточно Q_s = 1")
        return ShapeCodebook(1, shape_bits, _frozen(np.ones((1, 1))), 1.0)

    if n == 1:
        lines = np.zeros((1, L))
        lines[0, 0] = 1.0
        return ShapeCodebook(L, shape_bits, _frozen(lines), 1.0)

    if L == 2:
        angles = np.arange(n) * (math.pi / n)
        lines = np.column_stack([np.cos(angles), np.sin(angles)])
        return ShapeCodebook(2, shape_bits, _frozen(lines), min_chordal_distance(lines))

    rng = np.random.default_rng(np.random.SeedSequence([seed, L, shape_bits]))
    best, best_d = None, -1.0
    for _ in range(RANDOM_STARTS):
        candidate = _random_lines(rng, n, L)
        d = min_chordal_distance(candidate)
        if d > best_d:
            best, best_d = candidate, d
    lines, achieved = _refine_packing(best, budget)
    return ShapeCodebook(L, shape_bits, _frozen(lines), achieved)


def quantize_shape(s: np.ndarray, codebook: ShapeCodebook) -> tuple[int, int]:
    """Ближайший элемент чётной книги: (индекс прямой, знак)."""
    s = np.asarray(s, dtype=np.float64)
    norm = float(np.linalg.norm(s))
    if abs(norm - 1.0) > UNIT_TOL:
        raise CodebookError(f"Вход квантователя формы не единичный: ‖s‖ = {norm}")
    inner = codebook.lines @ s
    index = int(np.argmax(np.abs(inner)))
    sign = 1 if inner[index] >= 0 else -1
    return index, sign


def quantize_shape_batch(shapes: np.ndarray, codebook: ShapeCodebook) -> tuple[np.ndarray, np.ndarray]:
    indices = np.empty(shapes.shape[0], dtype=np.int64)
    signs = np.empty(shapes.shape[0], dtype=np.int64)
    for start in range(0, shapes.shape[0], _CHUNK):
        stop = min(start + _CHUNK, shapes.shape[0])
        inner = shapes[start:stop] @ codebook.lines.T
        best = np.argmax(np.abs(inner), axis=1)
        picked = inner[np.arange(stop - start), best]
        indices[start:stop] = best
        signs[start:stop] = np.where(picked >= 0, 1, -1)
    return indices, signs


# ---------------------------------------------------------------------------
# Кодовая книга модуля
# ---------------------------------------------------------------------------


def _regularized_diff(a: float, x_lo: np.ndarray, x_hi: np.ndarray) -> np.ndarray:
    # В верхнем хвосте разность нижних функций теряет точность, берём верхние.
    lower = special.gammainc(a, x_hi) - special.gammainc(a, x_lo)
    upper = special.gammaincc(a, x_lo) - special.gammaincc(a, x_hi)
    return np.where(x_lo > a, upper, lower)


def _cell_centroids(edges: np.ndarray, L: int) -> np.ndarray:
    """Условные средние плотности модуля по ячейкам [edges[i], edges[i+1]]."""
    x = 0.5 * edges * edges
    mass = _regularized_diff(L / 2, x[:-1], x[1:])
    moment = expected_gain(L) * _regularized_diff((L + 1) / 2, x[:-1], x[1:])
    midpoints = 0.5 * (edges[:-1] + edges[1:])
    with np.errstate(divide="ignore", invalid="ignore"):
        centroids = np.where(mass > 1e-300, moment / mass, midpoints)
    return np.clip(centroids, edges[:-1], edges[1:])


def gain_tail_limit(L: int) -> float:
    """z_max: хвост chi(L) за ним имеет массу < 1e-12."""
    return float(stats.chi.isf(GAIN_TAIL_MASS, L))


def build_gain_codebook(L: int, gain_bits: int) -> GainCodebook:
    """Квантователь Ллойда–Макса для плотности модуля гауссовского вектора."""
    if L < 1 or not 0 <= gain_bits <= MAX_GAIN_BITS:
        raise CodebookError(f"Недопустимые параметры книги модуля: L={L}, Q_h={gain_bits}")
    if gain_bits == 0:
        return GainCodebook(L, 0, _frozen(np.array([expected_gain(L)])), _frozen(np.empty(0)))

    n = 2**gain_bits
    z_max = gain_tail_limit(L)
    edges = stats.chi.ppf(np.linspace(0.0, 1.0, n + 1), L)
    edges[0], edges[-1] = 0.0, z_max
    levels = _cell_centroids(edges, L)
    for _ in range(LLOYD_MAX_ITERS):
        boundaries = 0.5 * (levels[:-1] + levels[1:])
        edges = np.concatenate(([0.0], boundaries, [z_max]))
        updated = _cell_centroids(edges, L)
        change = float(np.max(np.abs(updated - levels)))
        levels = updated
        if change < LLOYD_TOL:
            break
    boundaries = 0.5 * (levels[:-1] + levels[1:])
    return GainCodebook(L, gain_bits, _frozen(levels), _frozen(boundaries))


def quantize_gain(h: float, codebook: GainCodebook) -> int:
    if h < 0:
        raise CodebookError(f"Модуль не может быть отрицательным: {h}")
    return int(np.searchsorted(codebook.boundaries, h, side="left"))


# ---------------------------------------------------------------------------
# Кодирование подвекторов
# ---------------------------------------------------------------------------


def _check_pair(shape_cb: ShapeCodebook, gain_cb: GainCodebook, dim: int) -> None:
    if shape_cb.dim != gain_cb.dim or shape_cb.dim != dim:
        raise CodebookError(
            f"Размерности не совпадают: вектор {dim}, форма {shape_cb.dim}, модуль {gain_cb.dim}"
        )


def vq_encode(v: np.ndarray, shape_cb: ShapeCodebook, gain_cb: GainCodebook) -> tuple[int, int]:
    """Кодовые слова (shape_code, gain_code) одного подвектора."""
    v = np.asarray(v, dtype=np.float64)
    _check_pair(shape_cb, gain_cb, v.shape[0])
    h = float(np.linalg.norm(v))
    if h == 0.0:
        raise CodebookError("Нулевой подвектор нельзя разложить на форму и модуль")
    index, sign = quantize_shape(v / h, shape_cb)
    return index * 2 + (1 if sign < 0 else 0), quantize_gain(h, gain_cb)


def vq_decode(shape_code: int, gain_code: int, shape_cb: ShapeCodebook, gain_cb: GainCodebook) -> np.ndarray:
    sign = -1.0 if shape_code & 1 else 1.0
    return gain_cb.levels[gain_code] * (sign * shape_cb.lines[shape_code >> 1])


def vq_encode_batch(vectors: np.ndarray, shape_cb: ShapeCodebook, gain_cb: GainCodebook) -> np.ndarray:
    """
    Кодирование P подвекторов сразу, результат (P, 2).

    Нулевые строки получают код (0, 0): блок целиком нулевым не бывает,
    этот путь закрыт нулевым маркером компрессора.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    _check_pair(shape_cb, gain_cb, vectors.shape[1])
    gains = np.linalg.norm(vectors, axis=1)
    safe = np.where(gains > 0, gains, 1.0)
    indices, signs = quantize_shape_batch(vectors / safe[:, None], shape_cb)
    codes = np.empty((vectors.shape[0], 2), dtype=np.int64)
    codes[:, 0] = indices * 2 + (signs < 0)
    codes[:, 1] = np.searchsorted(gain_cb.boundaries, gains, side="left")
    codes[gains == 0] = 0
    return codes


def vq_decode_batch(codes: np.ndarray, shape_cb: ShapeCodebook, gain_cb: GainCodebook) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    signs = np.where(codes[:, 0] & 1, -1.0, 1.0)
    shapes = signs[:, None] * shape_cb.lines[codes[:, 0] >> 1]
    return gain_cb.levels[codes[:, 1]][:, None] * shapes


def measure_vq_mse(
    shape_cb: ShapeCodebook, gain_cb: GainCodebook, samples: int, seed: int = 0
) -> dict[str, float]:
    """Монте-Карло MSE на v ~ N(0, I_L): форма, модуль и итог."""
    L = shape_cb.dim
    _check_pair(shape_cb, gain_cb, L)
    rng = np.random.default_rng(np.random.SeedSequence([seed, L, shape_cb.bits, gain_cb.bits]))
    shape_err = gain_err = total_err = 0.0
    done = 0
    while done < samples:
        count = min(65_536, samples - done)
        v = rng.standard_normal((count, L))
        h = np.linalg.norm(v, axis=1)
        s = v / h[:, None]
        indices, signs = quantize_shape_batch(s, shape_cb)
        s_hat = signs[:, None] * shape_cb.lines[indices]
        h_hat = gain_cb.levels[np.searchsorted(gain_cb.boundaries, h, side="left")]
        shape_err += float(np.sum((s - s_hat) ** 2))
        gain_err += float(np.sum((h - h_hat) ** 2))
        total_err += float(np.sum((v - h_hat[:, None] * s_hat) ** 2))
        done += count
    return {
        "shape_mse": shape_err / samples,
        "gain_mse": gain_err / samples,
        "mse": total_err / samples,
    }


# ---------------------------------------------------------------------------
# Кэш кодовых книг
# ---------------------------------------------------------------------------


def write_shape_codebook(path: str, codebook: ShapeCodebook) -> None:
    payload = (
        CACHE_HEADER.pack(CACHE_MAGIC, CODEBOOK_VERSION, codebook.dim, codebook.bits)
        + codebook.lines.astype("<f8").tobytes()
        + struct.pack("<d", codebook.achieved_min_chordal)
    )
    _atomic_write(path, payload)


def write_gain_codebook(path: str, codebook: GainCodebook) -> None:
    payload = (
        CACHE_HEADER.pack(CACHE_MAGIC, CODEBOOK_VERSION, codebook.dim, codebook.bits)
        + codebook.levels.astype("<f8").tobytes()
        + codebook.boundaries.astype("<f8").tobytes()
    )
    _atomic_write(path, payload)


def _atomic_write(path: str, payload: bytes) -> None:
    parent_dir = os.path.dirname(path)
    if parent_dir:
        os.makedirs(parent_dir, exist_ok=True)
    tmp_path = f"{path}.{os.getpid()}.{threading.get_ident()}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(payload)
    os.replace(tmp_path, path)


def _read_header(raw: bytes, path: str) -> tuple[int, int, memoryview]:
    if len(raw) < CACHE_HEADER.size:
        raise CodebookError(f"Файл кодовой книги обрезан: {path}")
    magic, version, dim, bits = CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC or version != CODEBOOK_VERSION:
        raise CodebookError(f"Неизвестный формат кодовой книги: {path}")
    return dim, bits, memoryview(raw)[CACHE_HEADER.size:]


def read_shape_codebook(path: str) -> ShapeCodebook:
    with open(path, "rb") as fh:
        raw = fh.read()
    dim, bits, body = _read_header(raw, path)
    count = 2 ** (bits - 1)
    expected = count * dim * 8 + 8
    if len(body) != expected:
        raise CodebookError(f"Размер файла книги формы не совпадает с заголовком: {path}")
    lines = np.frombuffer(body[:-8], dtype="<f8").reshape(count, dim)
    (achieved,) = struct.unpack("<d", body[-8:])
    return ShapeCodebook(dim, bits, _frozen(lines), achieved)


def read_gain_codebook(path: str) -> GainCodebook:
    with open(path, "rb") as fh:
        raw = fh.read()
    dim, bits, body = _read_header(raw, path)
    count = 2**bits
    if len(body) != (2 * count - 1) * 8:
        raise CodebookError(f"Размер файла книги модуля не совпадает с заголовком: {path}")
    values = np.frombuffer(body, dtype="<f8")
    return GainCodebook(dim, bits, _frozen(values[:count]), _frozen(values[count:]))


class CodebookCache:
    """
    Кэш кодовых книг: память процесса + каталог с файлами SGVQ.

    Одна и та же книга строится один раз даже при параллельных запросах.
    """

    def __init__(self, directory: Optional[str] = None, seed: int = 0, budget: int = DEFAULT_BUDGET):
        self.directory = directory
        self.seed = seed
        self.budget = budget
        self._memo: dict[tuple, object] = {}
        self._locks: dict[tuple, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock_for(self, key: tuple) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def shape_path(self, L: int, shape_bits: int) -> Optional[str]:
        if not self.directory:
            return None
        name = f"shape-L{L}-Q{shape_bits}-s{self.seed}-b{self.budget}-v{CODEBOOK_VERSION}.sgvq"
        return os.path.join(self.directory, name)

    def gain_path(self, L: int, gain_bits: int) -> Optional[str]:
        if not self.directory:
            return None
        return os.path.join(self.directory, f"gain-L{L}-Q{gain_bits}-v{CODEBOOK_VERSION}.sgvq")

    def _get(self, key: tuple, path: Optional[str], reader, writer, builder):
        cached = self._memo.get(key)
        if cached is not None:
            return cached
        with self._lock_for(key):
            cached = self._memo.get(key)
            if cached is not None:
                return cached
            codebook = None
            if path and os.path.exists(path):
                try:
                    codebook = reader(path)
                    logger.debug("[CODEBOOK] cache hit %s", path)
                except CodebookError as e:
                    logger.warning("[CODEBOOK] corrupt cache file ignored: %s", e)
            if codebook is None:
                started = time.perf_counter()
                codebook = builder()
                logger.info(
                    "[CODEBOOK] built %s in %.1f ms",
                    key,
                    (time.perf_counter() - started) * 1000.0,
                )
                if path:
                    writer(path, codebook)
            self._memo[key] = codebook
            return codebook

    def shape(self, L: int, shape_bits: int) -> ShapeCodebook:
        return self._get(
            ("shape", L, shape_bits),
            self.shape_path(L, shape_bits),
            read_shape_codebook,
            write_shape_codebook,
            lambda: build_shape_codebook(L, shape_bits, self.seed, self.budget),
        )

    def gain(self, L: int, gain_bits: int) -> GainCodebook:
        return self._get(
            ("gain", L, gain_bits),
            self.gain_path(L, gain_bits),
            read_gain_codebook,
            write_gain_codebook,
            lambda: build_gain_codebook(L, gain_bits),
        )

    def pair(self, L: int, shape_bits: int, gain_bits: int) -> tuple[ShapeCodebook, GainCodebook]:
        return self.shape(L, shape_bits), self.gain(L, gain_bits)
