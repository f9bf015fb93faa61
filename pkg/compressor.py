"""
Сжатие блочных обновлений устройства (BlkComp).

Цепочка: разреживание с обратной связью по ошибке → случайная проекция
с нормировкой → shape-gain квантование подвекторов → упаковка в биты.
"""
from __future__ import annotations

import logging
import math
import struct
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import bitstruct
import numpy as np

import quantizer
from quantizer import GainCodebook, ShapeCodebook


logger = logging.getLogger(__name__)

ALPHA_FORMAT = struct.Struct("<f")
ROUND_HEADER = struct.Struct("<4sHHIBBH")
ROUND_MAGIC = b"FVQC"
ROUND_VERSION = 1
# Признак кадра без квантования: Q_s = Q_h = 0xFF.
RAW_FRAME_BITS = 0xFF


class PayloadError(ValueError):
    """Повреждённый или несовместимый с параметрами payload."""


@dataclass(frozen=True, eq=False)
class BlockUpdate:
    round: int
    block: int
    values: np.ndarray


@dataclass(eq=False)
class ResidualState:
    """Накопитель ошибки Δ одного (устройство, блок)."""

    values: np.ndarray

    @classmethod
    def zeros(cls, N: int) -> "ResidualState":
        return cls(np.zeros(N))


def projected_dim(N: int, R: float, L: int, C: float, Q: float) -> int:
    """
    M = round(N/R), округлённое вниз до кратного L и уменьшаемое на L,
    пока Q·M превышает бюджет C·N. Возвращает 0, если ничего не помещается.
    """
    M = int(round(N / R))
    M = min(M, N) // L * L
    while M > 0 and Q * M > C * N * (1.0 + 1e-12):
        M -= L
    return M


@dataclass(frozen=True)
class CompressionParams:
    C: float
    R: float
    Q: float
    S: int
    M: int
    L: int
    P: int
    shape_bits: int
    gain_bits: int
    # False: x передаётся без квантования (binary64), для проверки без потерь.
    quantize: bool = True

    def __post_init__(self):
        if self.S < 1 or self.M < 1 or self.L < 1:
            raise ValueError(f"Параметры сжатия должны быть положительными: {self}")
        if self.M % self.L != 0 or self.P != self.M // self.L:
            raise ValueError(f"L={self.L} должно делить M={self.M}, P = M/L")
        if self.quantize:
            if self.shape_bits < 1 or self.gain_bits < 0:
                raise ValueError(f"Недопустимое разбиение бит: Q_s={self.shape_bits}, Q_h={self.gain_bits}")
            if self.shape_bits + self.gain_bits > quantizer.total_bits(self.L, self.Q):
                raise ValueError(
                    f"Q_s + Q_h = {self.shape_bits + self.gain_bits} > floor(Q·L) при Q={self.Q}, L={self.L}"
                )

    @classmethod
    def build(
        cls,
        N: int,
        C: float,
        R: float,
        S: int,
        L: int,
        shape_bits: int,
        gain_bits: int,
        quantize: bool = True,
    ) -> "CompressionParams":
        Q = C * R
        M = projected_dim(N, R, L, C, Q) if quantize else min(int(round(N / R)), N) // L * L
        if M < 1:
            raise ValueError(f"Для N={N}, R={R}, L={L} не остаётся ни одного подвектора")
        if S > N:
            raise ValueError(f"Разреженность S={S} больше длины блока N={N}")
        return cls(C, R, Q, S, M, L, M // L, shape_bits, gain_bits, quantize)

    @property
    def payload_bits(self) -> int:
        if not self.quantize:
            return 32 + 64 * self.M
        return payload_bits(self.P, self.shape_bits, self.gain_bits)


@dataclass(frozen=True, eq=False)
class CompressedBlockPayload:
    """Ω одного блока: α (binary32) и P пар кодовых слов."""

    alpha: float
    codes: np.ndarray
    shape_bits: int
    gain_bits: int
    # Только для режима без квантования.
    raw: Optional[np.ndarray] = None

    @property
    def is_zero(self) -> bool:
        return self.alpha == 0.0

    @property
    def P(self) -> int:
        return int(self.raw.shape[0] if self.raw is not None else self.codes.shape[0])

    def to_bytes(self) -> bytes:
        if self.raw is not None:
            return ALPHA_FORMAT.pack(self.alpha) + self.raw.astype("<f8").tobytes()
        return encode_payload(self.alpha, self.codes, self.shape_bits, self.gain_bits)

    @property
    def bits(self) -> int:
        if self.raw is not None:
            return 32 + 64 * self.raw.shape[0]
        return payload_bits(self.P, self.shape_bits, self.gain_bits)


def payload_bits(P: int, shape_bits: int, gain_bits: int) -> int:
    return 32 + P * (shape_bits + gain_bits)


# ---------------------------------------------------------------------------
# Разреживание
# ---------------------------------------------------------------------------


def sparsify_with_feedback(
    g: np.ndarray, residual: ResidualState, S: int
) -> tuple[np.ndarray, ResidualState]:
    """
    ḡ = g + Δ, оставить S наибольших по модулю элементов ḡ.

    Равные модули: сохраняется меньший индекс. Новый остаток Δ' = ḡ − g̃,
    так что g + Δ = g̃ + Δ' выполняется побитово.
    """
    g = np.asarray(g, dtype=np.float64)
    if residual.values.shape != g.shape:
        raise ValueError(f"Длина остатка {residual.values.shape} не совпадает с блоком {g.shape}")
    N = g.shape[0]
    if S < 1:
        raise ValueError(f"Разреженность должна быть ≥ 1, получено {S}")
    if S > N:
        raise ValueError(f"Разреженность S={S} больше длины блока N={N}")

    g_bar = g + residual.values
    keep = np.argsort(-np.abs(g_bar), kind="stable")[:S]
    g_tilde = np.zeros_like(g_bar)
    g_tilde[keep] = g_bar[keep]
    return g_tilde, ResidualState(g_bar - g_tilde)


# ---------------------------------------------------------------------------
# Проекция
# ---------------------------------------------------------------------------


def _row_key(master_seed: int, block: int, row: int, round_index: Optional[int]) -> list[int]:
    if round_index is None:
        return [master_seed, block, row]
    return [master_seed, block, row, round_index]


def projection_rows(
    master_seed: int,
    M: int,
    N: int,
    block: int = 0,
    round_index: Optional[int] = None,
    start: int = 0,
) -> np.ndarray:
    """
    Строки [start, M) общей N×N гауссовской матрицы блока.

    Каждая строка порождается своим счётчиковым генератором (Philox)
    от ключа (seed, block, row), поэтому меньшие M дают префикс больших.
    """
    if M > N:
        raise ValueError(f"Число строк M={M} больше N={N}")
    rows = np.empty((max(M - start, 0), N))
    for i, row in enumerate(range(start, M)):
        seq = np.random.SeedSequence(_row_key(master_seed, block, row, round_index))
        rows[i] = np.random.Generator(np.random.Philox(seq)).standard_normal(N)
    return rows


class ProjectionBank:
    """Кэш строк проекции по (блок, раунд); строки дорастают по требованию."""

    def __init__(self, master_seed: int, N: int, reseed_per_round: bool = False):
        self.master_seed = master_seed
        self.N = N
        self.reseed_per_round = reseed_per_round
        self._rows: dict[tuple[int, Optional[int]], np.ndarray] = {}
        self._lock = threading.Lock()

    def rows(self, block: int, M: int, round_index: Optional[int] = None) -> np.ndarray:
        key = (block, round_index if self.reseed_per_round else None)
        with self._lock:
            have = self._rows.get(key)
            have_count = 0 if have is None else have.shape[0]
            if have_count < M:
                extra = projection_rows(self.master_seed, M, self.N, key[0], key[1], start=have_count)
                have = extra if have is None else np.vstack([have, extra])
                have.setflags(write=False)
                self._rows[key] = have
            return have[:M]


def project(g_tilde: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, float]:
    """x = α·A·g̃ при α = 1/‖g̃‖ (округлённом до binary32); нулевой блок → (0, 0.0)."""
    norm = float(np.linalg.norm(g_tilde))
    if norm == 0.0:
        return np.zeros(A.shape[0]), 0.0
    alpha = float(np.float32(1.0 / norm))
    if not math.isfinite(alpha) or alpha == 0.0:
        raise ValueError(f"Норма блока {norm} не представима множителем binary32")
    return alpha * (A @ g_tilde), alpha


# ---------------------------------------------------------------------------
# Сжатие блока
# ---------------------------------------------------------------------------


def compress_block(
    update: BlockUpdate,
    residual: ResidualState,
    params: CompressionParams,
    codebooks: Optional[tuple[ShapeCodebook, GainCodebook]],
    master_seed: int,
    bank: Optional[ProjectionBank] = None,
) -> tuple[CompressedBlockPayload, ResidualState, np.ndarray]:
    """
    Разреживание → проекция → квантование подвекторов; остаток обновляется ровно один раз.

    Возвращает payload, новый остаток и закодированный g̃.
    """
    g_tilde, new_residual = sparsify_with_feedback(update.values, residual, params.S)
    N = g_tilde.shape[0]
    if bank is not None:
        A = bank.rows(update.block, params.M, update.round)
    else:
        A = projection_rows(master_seed, params.M, N, update.block)
    x, alpha = project(g_tilde, A)

    if not params.quantize:
        raw = x if alpha != 0.0 else np.zeros(params.M)
        payload = CompressedBlockPayload(alpha, np.zeros((0, 2), dtype=np.int64), 0, 0, raw=raw)
        return payload, new_residual, g_tilde

    codes = np.zeros((params.P, 2), dtype=np.int64)
    if alpha != 0.0:
        if codebooks is None:
            raise ValueError("Для квантования нужны кодовые книги")
        shape_cb, gain_cb = codebooks
        codes = quantizer.vq_encode_batch(x.reshape(params.P, params.L), shape_cb, gain_cb)
    payload = CompressedBlockPayload(alpha, codes, params.shape_bits, params.gain_bits)
    return payload, new_residual, g_tilde


def decode_block(
    payload: CompressedBlockPayload,
    params: CompressionParams,
    codebooks: Optional[tuple[ShapeCodebook, GainCodebook]],
) -> np.ndarray:
    """x̂: восстановленный (квантованный) вектор длины M."""
    if payload.raw is not None:
        return np.asarray(payload.raw, dtype=np.float64)
    if payload.is_zero:
        return np.zeros(params.M)
    if codebooks is None:
        raise ValueError("Для декодирования нужны кодовые книги")
    shape_cb, gain_cb = codebooks
    return quantizer.vq_decode_batch(payload.codes, shape_cb, gain_cb).reshape(-1)


# ---------------------------------------------------------------------------
# Битовый формат
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _field_format(P: int, shape_bits: int, gain_bits: int):
    pair = (f"u{shape_bits}" if shape_bits else "") + (f"u{gain_bits}" if gain_bits else "")
    return bitstruct.compile(pair * P)


def _packed_size(P: int, shape_bits: int, gain_bits: int) -> int:
    return ALPHA_FORMAT.size + (P * (shape_bits + gain_bits) + 7) // 8


def encode_payload(alpha: float, codes: np.ndarray, shape_bits: int, gain_bits: int) -> bytes:
    """[α: binary32 LE][P пар (shape Q_s бит, gain Q_h бит), MSB-first, добивка нулями]."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1, 2)
    P = codes.shape[0]
    head = ALPHA_FORMAT.pack(alpha)
    if P == 0 or shape_bits + gain_bits == 0:
        return head
    if codes.min() < 0 or codes[:, 0].max() >= 2**shape_bits or codes[:, 1].max() >= 2**gain_bits:
        raise PayloadError(f"Код не помещается в Q_s={shape_bits}, Q_h={gain_bits} бит")
    columns = [c for c, width in ((0, shape_bits), (1, gain_bits)) if width]
    values = codes[:, columns].reshape(-1).tolist()
    return head + _field_format(P, shape_bits, gain_bits).pack(*values)


def decode_payload(data: bytes, P: int, shape_bits: int, gain_bits: int) -> tuple[float, np.ndarray]:
    expected = _packed_size(P, shape_bits, gain_bits)
    if len(data) < expected:
        raise PayloadError(f"Payload обрезан: {len(data)} байт вместо {expected}")
    if len(data) > expected:
        raise PayloadError(f"Лишние байты в payload: {len(data)} вместо {expected}")
    (alpha,) = ALPHA_FORMAT.unpack_from(data)
    codes = np.zeros((P, 2), dtype=np.int64)
    if P and shape_bits + gain_bits:
        fields = np.array(_field_format(P, shape_bits, gain_bits).unpack(data[ALPHA_FORMAT.size:]), dtype=np.int64)
        fields = fields.reshape(P, -1)
        column = 0
        if shape_bits:
            codes[:, 0] = fields[:, column]
            column += 1
        if gain_bits:
            codes[:, 1] = fields[:, column]
    return float(alpha), codes


def payload_from_bytes(data: bytes, params: CompressionParams) -> CompressedBlockPayload:
    if not params.quantize:
        expected = ALPHA_FORMAT.size + 8 * params.M
        if len(data) != expected:
            raise PayloadError(f"Payload без квантования: {len(data)} байт вместо {expected}")
        (alpha,) = ALPHA_FORMAT.unpack_from(data)
        raw = np.frombuffer(data, dtype="<f8", offset=ALPHA_FORMAT.size).astype(np.float64)
        return CompressedBlockPayload(float(alpha), np.zeros((0, 2), dtype=np.int64), 0, 0, raw=raw)
    alpha, codes = decode_payload(data, params.P, params.shape_bits, params.gain_bits)
    return CompressedBlockPayload(alpha, codes, params.shape_bits, params.gain_bits)


def _frame_key(payload: CompressedBlockPayload) -> tuple[int, int, int]:
    if payload.raw is not None:
        return payload.P, RAW_FRAME_BITS, RAW_FRAME_BITS
    return payload.P, payload.shape_bits, payload.gain_bits


def encode_round_message(payloads: list[CompressedBlockPayload]) -> bytes:
    """
    Сообщение раунда: подряд идущие кадры «заголовок 16 байт + блоки».

    Блоки с одинаковыми (P, Q_s, Q_h) идут одним кадром; смена параметров
    открывает новый кадр со своим заголовком.
    """
    chunks: list[bytes] = []
    i = 0
    while i < len(payloads):
        key = _frame_key(payloads[i])
        j = i
        while j < len(payloads) and _frame_key(payloads[j]) == key and j - i < 0xFFFF:
            j += 1
        P, shape_bits, gain_bits = key
        chunks.append(ROUND_HEADER.pack(ROUND_MAGIC, ROUND_VERSION, j - i, P, shape_bits, gain_bits, 0))
        chunks.extend(p.to_bytes() for p in payloads[i:j])
        i = j
    return b"".join(chunks)


def decode_round_message(data: bytes) -> list[CompressedBlockPayload]:
    payloads: list[CompressedBlockPayload] = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < ROUND_HEADER.size:
            raise PayloadError("Обрезанный заголовок кадра")
        magic, version, blocks, P, shape_bits, gain_bits, _ = ROUND_HEADER.unpack_from(data, offset)
        if magic != ROUND_MAGIC or version != ROUND_VERSION:
            raise PayloadError(f"Неизвестный кадр: magic={magic!r}, version={version}")
        offset += ROUND_HEADER.size
        raw_frame = shape_bits == RAW_FRAME_BITS and gain_bits == RAW_FRAME_BITS
        size = ALPHA_FORMAT.size + 8 * P if raw_frame else _packed_size(P, shape_bits, gain_bits)
        for _ in range(blocks):
            chunk = data[offset:offset + size]
            if len(chunk) < size:
                raise PayloadError("Кадр короче заявленного числа блоков")
            if raw_frame:
                (alpha,) = ALPHA_FORMAT.unpack_from(chunk)
                raw = np.frombuffer(chunk, dtype="<f8", offset=ALPHA_FORMAT.size).astype(np.float64)
                payloads.append(CompressedBlockPayload(float(alpha), np.zeros((0, 2), dtype=np.int64), 0, 0, raw=raw))
            else:
                alpha, codes = decode_payload(chunk, P, shape_bits, gain_bits)
                payloads.append(CompressedBlockPayload(alpha, codes, shape_bits, gain_bits))
            offset += size
    return payloads
