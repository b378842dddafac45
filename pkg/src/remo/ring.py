"""Exact fixed-point matrices over the ring Z_2^k.

All outsourced linear algebra in this package runs on these matrices.
Addition, subtraction and matrix products are exact modular integer
arithmetic, so additive masking distributes over products with zero
error: (E + M)W - MW == EW element-for-element, no tolerance.

Representation: elements are canonical ``uint64`` values in [0, 2^k).
Arithmetic is done in native uint64 (which wraps mod 2^64) and then
reduced to the low k bits; since 2^k divides 2^64 the result is
congruent mod 2^k, i.e. exact.

Fixed-point encoding: a ring element v encodes the real x = s(v) / 2^f
where s(v) is the two's-complement interpretation of the low k bits.
A product of two scale-f values lives at scale 2f; `rescale` shifts it
back down with round-half-even.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, LengthMismatch, RangeOverflow, ShapeMismatch

MATRIX_MAGIC = b"RMX1"
_MATRIX_HEADER = struct.Struct("<IIBB")  # rows, cols, k, f


@dataclass(frozen=True)
class QuantParams:
    """Ring bit-width k and fraction bits f of the fixed-point encoding.

    Requires 1 <= f < k <= 64.  The representable real range is
    |x| < 2^(k-f-1); quantize rejects anything outside it.
    """

    k: int = 64
    f: int = 16

    def __post_init__(self) -> None:
        if not (isinstance(self.k, int) and isinstance(self.f, int)):
            raise BadParams("k and f must be ints")
        if not (1 <= self.f < self.k <= 64):
            raise BadParams(f"need 1 <= f < k <= 64, got k={self.k} f={self.f}")

    @property
    def modulus(self) -> int:
        return 1 << self.k

    @property
    def mask(self) -> int:
        return (1 << self.k) - 1

    @property
    def scale(self) -> float:
        return float(1 << self.f)

    @property
    def max_abs(self) -> float:
        """Strict upper bound on |x| accepted by quantize."""
        return float(1 << (self.k - self.f - 1))


class BadParams(ValueError):
    pass


def _as_canonical(data: np.ndarray, params: QuantParams) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.uint64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"matrix must be 2-D, got shape {arr.shape}")
    if params.k < 64 and bool(np.any(arr > np.uint64(params.mask))):
        raise ShapeMismatch(f"element out of ring range for k={params.k}")
    return arr


@dataclass(frozen=True, eq=False)
class RingMatrix:
    """Immutable rows x cols matrix of canonical Z_2^k elements."""

    data: np.ndarray
    params: QuantParams

    def __post_init__(self) -> None:
        arr = _as_canonical(self.data, self.params)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @classmethod
    def from_ints(cls, values, params: QuantParams) -> "RingMatrix":
        """Build from arbitrary Python integers, reduced mod 2^k."""
        arr = np.array(values, dtype=object)
        if arr.ndim != 2:
            raise ShapeMismatch(f"matrix must be 2-D, got shape {arr.shape}")
        reduced = np.vectorize(lambda v: int(v) % params.modulus, otypes=[object])(arr)
        return cls(reduced.astype(np.uint64), params)

    def to_ints(self) -> list[list[int]]:
        return [[int(v) for v in row] for row in self.data]

    def signed(self) -> np.ndarray:
        """Two's-complement interpretation of the low k bits (int64)."""
        return _to_signed(self.data, self.params)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RingMatrix):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.data, other.data)

    def __hash__(self) -> int:
        return hash((self.params, self.data.tobytes()))

    def __repr__(self) -> str:
        return f"RingMatrix({self.rows}x{self.cols}, k={self.params.k}, f={self.params.f})"


def zeros(rows: int, cols: int, params: QuantParams) -> RingMatrix:
    return RingMatrix(np.zeros((rows, cols), dtype=np.uint64), params)


def _to_signed(data: np.ndarray, params: QuantParams) -> np.ndarray:
    if params.k == 64:
        return data.view(np.int64)
    s = data.astype(np.int64)
    half = np.int64(1 << (params.k - 1))
    hi = s >= half
    # subtract 2^k in two steps so k=63 stays inside int64
    s = np.where(hi, (s - half) - half, s)
    return s


def _check_pair(a: RingMatrix, b: RingMatrix, *, same_shape: bool) -> None:
    if a.params != b.params:
        raise ShapeMismatch(f"quantization params differ: {a.params} vs {b.params}")
    if same_shape and a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")


def quantize(x, params: QuantParams) -> RingMatrix:
    """Encode a real matrix at scale 2^f, round-half-even, reduced mod 2^k.

    Raises RangeOverflow when any |x_ij| >= 2^(k-f-1).
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"matrix must be 2-D, got shape {arr.shape}")
    if arr.size and (not np.all(np.isfinite(arr)) or float(np.max(np.abs(arr))) >= params.max_abs):
        raise RangeOverflow(f"value outside representable range |x| < {params.max_abs}")
    scaled = np.rint(arr * params.scale)
    # float64 has no values in (2^(k-1) - 0.5, 2^(k-1)) once k-1 > 53, and for
    # smaller k the int64 range is ample, so this cast is always exact.
    ivals = scaled.astype(np.int64)
    data = ivals.view(np.uint64)
    if params.k < 64:
        data = data & np.uint64(params.mask)
    return RingMatrix(data, params)


def dequantize(a: RingMatrix) -> np.ndarray:
    """Two's-complement value divided by 2^f, as float64.

    Exact whenever |signed value| <= 2^53; ring elements produced by the
    model pipeline stay far below that.
    """
    return _to_signed(a.data, a.params).astype(np.float64) / a.params.scale


def ring_add(a: RingMatrix, b: RingMatrix) -> RingMatrix:
    """Element-wise (a + b) mod 2^k."""
    _check_pair(a, b, same_shape=True)
    out = a.data + b.data
    if a.params.k < 64:
        out = out & np.uint64(a.params.mask)
    return RingMatrix(out, a.params)


def ring_sub(a: RingMatrix, b: RingMatrix) -> RingMatrix:
    """Element-wise (a - b) mod 2^k; exact inverse of ring_add."""
    _check_pair(a, b, same_shape=True)
    out = a.data - b.data
    if a.params.k < 64:
        out = out & np.uint64(a.params.mask)
    return RingMatrix(out, a.params)


def ring_matmul(a: RingMatrix, b: RingMatrix) -> RingMatrix:
    """Exact integer matrix product mod 2^k.

    uint64 accumulation wraps mod 2^64, which is congruent mod 2^k for
    every k <= 64, so distributivity over ring_add holds bit-exactly.
    The result of scale-f operands lives at scale 2f.
    """
    _check_pair(a, b, same_shape=False)
    if a.cols != b.rows:
        raise ShapeMismatch(f"inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if a.params.k < 64:
        out = out & np.uint64(a.params.mask)
    return RingMatrix(out, a.params)


def rescale(a: RingMatrix) -> RingMatrix:
    """Drop f fraction bits from a scale-2f value, round-half-even.

    Equivalent to round_half_even(s(v) / 2^f) on the two's-complement
    value, re-encoded mod 2^k.  Deterministic pure integer arithmetic.
    """
    p = a.params
    f = np.uint64(p.f)
    data = a.data
    q = data >> f
    # sign-extend the arithmetic shift inside the low k bits
    ext = np.uint64((((1 << p.f) - 1) << (p.k - p.f)) & p.mask)
    sign = (data >> np.uint64(p.k - 1)) & np.uint64(1)
    q = q | (sign * ext)
    r = data & np.uint64((1 << p.f) - 1)
    half = np.uint64(1 << (p.f - 1))
    inc = (r > half) | ((r == half) & ((q & np.uint64(1)) == np.uint64(1)))
    out = q + inc.astype(np.uint64)
    if p.k < 64:
        out = out & np.uint64(p.mask)
    return RingMatrix(out, p)


def encode_matrix(a: RingMatrix) -> bytes:
    """RMX1 wire form: magic, rows u32 LE, cols u32 LE, k u8, f u8, elements u64 LE."""
    header = MATRIX_MAGIC + _MATRIX_HEADER.pack(a.rows, a.cols, a.params.k, a.params.f)
    return header + a.data.astype("<u8").tobytes()


def decode_matrix(buf: bytes, offset: int = 0) -> tuple[RingMatrix, int]:
    """Parse one encoded matrix starting at offset; returns (matrix, next offset)."""
    head_len = len(MATRIX_MAGIC) + _MATRIX_HEADER.size
    if len(buf) - offset < head_len:
        raise LengthMismatch("truncated matrix header")
    if buf[offset : offset + 4] != MATRIX_MAGIC:
        raise DecodeError("bad matrix magic")
    rows, cols, k, f = _MATRIX_HEADER.unpack_from(buf, offset + 4)
    try:
        params = QuantParams(k=k, f=f)
    except BadParams as exc:
        raise DecodeError(str(exc)) from exc
    body = rows * cols * 8
    start = offset + head_len
    if len(buf) - start < body:
        raise LengthMismatch("truncated matrix body")
    flat = np.frombuffer(buf, dtype="<u8", count=rows * cols, offset=start)
    data = flat.astype(np.uint64).reshape(rows, cols)
    if params.k < 64 and bool(np.any(data > np.uint64(params.mask))):
        raise DecodeError("non-canonical ring element")
    return RingMatrix(data, params), start + body
