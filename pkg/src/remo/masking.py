"""Hybrid masking: fixed public base per weight matrix, fresh private mixing per step.

Setup releases a single random m x d public base per weight matrix
(m < d, so the provider-side product reveals only an underdetermined
sketch of the weights) and stores the returned restoration pool.  At
every decoding step the enclave draws a fresh private n x m mixing
matrix, applies the additive mask E + M_pvt @ M_pub, and later removes
the provider's contribution exactly via O_hat - M_pvt @ R_pub.

The full mask M_pvt @ M_pub exists only transiently inside
mask_embedding; the private mixing matrix never crosses the wire.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import BadDims, ShapeMismatch, SketchReissue
from .prg import PrgKey
from .ring import QuantParams, RingMatrix, ring_add, ring_matmul, ring_sub


@dataclass
class MaskBase:
    """Per-weight-matrix public base and (once installed) restoration pool.

    The pool holds the raw ring product of the base with the weight
    matrix, i.e. at fixed-point scale 2f: recovery must subtract it from
    the equally raw masked product before any rescaling.
    """

    op_id: str
    m: int
    d: int
    public_base: RingMatrix
    pool: RingMatrix | None = None

    def install_pool(self, reply: RingMatrix) -> "MaskBase":
        if self.pool is not None:
            raise SketchReissue(f"pool for {self.op_id!r} already installed")
        if reply.rows != self.m:
            raise ShapeMismatch(f"pool for {self.op_id!r} must have {self.m} rows, got {reply.rows}")
        if reply.params != self.public_base.params:
            raise ShapeMismatch("pool params differ from base params")
        self.pool = reply
        return self


def _gf2_row_rank(rows: list[int]) -> int:
    """Rank over GF(2) of rows given as bit-packed ints."""
    basis: list[int] = []
    for value in rows:
        for b in basis:
            value = min(value, value ^ b)
        if value:
            basis.append(value)
            basis.sort(reverse=True)
    return len(basis)


def _full_row_rank(matrix: RingMatrix) -> bool:
    # full rank of the low bits over GF(2) implies full row rank over the
    # rationals (some m x m minor has odd determinant) and over the ring
    rows = []
    for r in matrix.data:
        bits = 0
        for v in r:
            bits = (bits << 1) | (int(v) & 1)
        rows.append(bits)
    return _gf2_row_rank(rows) == matrix.rows


@dataclass
class MaskIssuer:
    """Generates public bases, enforcing the one-base-per-op rule."""

    prg: PrgKey
    params: QuantParams
    issued: set = field(default_factory=set)

    def gen_public_base(self, op_id: str, m: int, d: int) -> MaskBase:
        if m >= d:
            raise BadDims(f"sketch rows m={m} must be < input dim d={d}")
        if m < 1:
            raise BadDims("need m >= 1")
        if op_id in self.issued:
            raise SketchReissue(f"public base for {op_id!r} was already issued")
        attempt = 0
        while True:
            base = self.prg.ring_matrix(m, d, self.params, "public-base", op_id, attempt)
            if _full_row_rank(base):
                break
            attempt += 1  # rank deficiency has probability ~2^-(d-m); retry deterministically
        self.issued.add(op_id)
        return MaskBase(op_id=op_id, m=m, d=d, public_base=base)


def derive_step_mask(
    prg: PrgKey, step: int, op_id: str, n: int, m: int, params: QuantParams
) -> RingMatrix:
    """Fresh n x m private mixing matrix for one decoding step.

    Uniform on Z_2^k, bound to the (step, op) labels so no two steps and
    no two ops in one step ever share a stream.
    """
    if n < 1:
        raise BadDims("need n >= 1")
    return prg.ring_matrix(n, m, params, "private-mix", step, op_id)


@dataclass(frozen=True)
class StepMasks:
    """The private mixing matrices of a single decoding step, then discarded."""

    step: int
    per_op: dict  # op_id -> RingMatrix (n x m)


def mask_embedding(e: RingMatrix, m_pvt: RingMatrix, m_pub: RingMatrix) -> RingMatrix:
    """E + M_pvt @ M_pub; the combined mask never escapes this frame."""
    if e.cols != m_pub.cols or m_pvt.cols != m_pub.rows or e.rows != m_pvt.rows:
        raise ShapeMismatch(
            f"mask shapes incompatible: E {e.shape}, M_pvt {m_pvt.shape}, M_pub {m_pub.shape}"
        )
    return ring_add(e, ring_matmul(m_pvt, m_pub))


def recover(o_hat: RingMatrix, m_pvt: RingMatrix, r_pub: RingMatrix) -> RingMatrix:
    """O_hat - M_pvt @ R_pub: exact plaintext product by ring distributivity.

    Both operands must still be at the raw product scale (2f); rescaling
    happens after the subtraction, otherwise rounding would break
    exactness.
    """
    if m_pvt.cols != r_pub.rows or o_hat.cols != r_pub.cols or o_hat.rows != m_pvt.rows:
        raise ShapeMismatch(
            f"recover shapes incompatible: O_hat {o_hat.shape}, M_pvt {m_pvt.shape}, R_pub {r_pub.shape}"
        )
    return ring_sub(o_hat, ring_matmul(m_pvt, r_pub))
