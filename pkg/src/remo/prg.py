"""Keyed deterministic byte streams with explicit domain separation.

Masks and public bases are expanded from a 256-bit secret seed through
SHAKE-256.  Every draw names its full label tuple (purpose, session,
step, op id, ...), so distinct label tuples give independent streams and
identical (seed, labels) always reproduce the identical bytes, on any
platform.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .ring import QuantParams, RingMatrix

SEED_BYTES = 32  # kappa = 256


def _label_bytes(label) -> bytes:
    if isinstance(label, bytes):
        b = label
    elif isinstance(label, str):
        b = label.encode("utf-8")
    elif isinstance(label, int):
        b = label.to_bytes(16, "little", signed=True)
    else:
        raise TypeError(f"unsupported label type {type(label)!r}")
    # length-prefixed so label tuples cannot collide by concatenation
    return len(b).to_bytes(4, "little") + b


@dataclass(frozen=True)
class PrgKey:
    """256-bit seed plus the domain prefix all draws are bound to."""

    seed: bytes
    domain: tuple = ()

    def __post_init__(self) -> None:
        if len(self.seed) != SEED_BYTES:
            raise ValueError(f"seed must be {SEED_BYTES} bytes")

    @classmethod
    def from_int(cls, seed: int, *domain) -> "PrgKey":
        raw = hashlib.sha256(b"remo-seed" + seed.to_bytes(16, "little", signed=True)).digest()
        return cls(raw, tuple(domain))

    def child(self, *labels) -> "PrgKey":
        """Derive an independent key for a sub-domain."""
        h = hashlib.shake_256()
        h.update(b"remo-child" + self.seed)
        for part in self.domain + tuple(labels):
            h.update(_label_bytes(part))
        return PrgKey(h.digest(SEED_BYTES), ())

    def bytes_for(self, nbytes: int, *labels) -> bytes:
        h = hashlib.shake_256()
        h.update(b"remo-stream" + self.seed)
        for part in self.domain + tuple(labels):
            h.update(_label_bytes(part))
        return h.digest(nbytes)

    def ring_elements(self, count: int, params: QuantParams, *labels) -> np.ndarray:
        """count uniform elements of Z_2^k as uint64."""
        raw = self.bytes_for(8 * count, *labels)
        vals = np.frombuffer(raw, dtype="<u8").astype(np.uint64)
        if params.k < 64:
            # keeping the low k bits of uniform bytes stays uniform on Z_2^k
            vals = vals & np.uint64(params.mask)
        return vals

    def ring_matrix(self, rows: int, cols: int, params: QuantParams, *labels) -> RingMatrix:
        vals = self.ring_elements(rows * cols, params, *labels)
        return RingMatrix(vals.reshape(rows, cols), params)
