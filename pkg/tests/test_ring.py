"""Ring arithmetic: hand-evaluated examples, independent oracles, exactness properties."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remo.errors import DecodeError, LengthMismatch, RangeOverflow, ShapeMismatch
from remo.ring import (
    QuantParams,
    RingMatrix,
    decode_matrix,
    dequantize,
    encode_matrix,
    quantize,
    rescale,
    ring_add,
    ring_matmul,
    ring_sub,
    zeros,
)

P64 = QuantParams()
P8 = QuantParams(k=8, f=2)
P16 = QuantParams(k=16, f=4)


# --- independent oracles ---------------------------------------------------


def slow_matmul(a: list[list[int]], b: list[list[int]], k: int) -> list[list[int]]:
    """Schoolbook integer matmul reduced mod 2^k, pure Python ints."""
    mod = 1 << k
    rows, inner, cols = len(a), len(b), len(b[0])
    return [
        [sum(a[i][t] * b[t][j] for t in range(inner)) % mod for j in range(cols)]
        for i in range(rows)
    ]


def round_half_even_div(value: int, shift: int) -> int:
    """Round-half-even of value / 2^shift via exact rationals."""
    q = Fraction(value, 1 << shift)
    floor = q.numerator // q.denominator
    frac = q - floor
    if frac > Fraction(1, 2):
        return floor + 1
    if frac < Fraction(1, 2):
        return floor
    return floor if floor % 2 == 0 else floor + 1


def signed_of(v: int, k: int) -> int:
    return v - (1 << k) if v >= 1 << (k - 1) else v


# --- quantize / dequantize ---------------------------------------------------


def test_quantize_zero():
    assert quantize([[0.0]], P64).to_ints() == [[0]]


def test_quantize_one_is_scale():
    assert quantize([[1.0]], P64).to_ints() == [[65536]]


def test_quantize_halves_mod_256():
    # hand: round(0.5 * 4) = 2, round(-0.5 * 4) = -2 = 254 mod 256
    assert quantize([[0.5, -0.5]], P8).to_ints() == [[2, 254]]


def test_quantize_overflow():
    with pytest.raises(RangeOverflow):
        quantize([[float(P8.max_abs)]], P8)


def test_quantize_deterministic():
    x = np.linspace(-3.0, 3.0, 24).reshape(4, 6)
    assert quantize(x, P64) == quantize(x, P64)


def test_dequantize_trivials():
    assert dequantize(RingMatrix.from_ints([[0]], P64)).tolist() == [[0.0]]
    assert dequantize(RingMatrix.from_ints([[65536]], P64)).tolist() == [[1.0]]


def test_dequantize_twos_complement():
    v = (1 << 64) - (1 << 16)
    assert dequantize(RingMatrix.from_ints([[v]], P64)).tolist() == [[-1.0]]


@given(st.integers(min_value=-(2**40), max_value=2**40))
@settings(max_examples=200, deadline=None)
def test_quantize_dequantize_round_trip(v):
    # every float of the form v / 2^16 is exactly representable
    m = RingMatrix.from_ints([[v]], P64)
    assert quantize(dequantize(m), P64) == m


@given(st.integers(min_value=-(2**7) + 1, max_value=2**7 - 1))
@settings(max_examples=100, deadline=None)
def test_round_trip_small_ring(v):
    m = RingMatrix.from_ints([[v]], P8)
    assert quantize(dequantize(m), P8) == m


# --- add / sub ----------------------------------------------------------------


def test_add_identity():
    a = RingMatrix.from_ints([[7, 11], [13, 17]], P64)
    assert ring_add(a, zeros(2, 2, P64)) == a


def test_add_wraparound():
    a = RingMatrix.from_ints([[(1 << 64) - 1]], P64)
    b = RingMatrix.from_ints([[1]], P64)
    assert ring_add(a, b).to_ints() == [[0]]


def test_add_hand_values():
    a = RingMatrix.from_ints([[3, 5]], P16)
    b = RingMatrix.from_ints([[10, 20]], P16)
    assert ring_add(a, b).to_ints() == [[13, 25]]


def test_sub_self_is_zero():
    a = RingMatrix.from_ints([[123, 456]], P64)
    assert ring_sub(a, a) == zeros(1, 2, P64)


def test_sub_wraparound():
    a = RingMatrix.from_ints([[0]], P64)
    b = RingMatrix.from_ints([[1]], P64)
    assert ring_sub(a, b).to_ints() == [[(1 << 64) - 1]]


def test_sub_inverts_add_property():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        e = RingMatrix.from_ints(rng.integers(0, 2**63, (2, 3)).tolist(), P64)
        m = RingMatrix.from_ints(rng.integers(0, 2**63, (2, 3)).tolist(), P64)
        assert ring_sub(ring_add(e, m), m) == e


def test_shape_mismatch():
    a = RingMatrix.from_ints([[1, 2]], P64)
    b = RingMatrix.from_ints([[1]], P64)
    with pytest.raises(ShapeMismatch):
        ring_add(a, b)
    with pytest.raises(ShapeMismatch):
        ring_sub(a, b)


def test_params_mismatch_rejected():
    a = RingMatrix.from_ints([[1]], P64)
    b = RingMatrix.from_ints([[1]], P8)
    with pytest.raises(ShapeMismatch):
        ring_add(a, b)


# --- matmul ---------------------------------------------------------------------


def test_matmul_integer_identity():
    a = RingMatrix.from_ints([[5, 6], [7, 8]], P64)
    eye = RingMatrix.from_ints([[1, 0], [0, 1]], P64)
    assert ring_matmul(a, eye) == a


def test_matmul_hand_value():
    a = RingMatrix.from_ints([[1, 2]], P64)
    b = RingMatrix.from_ints([[3], [4]], P64)
    assert ring_matmul(a, b).to_ints() == slow_matmul([[1, 2]], [[3], [4]], 64) == [[11]]


def test_matmul_matches_slow_oracle():
    rng = np.random.default_rng(1)
    for k in (8, 16, 64):
        p = QuantParams(k=k, f=k // 2 if k > 2 else 1)
        a_ints = [[int(v) for v in row] for row in rng.integers(0, 1 << min(k, 62), (3, 4))]
        b_ints = [[int(v) for v in row] for row in rng.integers(0, 1 << min(k, 62), (4, 2))]
        got = ring_matmul(RingMatrix.from_ints(a_ints, p), RingMatrix.from_ints(b_ints, p))
        assert got.to_ints() == slow_matmul(a_ints, b_ints, k)


def test_matmul_distributivity_1000_trials():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        e = RingMatrix.from_ints(rng.integers(0, 2**63, (4, 4)).tolist(), P64)
        m = RingMatrix.from_ints(rng.integers(0, 2**63, (4, 4)).tolist(), P64)
        w = RingMatrix.from_ints(rng.integers(0, 2**63, (4, 4)).tolist(), P64)
        left = ring_matmul(ring_add(e, m), w)
        right = ring_add(ring_matmul(e, w), ring_matmul(m, w))
        assert left == right


def test_matmul_inner_dim_mismatch():
    a = RingMatrix.from_ints([[1, 2]], P64)
    with pytest.raises(ShapeMismatch):
        ring_matmul(a, a)


@given(
    st.lists(st.lists(st.integers(0, 2**64 - 1), min_size=2, max_size=2), min_size=2, max_size=2),
    st.lists(st.lists(st.integers(0, 2**64 - 1), min_size=2, max_size=2), min_size=2, max_size=2),
)
@settings(max_examples=100, deadline=None)
def test_matmul_oracle_property(a_ints, b_ints):
    got = ring_matmul(RingMatrix.from_ints(a_ints, P64), RingMatrix.from_ints(b_ints, P64))
    assert got.to_ints() == slow_matmul(a_ints, b_ints, 64)


# --- rescale ----------------------------------------------------------------------


def test_rescale_zero():
    assert rescale(zeros(1, 1, P8)).to_ints() == [[0]]


def test_rescale_exact_shift():
    # 16 at scale 2^(2f)=16 encodes 1.0; at scale 4 that is 4
    assert rescale(RingMatrix.from_ints([[16]], P8)).to_ints() == [[4]]


def test_rescale_half_even():
    # 6/4 = 1.5 rounds to the even neighbour 2
    assert rescale(RingMatrix.from_ints([[6]], P8)).to_ints() == [[2]]


def test_rescale_matches_rational_oracle():
    rng = np.random.default_rng(3)
    for p in (P8, P16, P64):
        vals = [int(v) for v in rng.integers(0, p.modulus if p.k < 64 else 2**63, 200)]
        vals += [0, 1, p.modulus - 1, 1 << (p.k - 1)]
        got = rescale(RingMatrix.from_ints([vals], p)).to_ints()[0]
        want = [
            round_half_even_div(signed_of(v % p.modulus, p.k), p.f) % p.modulus for v in vals
        ]
        assert got == want


def test_ring_closure_all_ops():
    rng = np.random.default_rng(4)
    a = RingMatrix.from_ints(rng.integers(0, 256, (3, 3)).tolist(), P8)
    b = RingMatrix.from_ints(rng.integers(0, 256, (3, 3)).tolist(), P8)
    for out in (ring_add(a, b), ring_sub(a, b), ring_matmul(a, b), rescale(a)):
        assert np.all(out.data <= P8.mask)


# --- exact recovery identity (the whole point) --------------------------------------


def test_exact_recovery_identity():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n, m, d, dout = rng.integers(1, 6, 4)
        e = RingMatrix.from_ints(rng.integers(0, 2**63, (n, d)).tolist(), P64)
        mask = RingMatrix.from_ints(rng.integers(0, 2**63, (n, d)).tolist(), P64)
        w = RingMatrix.from_ints(rng.integers(0, 2**63, (d, dout)).tolist(), P64)
        got = ring_sub(ring_matmul(ring_add(e, mask), w), ring_matmul(mask, w))
        assert got == ring_matmul(e, w)


# --- binary encoding ------------------------------------------------------------------


def test_codec_round_trip():
    m = RingMatrix.from_ints([[1, 2, 3], [4, 5, (1 << 64) - 1]], P64)
    decoded, offset = decode_matrix(encode_matrix(m))
    assert decoded == m
    assert offset == len(encode_matrix(m))


def test_codec_layout():
    m = RingMatrix.from_ints([[258]], P16)
    raw = encode_matrix(m)
    assert raw[:4] == b"RMX1"
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (1).to_bytes(4, "little")
    assert raw[12] == 16 and raw[13] == 4
    assert raw[14:22] == (258).to_bytes(8, "little")


def test_codec_truncated():
    raw = encode_matrix(RingMatrix.from_ints([[1, 2]], P64))
    with pytest.raises(LengthMismatch):
        decode_matrix(raw[:-3])


def test_codec_bad_magic():
    raw = bytearray(encode_matrix(RingMatrix.from_ints([[1]], P64)))
    raw[0] = ord(b"X")
    with pytest.raises(DecodeError):
        decode_matrix(bytes(raw))


def test_codec_non_canonical_rejected():
    raw = bytearray(encode_matrix(RingMatrix.from_ints([[1]], P8)))
    raw[-1] = 0xFF  # sets a value >= 2^8
    with pytest.raises(DecodeError):
        decode_matrix(bytes(raw))


@given(
    st.integers(2, 5),
    st.integers(2, 5),
    st.integers(0, 2**64 - 1),
)
@settings(max_examples=50, deadline=None)
def test_codec_round_trip_property(rows, cols, fill):
    rng = np.random.default_rng(fill % 2**32)
    vals = rng.integers(0, 2**63, (rows, cols)).tolist()
    vals[0][0] = fill
    m = RingMatrix.from_ints(vals, P64)
    decoded, _ = decode_matrix(encode_matrix(m))
    assert decoded == m
