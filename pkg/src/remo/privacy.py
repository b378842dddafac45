"""Executable checks of the masking privacy bounds and weight non-identifiability.

Three independent verifications:

* Distinguishing game: a Bayes-optimal adversary sees one uniformly
  masked vector and guesses which of two candidate inputs produced it.
  Its empirical success rate must stay under the analytic bound
  1/2 + 1/2 * min(||e1 - e2||_1 / lambda, 1).

* Exact total-variation distances for uniform box masks: closed-form
  per-coordinate overlap (with its multi-dimensional product form) plus
  a grid-integration cross-check in up to 3 dimensions.

* Sketch algebra: exact rational rank/kernel of a public base (kernel
  dimension d - m makes the weights non-identifiable from one sketch),
  explicit enumeration of distinct consistent weight candidates, and a
  rule-violating stacking demo showing that independent extra sketches
  collapse the kernel and surrender the weights.

Bound experiments run on real-valued uniform masks, matching the
analysis they verify; sketch algebra runs exactly, over rationals for
rank/kernel and in the ring for the stacking solve (provider replies
are ring values, so wraparound is part of the observable).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DimTooLarge, TrivialKernel
from .prg import PrgKey
from .ring import QuantParams, RingMatrix, ring_matmul


# --- theorem bound and exact TV ------------------------------------------------


def tv_bound(e1, e2, lam: float) -> float:
    """Upper bound on optimal distinguishing success: 1/2 + 1/2 min(||d||_1/lam, 1)."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    l1 = float(np.sum(np.abs(np.asarray(e1, dtype=np.float64) - np.asarray(e2, dtype=np.float64))))
    return 0.5 + 0.5 * min(l1 / lam, 1.0)


def tv_box_closed_form(delta, lam: float) -> float:
    """Exact TV of two width-lam uniform boxes shifted by delta:
    1 - prod_i max(1 - |delta_i|/lam, 0)."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    a = np.abs(np.asarray(delta, dtype=np.float64)) / lam
    return float(1.0 - np.prod(np.maximum(1.0 - a, 0.0)))


def tv_exact_small(e1, e2, lam: float, grid: int = 201) -> float:
    """Grid integration of (1/2) * integral |p1 - p2| in up to 3 dimensions."""
    e1 = np.asarray(e1, dtype=np.float64).ravel()
    e2 = np.asarray(e2, dtype=np.float64).ravel()
    n = e1.size
    if n > 3:
        raise DimTooLarge(f"grid integration supports dim <= 3, got {n}")
    axes = []
    for i in range(n):
        lo = min(e1[i], e2[i]) - lam / 2
        hi = max(e1[i], e2[i]) + lam / 2
        # midpoint rule: cell centres, uniform width
        edges = np.linspace(lo, hi, grid + 1)
        axes.append(((edges[:-1] + edges[1:]) / 2, (hi - lo) / grid))
    mesh = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    cell = float(np.prod([a[1] for a in axes]))
    dens1 = np.ones_like(mesh[0])
    dens2 = np.ones_like(mesh[0])
    for i in range(n):
        dens1 = dens1 * (np.abs(mesh[i] - e1[i]) <= lam / 2)
        dens2 = dens2 * (np.abs(mesh[i] - e2[i]) <= lam / 2)
    dens1 = dens1 / lam**n
    dens2 = dens2 / lam**n
    return float(0.5 * np.sum(np.abs(dens1 - dens2)) * cell)


# --- the distinguishing game ----------------------------------------------------


@dataclass(frozen=True)
class GameConfig:
    e1: np.ndarray
    e2: np.ndarray
    lam: float
    trials: int = 1_000_000
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "e1", np.asarray(self.e1, dtype=np.float64).ravel())
        object.__setattr__(self, "e2", np.asarray(self.e2, dtype=np.float64).ravel())
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.trials < 1:
            raise ValueError("need at least one trial")
        if self.e1.shape != self.e2.shape:
            raise ValueError("candidate inputs must have equal shape")


@dataclass(frozen=True)
class BoundReport:
    norm_ratio: float
    bound: float
    empirical: float
    stderr: float
    trials: int
    exact_tv: float

    @property
    def passed(self) -> bool:
        return self.empirical <= self.bound + 3.0 * self.stderr


def run_distinguishing_game(cfg: GameConfig, chunk: int = 200_000) -> BoundReport:
    """Monte-Carlo success rate of the Bayes-optimal box adversary.

    Each trial: flip a fair bit b, mask e_b with iid Unif[-lam/2, lam/2]
    coordinates, reveal the sum.  The optimal rule picks the candidate
    whose shifted box contains the observation; when both do, the
    likelihoods are equal and it flips a fair coin.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.e1.size
    half = cfg.lam / 2
    eps = 1e-12 * max(1.0, abs(half))
    wins = 0
    left = cfg.trials
    while left > 0:
        t = min(chunk, left)
        b = rng.integers(0, 2, size=t)
        masks = rng.uniform(-half, half, size=(t, n))
        ehat = np.where(b[:, None] == 0, cfg.e1[None, :], cfg.e2[None, :]) + masks
        in1 = np.all(np.abs(ehat - cfg.e1[None, :]) <= half + eps, axis=1)
        in2 = np.all(np.abs(ehat - cfg.e2[None, :]) <= half + eps, axis=1)
        coin = rng.integers(0, 2, size=t)
        guess = np.where(in1 & ~in2, 0, np.where(in2 & ~in1, 1, coin))
        wins += int(np.sum(guess == b))
        left -= t
    empirical = wins / cfg.trials
    stderr = float(np.sqrt(max(empirical * (1.0 - empirical), 1e-12) / cfg.trials))
    l1 = float(np.sum(np.abs(cfg.e1 - cfg.e2)))
    return BoundReport(
        norm_ratio=l1 / cfg.lam,
        bound=tv_bound(cfg.e1, cfg.e2, cfg.lam),
        empirical=empirical,
        stderr=stderr,
        trials=cfg.trials,
        exact_tv=tv_box_closed_form(cfg.e1 - cfg.e2, cfg.lam),
    )


# --- exact rational sketch algebra ----------------------------------------------


def _exact_entries(m: RingMatrix, extra_scale: int = 0) -> list[list[Fraction]]:
    """Dequantize to exact rationals: signed(v) / 2^(f + extra_scale)."""
    den = 1 << (m.params.f + extra_scale)
    signed = m.signed()
    return [[Fraction(int(v), den) for v in row] for row in signed]


def _rref(rows: list[list[Fraction]]) -> tuple[list[list[Fraction]], list[int]]:
    """In-place reduced row echelon form; returns (rows, pivot columns)."""
    n_rows = len(rows)
    n_cols = len(rows[0]) if n_rows else 0
    pivots: list[int] = []
    r = 0
    for c in range(n_cols):
        pivot_row = next((i for i in range(r, n_rows) if rows[i][c] != 0), None)
        if pivot_row is None:
            continue
        rows[r], rows[pivot_row] = rows[pivot_row], rows[r]
        inv = rows[r][c]
        rows[r] = [v / inv for v in rows[r]]
        for i in range(n_rows):
            if i != r and rows[i][c] != 0:
                factor = rows[i][c]
                rows[i] = [a - factor * b for a, b in zip(rows[i], rows[r])]
        pivots.append(c)
        r += 1
        if r == n_rows:
            break
    return rows, pivots


def _kernel_basis(rref: list[list[Fraction]], pivots: list[int], n_cols: int) -> list[list[Fraction]]:
    free = [c for c in range(n_cols) if c not in pivots]
    basis = []
    for fc in free:
        vec = [Fraction(0)] * n_cols
        vec[fc] = Fraction(1)
        for i, pc in enumerate(pivots):
            vec[pc] = -rref[i][fc]
        basis.append(vec)
    return basis


@dataclass
class SolutionSpace:
    """Everything a curious client can pin down from one sketch."""

    m_pub: RingMatrix
    r_pub: RingMatrix | None
    rank: int
    kernel: list[list[Fraction]]
    particular: list[list[Fraction]] | None = None  # d x d_out, exact

    @property
    def kernel_dim(self) -> int:
        return len(self.kernel)


def kernel_analysis(m_pub: RingMatrix) -> SolutionSpace:
    """Exact rank and right-kernel basis of a public base over the rationals."""
    rows = _exact_entries(m_pub)
    rref, pivots = _rref([row[:] for row in rows])
    return SolutionSpace(
        m_pub=m_pub,
        r_pub=None,
        rank=len(pivots),
        kernel=_kernel_basis(rref, pivots, m_pub.cols),
    )


def _particular_solution(
    m_rows: list[list[Fraction]], r_rows: list[list[Fraction]]
) -> list[list[Fraction]]:
    """One exact solution W0 of M W0 = R (free variables set to zero)."""
    d_out = len(r_rows[0])
    aug = [m + r for m, r in zip(m_rows, r_rows)]
    rref, pivots = _rref(aug)
    d = len(m_rows[0])
    pivots = [p for p in pivots if p < d]
    w0 = [[Fraction(0)] * d_out for _ in range(d)]
    for i, pc in enumerate(pivots):
        for j in range(d_out):
            w0[pc][j] = rref[i][d + j]
    return w0


def enumerate_consistent_weights(
    m_pub: RingMatrix, r_pub: RingMatrix, count: int
) -> tuple[SolutionSpace, list[list[list[Fraction]]]]:
    """`count` pairwise-distinct exact solutions of M_pub W' = R_pub, none equal to W0.

    The pool is the raw ring product (scale 2f), so it dequantizes with
    the doubled denominator.  Construction is exact, hence every
    candidate's residual is identically zero.
    """
    space = kernel_analysis(m_pub)
    if space.kernel_dim == 0:
        raise TrivialKernel("public base has full column rank; no free directions")
    m_rows = _exact_entries(m_pub)
    r_rows = _exact_entries(r_pub, extra_scale=r_pub.params.f)
    w0 = _particular_solution(m_rows, r_rows)
    space.r_pub = r_pub
    space.particular = w0
    d_out = len(r_rows[0])
    candidates = []
    nb = len(space.kernel)
    for i in range(count):
        vec = space.kernel[i % nb]
        scale = Fraction(i // nb + 1)
        col = i % d_out
        w = [row[:] for row in w0]
        for r_idx in range(len(vec)):
            w[r_idx][col] += scale * vec[r_idx]
        candidates.append(w)
    return space, candidates


def residual_inf(m_pub: RingMatrix, w: list[list[Fraction]], r_pub: RingMatrix) -> float:
    """max |M_pub @ W - R_pub| evaluated in exact rational arithmetic."""
    m_rows = _exact_entries(m_pub)
    r_rows = _exact_entries(r_pub, extra_scale=r_pub.params.f)
    worst = Fraction(0)
    d = len(w)
    for i, mrow in enumerate(m_rows):
        for j in range(len(r_rows[0])):
            acc = sum(mrow[t] * w[t][j] for t in range(d)) - r_rows[i][j]
            worst = max(worst, abs(acc))
    return float(worst)


# --- sketch stacking (why re-issue is refused) -----------------------------------


def forge_sketch(
    seed: int, tag, weight: RingMatrix, m: int, params: QuantParams
) -> tuple[RingMatrix, RingMatrix]:
    """Rule-violating bypass: mint an extra (base, pool) pair straight from W.

    Only tests and the privacy demo may call this; the protocol path
    refuses a second base per op precisely because of what
    stacking_attack_demo shows.
    """
    base = PrgKey.from_int(seed).ring_matrix(m, weight.rows, params, "forged-sketch", tag)
    return base, ring_matmul(base, weight)


def _solve_mod_2k(
    a_rows: list[list[int]], b_rows: list[list[int]], k: int
) -> list[list[int]] | None:
    """Unique solution X of A X = B mod 2^k, or None when elimination
    cannot find a unit (odd) pivot for every column."""
    mod = 1 << k
    n_rows = len(a_rows)
    if n_rows == 0:
        return None
    d = len(a_rows[0])
    d_out = len(b_rows[0])
    aug = [[v % mod for v in a_rows[i]] + [v % mod for v in b_rows[i]] for i in range(n_rows)]
    width = d + d_out
    pivot_rows: list[int] = []
    r = 0
    for c in range(d):
        pr = next((i for i in range(r, n_rows) if aug[i][c] % 2 == 1), None)
        if pr is None:
            return None
        aug[r], aug[pr] = aug[pr], aug[r]
        inv = pow(aug[r][c], -1, mod)
        aug[r] = [(v * inv) % mod for v in aug[r]]
        for i in range(n_rows):
            if i != r and aug[i][c] != 0:
                factor = aug[i][c]
                aug[i] = [(a - factor * b) % mod for a, b in zip(aug[i], aug[r])]
        pivot_rows.append(r)
        r += 1
    # leftover rows must be consistent (0 = 0) when a solution exists
    for i in range(r, n_rows):
        if any(v != 0 for v in aug[i]):
            return None
    x = [[0] * d_out for _ in range(d)]
    for row, c in zip(pivot_rows, range(d)):
        x[c] = aug[row][d:width]
    return x


@dataclass(frozen=True)
class StackingReport:
    recovered: bool
    sketches: int
    stacked_rows: int
    max_abs_err: float | None  # dequantized weight-scale error when solvable

    @property
    def unique_solution(self) -> bool:
        return self.max_abs_err is not None


def stacking_attack_demo(
    sketches: list[tuple[RingMatrix, RingMatrix]], true_w: RingMatrix, tol: float = 1e-6
) -> StackingReport:
    """Stack (base, pool) pairs for one weight matrix and try to solve for it.

    A single m < d sketch is underdetermined and never recovers the
    weights; enough independent sketches make the stacked system full
    rank and hand them over exactly.  The solve runs in the ring because
    pools are ring values.
    """
    a_rows: list[list[int]] = []
    b_rows: list[list[int]] = []
    for base, pool in sketches:
        a_rows.extend(base.to_ints())
        b_rows.extend(pool.to_ints())
    k = true_w.params.k
    d = true_w.rows
    if len(a_rows) < d:
        return StackingReport(False, len(sketches), len(a_rows), None)
    x = _solve_mod_2k(a_rows, b_rows, k)
    if x is None:
        return StackingReport(False, len(sketches), len(a_rows), None)
    solved = RingMatrix.from_ints(x, true_w.params)
    diff = (solved.signed().astype(np.float64) - true_w.signed().astype(np.float64))
    err = float(np.max(np.abs(diff))) / true_w.params.scale
    return StackingReport(err <= tol, len(sketches), len(a_rows), err)
