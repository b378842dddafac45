"""Token-reconstruction attack on provider-visible tensors, plus the TRA metric.

The attacker premise: intermediate rows cluster by the token that
produced them, so a nearest-centroid classifier trained on an 80% share
of traffic should recover tokens from the remaining 20%.  Against raw
rows this works almost perfectly at toy scale; against masked rows it
must collapse to chance (1/vocab), which is exactly what the masking is
supposed to buy.

`cosine_proxy` is a semantic-similarity stand-in computed from the
model's own embedding table (reports label it cosine-proxy, it is not a
sentence-encoder score).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyClass, LengthMismatch, TapUnavailable
from .ring import RingMatrix, dequantize


def make_corpus(
    n_prompts: int, length: int, vocab: int, seed: int, kind: str = "uniform"
) -> list[list[int]]:
    """Seeded synthetic prompts; uniform or Zipf(1.1) token frequencies."""
    rng = np.random.default_rng(seed)
    if kind == "uniform":
        draw = lambda: rng.integers(0, vocab, size=length)
    elif kind == "zipf":
        weights = 1.0 / np.arange(1, vocab + 1) ** 1.1
        weights /= weights.sum()
        draw = lambda: rng.choice(vocab, size=length, p=weights)
    else:
        raise ValueError(f"unknown corpus kind {kind!r}")
    return [[int(t) for t in draw()] for _ in range(n_prompts)]


class SessionTap:
    """Test-only wire tap: keeps the pre-mask row and the row actually sent."""

    def __init__(self, op_id: str):
        self.op_id = op_id
        self.rows: list[tuple[int, RingMatrix, RingMatrix]] = []

    def record(self, step: int, op_id: str, raw: RingMatrix, masked: RingMatrix) -> None:
        if op_id == self.op_id:
            self.rows.append((step, raw, masked))


@dataclass
class CollectedViews:
    """Per-position raw and masked rows with their true token labels."""

    op_id: str
    raw_rows: np.ndarray  # float64, positions x d
    masked_rows: np.ndarray
    labels: np.ndarray  # int token ids
    is_prompt: np.ndarray  # bool per position
    prompt_index: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def collect_views(enclave, transport, prompts: list[list[int]], op_id: str, max_new: int) -> CollectedViews:
    """Run every prompt through the protocol with a tap on one weighted op.

    Labels each captured row with the token fed at that step; the raw
    variant simulates an unprotected deployment, the masked variant is
    what an eavesdropping provider actually sees.
    """
    if not getattr(enclave, "tap_enabled", False):
        raise TapUnavailable("this enclave was built without tap instrumentation")
    raw, masked, labels, is_prompt, prompt_idx = [], [], [], [], []
    for pi, prompt in enumerate(prompts):
        tap = SessionTap(op_id)
        response = enclave.run_session(transport, prompt, max_new, tap=tap)
        fed = list(prompt) + response[:-1]
        for step, raw_m, masked_m in tap.rows:
            raw.append(dequantize(raw_m)[0])
            masked.append(dequantize(masked_m)[0])
            labels.append(fed[step])
            is_prompt.append(step < len(prompt))
            prompt_idx.append(pi)
    return CollectedViews(
        op_id=op_id,
        raw_rows=np.asarray(raw),
        masked_rows=np.asarray(masked),
        labels=np.asarray(labels, dtype=np.int64),
        is_prompt=np.asarray(is_prompt, dtype=bool),
        prompt_index=np.asarray(prompt_idx, dtype=np.int64),
    )


@dataclass
class AttackDataset:
    rows: np.ndarray
    labels: np.ndarray
    split: str = ""


def train_mask(views: CollectedViews, train_frac: float = 0.8, seed: int = 0) -> np.ndarray:
    """Boolean per-position mask selecting the training share, split at the prompt level."""
    n_prompts = int(views.prompt_index.max()) + 1 if len(views) else 0
    order = np.random.default_rng(seed).permutation(n_prompts)
    cut = int(round(train_frac * n_prompts))
    train_set = set(order[:cut].tolist())
    return np.array([pi in train_set for pi in views.prompt_index])


def split_views(
    views: CollectedViews, masked: bool, train_frac: float = 0.8, seed: int = 0
) -> tuple[AttackDataset, AttackDataset]:
    """Disjoint train/attack datasets, split at the prompt level."""
    rows = views.masked_rows if masked else views.raw_rows
    in_train = train_mask(views, train_frac, seed)
    return (
        AttackDataset(rows[in_train], views.labels[in_train], "train"),
        AttackDataset(rows[~in_train], views.labels[~in_train], "attack"),
    )


@dataclass
class CentroidModel:
    """Per-token mean vectors; defined only for token ids seen in training."""

    class_ids: np.ndarray  # sorted ascending
    centroids: np.ndarray  # len(class_ids) x d


def train_centroids(train: AttackDataset) -> CentroidModel:
    if len(train.labels) == 0:
        raise EmptyClass("training dataset is empty")
    class_ids = np.unique(train.labels)
    centroids = np.stack([train.rows[train.labels == c].mean(axis=0) for c in class_ids])
    return CentroidModel(class_ids=class_ids, centroids=centroids)


def predict(model: CentroidModel, rows: np.ndarray) -> np.ndarray:
    """Nearest centroid by Euclidean distance; ties resolve to the lowest id."""
    rows = np.atleast_2d(rows)
    # argmin over squared distances; class_ids ascending makes first-hit = lowest id
    d2 = (
        np.sum(rows * rows, axis=1, keepdims=True)
        - 2.0 * rows @ model.centroids.T
        + np.sum(model.centroids * model.centroids, axis=1)[None, :]
    )
    return model.class_ids[np.argmin(d2, axis=1)]


def tra(truth, guess) -> float:
    """Token reconstruction accuracy: fraction of exact positional matches."""
    t = np.asarray(truth)
    g = np.asarray(guess)
    if t.shape != g.shape:
        raise LengthMismatch(f"sequence lengths differ: {t.shape} vs {g.shape}")
    if t.size == 0:
        raise LengthMismatch("cannot score empty sequences")
    return float(np.mean(t == g))


def cosine_proxy(truth, guess, table: RingMatrix) -> float:
    """Mean per-position cosine between embedding rows of true and guessed tokens."""
    t = np.asarray(truth, dtype=np.int64)
    g = np.asarray(guess, dtype=np.int64)
    if t.shape != g.shape:
        raise LengthMismatch(f"sequence lengths differ: {t.shape} vs {g.shape}")
    emb = dequantize(table)
    tv = emb[t]
    gv = emb[g]
    num = np.sum(tv * gv, axis=1)
    den = np.linalg.norm(tv, axis=1) * np.linalg.norm(gv, axis=1)
    sims = np.where(den > 0, num / np.maximum(den, 1e-30), 0.0)
    return float(np.mean(sims))


@dataclass
class AttackReportRow:
    tap: str
    masked: bool
    positions: int
    tra: float
    cosine_proxy: float
    chance_level: float
    ci_low: float
    ci_high: float


@dataclass
class AttackReport:
    op_id: str
    vocab: int
    rows: list[AttackReportRow] = field(default_factory=list)
    pooled: dict = field(default_factory=dict)  # masked flag -> (tra, positions)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["tap", "masked", "positions", "tra", "cosine_proxy", "chance_level", "ci_low", "ci_high"]
            )
            for r in self.rows:
                w.writerow(
                    [r.tap, str(r.masked).lower(), r.positions, repr(r.tra), repr(r.cosine_proxy),
                     repr(r.chance_level), repr(r.ci_low), repr(r.ci_high)]
                )


def chance_ci(chance: float, n: int, z: float = 2.576) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    half = z * np.sqrt(chance * (1.0 - chance) / n)
    return float(chance - half), float(chance + half)


def run_attack_eval(
    views: CollectedViews,
    embedding: RingMatrix,
    vocab: int,
    train_frac: float = 0.8,
    seed: int = 0,
) -> AttackReport:
    """Centroid attack on raw and masked views, scored per position class.

    Attacked tokens whose id never occurred in training count as misses;
    the classifier only knows classes it has seen.
    """
    chance = 1.0 / vocab
    report = AttackReport(op_id=views.op_id, vocab=vocab)
    in_train = train_mask(views, train_frac, seed)
    is_prompt = views.is_prompt[~in_train]
    for masked in (False, True):
        train, attack = split_views(views, masked=masked, train_frac=train_frac, seed=seed)
        model = train_centroids(train)
        guesses = predict(model, attack.rows)
        for cls_name, sel in (("prompt", is_prompt), ("response", ~is_prompt)):
            n = int(np.sum(sel))
            if n == 0:
                continue
            lo, hi = chance_ci(chance, n)
            report.rows.append(
                AttackReportRow(
                    tap=f"{views.op_id}/{cls_name}",
                    masked=masked,
                    positions=n,
                    tra=tra(attack.labels[sel], guesses[sel]),
                    cosine_proxy=cosine_proxy(attack.labels[sel], guesses[sel], embedding),
                    chance_level=chance,
                    ci_low=lo,
                    ci_high=hi,
                )
            )
        report.pooled[masked] = (tra(attack.labels, guesses), len(attack.labels))
    return report
