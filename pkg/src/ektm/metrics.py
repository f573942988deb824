"""AUC and LogLoss, plus per-task evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedMetricError
from .objectives import PROB_EPS


def auc(scores, labels, strict_ties=False) -> float:
    """Probability that a random positive outranks a random negative.

    Rank-sum (Mann-Whitney) form, O(n log n). Tied positive/negative pairs
    count one half, or zero with ``strict_ties``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"auc: {s.size} scores vs {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs at least one positive and one negative")

    order = np.argsort(s, kind="mergesort")
    ranked = s[order]
    # average 1-based rank over each run of equal scores
    _, start, counts = np.unique(ranked, return_index=True, return_counts=True)
    avg = start + (counts + 1) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(avg, counts)
    # integer arithmetic on doubled ranks keeps the sum exact
    doubled = int(np.rint(2 * ranks[pos]).astype(np.int64).sum())
    u2 = doubled - n_pos * (n_pos + 1)  # 2 * U
    if strict_ties:
        u2 -= _tied_pairs(ranked, order, pos)
    return u2 / (2 * n_pos * n_neg)


def _tied_pairs(ranked, order, pos):
    """Number of tied (positive, negative) pairs."""
    p = pos[order].astype(np.int64)
    _, inverse = np.unique(ranked, return_inverse=True)
    pos_per = np.bincount(inverse, weights=p).astype(np.int64)
    all_per = np.bincount(inverse).astype(np.int64)
    return int((pos_per * (all_per - pos_per)).sum())


def auc_bruteforce(scores, labels, strict_ties=False) -> float:
    """O(n^2) pair enumeration; reference implementation."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    p, n = s[y == 1], s[y != 1]
    if p.size == 0 or n.size == 0:
        raise UndefinedMetricError("auc needs at least one positive and one negative")
    wins = 0
    ties = 0
    for a in p:
        wins += int(np.count_nonzero(a > n))
        ties += int(np.count_nonzero(a == n))
    num2 = 2 * wins + (0 if strict_ties else ties)
    return num2 / (2 * p.size * n.size)


def logloss(scores, labels) -> float:
    """Mean binary cross-entropy; same clamp as the training loss."""
    p = np.clip(np.asarray(scores, dtype=np.float64).ravel(), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"logloss: {p.size} scores vs {y.size} labels")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


@dataclass
class TaskMetrics:
    task: str
    auc: float | None
    logloss: float | None
    positives: int
    negatives: int
    path: str = "original"
    mse: float | None = None


@dataclass
class EvalReport:
    tasks: list = field(default_factory=list)

    def __getitem__(self, name) -> TaskMetrics:
        for t in self.tasks:
            if t.task == name:
                return t
        raise KeyError(name)

    def rows(self):
        for t in self.tasks:
            yield t.task, "auc", t.auc
            yield t.task, "logloss", t.logloss
            if t.mse is not None:
                yield t.task, "mse", t.mse
            yield t.task, "positives", t.positives
            yield t.task, "negatives", t.negatives
            yield t.task, "path", t.path

    def to_tsv(self) -> str:
        return "".join(f"{task}\t{metric}\t{format_value(v)}\n" for task, metric, v in self.rows())


def format_value(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.6f}"


def score_binary(task, scores, labels, path="original", strict_ties=False) -> TaskMetrics:
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    try:
        a = auc(scores, labels, strict_ties)
    except UndefinedMetricError:
        a = None
    ll = logloss(scores, labels) if labels.size else None
    return TaskMetrics(task, a, ll, n_pos, int(labels.size - n_pos), path)
