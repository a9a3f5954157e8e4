"""Agreement between predicted and ground-truth window labels."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .clusters import ClusterMap
from .errors import GridMismatch


@dataclass
class EvaluationReport:
    misclassification: float
    swapped: bool
    precision: dict
    recall: dict
    rand_index: float
    n_clusters: int
    confusion: dict
    n_windows: int

    def to_dict(self):
        return asdict(self)


def _ratio(num, den):
    return None if den == 0 else num / den


def rand_index(a, b) -> float:
    """Fraction of window pairs on which two partitions agree."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = len(a)
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(v):
        v = np.asarray(v, dtype=np.float64)
        return float(np.sum(v * (v - 1) / 2))

    total = n * (n - 1) / 2
    same_both = pairs(table)
    same_a = pairs(table.sum(axis=1))
    same_b = pairs(table.sum(axis=0))
    return (total + 2 * same_both - same_a - same_b) / total


def align(pred: ClusterMap, truth: ClusterMap):
    """Truth labels and anomaly mask at the predicted windows."""
    if tuple(pred.grid_dims) != tuple(truth.grid_dims):
        raise GridMismatch(f"window grids differ: {pred.grid_dims} vs {truth.grid_dims}")
    index = {tuple(c): i for i, c in enumerate(truth.coords)}
    try:
        rows = np.array([index[tuple(c)] for c in pred.coords], dtype=int)
    except KeyError as exc:
        raise GridMismatch(f"predicted window {exc.args[0]} missing from ground truth") from None
    return truth.labels[rows], truth.anomaly_mask[rows]


def evaluate(pred: ClusterMap, truth: ClusterMap) -> EvaluationReport:
    """Binary anomaly-mask comparison after choosing the better of the
    direct and swapped matching, plus the multi-cluster Rand index."""
    truth_labels, t = align(pred, truth)
    p = pred.anomaly_mask
    n = len(p)
    errors = int(np.sum(p != t))
    swapped = n - errors < errors
    if swapped:
        p = ~p
        errors = n - errors
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    return EvaluationReport(
        misclassification=errors / n if n else 0.0,
        swapped=bool(swapped),
        precision={"anomaly": _ratio(tp, tp + fp), "normal": _ratio(tn, tn + fn)},
        recall={"anomaly": _ratio(tp, tp + fn), "normal": _ratio(tn, tn + fp)},
        rand_index=rand_index(pred.labels, truth_labels),
        n_clusters=pred.n_clusters,
        confusion={"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        n_windows=n,
    )
