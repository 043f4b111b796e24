"""Linear probe, classification metrics, flat K-means and the false-negative pair audit."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import log_softmax, softmax


# -- metrics ------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, n_classes: Optional[int] = None) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    c = n_classes or int(max(y_true.max(), y_pred.max())) + 1
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    kappa: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d


def _ratio(num, den) -> Fraction:
    return Fraction(int(num), int(den)) if den else Fraction(0)


def metrics_from_confusion(cm, exact: bool = False):
    """(accuracy, macro F1, Cohen's kappa) of a rows=true, cols=predicted count matrix.

    Computed in rational arithmetic; ``exact=True`` returns the Fractions.
    """
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    if n == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    acc = Fraction(int(tp.sum()), n)
    f1s = []
    for c in range(cm.shape[0]):
        p = _ratio(tp[c], cols[c])
        r = _ratio(tp[c], rows[c])
        f1s.append(2 * p * r / (p + r) if p + r else Fraction(0))
    mf1 = sum(f1s, Fraction(0)) / len(f1s)
    pe = Fraction(int(np.dot(rows, cols)), n * n)
    kappa = (acc - pe) / (1 - pe) if pe != 1 else Fraction(1 if acc == 1 else 0)
    if exact:
        return acc, mf1, kappa
    return float(acc), float(mf1), float(kappa)


# -- linear probe ----------------------------------------------------------------------


class LinearClassifier(NamedTuple):
    weight: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weight.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def linear_probe_train(x, y, epochs: int = 500, lr: float = 0.5, seed: int = 0, n_classes: Optional[int] = None) -> LinearClassifier:
    """Multinomial logistic regression by full-batch gradient descent."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("linear probe needs at least two classes")
    c = n_classes or int(y.max()) + 1
    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal((c, x.shape[1]))
    b = np.zeros(c)
    onehot = np.eye(c)[y]
    n = len(y)
    for _ in range(epochs):
        delta = (softmax(x @ w.T + b, axis=1) - onehot) / n
        w = w - lr * (delta.T @ x)
        b = b - lr * delta.sum(axis=0)
    return LinearClassifier(w, b)


def probe_loss(clf: LinearClassifier, x, y) -> float:
    return float(-log_softmax(clf.logits(x), axis=1)[np.arange(len(y)), y].mean())


def evaluate(clf: LinearClassifier, x, y, n_classes: Optional[int] = None) -> MetricsReport:
    y = np.asarray(y)
    pred = clf.predict(x)
    cm = confusion_matrix(y, pred, n_classes or clf.weight.shape[0])
    acc, mf1, kappa = metrics_from_confusion(cm)
    return MetricsReport(acc, mf1, kappa, cm)


# -- k-means --------------------------------------------------------------------------


class KMeansResult(NamedTuple):
    labels: np.ndarray
    centers: np.ndarray
    inertia: list


def _farthest(points, centers) -> int:
    return int(np.argmax(cdist(points, centers, "sqeuclidean").min(axis=1)))


def kmeans(points, k: int, iters: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm from a seeded farthest-point initialisation."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(n)]]
    for _ in range(k - 1):
        centers.append(x[_farthest(x, np.array(centers))])
    centers = np.array(centers)
    labels = None
    inertia = []
    for _ in range(iters):
        d = cdist(x, centers, "sqeuclidean")
        new = np.argmin(d, axis=1)
        inertia.append(float(d[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(d[np.arange(n), labels]))
                centers[c] = x[far]
                labels[far] = c
    d = cdist(x, centers, "sqeuclidean")
    labels = np.argmin(d, axis=1)
    return KMeansResult(labels, centers, inertia)


# -- false pair audit -------------------------------------------------------------------


@dataclass
class AuditReport:
    total_instance_negatives: int
    false_instance_negatives: int
    total_cluster_negatives: int
    false_cluster_negatives: int
    baseline_total_instance_negatives: int
    baseline_false_instance_negatives: int
    baseline_total_cluster_negatives: int
    baseline_false_cluster_negatives: int
    instance_reduction: Optional[float]
    cluster_reduction: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def majority_labels(cluster_of: np.ndarray, labels: np.ndarray) -> dict:
    """Most frequent ground-truth label per cluster (ties -> smallest label)."""
    out = {}
    for k in np.unique(cluster_of):
        counts = Counter(labels[cluster_of == k].tolist())
        best = max(counts.values())
        out[int(k)] = min(lab for lab, c in counts.items() if c == best)
    return out


def count_false_negatives(decisions, labels, assignments) -> tuple[int, int, int, int]:
    """(instance total, instance false, cluster total, cluster false) over negative decisions."""
    labels = np.asarray(labels)
    majority = {p: majority_labels(np.asarray(a), labels) for p, a in assignments.items()}
    it = i_false = ct = c_false = 0
    for d in decisions:
        if d.role != "neg":
            continue
        if d.kind == "instance":
            it += 1
            i_false += int(labels[d.anchor_id] == labels[d.counterpart_id])
        else:
            ct += 1
            if d.partition not in majority:
                raise ValueError(f"no cluster assignments for partition {d.partition}")
            c_false += int(labels[d.anchor_id] == majority[d.partition][d.counterpart_id])
    return it, i_false, ct, c_false


def _reduction(false, total, b_false, b_total) -> Optional[float]:
    if not b_total or not b_false:
        return None
    rate = false / total if total else 0.0
    return 1.0 - rate / (b_false / b_total)


def false_pair_audit(decisions, labels, assignments, baseline_decisions, baseline_assignments) -> AuditReport:
    """Count negative pairs whose members share a ground-truth class, against a baseline pairing.

    ``assignments`` maps partition index to the per-instance cluster ids used
    to resolve prototype counterparts to their cluster's majority label.
    """
    if labels is None:
        raise ValueError("false pair audit needs ground-truth labels")
    ours = count_false_negatives(decisions, labels, assignments)
    base = count_false_negatives(baseline_decisions, labels, baseline_assignments)
    return AuditReport(
        *ours,
        *base,
        instance_reduction=_reduction(ours[1], ours[0], base[1], base[0]),
        cluster_reduction=_reduction(ours[3], ours[2], base[3], base[2]),
    )
