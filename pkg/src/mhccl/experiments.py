"""Desk-scale experiment drivers shared by ``scripts/`` and the acceptance tests."""
from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .data import TimeSeriesDataset, apply_zscore, fit_zscore, make_blob_series, minibatches, split
from .evalmetrics import MetricsReport, evaluate, false_pair_audit, kmeans, linear_probe_train
from .hclust import build_hierarchy, flat_hierarchy
from .loss import LossConfig
from .pairsel import decisions_from_pairs
from .train import ClusterOptions, TrainConfig, embed, pretrain

# Small-data settings: batch reduced for ~200 training series, faster
# momentum encoder so 30 epochs matter, tau=1 and balanced pair counts
# (stable without normalization layers in the encoder).
SMALL_DATA = TrainConfig(
    epochs=30,
    batch_size=32,
    lr=0.005,
    m=0.99,
    loss=LossConfig(tau=1.0, s_pos=4, s_neg=4, h_pos=4, h_neg=4),
)

VARIANTS = {
    "full": {},
    "no_downward": {"cluster.downward": False},
    "no_hierarchy": {"cluster.hierarchical": False},
    "no_cluster_level": {"cluster_level": False},
    "no_instance_level": {"instance_level": False},
    "no_upward": {"mask.strategy": "none"},
}


def with_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Replace dotted-key fields of a nested config."""
    for key, val in overrides.items():
        head, _, rest = key.partition(".")
        if rest:
            cfg = dataclasses.replace(cfg, **{head: dataclasses.replace(getattr(cfg, head), **{rest: val})})
        else:
            cfg = dataclasses.replace(cfg, **{head: val})
    return cfg


def prepare_splits(ds: TimeSeriesDataset, cfg: TrainConfig, seed: int):
    """Split, then z-score every part with training-split statistics."""
    tr, va, te = split(ds, cfg.split.train_frac, cfg.split.val_frac, seed)
    mean, std = fit_zscore(tr)
    return tuple(apply_zscore(d, mean, std) for d in (tr, va, te))


def probe_report(params, tr, va, te, cfg: TrainConfig, n_classes: int) -> MetricsReport:
    """Linear probe on frozen embeddings: fit on train+val, report on test."""
    x = np.concatenate([embed(params, tr.data), embed(params, va.data)])
    y = np.concatenate([tr.labels, va.labels])
    clf = linear_probe_train(x, y, cfg.probe.epochs, cfg.probe.lr, cfg.seed, n_classes)
    return evaluate(clf, embed(params, te.data), te.labels, n_classes)


def pretrain_and_probe(ds: TimeSeriesDataset, cfg: TrainConfig, seed: int, out_dir=None):
    cfg = dataclasses.replace(cfg, seed=seed)
    tr, va, te = prepare_splits(ds, cfg, seed)
    state = pretrain(cfg, tr, out_dir)
    return probe_report(state.params_q, tr, va, te, cfg, ds.n_classes), state


def blob_dataset(seed: int = 0) -> TimeSeriesDataset:
    """The 3-class synthetic series used for the end-to-end checks (n=300, T=32, V=2)."""
    return make_blob_series(300, 3, 1, 32, 2, seed=seed)


# -- false negative audit ----------------------------------------------------------------


def hierarchical_blob_points(
    n: int = 600, seed: int = 0, dim: int = 8, n_classes: int = 6, depth: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Labelled point cloud whose classes come in well-separated pairs (``depth=2``).

    Classes are elongated and of unequal size, which is where a flat
    K-means with the true K tends to cut classes in pieces.
    """
    rng = np.random.default_rng(seed)
    sizes = np.resize([0.3, 0.1, 0.25, 0.1, 0.15, 0.1], n_classes)
    counts = np.floor(sizes / sizes.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    per_group = 2 if depth >= 2 else 1
    n_groups = -(-n_classes // per_group)
    group_centers = rng.standard_normal((n_groups, dim))
    group_centers *= 12.0 / np.linalg.norm(group_centers, axis=1, keepdims=True)
    pts, labels = [], []
    for c, cnt in enumerate(counts):
        axis = rng.standard_normal(dim)
        axis /= np.linalg.norm(axis)
        offset = rng.standard_normal(dim)
        offset *= (1.5 if per_group == 2 else 0.0) / np.linalg.norm(offset)
        t = rng.uniform(-3.0, 3.0, size=cnt)
        center = group_centers[c // per_group] + offset * (1 if c % 2 else -1)
        pts.append(center + t[:, None] * axis + 0.15 * rng.standard_normal((cnt, dim)))
        labels.append(np.full(cnt, c))
    x = np.concatenate(pts)
    x /= np.linalg.norm(x, axis=1, keepdims=True).max()
    return x, np.concatenate(labels)


def epoch_decisions(h, n: int, cfg: TrainConfig, seed: int):
    """Pair decisions for one epoch of batches over ``n`` instances, without any encoder."""
    from .train import batch_pairs

    rng = np.random.default_rng([seed, 99])
    dummy = TimeSeriesDataset(np.zeros((n, 1, 1), dtype=np.float32))
    out = []
    for b in minibatches(dummy, min(cfg.batch_size, n), True, seed):
        inst, clus = batch_pairs(cfg, h, b.indices, rng)
        out.extend(decisions_from_pairs(b.indices, inst, clus))
    return out


# On fixed, already-structured points the whole hierarchy is trustworthy, so
# negatives are masked by the topmost partition.  During training the default
# (next partition only) is kept: early embeddings make the top partition merge
# classes, and masking by it starves the instance-level negatives.
AUDIT = TrainConfig(batch_size=128, cluster=ClusterOptions(mask_level=0))


def pairing_decisions(points, labels, cfg: Optional[TrainConfig] = None, seed: int = 0, k: Optional[int] = None):
    """One epoch of pair decisions under MHCCL pairing and under flat K-means pairing.

    Returns ``(decisions, assignments, baseline_decisions, baseline_assignments)``
    where assignments map partition index to per-instance cluster ids.
    """
    cfg = cfg or AUDIT
    k = k or int(labels.max()) + 1
    h = build_hierarchy(points, cfg.mask)
    ours = epoch_decisions(h, len(points), cfg, seed)
    flat = flat_hierarchy(points, kmeans(points, k, seed=seed).labels)
    base = epoch_decisions(flat, len(points), with_overrides(cfg, {"cluster.downward": False}), seed)
    assignments = {p: h.instance_labels(p) for p in range(1, h.M + 1)}
    return ours, assignments, base, {1: flat.instance_labels(1)}


def audit_pairing(points, labels, cfg: Optional[TrainConfig] = None, seed: int = 0, k: Optional[int] = None):
    """MHCCL hierarchical pairing vs flat K-means pairing on the same points."""
    ours, assign, base, base_assign = pairing_decisions(points, labels, cfg, seed, k)
    return false_pair_audit(ours, labels, assign, base, base_assign)
