"""Multi-positive sigmoid binary cross-entropy contrastive losses.

Each positive pair contributes ``-log sigmoid(sim / tau)`` and each negative
pair ``-log(1 - sigmoid(sim / tau))``, with cosine similarity.  Gradients are
returned only for query-encoder (view a) embeddings; momentum-encoder
embeddings and prototypes are treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .pairsel import VIEW_A, ClusterPairSet, InstancePairSet, prototype


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    s_pos: int = 3
    s_neg: int = 8
    h_pos: int = 3
    h_neg: int = 8
    m_used: int = 3

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        for name in ("s_pos", "s_neg", "h_pos", "h_neg", "m_used"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class LossBreakdown:
    total: float
    instance_part: float
    cluster_part: float
    per_anchor: np.ndarray
    grad_wrt_embeddings: np.ndarray


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def _sim_and_grads(a: np.ndarray, us: np.ndarray):
    """Cosine similarities of ``a`` with each row of ``us`` and their partial derivatives."""
    na = np.linalg.norm(a)
    nu = np.linalg.norm(us, axis=1)
    if na == 0 or np.any(nu == 0):
        raise ValueError("cosine similarity of a zero vector")
    ah, uh = a / na, us / nu[:, None]
    s = uh @ ah
    d_a = (uh - s[:, None] * ah) / na
    d_u = (ah[None, :] - s[:, None] * uh) / nu[:, None]
    return s, d_a, d_u


def bce_terms(s: np.ndarray, positive: np.ndarray, tau: float):
    """Per-pair losses and their derivatives with respect to the similarity."""
    x = s / tau
    sign = np.where(positive, -1.0, 1.0)
    loss = np.logaddexp(0.0, sign * x)
    dloss = sign * expit(sign * x) / tau
    return loss, dloss


def instance_loss(pairs: InstancePairSet, za: np.ndarray, hb: np.ndarray, tau: float):
    """Loss for one anchor and its gradient over the rows of ``za`` (shape of ``za``)."""
    grad = np.zeros(za.shape, dtype=np.float64)
    if pairs.degenerate:
        return 0.0, grad
    idx = np.concatenate([pairs.pos_index, pairs.neg_index])
    view = np.concatenate([pairs.pos_view, pairs.neg_view])
    positive = np.arange(idx.size) < pairs.pos_index.size
    us = np.where((view == VIEW_A)[:, None], za[idx], hb[idx]).astype(np.float64)
    a = za[pairs.anchor].astype(np.float64)
    s, d_a, d_u = _sim_and_grads(a, us)
    loss, dl = bce_terms(s, positive, tau)
    grad[pairs.anchor] += dl @ d_a
    from_a = view == VIEW_A
    np.add.at(grad, idx[from_a], dl[from_a, None] * d_u[from_a])
    return float(loss.sum()), grad


def cluster_loss(pairs: ClusterPairSet, anchor_vec: np.ndarray, h, tau: float):
    """Mean over contributing partitions of the per-partition prototype loss; gradient w.r.t. the anchor."""
    a = np.asarray(anchor_vec, dtype=np.float64)
    grad = np.zeros_like(a)
    total, used = 0.0, 0
    for lvl in pairs.levels:
        refs = lvl.positives + lvl.negatives
        if not refs:
            continue
        us = np.stack([prototype(h, r) for r in refs])
        positive = np.arange(len(refs)) < len(lvl.positives)
        s, d_a, _ = _sim_and_grads(a, us)
        loss, dl = bce_terms(s, positive, tau)
        total += loss.sum()
        grad += dl @ d_a
        used += 1
    if used == 0:
        return 0.0, grad
    return float(total / used), grad / used


def overall_loss(za, hb, inst_pairs, clus_pairs, h, tau: float, anchor_rows=None) -> LossBreakdown:
    """Sum of instance and cluster losses over all anchors.

    ``clus_pairs[i]`` belongs to batch row ``anchor_rows[i]`` (default: i);
    either list may be empty to switch that level off.
    """
    za = np.asarray(za)
    b = za.shape[0]
    grad = np.zeros(za.shape, dtype=np.float64)
    per_anchor = np.zeros(b)
    ins_total = clu_total = 0.0
    for ps in inst_pairs:
        val, g = instance_loss(ps, za, hb, tau)
        ins_total += val
        per_anchor[ps.anchor] += val
        grad += g
    rows = range(len(clus_pairs)) if anchor_rows is None else anchor_rows
    for row, cs in zip(rows, clus_pairs):
        val, g = cluster_loss(cs, za[row], h, tau)
        clu_total += val
        per_anchor[row] += val
        grad[row] += g
    return LossBreakdown(ins_total + clu_total, ins_total, clu_total, per_anchor, grad)
