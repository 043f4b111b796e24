"""Instance-level and cluster-level contrastive pair construction.

Instance-level pairs are built inside a minibatch from bottom-partition
labels.  Cluster-level pairs are drawn from the hierarchy's refined
prototypes, with downward masking: clusters that share the anchor cluster's
parent at the next partition count as positives, not negatives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .hclust import ClusterHierarchy

VIEW_A, VIEW_B = 0, 1


@dataclass
class InstancePairSet:
    """Slots follow the alternating layout: slot 1 and even slots use view b, other odd slots view a.

    Indices are batch positions.  The anchor's own view-b embedding fills
    slot 1 and 2 and every positive shortfall slot.
    """

    anchor: int
    pos_index: np.ndarray
    pos_view: np.ndarray
    neg_index: np.ndarray
    neg_view: np.ndarray
    degenerate: bool = False


@dataclass
class PartitionPairs:
    partition: int
    positives: list  # (partition, cluster id) references into refined prototypes
    negatives: list


@dataclass
class ClusterPairSet:
    anchor: int
    levels: list = field(default_factory=list)


def _take(rng: np.random.Generator, pool: np.ndarray, count: int, replace_on_shortfall: bool) -> np.ndarray:
    if count <= 0 or pool.size == 0:
        return pool[:0]
    if pool.size >= count:
        return rng.choice(pool, size=count, replace=False)
    if replace_on_shortfall:
        return rng.choice(pool, size=count, replace=True)
    return rng.permutation(pool)


def _slot_views(n_candidates: int) -> np.ndarray:
    views = np.full(2 * n_candidates, VIEW_B)
    views[2::2] = VIEW_A  # 1-based odd slots 3, 5, ...
    return views


def instance_pairs(
    batch_labels: np.ndarray,
    s_pos: int,
    s_neg: int,
    rng: np.random.Generator,
    parent_labels: Optional[np.ndarray] = None,
) -> list[InstancePairSet]:
    """Pair sets for every anchor of a batch.

    ``batch_labels`` are the bottom-partition labels of the batch members.
    With ``parent_labels`` (their labels at the next partition up), instances
    sharing the anchor's parent cluster are also kept out of the negative
    pool, unless that would leave no negative at all.
    """
    if s_pos < 1 or s_neg < 1:
        raise ValueError("S_pos and S_neg must be >= 1")
    batch_labels = np.asarray(batch_labels)
    b = batch_labels.size
    out = []
    for i in range(b):
        same = np.flatnonzero(batch_labels == batch_labels[i])
        same = same[same != i]
        extra = _take(rng, same, s_pos - 1, replace_on_shortfall=False)
        pos_index = np.full(2 * s_pos, i)
        pos_view = _slot_views(s_pos)
        for j, k in enumerate(extra, start=1):
            pos_index[2 * j : 2 * j + 2] = k
        # shortfall slots hold the anchor's own view b
        pos_view[2 * (1 + extra.size) :] = VIEW_B
        pool = np.flatnonzero(batch_labels != batch_labels[i])
        if parent_labels is not None:
            narrowed = np.flatnonzero(parent_labels != parent_labels[i])
            if narrowed.size:
                pool = narrowed
        if pool.size == 0:
            empty = np.zeros(0, dtype=np.int64)
            out.append(InstancePairSet(i, pos_index, pos_view, empty, empty, degenerate=True))
            continue
        negs = _take(rng, pool, s_neg, replace_on_shortfall=True)
        out.append(InstancePairSet(i, pos_index, pos_view, np.repeat(negs, 2), np.tile([VIEW_A, VIEW_B], s_neg)))
    return out


def cluster_pairs(
    h: ClusterHierarchy,
    anchor: int,
    h_pos: int,
    h_neg: int,
    m_used: int,
    rng: np.random.Generator,
    downward: bool = True,
    mask_level: Optional[int] = None,
) -> ClusterPairSet:
    """Prototype pairs for one anchor (an instance index into the hierarchy) at each used partition.

    ``mask_level`` widens the negative mask: at partition p, clusters sharing
    the anchor's ancestor at ``max(p + 1, mask_level)`` are not negatives
    (they are not promoted to positives either).  Falls back to the sibling
    rule when that leaves no negative.
    """
    if h_pos < 1 or h_neg < 1:
        raise ValueError("H_pos and H_neg must be >= 1")
    result = ClusterPairSet(anchor)
    for p in range(1, min(m_used, h.M) + 1):
        part = h.partitions[p - 1]
        if part.K < 2:
            continue
        own = int(h.instance_labels(p)[anchor])
        others = np.array([k for k in range(part.K) if k != own], dtype=np.int64)
        sibling_refs: list = []
        if downward and part.parent_of_cluster is not None:
            parent = part.parent_of_cluster
            siblings = others[parent[others] == parent[own]]
            others = others[parent[others] != parent[own]]
            sibling_refs = [(p, int(k)) for k in siblings]
            if mask_level is not None and max(p + 1, mask_level) <= h.M:
                anc = h.ancestors(p, max(p + 1, mask_level))
                narrowed = others[anc[others] != anc[own]]
                if narrowed.size:
                    others = narrowed
            if p < h.M:
                sibling_refs.append((p + 1, int(parent[own])))
        positives = [(p, own)]
        if sibling_refs:
            picks = _take(rng, np.arange(len(sibling_refs)), h_pos - 1, replace_on_shortfall=False)
            positives += [sibling_refs[j] for j in picks]
        positives += [(p, own)] * (h_pos - len(positives))
        negatives = [(p, int(k)) for k in _take(rng, others, h_neg, replace_on_shortfall=True)]
        result.levels.append(PartitionPairs(p, positives, negatives))
    return result


def prototype(h: ClusterHierarchy, ref) -> np.ndarray:
    p, k = ref
    return h.partitions[p - 1].prototypes_refined[k]


class PairDecision(NamedTuple):
    anchor_id: int
    kind: str  # "instance" | "prototype"
    counterpart_id: int
    role: str  # "pos" | "neg"
    partition: int


def decisions_from_pairs(batch_ids: np.ndarray, inst: list, clus: list) -> list[PairDecision]:
    """Flatten pair sets into audit records; instance counterparts collapse to one record per member."""
    out = []
    for ps in inst:
        anchor = int(batch_ids[ps.anchor])
        for k in np.unique(ps.pos_index):
            if k != ps.anchor:
                out.append(PairDecision(anchor, "instance", int(batch_ids[k]), "pos", 1))
        for k in ps.neg_index[::2]:
            out.append(PairDecision(anchor, "instance", int(batch_ids[k]), "neg", 1))
    for cs in clus:
        for lvl in cs.levels:
            for p, k in lvl.positives[1:]:
                if (p, k) == lvl.positives[0]:
                    continue
                out.append(PairDecision(cs.anchor, "prototype", k, "pos", p))
            for p, k in lvl.negatives:
                out.append(PairDecision(cs.anchor, "prototype", k, "neg", p))
    return out
