"""First-nearest-neighbour (FINCH-style) hierarchical clustering with upward masking.

Each level clusters a set of "level points": the input rows at the bottom,
then the refined prototypes of the level below.  Cluster ids inside a
partition are numbered by their smallest member index.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components as _cc
from scipy.spatial.distance import cdist

STRATEGIES = ("mask_threshold", "mask_proportion", "replace_prototypes", "none")


@dataclass(frozen=True)
class MaskConfig:
    strategy: str = "mask_threshold"
    parameter: float = 0.3
    apply_at: tuple = (1,)

    def __post_init__(self):
        object.__setattr__(self, "apply_at", tuple(sorted({int(p) for p in self.apply_at})))
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy: unknown masking strategy {self.strategy!r}")
        if self.strategy == "mask_threshold" and not self.parameter >= 0:
            raise ValueError("parameter: mask threshold must be >= 0")
        if self.strategy == "mask_proportion" and not 0 <= self.parameter < 1:
            raise ValueError("parameter: mask proportion must lie in [0, 1)")
        if any(p < 1 for p in self.apply_at):
            raise ValueError("apply_at: partition indices start at 1")


@dataclass
class Partition:
    labels: np.ndarray  # cluster id per level point
    K: int
    prototypes_original: np.ndarray
    prototypes_refined: np.ndarray
    masked: np.ndarray  # per level point
    parent_of_cluster: Optional[np.ndarray] = None


@dataclass
class ClusterHierarchy:
    partitions: list
    feature_matrix: np.ndarray
    _instance_labels: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._instance_labels = []
        labels = None
        for part in self.partitions:
            labels = part.labels.copy() if labels is None else part.labels[labels]
            self._instance_labels.append(labels)

    @property
    def M(self) -> int:
        return len(self.partitions)

    @property
    def n(self) -> int:
        return self.feature_matrix.shape[0]

    def instance_labels(self, p: int) -> np.ndarray:
        """Cluster id of every instance at partition ``p`` (1-based)."""
        return self._instance_labels[p - 1]

    def instance_masked(self, p: int) -> np.ndarray:
        """Whether the level point an instance belongs to at ``p`` was masked."""
        if p == 1:
            return self.partitions[0].masked.copy()
        return self.partitions[p - 1].masked[self.instance_labels(p - 1)]

    def ancestors(self, p: int, q: int) -> np.ndarray:
        """Cluster id at partition ``q`` of every cluster at partition ``p`` (``q >= p``)."""
        out = np.arange(self.partitions[p - 1].K)
        for level in range(p, q):
            out = self.partitions[level - 1].parent_of_cluster[out]
        return out

    def bottom_labels(self) -> np.ndarray:
        if not self.partitions:
            return np.arange(self.n)
        return self.instance_labels(1)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    return cdist(points, points)


def first_neighbors(points: np.ndarray) -> np.ndarray:
    """Index of each row's nearest other row (Euclidean; ties -> smallest index)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite points")
    d = cdist(points, points, "sqeuclidean")
    np.fill_diagonal(d, np.inf)
    return np.argmin(d, axis=1)


def finch_adjacency(omega: np.ndarray) -> sparse.csr_matrix:
    """Link i and j when one is the other's first neighbour or both share one."""
    omega = np.asarray(omega)
    n = omega.size
    g = sparse.csr_matrix((np.ones(n, dtype=np.int32), (np.arange(n), omega)), shape=(n, n))
    a = g + g.T + g @ g.T
    a.setdiag(0)
    a.eliminate_zeros()
    a.data[:] = 1
    return a.astype(bool).tocsr()


def connected_components(adjacency) -> tuple[np.ndarray, int]:
    """Component labels numbered in order of each component's smallest member."""
    k, raw = _cc(sparse.csr_matrix(adjacency), directed=False)
    return renumber(raw), k


def renumber(labels: np.ndarray) -> np.ndarray:
    """Relabel so ids appear in order of first occurrence."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first)] = np.arange(first.size)
    return rank[inverse.ravel()]


def compute_prototypes(points: np.ndarray, labels: np.ndarray, K: int, weights=None) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
    counts = np.bincount(labels, weights=w, minlength=K)
    if np.any(counts <= 0):
        raise ValueError(f"empty cluster(s): {np.flatnonzero(counts <= 0).tolist()}")
    sums = np.zeros((K, points.shape[1]))
    np.add.at(sums, labels, points * w[:, None])
    return sums / counts[:, None]


def upward_mask(points: np.ndarray, part: Partition, cfg: MaskConfig) -> Partition:
    """Flag per-cluster outliers and recompute refined prototypes from the survivors."""
    points = np.asarray(points, dtype=np.float64)
    dist = np.linalg.norm(points - part.prototypes_original[part.labels], axis=1)
    masked = np.zeros(len(points), dtype=bool)
    if cfg.strategy == "none":
        return replace(part, masked=masked, prototypes_refined=part.prototypes_original.copy())
    if cfg.strategy == "replace_prototypes":
        refined = np.empty_like(part.prototypes_original)
        for k in range(part.K):
            members = np.flatnonzero(part.labels == k)
            refined[k] = points[members[np.argmin(dist[members])]]
        return replace(part, masked=masked, prototypes_refined=refined)
    if cfg.strategy == "mask_threshold":
        masked = dist > cfg.parameter
    else:
        for k in range(part.K):
            members = np.flatnonzero(part.labels == k)
            n_mask = int(np.floor(cfg.parameter * members.size))
            if n_mask:
                far_first = members[np.argsort(-dist[members], kind="stable")]
                masked[far_first[:n_mask]] = True
    refined = _partial_means(points, part.labels, (~masked).astype(np.float64), part.K, part.prototypes_original)
    return replace(part, masked=masked, prototypes_refined=refined)


def cluster_level(points: np.ndarray) -> tuple[np.ndarray, int]:
    """One FINCH step: neighbours, adjacency, components."""
    return connected_components(finch_adjacency(first_neighbors(points)))


def build_hierarchy(points: np.ndarray, cfg: Optional[MaskConfig] = None, max_levels: Optional[int] = None) -> ClusterHierarchy:
    """Bottom-up hierarchy; stops before emitting a partition with fewer than two clusters."""
    cfg = cfg or MaskConfig()
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        raise ValueError("need at least two points")
    partitions: list[Partition] = []
    level_points = points
    labels, K = cluster_level(level_points)
    while K >= 2 and K < level_points.shape[0]:
        r = compute_prototypes(level_points, labels, K)
        part = Partition(labels, K, r, r.copy(), np.zeros(level_points.shape[0], dtype=bool))
        if len(partitions) + 1 in cfg.apply_at:
            part = upward_mask(level_points, part, cfg)
        if partitions:
            partitions[-1].parent_of_cluster = labels
        partitions.append(part)
        if max_levels is not None and len(partitions) >= max_levels:
            break
        level_points = part.prototypes_refined
        labels, K = cluster_level(level_points)
    return ClusterHierarchy(partitions, points)


def flat_hierarchy(points: np.ndarray, labels: np.ndarray) -> ClusterHierarchy:
    """Single-partition hierarchy from a flat labelling (e.g. K-means), no masking."""
    labels = renumber(np.asarray(labels))
    K = int(labels.max()) + 1
    r = compute_prototypes(points, labels, K)
    part = Partition(labels, K, r, r.copy(), np.zeros(len(labels), dtype=bool))
    return ClusterHierarchy([part], np.asarray(points, dtype=np.float64))


def required_k(h: ClusterHierarchy, k_target: int) -> tuple[int, Partition]:
    """Partition with exactly ``k_target`` clusters, forcing merges if needed.

    Starts from the coarsest partition that still has at least ``k_target``
    clusters and repeatedly merges the two clusters whose prototypes are
    closest.  Returns the partition index it started from and the result,
    which is expressed over that partition's level points.
    """
    if k_target < 1:
        raise ValueError("k_target must be >= 1")
    if not h.partitions or k_target > h.partitions[0].K:
        top = h.partitions[0].K if h.partitions else 0
        raise ValueError(f"k_target={k_target} exceeds the finest partition size {top}")
    p = max(i for i, part in enumerate(h.partitions, start=1) if part.K >= k_target)
    part = h.partitions[p - 1]
    if part.K == k_target:
        return p, part
    level_points = h.feature_matrix if p == 1 else h.partitions[p - 2].prototypes_refined
    labels = part.labels.copy()
    K = part.K
    while K > k_target:
        protos = compute_prototypes(level_points, labels, K)
        d = cdist(protos, protos)
        np.fill_diagonal(d, np.inf)
        a, b = np.unravel_index(np.argmin(d), d.shape)
        a, b = min(a, b), max(a, b)
        labels[labels == b] = a
        labels = renumber(labels)
        K -= 1
    r = compute_prototypes(level_points, labels, K)
    refined = _partial_means(level_points, labels, (~part.masked).astype(np.float64), K, r)
    return p, Partition(labels, K, r, refined, part.masked.copy())


def _partial_means(points, labels, keep, K, fallback):
    """Weighted cluster means; clusters with zero total weight keep ``fallback``."""
    sums = np.zeros_like(fallback)
    np.add.at(sums, labels, points * keep[:, None])
    kept = np.bincount(labels, weights=keep, minlength=K)
    out = fallback.copy()
    ok = kept > 0
    out[ok] = sums[ok] / kept[ok, None]
    return out


def truncate_to_k(h: ClusterHierarchy, k_target: int) -> ClusterHierarchy:
    """Hierarchy whose top partition has exactly ``k_target`` clusters."""
    p, top = required_k(h, k_target)
    parts = [replace(part) for part in h.partitions[: p - 1]]
    if parts:
        parts[-1].parent_of_cluster = top.labels
    parts.append(replace(top, parent_of_cluster=None))
    return ClusterHierarchy(parts, h.feature_matrix)
