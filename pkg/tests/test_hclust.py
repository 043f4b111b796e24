import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mhccl.hclust import (
    MaskConfig,
    Partition,
    build_hierarchy,
    compute_prototypes,
    connected_components,
    finch_adjacency,
    first_neighbors,
    required_k,
    truncate_to_k,
    upward_mask,
)

from .oracles import brute_adjacency, brute_components, brute_neighbors


def line(*xs):
    return np.array(xs, dtype=np.float64)[:, None]


def test_first_neighbors_examples():
    assert first_neighbors(line(0, 1, 3)).tolist() == [1, 0, 1]
    assert first_neighbors(line(0, 1)).tolist() == [1, 0]
    assert first_neighbors(line(5, 0, 5)).tolist() == [2, 0, 0]
    with pytest.raises(ValueError):
        first_neighbors(line(0))


def test_adjacency_examples():
    a = finch_adjacency(np.array([1, 0])).toarray()
    assert a[0, 1] and a[1, 0] and not a.diagonal().any()
    omega = first_neighbors(line(0, 1, 3, 10))
    assert omega.tolist() == [1, 0, 1, 2]
    a = finch_adjacency(omega).toarray()
    links = {(i, j) for i, j in zip(*np.nonzero(a)) if i < j}
    assert links == {(0, 1), (1, 2), (0, 2), (2, 3)}
    labels, k = connected_components(a)
    assert k == 1


def test_components_examples():
    labels, k = connected_components(np.zeros((3, 3), dtype=bool))
    assert (labels.tolist(), k) == ([0, 1, 2], 3)
    labels, k = connected_components(~np.eye(3, dtype=bool))
    assert k == 1
    labels, k = connected_components(finch_adjacency(first_neighbors(line(0, 1, 10, 11))))
    assert (labels.tolist(), k) == ([0, 0, 1, 1], 2)


def test_components_numbered_by_smallest_member():
    adj = np.zeros((4, 4), dtype=bool)
    adj[0, 3] = adj[3, 0] = True
    adj[1, 2] = adj[2, 1] = True
    labels, _ = connected_components(adj)
    assert labels.tolist() == [0, 1, 1, 0]


points_strategy = st.tuples(st.integers(2, 40), st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())


def _points(n, d, seed, grid):
    rng = np.random.default_rng(seed)
    if grid:  # many exact ties
        return rng.integers(0, 4, size=(n, d)).astype(np.float64)
    return rng.standard_normal((n, d))


@settings(max_examples=100, deadline=None)
@given(points_strategy)
def test_finch_steps_match_brute_force(args):
    x = _points(*args)
    omega = first_neighbors(x)
    assert omega.tolist() == brute_neighbors(x)
    adj = finch_adjacency(omega).toarray()
    np.testing.assert_array_equal(adj, brute_adjacency(omega.tolist()))
    labels, k = connected_components(adj)
    ref = brute_components(brute_adjacency(omega.tolist()))
    assert labels.tolist() == ref and k == max(ref) + 1


def test_prototypes():
    x = np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 1.0]])
    p = compute_prototypes(x, np.array([0, 0, 1]), 2)
    np.testing.assert_array_equal(p, [[1, 1], [5, 1]])
    perm = [2, 0, 1]
    np.testing.assert_array_equal(compute_prototypes(x[perm], np.array([1, 0, 0]), 2), p)
    with pytest.raises(ValueError):
        compute_prototypes(x, np.array([0, 0, 2]), 3)


def _one_cluster(dists):
    x = np.array([[d, 0.0] for d in dists])
    r = np.zeros((1, 2))
    return x, Partition(np.zeros(len(x), dtype=int), 1, r, r.copy(), np.zeros(len(x), bool))


def test_threshold_mask_example():
    # members at distance 0.1, 0.2, 0.5 from an (imposed) prototype at the origin
    x, part = _one_cluster([0.1, 0.2, 0.5])
    out = upward_mask(x, part, MaskConfig("mask_threshold", 0.3))
    assert out.masked.tolist() == [False, False, True]
    np.testing.assert_allclose(out.prototypes_refined, [[0.15, 0.0]], atol=1e-12)
    out = upward_mask(x, part, MaskConfig("mask_threshold", float("inf")))
    assert not out.masked.any()
    np.testing.assert_allclose(out.prototypes_refined, x.mean(axis=0, keepdims=True), atol=1e-12)


def test_proportion_and_replace():
    x, part = _one_cluster([0.1, 0.4, 0.2, 0.3])
    out = upward_mask(x, part, MaskConfig("mask_proportion", 0.5))
    assert out.masked.tolist() == [False, True, False, True]
    assert not upward_mask(x, part, MaskConfig("mask_proportion", 0.0)).masked.any()
    out = upward_mask(x, part, MaskConfig("replace_prototypes"))
    np.testing.assert_array_equal(out.prototypes_refined, [[0.1, 0.0]])


def test_all_masked_falls_back_to_original():
    x, part = _one_cluster([1.0, 2.0])
    out = upward_mask(x, part, MaskConfig("mask_threshold", 0.5))
    assert out.masked.all()
    np.testing.assert_array_equal(out.prototypes_refined, part.prototypes_original)


@pytest.mark.parametrize("bad", [dict(strategy="bogus"), dict(parameter=-1.0), dict(strategy="mask_proportion", parameter=1.0)])
def test_mask_config_validation(bad):
    with pytest.raises(ValueError):
        MaskConfig(**bad)


def test_four_point_hierarchy_stops_before_single_cluster():
    h = build_hierarchy(line(0, 1, 10, 11), MaskConfig("none"))
    assert h.M == 1
    assert h.partitions[0].labels.tolist() == [0, 0, 1, 1]
    assert h.partitions[0].parent_of_cluster is None


def test_three_blobs_are_never_mixed():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        x = np.concatenate([c + 0.1 * rng.standard_normal((20, 2)) for c in centers])
        blob = np.repeat(np.arange(3), 20)
        h = build_hierarchy(x, MaskConfig("none"))
        assert h.M >= 1
        for p in range(1, h.M + 1):
            lab = h.instance_labels(p)
            for k in np.unique(lab):
                assert np.unique(blob[lab == k]).size == 1
        assert h.partitions[-1].K <= 4


def test_none_equals_infinite_threshold():
    x = np.random.default_rng(4).standard_normal((50, 3))
    a = build_hierarchy(x, MaskConfig("none"))
    b = build_hierarchy(x, MaskConfig("mask_threshold", float("inf")))
    assert a.M == b.M
    for pa, pb in zip(a.partitions, b.partitions):
        np.testing.assert_array_equal(pa.labels, pb.labels)
        np.testing.assert_array_equal(pa.prototypes_refined, pb.prototypes_refined)


def _check_laws(h, x):
    ks = [p.K for p in h.partitions]
    assert all(a > b for a, b in zip(ks, ks[1:]))
    assert all(k >= 2 for k in ks)
    for p in range(1, h.M):
        low, high = h.instance_labels(p), h.instance_labels(p + 1)
        for k in np.unique(low):
            assert np.unique(high[low == k]).size == 1
        np.testing.assert_array_equal(h.partitions[p - 1].parent_of_cluster[low], high)
    level_points = x
    for part in h.partitions:
        assert set(np.unique(part.labels)) == set(range(part.K))
        np.testing.assert_allclose(part.prototypes_original, compute_prototypes(level_points, part.labels, part.K), atol=1e-9)
        level_points = part.prototypes_refined


@settings(max_examples=60, deadline=None)
@given(points_strategy, st.sampled_from(["none", "mask_threshold", "mask_proportion", "replace_prototypes"]))
def test_hierarchy_laws(args, strategy):
    x = _points(*args)
    param = {"mask_threshold": 0.3, "mask_proportion": 0.25}.get(strategy, 0.0)
    h = build_hierarchy(x, MaskConfig(strategy, param, apply_at=(1, 2)))
    _check_laws(h, x)
    for p, part in enumerate(h.partitions, start=1):
        if p in (1, 2) and strategy in ("mask_threshold", "mask_proportion"):
            pts = x if p == 1 else h.partitions[p - 2].prototypes_refined
            for k in range(part.K):
                keep = (part.labels == k) & ~part.masked
                want = pts[keep].mean(axis=0) if keep.any() else part.prototypes_original[k]
                np.testing.assert_allclose(part.prototypes_refined[k], want, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 40), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_permutation_equivariance(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    perm = rng.permutation(n)
    a = build_hierarchy(x, MaskConfig("none"))
    b = build_hierarchy(x[perm], MaskConfig("none"))
    assert a.M == b.M
    for p in range(1, a.M + 1):
        la, lb = a.instance_labels(p)[perm], b.instance_labels(p)
        same_a = la[:, None] == la[None, :]
        same_b = lb[:, None] == lb[None, :]
        np.testing.assert_array_equal(same_a, same_b)


def test_required_k_merges_closest_pair():
    x = line(0, 0.1, 1, 1.1, 10, 10.1)
    h = build_hierarchy(x, MaskConfig("none"))
    assert [p.K for p in h.partitions] == [3]
    p, part = required_k(h, 2)
    assert p == 1 and part.K == 2
    assert part.labels.tolist() == [0, 0, 0, 0, 1, 1]
    p, part = required_k(h, 3)
    assert part is h.partitions[0]
    _, part = required_k(h, 1)
    assert part.K == 1 and not part.labels.any()
    with pytest.raises(ValueError):
        required_k(h, 4)


def test_truncate_to_k_keeps_nesting():
    x = np.random.default_rng(0).standard_normal((80, 3))
    h = build_hierarchy(x, MaskConfig("none"))
    k = h.partitions[1].K - 1 if h.M > 1 else 2
    t = truncate_to_k(h, k)
    assert t.partitions[-1].K == k
    for p in range(1, t.M):
        low, high = t.instance_labels(p), t.instance_labels(p + 1)
        for c in np.unique(low):
            assert np.unique(high[low == c]).size == 1


def test_ancestors_compose_parent_links():
    x = np.random.default_rng(1).standard_normal((100, 2))
    h = build_hierarchy(x)
    for p in range(1, h.M + 1):
        for q in range(p, h.M + 1):
            np.testing.assert_array_equal(h.ancestors(p, q)[h.instance_labels(p)], h.instance_labels(q))
