import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mhccl.encoder import (
    ArchConfig,
    EncoderParams,
    StaleCacheError,
    backward,
    forward,
    glorot_bound,
    init_encoder,
    l2_normalize,
    load_checkpoint,
    momentum_update,
    save_checkpoint,
    sgd_step,
)

from .gradcheck import encoder_case

SMALL = ArchConfig(2, (4, 5, 6), (3, 3, 2), 3)


def test_output_shape_and_default_arch():
    arch = ArchConfig(2)
    p = init_encoder(arch, seed=0)
    z, _ = forward(p, np.zeros((5, 32, 2), dtype=np.float32))
    assert z.shape == (5, 128)
    names = [n for n, _ in arch.shapes()]
    assert names[0] == "conv0.weight" and names[-1] == "fc.bias"


def test_init_is_glorot_uniform_with_zero_bias():
    p = init_encoder(ArchConfig(3), seed=1)
    w = p["conv1.weight"]
    bound = glorot_bound(5 * 32, 5 * 64)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound
    assert not p["conv1.bias"].any()
    a = init_encoder(ArchConfig(3), seed=1, dtype=np.float64)
    np.testing.assert_array_equal(a["fc.weight"].astype(np.float32), p["fc.weight"])


def test_kernel_longer_than_series_rejected():
    with pytest.raises(ValueError):
        init_encoder(ArchConfig(1), seq_len=4)
    p = init_encoder(ArchConfig(1))
    with pytest.raises(ValueError):
        forward(p, np.zeros((1, 4, 1)))


def test_zero_input_gives_bias_only_output():
    p = init_encoder(SMALL, seed=0)
    p.tensors["fc.bias"][:] = [1, 2, 3]
    z, _ = forward(p, np.zeros((2, 6, 2), dtype=np.float32))
    np.testing.assert_array_equal(z, [[1, 2, 3], [1, 2, 3]])


def test_nonfinite_input_rejected():
    p = init_encoder(SMALL)
    x = np.zeros((1, 6, 2))
    x[0, 2, 1] = np.inf
    with pytest.raises(FloatingPointError):
        forward(p, x)


def test_batch_rows_are_independent():
    p = init_encoder(SMALL, seed=3, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((4, 7, 2))
    z, _ = forward(p, x)
    for i in range(4):
        np.testing.assert_allclose(forward(p, x[i : i + 1])[0][0], z[i], rtol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_backward_matches_finite_differences(seed):
    assert encoder_case(seed) < 1e-4


def test_stale_cache_detected():
    p = init_encoder(SMALL, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((2, 6, 2))
    z, cache = forward(p, x)
    grads = backward(p, cache, np.ones_like(z))
    sgd_step(p, grads, {}, lr=0.1)
    with pytest.raises(StaleCacheError):
        backward(p, cache, np.ones_like(z))


def test_sgd_step_rules():
    p = init_encoder(SMALL, dtype=np.float64)
    grads = {n: np.ones_like(v) for n, v in p.tensors.items()}
    before = p.copy()
    vel = {}
    sgd_step(p, grads, vel, lr=0.1, momentum=0.9, weight_decay=0.0)
    for n in p.names():
        np.testing.assert_allclose(p[n], before[n] - 0.1)
    sgd_step(p, grads, vel, lr=0.1, momentum=0.9, weight_decay=0.0)
    for n in p.names():
        np.testing.assert_allclose(p[n], before[n] - 0.1 - 0.1 * 1.9)
    with pytest.raises(ValueError):
        sgd_step(p, grads, vel, lr=0.0)
    bad = dict(grads, **{"fc.bias": np.full_like(p["fc.bias"], np.nan)})
    with pytest.raises(FloatingPointError):
        sgd_step(p, bad, vel, lr=0.1)


def test_weight_decay_shrinks_parameters():
    p = init_encoder(SMALL, seed=2, dtype=np.float64)
    zero = {n: np.zeros_like(v) for n, v in p.tensors.items()}
    before = p.copy()
    sgd_step(p, zero, {}, lr=0.5, weight_decay=0.1)
    for n in p.names():
        np.testing.assert_allclose(p[n], 0.95 * before[n])


def test_momentum_update_edges():
    q = init_encoder(SMALL, seed=1)
    k = init_encoder(SMALL, seed=2)
    k0 = k.copy()
    momentum_update(k, q, 0.0)
    for n in q.names():
        np.testing.assert_array_equal(k[n], q[n])
    k = k0.copy()
    momentum_update(k, k0, 0.5)
    for n in q.names():
        np.testing.assert_array_equal(k[n], k0[n])
    with pytest.raises(ValueError):
        momentum_update(k, q, 1.0)
    with pytest.raises(ValueError):
        momentum_update(k, init_encoder(ArchConfig(2, (4, 5, 7), (3, 3, 2), 3)), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.9999), st.integers(0, 1000))
def test_momentum_update_law(m, seed):
    q = init_encoder(SMALL, seed=seed, dtype=np.float64)
    k = init_encoder(SMALL, seed=seed + 1, dtype=np.float64)
    gap = k.flat() - q.flat()
    momentum_update(k, q, m)
    lhs = k.flat() - q.flat()
    assert np.linalg.norm(lhs - m * gap) <= 1e-12 * max(np.linalg.norm(m * gap), 1e-300) + 1e-15


def test_l2_normalize():
    z = np.array([[3.0, 4.0], [0.0, 0.0]])
    np.testing.assert_allclose(l2_normalize(z), [[0.6, 0.8], [0.0, 0.0]])


def test_checkpoint_roundtrip(tmp_path):
    q = init_encoder(SMALL, seed=4)
    k = init_encoder(SMALL, seed=5)
    vel = {n: np.full_like(v, 0.25) for n, v in q.tensors.items()}
    save_checkpoint(tmp_path / "c.mhck", q, vel, k, {"state.epoch": 3})
    q2, vel2, k2, meta = load_checkpoint(tmp_path / "c.mhck")
    assert q2.arch == SMALL and meta == {"state.epoch": "3"}
    for n in q.names():
        np.testing.assert_array_equal(q2[n], q[n])
        np.testing.assert_array_equal(k2[n], k[n])
        np.testing.assert_array_equal(vel2[n], vel[n])
    raw = (tmp_path / "c.mhck").read_bytes()
    assert raw[:4] == b"MHCK"
    save_checkpoint(tmp_path / "d.mhck", q2, vel2, k2, meta)
    assert (tmp_path / "d.mhck").read_bytes() == raw


def test_checkpoint_without_velocity_and_corrupt(tmp_path):
    q = init_encoder(SMALL)
    save_checkpoint(tmp_path / "c.mhck", q, {}, q, {})
    assert load_checkpoint(tmp_path / "c.mhck")[1] == {}
    (tmp_path / "bad.mhck").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "bad.mhck")
    (tmp_path / "t.mhck").write_bytes((tmp_path / "c.mhck").read_bytes() + b"x")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "t.mhck")


def test_flat_roundtrip():
    q = init_encoder(SMALL, seed=9)
    back = EncoderParams.from_flat(SMALL, q.flat())
    np.testing.assert_array_equal(back.flat(), q.flat())
    with pytest.raises(ValueError):
        EncoderParams.from_flat(SMALL, q.flat()[:-1])
