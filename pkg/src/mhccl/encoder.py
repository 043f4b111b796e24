"""Three-block temporal convolution encoder with a hand-written backward pass.

Layout: input (B, T, V) -> [conv(k) -> ReLU] x 3 with "same" zero padding ->
mean over time -> affine map to D.  Conv kernels are stored as (k, C_in, C_out).
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int
    channels: tuple = (32, 64, 128)
    kernels: tuple = (8, 5, 3)
    out_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if len(self.channels) != len(self.kernels):
            raise ValueError("channels and kernels must have equal length")
        if self.in_channels < 1 or self.out_dim < 1 or min(self.channels + self.kernels) < 1:
            raise ValueError("architecture sizes must be positive")

    def shapes(self) -> list[tuple[str, tuple]]:
        """Parameter names and shapes, in the canonical (checkpoint) order."""
        out = []
        c_in = self.in_channels
        for i, (c, k) in enumerate(zip(self.channels, self.kernels)):
            out.append((f"conv{i}.weight", (k, c_in, c)))
            out.append((f"conv{i}.bias", (c,)))
            c_in = c
        out.append(("fc.weight", (c_in, self.out_dim)))
        out.append(("fc.bias", (self.out_dim,)))
        return out

    def to_text(self) -> dict[str, str]:
        d = asdict(self)
        return {f"arch.{k}": ",".join(map(str, v)) if isinstance(v, tuple) else str(v) for k, v in d.items()}

    @classmethod
    def from_text(cls, kv: dict[str, str]) -> "ArchConfig":
        def ints(s):
            return tuple(int(x) for x in s.split(","))

        return cls(
            in_channels=int(kv["arch.in_channels"]),
            channels=ints(kv["arch.channels"]),
            kernels=ints(kv["arch.kernels"]),
            out_dim=int(kv["arch.out_dim"]),
        )


class EncoderParams:
    """Named parameter tensors plus a version counter bumped on every in-place update."""

    def __init__(self, arch: ArchConfig, tensors: dict[str, np.ndarray], version: int = 0):
        self.arch = arch
        self.tensors = {name: tensors[name] for name, _ in arch.shapes()}
        for name, shape in arch.shapes():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")
        self.version = version

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return self.tensors["fc.bias"].dtype

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.arch, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.version)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    @classmethod
    def from_flat(cls, arch: ArchConfig, flat: np.ndarray) -> "EncoderParams":
        tensors, pos = {}, 0
        for name, shape in arch.shapes():
            size = int(np.prod(shape))
            tensors[name] = np.array(flat[pos : pos + size]).reshape(shape)
            pos += size
        if pos != flat.size:
            raise ValueError(f"parameter blob has {flat.size} values, architecture needs {pos}")
        return cls(arch, tensors)

    def assert_finite(self):
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite values in {k}")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_encoder(arch: ArchConfig, seed: int = 0, seq_len: Optional[int] = None, dtype=np.float32) -> EncoderParams:
    """Glorot-uniform weights, zero biases. Values are drawn in float64 so both precisions agree."""
    if seq_len is not None and max(arch.kernels) > seq_len:
        raise ValueError(f"kernel width {max(arch.kernels)} exceeds sequence length {seq_len}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.shapes():
        if name.endswith("bias"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 3:
            k, c_in, c_out = shape
            a = glorot_bound(k * c_in, k * c_out)
        else:
            a = glorot_bound(*shape)
        tensors[name] = rng.uniform(-a, a, size=shape).astype(dtype)
    return EncoderParams(arch, tensors)


def _pads(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    b, t, c = x.shape
    left, right = _pads(k)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    win = sliding_window_view(xp, k, axis=1)  # (B, T, C, k)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b * t, k * c)


@dataclass
class ForwardCache:
    cols: list
    pre: list
    pooled: np.ndarray
    shape: tuple
    version: int


def forward(params: EncoderParams, x: np.ndarray, keep_cache: bool = True):
    """Raw (unnormalized) embeddings of a (B, T, V) batch, and the cache for ``backward``."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != params.arch.in_channels:
        raise ValueError(f"expected (B, T, {params.arch.in_channels}) input, got {x.shape}")
    if x.shape[1] < max(params.arch.kernels):
        raise ValueError(f"sequence length {x.shape[1]} shorter than kernel width {max(params.arch.kernels)}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite encoder input")
    dtype = params.dtype
    b, t, _ = x.shape
    h = x.astype(dtype, copy=False)
    cols_list, pre_list = [], []
    for i, k in enumerate(params.arch.kernels):
        w = params[f"conv{i}.weight"]
        cols = _im2col(h, k)
        pre = (cols @ w.reshape(-1, w.shape[2]) + params[f"conv{i}.bias"]).reshape(b, t, -1)
        if keep_cache:
            cols_list.append(cols)
            pre_list.append(pre)
        h = np.maximum(pre, 0)
    pooled = h.mean(axis=1, dtype=np.float64).astype(dtype)
    z = pooled @ params["fc.weight"] + params["fc.bias"]
    cache = ForwardCache(cols_list, pre_list, pooled, x.shape, params.version) if keep_cache else None
    return z, cache


def backward(params: EncoderParams, cache: ForwardCache, grad_z: np.ndarray, want_input_grad: bool = False):
    """Gradients of ``sum(z * grad_z)`` with respect to every parameter (and optionally the input)."""
    if cache is None or cache.version != params.version:
        raise StaleCacheError("forward cache does not match current parameter version")
    dtype = params.dtype
    g = np.asarray(grad_z, dtype=dtype)
    b, t, _ = cache.shape
    grads = {
        "fc.weight": cache.pooled.T @ g,
        "fc.bias": g.sum(axis=0, dtype=np.float64).astype(dtype),
    }
    g_pool = g @ params["fc.weight"].T
    g_h = np.broadcast_to((g_pool / t)[:, None, :], (b, t, g_pool.shape[1]))
    for i in reversed(range(len(params.arch.kernels))):
        k = params.arch.kernels[i]
        w = params[f"conv{i}.weight"]
        g_pre = (g_h * (cache.pre[i] > 0)).reshape(b * t, -1)
        grads[f"conv{i}.weight"] = (cache.cols[i].T @ g_pre).reshape(w.shape)
        grads[f"conv{i}.bias"] = g_pre.sum(axis=0, dtype=np.float64).astype(dtype)
        if i == 0 and not want_input_grad:
            break
        g_cols = (g_pre @ w.reshape(-1, w.shape[2]).T).reshape(b, t, k, w.shape[1])
        left, _ = _pads(k)
        g_xp = np.zeros((b, t + k - 1, w.shape[1]), dtype=dtype)
        for j in range(k):
            g_xp[:, j : j + t, :] += g_cols[:, :, j, :]
        g_h = g_xp[:, left : left + t, :]
    grads = {name: grads[name] for name in params.names()}
    if want_input_grad:
        return grads, np.array(g_h)
    return grads


def l2_normalize(z: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(z.astype(np.float64), axis=-1, keepdims=True)
    return (z / np.maximum(norm, eps)).astype(z.dtype)


# -- optimisation -----------------------------------------------------------------


def sgd_step(params: EncoderParams, grads: dict, velocity: dict, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """Heavy-ball SGD with L2 weight decay, in place.  ``velocity`` persists between calls."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    for name in params.names():
        p = params.tensors[name]
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + grads[name] + weight_decay * p
        velocity[name] = v.astype(p.dtype, copy=False)
        params.tensors[name] = (p - lr * velocity[name]).astype(p.dtype, copy=False)
    params.version += 1
    return params


def momentum_update(theta_k: EncoderParams, theta_q: EncoderParams, m: float) -> EncoderParams:
    """theta_k <- m * theta_k + (1 - m) * theta_q, in place."""
    if not 0.0 <= m < 1.0:
        raise ValueError("momentum coefficient must lie in [0, 1)")
    if theta_k.arch != theta_q.arch:
        raise ValueError("momentum update between different architectures")
    for name in theta_k.names():
        pk, pq = theta_k.tensors[name], theta_q.tensors[name]
        if pk.shape != pq.shape:
            raise ValueError(f"{name}: shape mismatch {pk.shape} vs {pq.shape}")
        theta_k.tensors[name] = (m * pk + (1.0 - m) * pq).astype(pk.dtype, copy=False)
    theta_k.version += 1
    return theta_k


# -- checkpoints ---------------------------------------------------------------------

CKPT_MAGIC = b"MHCK"
CKPT_VERSION = 1


def _blob(arr: Optional[np.ndarray]) -> bytes:
    arr = np.zeros(0, dtype="<f4") if arr is None else np.asarray(arr, dtype="<f4")
    return struct.pack("<Q", arr.size) + arr.tobytes()


def save_checkpoint(path, params_q: EncoderParams, velocity: dict, params_k: EncoderParams, meta: dict) -> None:
    """Write ``MHCK`` | version | key=value text | query blob | velocity blob | momentum blob.

    Blobs are float32 little-endian, preceded by a uint64 element count, with
    tensors concatenated in ``ArchConfig.shapes()`` order.  An empty velocity
    blob means "no optimizer state yet".
    """
    kv = {**params_q.arch.to_text(), **{k: str(v) for k, v in meta.items()}}
    text = "".join(f"{k}={kv[k]}\n" for k in sorted(kv)).encode()
    vel = None
    if velocity:
        vel = np.concatenate([np.asarray(velocity[n]).ravel() for n in params_q.names()])
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(text)) + text)
        fh.write(_blob(params_q.flat()))
        fh.write(_blob(vel))
        fh.write(_blob(params_k.flat()))


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``: returns (params_q, velocity, params_k, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, tlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    kv = dict(line.split("=", 1) for line in raw[pos : pos + tlen].decode().splitlines() if line)
    pos += tlen
    blobs = []
    for _ in range(3):
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        blobs.append(np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32))
        pos += 4 * count
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    arch = ArchConfig.from_text(kv)
    params_q = EncoderParams.from_flat(arch, blobs[0])
    params_k = EncoderParams.from_flat(arch, blobs[2])
    velocity = {}
    if blobs[1].size:
        velocity = EncoderParams.from_flat(arch, blobs[1]).tensors
    meta = {k: v for k, v in kv.items() if not k.startswith("arch.")}
    return params_q, velocity, params_k, meta
