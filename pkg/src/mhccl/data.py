"""Multivariate time-series containers, file I/O, splitting, batching and augmentation.

Arrays are laid out as ``(N, T, V)``: instances, timesteps, variables.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

MAGIC = b"MHC1"
_HEADER = struct.Struct("<4sIIIB")
STD_FLOOR = 1e-8


class DataError(ValueError):
    """Raised when a dataset file is malformed or a request cannot be satisfied."""


@dataclass
class TimeSeriesDataset:
    data: np.ndarray
    labels: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"expected N x T x V data, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            bad = int(np.argwhere(~np.isfinite(self.data))[0, 0])
            raise DataError(f"non-finite value in instance {bad}")
        n = self.data.shape[0]
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DataError("labels must have one entry per instance")
            if self.labels.size and self.labels.min() < 0:
                raise DataError("labels must be non-negative")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_classes(self) -> int:
        if self.labels is None:
            return 0
        return int(self.labels.max()) + 1

    def subset(self, idx) -> "TimeSeriesDataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, data=self.data[idx], labels=labels, ids=self.ids[idx])

    def without_labels(self) -> "TimeSeriesDataset":
        return replace(self, labels=None)


def fit_zscore(ds: TimeSeriesDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable mean and std over all instances and timesteps; tiny stds clamp to 1."""
    flat = ds.data.reshape(-1, ds.shape[2]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std < STD_FLOOR] = 1.0
    return mean, std


def apply_zscore(ds: TimeSeriesDataset, mean, std) -> TimeSeriesDataset:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    data = ((ds.data.astype(np.float64) - mean) / std).astype(np.float32)
    return replace(ds, data=data, mean=mean, std=std)


# -- file formats ---------------------------------------------------------------


def save_binary(path, data: np.ndarray, labels=None) -> None:
    data = np.asarray(data, dtype="<f4")
    n, t, v = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, t, v, 0 if labels is None else 1))
        fh.write(data.tobytes(order="C"))
        if labels is not None:
            fh.write(np.asarray(labels, dtype="<i4").tobytes())


def _read_binary(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, n, t, v, has_labels = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if has_labels not in (0, 1):
        raise DataError(f"{path}: malformed header (label flag {has_labels})")
    count = n * t * v
    need = _HEADER.size + 4 * count + (4 * n if has_labels else 0)
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes for N={n},T={t},V={v}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size).reshape(n, t, v)
    bad = ~np.isfinite(data)
    if bad.any():
        raise DataError(f"{path}: non-finite value in instance {int(np.argwhere(bad)[0, 0])}")
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=_HEADER.size + 4 * count)
    return data.astype(np.float32), labels


def save_csv(path, data: np.ndarray, labels=None, ids=None) -> None:
    n, t, v = data.shape
    ids = np.arange(n) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "t"] + [f"v{j + 1}" for j in range(v)] + (["label"] if labels is not None else []))
        for i in range(n):
            for s in range(t):
                row = [int(ids[i]), s] + [repr(float(x)) for x in data[i, s]]
                if labels is not None:
                    row.append(int(labels[i]))
                w.writerow(row)


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header[:2] != ["id", "t"]:
            raise DataError(f"{path}: header must start with id,t")
        has_label = header[-1] == "label"
        v = len(header) - 2 - int(has_label)
        if v < 1:
            raise DataError(f"{path}: no variable columns")
        series: dict[int, dict[int, list[float]]] = {}
        labels: dict[int, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: ragged row at line {lineno}")
            try:
                iid, t = int(row[0]), int(row[1])
                vals = [float(x) for x in row[2 : 2 + v]]
            except ValueError as exc:
                raise DataError(f"{path}: unparsable row at line {lineno}: {exc}") from None
            if not all(math.isfinite(x) for x in vals):
                raise DataError(f"{path}: non-finite value in instance {iid} (line {lineno})")
            series.setdefault(iid, {})[t] = vals
            if has_label:
                labels[iid] = int(row[-1])
    ids = sorted(series)
    lengths = {len(series[i]) for i in ids}
    if len(lengths) != 1:
        raise DataError(f"{path}: ragged instances, lengths {sorted(lengths)}")
    t_len = lengths.pop()
    data = np.empty((len(ids), t_len, v), dtype=np.float32)
    for row_idx, iid in enumerate(ids):
        steps = series[iid]
        if sorted(steps) != list(range(t_len)):
            raise DataError(f"{path}: instance {iid} has non-contiguous timesteps")
        data[row_idx] = [steps[s] for s in range(t_len)]
    lab = np.array([labels[i] for i in ids]) if has_label else None
    return data, lab, np.array(ids)


def load_dataset(path, fmt: Optional[str] = None, normalize: bool = True, stats=None) -> TimeSeriesDataset:
    """Read a binary (``MHC1``) or CSV dataset.

    With ``normalize`` the data is z-scored per variable, using ``stats``
    (mean, std) when given and otherwise statistics fitted on the file itself.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "binary"
    ids = None
    if fmt == "binary":
        data, labels = _read_binary(path)
    elif fmt == "csv":
        data, labels, ids = _read_csv(path)
    else:
        raise DataError(f"unknown format {fmt!r}")
    ds = TimeSeriesDataset(data, labels, ids)
    if normalize:
        mean, std = stats if stats is not None else fit_zscore(ds)
        ds = apply_zscore(ds, mean, std)
    return ds


# -- splitting and batching -------------------------------------------------------


def split(ds: TimeSeriesDataset, train_frac: float = 0.8, val_frac: float = 0.2, seed: int = 0):
    """Shuffled train/val/test split; the validation set is carved out of the training part."""
    if not (0 < train_frac < 1 and 0 <= val_frac < 1):
        raise DataError("fractions must lie in (0, 1)")
    n = len(ds)
    n_trainval = int(round(train_frac * n))
    n_val = int(round(val_frac * n_trainval))
    n_train = n_trainval - n_val
    n_test = n - n_trainval
    if n_train < 1 or n_test < 1 or (val_frac > 0 and n_val < 1):
        raise DataError(f"N={n} too small for a {train_frac}/{val_frac} split")
    perm = np.random.default_rng(seed).permutation(n)
    return (
        ds.subset(np.sort(perm[:n_train])),
        ds.subset(np.sort(perm[n_train:n_trainval])),
        ds.subset(np.sort(perm[n_trainval:])),
    )


@dataclass(frozen=True)
class AugmentParams:
    weak_noise_sigma: float = 0.05
    weak_scale_sigma: float = 0.1
    strong_max_segments: int = 8
    strong_noise_sigma: float = 0.08
    seed: int = 0

    def __post_init__(self):
        for name in ("weak_noise_sigma", "weak_scale_sigma", "strong_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.strong_max_segments < 1:
            raise ValueError("strong_max_segments must be >= 1")


def weak_augment(x: np.ndarray, p: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Jitter-and-scale: per-variable scale then elementwise Gaussian noise."""
    scale = rng.normal(1.0, p.weak_scale_sigma, size=(1, x.shape[1]))
    noise = rng.normal(0.0, p.weak_noise_sigma, size=x.shape)
    return (x * scale + noise).astype(x.dtype)


def permute_segments(x: np.ndarray, cuts, order) -> np.ndarray:
    """Split the time axis at ``cuts`` and reassemble the pieces in ``order``."""
    pieces = np.split(x, list(cuts), axis=0)
    return np.concatenate([pieces[k] for k in order], axis=0)


def strong_augment(x: np.ndarray, p: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Permutation-and-jitter."""
    t = x.shape[0]
    k = int(rng.integers(1, min(p.strong_max_segments, t) + 1))
    cuts = np.sort(rng.choice(np.arange(1, t), size=k - 1, replace=False)) if k > 1 else []
    order = rng.permutation(k)
    out = permute_segments(x, cuts, order)
    return (out + rng.normal(0.0, p.strong_noise_sigma, size=out.shape)).astype(x.dtype)


@dataclass
class Batch:
    raw: np.ndarray
    view_a: np.ndarray
    view_b: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def minibatches(
    ds: TimeSeriesDataset,
    batch_size: int,
    shuffle: bool = True,
    seed: int = 0,
    aug: Optional[AugmentParams] = None,
) -> Iterator[Batch]:
    """One epoch of batches. ``indices`` are row positions into ``ds``; the last short batch is kept."""
    n = len(ds)
    if batch_size < 2:
        raise DataError("batch size must be >= 2")
    if batch_size > n:
        raise DataError(f"batch size {batch_size} exceeds dataset size {n}")
    aug = aug or AugmentParams()
    rng = np.random.default_rng([seed, aug.seed])
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        raw = ds.data[idx]
        va = np.stack([weak_augment(x, aug, rng) for x in raw])
        vb = np.stack([strong_augment(x, aug, rng) for x in raw])
        yield Batch(raw, va, vb, idx.astype(np.int64))


# -- synthetic data -----------------------------------------------------------------


def make_blob_series(
    n: int = 300,
    n_classes: int = 3,
    depth: int = 1,
    length: int = 32,
    n_vars: int = 2,
    noise: float = 0.6,
    seed: int = 0,
) -> TimeSeriesDataset:
    """Labelled synthetic series: each class is a noisy, randomly shifted template.

    With ``depth=2`` classes are grouped in pairs that share a coarse template
    and differ by a smaller class-specific component, so the label structure
    itself is two-level.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length) / length
    n_groups = max(1, math.ceil(n_classes / 2)) if depth >= 2 else n_classes

    def template(freq, phase):
        return np.stack([np.sin(2 * np.pi * (freq * t + phase + 0.25 * j)) for j in range(n_vars)], axis=1)

    coarse = [template(1 + g, rng.uniform()) for g in range(n_groups)]
    fine = []
    for c in range(n_classes):
        g = c * n_groups // n_classes if depth >= 2 else c
        base = coarse[g]
        if depth >= 2:
            base = base + 0.5 * template(3 + 2 * (c % 2), rng.uniform())
        fine.append(base)

    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    data = np.empty((n, length, n_vars))
    for i, c in enumerate(labels):
        shift = int(rng.integers(0, length // 8 + 1))
        amp = rng.uniform(0.7, 1.3)
        data[i] = amp * np.roll(fine[c], shift, axis=0) + noise * rng.standard_normal((length, n_vars))
    return TimeSeriesDataset(data.astype(np.float32), labels)
