"""Pretraining loop: embed, cluster, select pairs, contrast, update both encoders."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .data import AugmentParams, TimeSeriesDataset, minibatches
from .encoder import (
    ArchConfig,
    EncoderParams,
    backward,
    forward,
    init_encoder,
    l2_normalize,
    load_checkpoint,
    momentum_update,
    save_checkpoint,
    sgd_step,
)
from .hclust import ClusterHierarchy, MaskConfig, build_hierarchy, truncate_to_k
from .loss import LossConfig, overall_loss
from .pairsel import cluster_pairs, instance_pairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderOptions:
    channels: tuple = (32, 64, 128)
    kernels: tuple = (8, 5, 3)
    out_dim: int = 128

    def arch(self, in_channels: int) -> ArchConfig:
        return ArchConfig(in_channels, self.channels, self.kernels, self.out_dim)


@dataclass(frozen=True)
class ClusterOptions:
    scope: str = "full"
    hierarchical: bool = True
    downward: bool = True
    required_k: int = 0
    mask_level: int = 2  # partition whose co-membership masks negatives; 0 = topmost

    def __post_init__(self):
        if self.scope not in ("full", "batch"):
            raise ValueError("scope: must be 'full' or 'batch'")
        if self.required_k < 0:
            raise ValueError("required_k: must be >= 0 (0 disables)")
        if self.mask_level < 0:
            raise ValueError("mask_level: must be >= 0 (0 selects the topmost partition)")


@dataclass(frozen=True)
class SplitOptions:
    train_frac: float = 0.8
    val_frac: float = 0.2


@dataclass(frozen=True)
class ProbeOptions:
    epochs: int = 500
    lr: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    m: float = 0.999
    recluster_every: int = 1
    checkpoint_every: int = 0
    grad_reduction: str = "mean"
    instance_level: bool = True
    cluster_level: bool = True
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    cluster: ClusterOptions = field(default_factory=ClusterOptions)
    encoder: EncoderOptions = field(default_factory=EncoderOptions)
    split: SplitOptions = field(default_factory=SplitOptions)
    probe: ProbeOptions = field(default_factory=ProbeOptions)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs: must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size: must be >= 2")
        if self.recluster_every < 1:
            raise ValueError("recluster_every: must be >= 1")
        if not 0 <= self.m < 1:
            raise ValueError("m: must lie in [0, 1)")
        if self.lr < 0:
            raise ValueError("lr: must be >= 0")
        if self.grad_reduction not in ("mean", "sum"):
            raise ValueError("grad_reduction: must be 'mean' or 'sum'")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainState:
    epoch: int
    step: int
    params_q: EncoderParams
    params_k: EncoderParams
    velocity: dict
    hierarchy: Optional[ClusterHierarchy] = None
    hierarchy_epoch: int = -1
    history: list = field(default_factory=list)


def init_state(cfg: TrainConfig, in_channels: int, seq_len: Optional[int] = None, dtype=np.float32) -> TrainState:
    q = init_encoder(cfg.encoder.arch(in_channels), cfg.seed, seq_len, dtype)
    return TrainState(0, 0, q, q.copy(), {})


def embed(params: EncoderParams, data: np.ndarray, batch: int = 256) -> np.ndarray:
    """L2-normalized embeddings of raw sequences, computed in fixed-size chunks."""
    out = [forward(params, data[s : s + batch], keep_cache=False)[0] for s in range(0, len(data), batch)]
    return l2_normalize(np.concatenate(out))


def embed_all(params_k: EncoderParams, ds: TimeSeriesDataset) -> np.ndarray:
    return embed(params_k, ds.data)


def make_hierarchy(points: np.ndarray, cfg: TrainConfig) -> ClusterHierarchy:
    h = build_hierarchy(points, cfg.mask)
    if cfg.cluster.required_k and h.M:
        h = truncate_to_k(h, min(cfg.cluster.required_k, h.partitions[0].K))
    return h


def _rng(cfg: TrainConfig, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, epoch, stream])


def mask_partition(cfg: TrainConfig, h: ClusterHierarchy) -> Optional[int]:
    """Partition used to keep same-cluster instances out of the negatives, or None."""
    if not cfg.cluster.downward or h.M < 2:
        return None
    level = cfg.cluster.mask_level or h.M
    return min(level, h.M) if level >= 2 else None


def batch_pairs(cfg: TrainConfig, h: Optional[ClusterHierarchy], idx: np.ndarray, rng: np.random.Generator):
    """Instance and cluster pair sets for one batch (``idx`` = dataset rows)."""
    lc = cfg.loss
    use_h = cfg.cluster.hierarchical and h is not None and h.M > 0
    if use_h:
        bottom = h.bottom_labels()[idx]
        upper, level = None, mask_partition(cfg, h)
        if level is not None:
            upper = h.instance_labels(level)[idx]
        s_pos = lc.s_pos
    else:
        bottom, upper, s_pos = np.arange(len(idx)), None, 1
    inst = instance_pairs(bottom, s_pos, lc.s_neg, rng, upper) if cfg.instance_level else []
    clus = []
    if cfg.cluster_level and use_h:
        clus = [
            cluster_pairs(h, int(a), lc.h_pos, lc.h_neg, lc.m_used, rng, cfg.cluster.downward, level)
            for a in idx
        ]
    return inst, clus


def train_step(state: TrainState, batch, cfg: TrainConfig, h, rng) -> dict:
    q, k = state.params_q, state.params_k
    za, cache = forward(q, batch.view_a)
    hb, _ = forward(k, batch.view_b, keep_cache=False)
    if cfg.cluster.scope == "batch" and cfg.cluster.hierarchical:
        pts = l2_normalize(forward(k, batch.raw, keep_cache=False)[0])
        h = make_hierarchy(pts, cfg)
        local = np.arange(len(batch.indices))
        inst, clus = batch_pairs(cfg, h, local, rng)
    else:
        inst, clus = batch_pairs(cfg, h, batch.indices, rng)
    br = overall_loss(za, hb, inst, clus, h, cfg.loss.tau)
    if not np.isfinite(br.total):
        raise TrainingAborted(f"non-finite loss at step {state.step}")
    g = br.grad_wrt_embeddings
    if cfg.grad_reduction == "mean":
        g = g / len(batch.indices)
    grads = backward(q, cache, g)
    if cfg.lr > 0:
        sgd_step(q, grads, state.velocity, cfg.lr, cfg.sgd_momentum, cfg.weight_decay)
    momentum_update(k, q, cfg.m)
    state.step += 1
    return {
        "step": state.step,
        "epoch": state.epoch,
        "total": br.total,
        "instance_part": br.instance_part,
        "cluster_part": br.cluster_part,
        "grad_norm": float(np.linalg.norm(g)),
    }


def train_epoch(state: TrainState, ds: TimeSeriesDataset, cfg: TrainConfig, log_fh=None) -> TrainState:
    """One pass over ``ds``; the dataset is used label-free."""
    ds = ds.without_labels()
    if cfg.cluster.hierarchical and cfg.cluster.scope == "full":
        if state.hierarchy is None or state.epoch % cfg.recluster_every == 0:
            state.hierarchy = make_hierarchy(embed_all(state.params_k, ds), cfg)
            state.hierarchy_epoch = state.epoch
    rng = _rng(cfg, state.epoch, 1)
    batch_seed = int(cfg.seed) * 1_000_003 + state.epoch
    for batch in minibatches(ds, min(cfg.batch_size, len(ds)), True, batch_seed, cfg.augment):
        rec = train_step(state, batch, cfg, state.hierarchy, rng)
        state.history.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
    state.epoch += 1
    return state


def state_meta(state: TrainState, cfg: TrainConfig) -> dict:
    meta = {f"cfg.{k}": v for k, v in cfgmod.to_kv(cfg).items()}
    meta["state.epoch"] = state.epoch
    meta["state.step"] = state.step
    return meta


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    save_checkpoint(path, state.params_q, state.velocity, state.params_k, state_meta(state, cfg))


def load_state(path) -> tuple[TrainState, TrainConfig]:
    q, vel, k, meta = load_checkpoint(path)
    cfg = cfgmod.from_kv(TrainConfig, {key[4:]: v for key, v in meta.items() if key.startswith("cfg.")})
    state = TrainState(int(meta["state.epoch"]), int(meta["state.step"]), q, k, vel)
    return state, cfg


def pretrain(
    cfg: TrainConfig,
    ds: TimeSeriesDataset,
    out_dir=None,
    resume: Optional[str] = None,
    state: Optional[TrainState] = None,
) -> TrainState:
    """Run ``cfg.epochs`` epochs, checkpointing into ``out_dir`` when given."""
    if state is None:
        if resume is not None:
            state, _ = load_state(resume)
        else:
            state = init_state(cfg, ds.shape[2], ds.shape[1])
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfgmod.write_config(cfg, out / "config.txt")
        log_fh = open(out / "train_log.jsonl", "a" if resume else "w")
    try:
        while state.epoch < cfg.epochs:
            try:
                train_epoch(state, ds, cfg, log_fh)
            except (TrainingAborted, FloatingPointError) as exc:
                if out is not None:
                    save_state(out / "abort.mhck", state, cfg)
                raise TrainingAborted(str(exc)) from exc
            if state.history:
                log.info("epoch %d loss %.4f", state.epoch, state.history[-1]["total"])
            if out is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_state(out / f"epoch{state.epoch:04d}.mhck", state, cfg)
        if out is not None:
            save_state(out / "final.mhck", state, cfg)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state
