"""Command-line entry point: ``mhccl {pretrain,evaluate,cluster,audit-pairs}``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .data import DataError, load_dataset, make_blob_series
from .evalmetrics import false_pair_audit
from .experiments import AUDIT, hierarchical_blob_points, pairing_decisions, prepare_splits, probe_report
from .hclust import build_hierarchy
from .pairsel import PairDecision
from .train import TrainConfig, TrainingAborted, load_state, pretrain

log = logging.getLogger("mhccl")

DECISION_FIELDS = list(PairDecision._fields)


class CliError(Exception):
    pass


# -- argument parsing -------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key=value config file (dotted keys)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--out", help="output directory; nothing is written outside it")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    p.add_argument("--threads", type=int, help="BLAS thread count")
    p.add_argument("--verbose", action="store_true")
    return p


def _data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    src = p.add_mutually_exclusive_group(required=required)
    src.add_argument("--data", help="dataset file (.bin container or .csv)")
    src.add_argument(
        "--demo-blobs", nargs=3, type=int, metavar=("N", "CLASSES", "DEPTH"), help="generate a synthetic labelled dataset"
    )


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="mhccl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{pretrain,evaluate,cluster,audit-pairs}")

    p = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    _data_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("evaluate", parents=[common], help="linear probe on frozen embeddings")
    p.add_argument("--checkpoint", required=True)
    _data_args(p)

    p = sub.add_parser("cluster", parents=[common], help="hierarchical clustering of an embedding file")
    p.add_argument("--embeddings", required=True, help="container file with T=1")

    p = sub.add_parser("audit-pairs", parents=[common], help="false negative pair audit")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--points", help="labelled container file with T=1")
    src.add_argument("--demo-blobs", nargs=3, type=int, metavar=("N", "CLASSES", "DEPTH"))
    src.add_argument("--decisions", help="pair decision CSV to audit")
    p.add_argument("--baseline", help="baseline pair decision CSV (with --decisions)")
    p.add_argument("--labels", help="labelled dataset file (with --decisions)")
    p.add_argument("--assignments", help="cluster CSV for --decisions")
    p.add_argument("--baseline-assignments", help="cluster CSV for --baseline")
    p.add_argument("--k", type=int, help="K for the flat baseline (default: number of classes)")
    return parser


# -- helpers ----------------------------------------------------------------------------


def _resolve_config(args, base: dict | None = None) -> TrainConfig:
    kv = dict(base or {})
    if args.config:
        kv.update(cfgmod.read_kv_file(args.config))
    kv.update(cfgmod.parse_overrides(args.set))
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    return cfgmod.from_kv(TrainConfig, kv)


def _dataset(args, seed: int):
    if args.data:
        return load_dataset(args.data, normalize=False)
    n, classes, depth = args.demo_blobs
    return make_blob_series(n, classes, depth, seed=seed)


def _out_dir(args) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


@contextlib.contextmanager
def _sink(out: Path | None, name: str):
    """Write to ``out/name`` or, without an output directory, to stdout."""
    if out is None:
        yield sys.stdout
    else:
        with open(out / name, "w", newline="") as fh:
            yield fh


def write_decisions(fh, decisions) -> None:
    w = csv.writer(fh)
    w.writerow(DECISION_FIELDS)
    w.writerows(decisions)


def read_decisions(path) -> list[PairDecision]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [
            PairDecision(int(r["anchor_id"]), r["kind"], int(r["counterpart_id"]), r["role"], int(r["partition"]))
            for r in rows
        ]
    except (KeyError, ValueError) as exc:
        raise CliError(f"{path}: malformed pair decision CSV ({exc})") from None


def write_assignments(fh, labels_by_partition: dict, masked_by_partition: dict | None = None) -> None:
    w = csv.writer(fh)
    w.writerow(["partition", "instance_id", "cluster_id", "masked"])
    for p, labels in labels_by_partition.items():
        masked = masked_by_partition[p] if masked_by_partition else np.zeros(len(labels), dtype=bool)
        for i, (k, flag) in enumerate(zip(labels, masked)):
            w.writerow([p, i, int(k), int(flag)])


def read_assignments(path) -> dict:
    table: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            table.setdefault(int(r["partition"]), {})[int(r["instance_id"])] = int(r["cluster_id"])
    return {p: np.array([m[i] for i in sorted(m)]) for p, m in table.items()}


# -- subcommands ------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    base = None
    if args.resume:
        _, saved = load_state(args.resume)
        base = cfgmod.to_kv(saved)
    cfg = _resolve_config(args, base)
    ds = _dataset(args, cfg.seed)
    tr, _, _ = prepare_splits(ds, cfg, cfg.seed)
    out = Path(args.out) if args.out else None
    state = pretrain(cfg, tr, out, resume=args.resume)
    print(json.dumps({"epoch": state.epoch, "step": state.step, "final_loss": state.history[-1]["total"] if state.history else None}))
    return 0


def cmd_evaluate(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    state, cfg = load_state(args.checkpoint)
    ds = _dataset(args, cfg.seed)
    if ds.labels is None:
        raise CliError("evaluation needs a labelled dataset")
    tr, va, te = prepare_splits(ds, cfg, cfg.seed)
    report = probe_report(state.params_q, tr, va, te, cfg, ds.n_classes)
    print(json.dumps(report.to_dict()))
    out = _out_dir(args) or Path(args.checkpoint).parent
    np.savetxt(out / "confusion.csv", report.confusion, fmt="%d", delimiter=",")
    return 0


def cmd_cluster(args) -> int:
    cfg = _resolve_config(args)
    emb = load_dataset(args.embeddings, normalize=False)
    if emb.shape[1] != 1:
        raise CliError(f"{args.embeddings}: embedding file must have T=1, got T={emb.shape[1]}")
    h = build_hierarchy(emb.data[:, 0, :].astype(np.float64), cfg.mask)
    parts = range(1, h.M + 1)
    with _sink(_out_dir(args), "clusters.csv") as fh:
        write_assignments(fh, {p: h.instance_labels(p) for p in parts}, {p: h.instance_masked(p) for p in parts})
    return 0


def cmd_audit(args) -> int:
    out = _out_dir(args)
    if args.decisions:
        if not (args.baseline and args.labels):
            raise CliError("--decisions needs --baseline and --labels")
        labels = load_dataset(args.labels, normalize=False).labels
        if labels is None:
            raise CliError(f"{args.labels}: no labels")
        assign = read_assignments(args.assignments) if args.assignments else {}
        b_assign = read_assignments(args.baseline_assignments) if args.baseline_assignments else {}
        report = false_pair_audit(read_decisions(args.decisions), labels, assign, read_decisions(args.baseline), b_assign)
    else:
        cfg = _resolve_config(args, cfgmod.to_kv(AUDIT))
        if args.points:
            ds = load_dataset(args.points, normalize=False)
            if ds.labels is None or ds.shape[1] != 1:
                raise CliError(f"{args.points}: need a labelled container with T=1")
            points, labels = ds.data[:, 0, :].astype(np.float64), ds.labels
        else:
            n, classes, depth = args.demo_blobs
            points, labels = hierarchical_blob_points(n, cfg.seed, n_classes=classes, depth=depth)
        ours, assign, base, base_assign = pairing_decisions(points, labels, cfg, cfg.seed, args.k)
        report = false_pair_audit(ours, labels, assign, base, base_assign)
        if out is not None:
            for prefix, rows, table in (("", ours, assign), ("baseline_", base, base_assign)):
                with open(out / f"{prefix}decisions.csv", "w", newline="") as fh:
                    write_decisions(fh, rows)
                with open(out / f"{prefix}assignments.csv", "w", newline="") as fh:
                    write_assignments(fh, table)
    text = json.dumps(report.to_dict())
    print(text)
    if out is not None:
        (out / "audit.json").write_text(text + "\n")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "evaluate": cmd_evaluate, "cluster": cmd_cluster, "audit-pairs": cmd_audit}


def _error(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = 1 if args.deterministic else args.threads
    limiter = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
    try:
        with limiter:
            return COMMANDS[args.command](args)
    except cfgmod.ConfigError as exc:
        _error("config", exc)
    except (DataError, FileNotFoundError) as exc:
        _error("data", exc)
    except TrainingAborted as exc:
        _error("training", exc)
    except (CliError, ValueError) as exc:
        _error("usage", exc)
    return 1


if __name__ == "__main__":
    sys.exit(main())
