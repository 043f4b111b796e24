"""Pretrain on the synthetic 3-class series, then report the linear probe on the test split."""
import argparse
import json
import time

from mhccl.experiments import SMALL_DATA, VARIANTS, blob_dataset, pretrain_and_probe, with_overrides


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variant", choices=sorted(VARIANTS), default="full")
    ap.add_argument("--out", help="directory for checkpoints and logs (one subdirectory per seed)")
    args = ap.parse_args()
    cfg = with_overrides(SMALL_DATA, VARIANTS[args.variant])
    for seed in args.seeds:
        start = time.perf_counter()
        out = f"{args.out}/seed{seed}" if args.out else None
        rep, _ = pretrain_and_probe(blob_dataset(0), cfg, seed, out)
        elapsed = time.perf_counter() - start
        print(json.dumps({"seed": seed, "accuracy": rep.accuracy, "macro_f1": rep.macro_f1, "kappa": rep.kappa, "seconds": round(elapsed, 1)}))


if __name__ == "__main__":
    main()
