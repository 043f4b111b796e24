"""Seed-averaged probe accuracy for each training variant on the synthetic series."""
import argparse

import numpy as np

from mhccl.experiments import SMALL_DATA, VARIANTS, blob_dataset, pretrain_and_probe, with_overrides


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--variants", nargs="+", default=["full", "no_downward", "no_hierarchy"], choices=sorted(VARIANTS))
    args = ap.parse_args()
    ds = blob_dataset(0)
    print(f"{'variant':<20}{'mean ACC':>10}{'std':>8}  per seed")
    for name in args.variants:
        cfg = with_overrides(SMALL_DATA, VARIANTS[name])
        accs = [pretrain_and_probe(ds, cfg, s)[0].accuracy for s in range(args.seeds)]
        print(f"{name:<20}{np.mean(accs):>10.4f}{np.std(accs):>8.4f}  " + " ".join(f"{a:.3f}" for a in accs))


if __name__ == "__main__":
    main()
