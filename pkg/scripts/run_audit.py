"""False negative audit: hierarchical pairing vs flat K-means pairing on labelled blobs."""
import argparse
import dataclasses
import json

import numpy as np

from mhccl.experiments import AUDIT, audit_pairing, hierarchical_blob_points


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    rows = []
    for seed in range(args.seeds):
        x, y = hierarchical_blob_points(args.n, seed)
        rep = audit_pairing(x, y, AUDIT, seed)
        rows.append(dataclasses.asdict(rep))
        print(json.dumps({"seed": seed, **rows[-1]}))
    for key in ("instance_reduction", "cluster_reduction"):
        print(f"mean {key}: {np.mean([r[key] for r in rows]):.3f}")


if __name__ == "__main__":
    main()
