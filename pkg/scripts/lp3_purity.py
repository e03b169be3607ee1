"""Label purity of an lp3 run against the fixture's per-pixel plane ids.

    python scripts/lp3_purity.py FIXTURE_DIR [--run run]
"""
import argparse
from pathlib import Path

import numpy as np

from planesplat.io import read_label_png


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("fixture")
    ap.add_argument("--run", default="run")
    args = ap.parse_args()
    fx = Path(args.fixture)
    worst = 1.0
    for p in sorted((fx / args.run / "lp3" / "labels").glob("*.png")):
        labels, gt = read_label_png(p), read_label_png(fx / "gt" / "plane_id" / p.name)
        parts = []
        for lab in range(1, labels.max() + 1):
            ids, cnt = np.unique(gt[labels == lab], return_counts=True)
            pur = cnt.max() / cnt.sum()
            worst = min(worst, pur)
            parts.append(f"{lab}->gt{ids[cnt.argmax()]} {pur:.3f} ({cnt.sum()} px)")
        print(p.stem, "  ".join(parts) or "no planes")
    print(f"worst purity {worst:.4f}")


if __name__ == "__main__":
    main()
