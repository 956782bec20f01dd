#!/usr/bin/env python3
"""Overfit sanity study: the pure segmentation arm must memorize a handful
of expert phantom slices.

Usage: python scripts/overfit_sanity.py [--iters 300] [--crop 112]
                                        [--out DIR]
"""

import argparse
import json
import time

from cardioseg.experiments import run_overfit_sanity


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iters", type=int, default=300)
    parser.add_argument("--crop", type=int, default=112)
    parser.add_argument("--slices", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None,
                        help="keep artifacts here instead of a temp dir")
    args = parser.parse_args()

    t0 = time.perf_counter()
    summary = run_overfit_sanity(out_dir=args.out, iters=args.iters,
                                 crop=args.crop, n_slices=args.slices,
                                 seed=args.seed)
    minutes = (time.perf_counter() - t0) / 60
    print(json.dumps(summary, indent=1, default=str))
    print(f"\nmean foreground dice: {summary['mean_foreground_dice']:.4f} "
          f"in {minutes:.1f} min")


if __name__ == "__main__":
    main()
