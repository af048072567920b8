#!/usr/bin/env python3
"""Measure post-stabilization messages per binary-consensus instance vs n.

Averages over seeds at each committee size, prints the growth ratios, and
writes a CSV with the fitted cubic-band check used by the complexity suite.
"""

import argparse
import csv
import os
import sys

from accbft.harness import COMPLEXITY_SIZES, OUTDIR_ENV, complexity_means


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+", default=list(COMPLEXITY_SIZES))
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--outdir", default=os.environ.get(OUTDIR_ENV, "."))
    args = parser.parse_args()

    means = complexity_means(args.seeds, tuple(args.sizes))
    sizes = sorted(means)
    os.makedirs(args.outdir, exist_ok=True)
    path = os.path.join(args.outdir, "complexity_growth.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["n", "seeds", "msgs_per_instance", "ratio_to_prev", "cubic_ratio"]
        )
        prev = None
        for n in sizes:
            ratio = "" if prev is None else round(means[n] / means[prev], 3)
            cubic = "" if prev is None else round((n / prev) ** 3, 3)
            writer.writerow([n, args.seeds, round(means[n], 2), ratio, cubic])
            print(
                "n=%-3d mean %-10.1f growth %-8s (cubic bound %s)"
                % (n, means[n], ratio, cubic)
            )
            prev = n
    print("wrote", path)
    ok = all(
        means[b] / means[a] <= (b / a) ** 3 for a, b in zip(sizes, sizes[1:])
    )
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
