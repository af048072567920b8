#!/usr/bin/env python3
"""Emit the closed-form tables: fault frontier, branch bounds, deposit depths.

Four CSVs: the (t, d, q) tolerance frontier for a committee size, the branch
bound as the colluding count grows, the finalization-depth curve over branch
counts, and the reference depths with the two quoted figures that fail their
own inequality flagged.
"""

import argparse
import csv
import os
import sys

from accbft.analysis import (
    blockdepth_curve_rows,
    blockdepth_reference_rows,
    branch_curve_rows,
    frontier_rows,
)
from accbft.committee import default_h0
from accbft.harness import OUTDIR_ENV


def write_rows(path: str, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if rows:
            writer.writerow(list(rows[0]))
            for row in rows:
                writer.writerow([str(v) for v in row.values()])
    print("wrote %s (%d rows)" % (path, len(rows)))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=9)
    parser.add_argument("--h", type=int, default=None)
    parser.add_argument("--b", default="0.1", help="deposit factor")
    parser.add_argument("--rho", default="0.9", help="attack success probability")
    parser.add_argument("--max-branches", type=int, default=60)
    parser.add_argument("--outdir", default=os.environ.get(OUTDIR_ENV, "."))
    args = parser.parse_args()

    h = args.h if args.h is not None else default_h0(args.n)
    os.makedirs(args.outdir, exist_ok=True)
    write_rows(
        os.path.join(args.outdir, "frontier_n%d.csv" % args.n),
        frontier_rows(args.n, h),
    )
    write_rows(
        os.path.join(args.outdir, "branches_n%d.csv" % args.n),
        branch_curve_rows(args.n, h),
    )
    write_rows(
        os.path.join(args.outdir, "blockdepth_curve.csv"),
        blockdepth_curve_rows(args.b, args.rho, range(2, args.max_branches + 1)),
    )
    write_rows(
        os.path.join(args.outdir, "blockdepth_reference.csv"),
        blockdepth_reference_rows(),
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
