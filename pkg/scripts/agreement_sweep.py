#!/usr/bin/env python3
"""Sweep seeded runs over random tolerated fault profiles and tabulate outcomes.

Writes one CSV row per run (plus the standard JSON-lines records) and prints a
per-n summary.  Every run must agree and terminate; the exit code reflects it.
"""

import argparse
import os
import sys

from accbft.harness import (
    OUTDIR_ENV,
    pick_profile,
    record_to_row,
    write_csv,
)
from accbft.scenarios import agreement_scenario, canonical_record, run_scenario


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+", default=[4, 7, 10])
    parser.add_argument("--seeds", type=int, default=50, help="runs per size")
    parser.add_argument("--outdir", default=os.environ.get(OUTDIR_ENV, "."))
    args = parser.parse_args()

    os.makedirs(args.outdir, exist_ok=True)
    rows, lines, bad = [], [], 0
    for n in args.sizes:
        disagreements = stuck = 0
        for seed in range(1, args.seeds + 1):
            t, d, q = pick_profile(n, seed)
            record = run_scenario(agreement_scenario(n, t, d, q), seed).record
            rows.append(record_to_row(record))
            lines.append(canonical_record(record))
            disagreements += record["disagreements"]
            stuck += any(
                v < record["heights_target"]
                for v in record["heights_done"].values()
            )
        bad += disagreements + stuck
        print(
            "n=%-3d %d runs: %d disagreements, %d non-terminating"
            % (n, args.seeds, disagreements, stuck)
        )

    csv_path = os.path.join(args.outdir, "agreement_sweep.csv")
    write_csv(csv_path, rows)
    with open(os.path.join(args.outdir, "agreement_sweep.jsonl"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("wrote", csv_path)
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
