#!/usr/bin/env python3
"""Run the long-lived chain scenario and report committee convergence.

For each seed: membership changes used, the deceitful-ratio trajectory, time
to detect the fraud-trigger quorum, and the length of the final agreeing run
of heights.
"""

import argparse
import csv
import os
import sys

from accbft.harness import OUTDIR_ENV
from accbft.scenarios import llb_scenario, run_scenario


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--heights", type=int, default=102)
    parser.add_argument("--pool", type=int, default=12)
    parser.add_argument("--outdir", default=os.environ.get(OUTDIR_ENV, "."))
    args = parser.parse_args()

    scn = llb_scenario(heights=args.heights, pool=args.pool)
    os.makedirs(args.outdir, exist_ok=True)
    path = os.path.join(args.outdir, "membership_convergence.csv")
    failures = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "seed",
                "changes",
                "agreed_tail",
                "final_ratio",
                "time_to_detect_ticks",
                "excluded",
                "included",
                "trajectory",
            ]
        )
        for seed in range(1, args.seeds + 1):
            record = run_scenario(scn, seed).record
            trajectory = ";".join("%s@%s" % (r, t) for t, r in record["ratio_trajectory"])
            included = sorted(
                {pid for change in record["changes"] for pid in change["included"]}
            )
            writer.writerow(
                [
                    seed,
                    len(record["changes"]),
                    record["agreed_tail"],
                    record["ratio_trajectory"][-1][1],
                    record["time_to_detect_ticks"],
                    "|".join(map(str, record["excluded_members"])),
                    "|".join(map(str, included)),
                    trajectory,
                ]
            )
            converged = record["agreed_tail"] >= args.heights - 2
            failures += not converged
            print(
                "seed %-3d changes=%d tail=%d ratio %s detect=%s %s"
                % (
                    seed,
                    len(record["changes"]),
                    record["agreed_tail"],
                    record["ratio_trajectory"][-1][1],
                    record["time_to_detect_ticks"],
                    "ok" if converged else "NOT CONVERGED",
                )
            )
    print("wrote", path)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
