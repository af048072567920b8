"""Command-line front end: batch scenario runs, check suites, bound tables.

Exit codes: 0 success; 2 scenario description rejected (field-level
diagnostics on stderr); 3 a run tripped a protocol invariant; 1 a check
suite reported failures; 64 unusable command line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import multiprocessing
import os
import random
import sys
import time
from fractions import Fraction
from typing import Iterable, Optional

from .analysis import (
    ZeroLossParams,
    alpha_confirm_threshold,
    as_fraction,
    blockdepth_curve_rows,
    blockdepth_reference_rows,
    branch_curve_rows,
    conservative_branches,
    deposit_flux,
    frontier_rows,
    max_branches,
    min_blockdepth,
)
from .committee import FaultProfile, consensus_tolerated, threshold_tolerated
from .scenarios import (
    Scenario,
    ScenarioError,
    agreement_scenario,
    canonical_record,
    complexity_scenario,
    default_h0,
    fork_scenario,
    llb_scenario,
    load_scenario,
    run_scenario,
    spam_scenario,
    tolerated_profiles,
)

EX_OK = 0
EX_SUITE = 1
EX_SCENARIO = 2
EX_INVARIANT = 3
EX_USAGE = 64

OUTDIR_ENV = "ACCBFT_OUTDIR"

CSV_SCHEMA = "accbft.v1"

# Flat projection of a run record; one row per (scenario, seed).  The column
# list is the schema contract: append-only, never reordered.
CSV_COLUMNS = (
    "schema",
    "scenario",
    "seed",
    "stop_reason",
    "virtual_ticks",
    "n",
    "t",
    "d",
    "q",
    "h0",
    "h_prime0",
    "mode",
    "payload",
    "heights_target",
    "heights_done_min",
    "heights_done_max",
    "agreed_heights",
    "agreed_tail",
    "disagreements",
    "branches_max",
    "membership_changes",
    "excluded",
    "included",
    "final_members",
    "fraud_threshold",
    "pofs_min",
    "pofs_max",
    "time_to_detect_ticks",
    "exclusion_ticks",
    "inclusion_ticks",
    "msgs_total",
    "msgs_post_gst",
    "msgs_omitted",
    "msgs_per_binary_instance",
    "intra_delay_mean_ticks",
    "cross_delay_mean_ticks",
    "chain_digest",
    "chain_digests_distinct",
    "deposit_initial",
    "deposit_final_min",
    "deposit_final_max",
    "deposit_flux_min",
    "deposit_flux_max",
    "confirmed",
    "failures",
)


def parse_seeds(text: str) -> list[int]:
    """Expand a seed list: "7", "1..5", "1,4,9..11" -> sorted unique ints."""
    seeds: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            raise ValueError("empty seed entry")
        if ".." in part:
            lo, _, hi = part.partition("..")
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError("seed range %s is reversed" % part)
            seeds.update(range(lo, hi + 1))
        else:
            seeds.add(int(part))
    return sorted(seeds)


def _join(values: Iterable) -> str:
    return "|".join(str(v) for v in values)


def record_to_row(record: dict) -> list[str]:
    """Flatten a run record into CSV_COLUMNS order (all values stringified)."""
    done = list(record["heights_done"].values())
    pofs = list(record["pof_counts"].values())
    digests = sorted(set(record["chain_digests"].values()))
    combined = hashlib.sha256("\n".join(digests).encode()).hexdigest()
    included: list[int] = []
    for change in record["changes"]:
        included.extend(change["included"])
    deposit = record.get("deposit")
    finals = list(deposit["final"].values()) if deposit else []
    fluxes = list(deposit["flux"].values()) if deposit else []
    confirm = record.get("confirm")
    msgs = record["messages"]

    def blank_if_none(v) -> str:
        return "" if v is None else str(v)

    values = {
        "schema": CSV_SCHEMA,
        "scenario": record["scenario"],
        "seed": record["seed"],
        "stop_reason": record["stop_reason"],
        "virtual_ticks": record["virtual_ticks"],
        "n": record["n"],
        "t": record["t"],
        "d": record["d"],
        "q": record["q"],
        "h0": record["h0"],
        "h_prime0": record["h_prime0"],
        "mode": record["mode"],
        "payload": record["payload"],
        "heights_target": record["heights_target"],
        "heights_done_min": min(done, default=0),
        "heights_done_max": max(done, default=0),
        "agreed_heights": record["agreed_heights"],
        "agreed_tail": record["agreed_tail"],
        "disagreements": record["disagreements"],
        "branches_max": record["branches_max"],
        "membership_changes": len(record["changes"]),
        "excluded": _join(record["excluded_members"]),
        "included": _join(sorted(set(included))),
        "final_members": _join(record["final_members"]),
        "fraud_threshold": record["fraud_threshold"],
        "pofs_min": min(pofs, default=0),
        "pofs_max": max(pofs, default=0),
        "time_to_detect_ticks": blank_if_none(record["time_to_detect_ticks"]),
        "exclusion_ticks": _join(c["exclusion_ticks"] for c in record["changes"]),
        "inclusion_ticks": _join(c["inclusion_ticks"] for c in record["changes"]),
        "msgs_total": msgs["total"],
        "msgs_post_gst": msgs["post_gst"],
        "msgs_omitted": msgs["omitted"],
        "msgs_per_binary_instance": record["msgs_per_binary_instance"],
        "intra_delay_mean_ticks": blank_if_none(msgs["intra_delay_mean_ticks"]),
        "cross_delay_mean_ticks": blank_if_none(msgs["cross_delay_mean_ticks"]),
        "chain_digest": combined,
        "chain_digests_distinct": len(digests),
        "deposit_initial": deposit["initial"] if deposit else "",
        "deposit_final_min": min(finals) if finals else "",
        "deposit_final_max": max(finals) if finals else "",
        "deposit_flux_min": min(fluxes) if fluxes else "",
        "deposit_flux_max": max(fluxes) if fluxes else "",
        "confirmed": (
            sum(1 for v in confirm.values() if v is not None)
            if confirm is not None
            else ""
        ),
        "failures": len(record["failures"]),
    }
    return [str(values[col]) for col in CSV_COLUMNS]


def write_csv(path: str, rows: Iterable[list[str]]) -> int:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        count = 0
        for row in rows:
            writer.writerow(row)
            count += 1
    return count


def _run_task(task: tuple[Scenario, int, bool]) -> tuple[dict, Optional[list]]:
    scn, seed, trace = task
    out = run_scenario(scn, seed, trace=trace)
    return out.record, (out.world.net.trace if trace else None)


def _run_batch(
    tasks: list[tuple[Scenario, int, bool]], jobs: int
) -> list[tuple[dict, Optional[list]]]:
    """Run (scenario, seed) tasks, optionally in parallel over seeds.

    Each run is an isolated single-threaded simulation; results keep the
    submission order regardless of worker scheduling.
    """
    if jobs > 1 and len(tasks) > 1:
        with multiprocessing.Pool(jobs) as pool:
            return pool.map(_run_task, tasks)
    return [_run_task(t) for t in tasks]


def cmd_run(args: argparse.Namespace) -> int:
    outdir = args.outdir or os.environ.get(OUTDIR_ENV) or "."
    try:
        scenarios = [load_scenario(path) for path in args.scenario]
    except ScenarioError as exc:
        sys.stderr.write("scenario error:\n")
        for problem in exc.problems:
            sys.stderr.write("  - %s\n" % problem)
        return EX_SCENARIO
    except OSError as exc:
        sys.stderr.write("scenario error:\n  - %s\n" % exc)
        return EX_SCENARIO

    tasks = []
    for scn in sorted(scenarios, key=lambda s: s.name):
        seeds = args.seeds if args.seeds is not None else sorted(set(scn.seeds))
        for seed in seeds:
            tasks.append((scn, seed, args.trace))

    os.makedirs(outdir, exist_ok=True)
    results = _run_batch(tasks, args.jobs)

    rows, lines, violated = [], [], False
    for (scn, seed, _), (record, trace) in zip(tasks, results):
        if record["failures"]:
            violated = True
            for pid, failure in record["failures"].items():
                sys.stderr.write(
                    "invariant violation: %s seed=%d pid=%s: %s\n"
                    % (scn.name, seed, pid, failure)
                )
        rows.append(record_to_row(record))
        lines.append(canonical_record(record))
        if trace is not None:
            tpath = os.path.join(outdir, "%s-seed%d.trace.jsonl" % (scn.name, seed))
            with open(tpath, "w", encoding="utf-8") as fh:
                for event in trace:
                    fh.write(json.dumps(event, sort_keys=True) + "\n")
        print(
            "run %s seed=%d: %s heights=%s agreed=%d disagreements=%d"
            % (
                scn.name,
                seed,
                record["stop_reason"],
                min(record["heights_done"].values(), default=0),
                record["agreed_heights"],
                record["disagreements"],
            )
        )

    stem = args.out or (scenarios[0].name if len(scenarios) == 1 else "batch")
    csv_path = os.path.join(outdir, stem + ".csv")
    count = write_csv(csv_path, rows)
    jsonl_path = os.path.join(outdir, stem + ".jsonl")
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    print("wrote %s (%d rows) and %s" % (csv_path, count, jsonl_path))
    return EX_INVARIANT if violated else EX_OK


# ---------------------------------------------------------------------------
# check suites
# ---------------------------------------------------------------------------


def pick_profile(n: int, seed: int) -> tuple[int, int, int]:
    """Deterministic tolerated (t, d, q) choice for an (n, seed) pair."""
    profiles = tolerated_profiles(n)
    return profiles[random.Random((n << 20) ^ seed).randrange(len(profiles))]


def _terminated(record: dict) -> bool:
    return all(
        v >= record["heights_target"] for v in record["heights_done"].values()
    )


def _ratio_non_increasing(record: dict) -> bool:
    ratios = [Fraction(r) for _, r in record["ratio_trajectory"]]
    return all(b <= a for a, b in zip(ratios, ratios[1:]))


def suite_agreement(seeds: int = 200) -> list[tuple[str, bool, str]]:
    checks = []

    mismatch = 0
    for n in range(1, 13):
        for t in range(n + 1):
            for d in range(n + 1 - t):
                for q in range(n + 1 - t - d):
                    profile = FaultProfile(n, t, d, q)
                    direct = consensus_tolerated(profile)
                    via_h = any(
                        all(threshold_tolerated(profile, h))
                        for h in range(n // 2 + 1, n + 1)
                    )
                    mismatch += direct != via_h
    checks.append(
        (
            "tolerance-frontier-equivalence",
            mismatch == 0,
            "profile-vs-threshold disagreements for n<=12: %d" % mismatch,
        )
    )

    started = time.monotonic()
    failures = []
    for n in (4, 7, 10):
        for seed in range(1, seeds + 1):
            t, d, q = pick_profile(n, seed)
            record = run_scenario(agreement_scenario(n, t, d, q), seed).record
            if record["disagreements"] or not _terminated(record):
                failures.append((n, seed, t, d, q))
    elapsed = time.monotonic() - started
    checks.append(
        (
            "agreement-under-tolerated-faults",
            not failures,
            "%d runs in %.1fs, failing: %s" % (3 * seeds, elapsed, failures or "none"),
        )
    )
    return checks


def suite_attack(seeds: int = 100) -> list[tuple[str, bool, str]]:
    checks = []

    spam = spam_scenario()
    bad_spam = []
    for seed in range(1, seeds + 1):
        record = run_scenario(spam, seed).record
        one_exclusion = all(
            len(v) == 1 for v in record["committee_excluded"].values()
        )
        if not (_terminated(record) and one_exclusion):
            bad_spam.append(seed)
    checks.append(
        (
            "spam-terminates-after-one-exclusion",
            not bad_spam,
            "%d seeds, failing: %s" % (seeds, bad_spam or "none"),
        )
    )

    oracle_bad = 0
    for n in range(1, 13):
        for h in range(n // 2 + 1, n + 1):
            for dt in range(h):
                bound = max_branches(n, h, dt)
                greedy = max(1, (n - dt) // (h - dt))
                oracle_bad += bound != greedy
    checks.append(
        ("branch-bound-oracle", oracle_bad == 0, "mismatches for n<=12: %d" % oracle_bad)
    )

    for kind in ("broadcast-fork", "binary-fork"):
        scn = fork_scenario(kind)
        h0 = default_h0(scn.n)
        need = 2 * h0 - scn.n
        bound = max_branches(scn.n, h0, scn.d + scn.t)
        forked = 0
        bad: list[tuple[int, str]] = []
        for seed in range(1, seeds + 1):
            record = run_scenario(scn, seed).record
            if record["branches_max"] > bound:
                bad.append((seed, "branches %d > %d" % (record["branches_max"], bound)))
            if record["disagreements"]:
                forked += 1
                short = [
                    pid
                    for pid, count in record["pof_counts"].items()
                    if count < need
                ]
                if short:
                    bad.append((seed, "honest %s hold < %d proofs" % (short, need)))
        checks.append(
            (
                "%s-accountability" % kind,
                not bad,
                "%d/%d seeds forked, every fork fully attributed (>=%d ids); bad: %s"
                % (forked, seeds, need, bad or "none"),
            )
        )
    return checks


def suite_membership(seeds: int = 5) -> list[tuple[str, bool, str]]:
    scn = llb_scenario()
    bad = []
    changes_seen = []
    for seed in range(1, seeds + 1):
        record = run_scenario(scn, seed).record
        changes_seen.append(len(record["changes"]))
        healthy = (
            len(record["changes"]) <= 3
            and record["agreed_tail"] >= 100
            and _terminated(record)
            and _ratio_non_increasing(record)
        )
        if not healthy:
            bad.append(seed)
    return [
        (
            "llb-converges-to-honest-committee",
            not bad,
            "%d seeds, changes used %s, failing: %s"
            % (seeds, sorted(set(changes_seen)), bad or "none"),
        )
    ]


def suite_zeroloss() -> list[tuple[str, bool, str]]:
    checks = []
    rows = blockdepth_reference_rows()

    exact = {3: 28, 6: 37, 14: 46}
    got = {
        row["branches"]: row["computed_blockdepth"]
        for row in rows
        if row["branches"] in exact and row["attack_success"] == "0.9"
    }
    checks.append(
        (
            "blockdepth-reproduced",
            got == exact,
            "branch counts 3/6/14 -> %s (want %s)" % (got, exact),
        )
    )

    flips = all(
        deposit_flux(ZeroLossParams(row["branches"], row["deposit_factor"],
                                    row["attack_success"], row["computed_blockdepth"]))
        >= 0
        > deposit_flux(ZeroLossParams(row["branches"], row["deposit_factor"],
                                      row["attack_success"],
                                      row["computed_blockdepth"] - 1))
        for row in rows
    )
    checks.append(
        ("deposit-flux-sign-flip", flips, "flux flips sign at every computed depth")
    )

    off = {
        (row["branches"], row["attack_success"]): (
            row["quoted_blockdepth"],
            row["computed_blockdepth"],
        )
        for row in rows
        if not row["matches"]
    }
    expected_off = {(51, "0.9"): (58, 59), (3, "0.55"): (4, 5)}
    checks.append(
        (
            "quoted-figure-discrepancies",
            off == expected_off,
            "quoted depths that fail their own inequality: %s" % (off,),
        )
    )
    return checks


COMPLEXITY_SIZES = (4, 10, 20, 40)


def complexity_means(seeds: int, sizes: tuple = COMPLEXITY_SIZES) -> dict[int, float]:
    means = {}
    for n in sizes:
        scn = complexity_scenario(n)
        total = 0.0
        for seed in range(1, seeds + 1):
            total += run_scenario(scn, seed).record["msgs_per_binary_instance"]
        means[n] = total / seeds
    return means


def suite_complexity(seeds: int = 20) -> list[tuple[str, bool, str]]:
    means = complexity_means(seeds)
    sizes = sorted(means)
    cubic_ok = all(
        means[b] / means[a] <= (b / a) ** 3 for a, b in zip(sizes, sizes[1:])
    )
    ratio = means[40] / means[20]
    in_band = 4 <= ratio <= 12
    detail = "per-instance means %s; 40/20 ratio %.2f" % (
        {n: round(m, 1) for n, m in means.items()},
        ratio,
    )
    return [
        ("message-growth-cubic-band", cubic_ok and in_band, detail),
    ]


SUITES = {
    "agreement": (suite_agreement, 200),
    "attack": (suite_attack, 100),
    "membership": (suite_membership, 5),
    "zeroloss": (suite_zeroloss, None),
    "complexity": (suite_complexity, 20),
}


def cmd_suite(args: argparse.Namespace) -> int:
    fn, default_seeds = SUITES[args.name]
    if default_seeds is None:
        checks = fn()
    else:
        checks = fn(args.seeds if args.seeds is not None else default_seeds)
    failed = 0
    for label, ok, detail in checks:
        print("%s %s: %s" % ("PASS" if ok else "FAIL", label, detail))
        failed += not ok
    return EX_SUITE if failed else EX_OK


# ---------------------------------------------------------------------------
# closed-form tables
# ---------------------------------------------------------------------------


def _print_table(rows: list[dict]) -> None:
    writer = csv.writer(sys.stdout, lineterminator="\n")
    if not rows:
        return
    columns = list(rows[0])
    writer.writerow(columns)
    for row in rows:
        writer.writerow([str(row[col]) for col in columns])


def cmd_analyze(args: argparse.Namespace) -> int:
    h = args.h if args.h is not None else default_h0(args.n)
    try:
        if args.table == "blockdepth":
            if args.curve is not None:
                _print_table(
                    blockdepth_curve_rows(args.b, args.rho, args.curve)
                )
            else:
                if args.a is None:
                    raise ValueError("blockdepth needs --a or --curve")
                print(min_blockdepth(args.a, args.b, args.rho))
        elif args.table == "flux":
            flux = deposit_flux(ZeroLossParams(args.a, args.b, args.rho, args.w))
            print(flux if args.exact else "%.12g" % float(flux))
        elif args.table == "branches":
            if args.delta is not None:
                print(conservative_branches(args.delta, args.h_ratio))
            elif args.curve_table:
                _print_table(branch_curve_rows(args.n, h))
            else:
                print(max_branches(args.n, h, args.dt))
        elif args.table == "confirm":
            print(alpha_confirm_threshold(args.n, h, args.alpha))
        elif args.table == "frontier":
            _print_table(frontier_rows(args.n, h))
        elif args.table == "reference":
            _print_table(blockdepth_reference_rows())
    except ValueError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return EX_SCENARIO
    return EX_OK


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the usage code instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write("error: %s\n" % message)
        sys.exit(EX_USAGE)


def _fraction(text: str) -> Fraction:
    return as_fraction(text)


def _int_range(text: str) -> range:
    lo, _, hi = text.partition("..")
    return range(int(lo), int(hi) + 1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="accbft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario file over a seed batch")
    run.add_argument(
        "--scenario", action="append", required=True, metavar="PATH",
        help="scenario JSON (repeatable)",
    )
    run.add_argument(
        "--seeds", type=parse_seeds, default=None, metavar="SPEC",
        help='seed list, e.g. "7", "1..5", "1,3,9..11" (default: scenario file)',
    )
    run.add_argument(
        "--outdir", default=None,
        help="output directory (default: $%s or .)" % OUTDIR_ENV,
    )
    run.add_argument("--out", default=None, help="output file stem")
    run.add_argument(
        "--jobs", type=int, default=1, help="parallel workers over seeds"
    )
    run.add_argument(
        "--trace", action="store_true", help="dump per-run JSON-lines event logs"
    )
    run.set_defaults(func=cmd_run)

    suite = sub.add_parser("suite", help="run a named check suite")
    suite.add_argument("name", choices=sorted(SUITES))
    suite.add_argument(
        "--seeds", type=int, default=None, help="seeds per scenario (suite default)"
    )
    suite.set_defaults(func=cmd_suite)

    analyze = sub.add_parser("analyze", help="closed-form bounds and tables")
    analyze.add_argument(
        "table",
        choices=("blockdepth", "flux", "branches", "confirm", "frontier", "reference"),
    )
    analyze.add_argument("--a", type=int, default=None, help="branch count")
    analyze.add_argument("--b", type=_fraction, default=Fraction(1, 10),
                         help="deposit factor")
    analyze.add_argument("--rho", type=_fraction, default=Fraction(9, 10),
                         help="per-block attack success probability")
    analyze.add_argument("--w", type=int, default=0, help="finalization depth")
    analyze.add_argument("--n", type=int, default=9)
    analyze.add_argument("--h", type=int, default=None)
    analyze.add_argument("--dt", type=int, default=0,
                         help="deceitful+byzantine count")
    analyze.add_argument("--alpha", type=_fraction, default=Fraction(4, 9))
    analyze.add_argument("--delta", type=_fraction, default=None,
                         help="deceitful ratio (conservative branch bound)")
    analyze.add_argument("--h-ratio", type=_fraction, default=Fraction(2, 3))
    analyze.add_argument("--curve", type=_int_range, default=None,
                         metavar="LO..HI", help="emit a table over branch counts")
    analyze.add_argument("--curve-table", action="store_true",
                         help="emit the branch-bound table for --n/--h")
    analyze.add_argument("--exact", action="store_true",
                         help="print flux as an exact fraction")
    analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[list[str]] = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    sys.exit(args.func(args))


if __name__ == "__main__":
    main()
