"""Command-line harness: seed parsing, CSV output, and exit codes."""

import json

import pytest

from accbft.committee import FaultProfile, threshold_tolerated
from accbft.harness import (
    CSV_COLUMNS,
    CSV_SCHEMA,
    EX_INVARIANT,
    EX_OK,
    EX_SCENARIO,
    EX_USAGE,
    OUTDIR_ENV,
    main,
    parse_seeds,
    pick_profile,
    record_to_row,
    write_csv,
)
from accbft.scenarios import Scenario, clean_scenario, fork_scenario

EXACT_FLUX = "1087297357828858466646322531/1000000000000000000000000000000"


def run_cli(capsys, *argv):
    with pytest.raises(SystemExit) as exc:
        main(list(argv))
    out = capsys.readouterr()
    return exc.value.code, out.out, out.err


# -- seed specs -------------------------------------------------------------


@pytest.mark.parametrize(
    ("spec", "want"),
    [
        ("7", [7]),
        ("1..5", [1, 2, 3, 4, 5]),
        ("1,4,9..11", [1, 4, 9, 10, 11]),
        ("3, 1..2 ,2", [1, 2, 3]),
    ],
)
def test_parse_seeds(spec, want):
    assert parse_seeds(spec) == want


def test_parse_seeds_rejects_garbage():
    with pytest.raises(ValueError, match="seed range 5..1 is reversed"):
        parse_seeds("5..1")
    with pytest.raises(ValueError, match="empty seed entry"):
        parse_seeds("1,,2")
    with pytest.raises(ValueError):
        parse_seeds("forty")


# -- rows and files ---------------------------------------------------------


def test_row_matches_the_column_list(clean_record):
    row = record_to_row(clean_record)
    assert len(row) == len(CSV_COLUMNS) == 45
    assert all(isinstance(cell, str) for cell in row)
    assert row[CSV_COLUMNS.index("schema")] == CSV_SCHEMA == "accbft.v1"
    assert row[CSV_COLUMNS.index("disagreements")] == "0"
    assert row[CSV_COLUMNS.index("chain_digests_distinct")] == "1"


def test_write_csv_is_byte_stable(clean_record, tmp_path):
    row = record_to_row(clean_record)
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    assert write_csv(first, [row, row]) == 2
    write_csv(second, [row, row])
    assert first.read_bytes() == second.read_bytes()
    header = first.read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)


def test_pick_profile_is_deterministic_and_tolerated():
    for n in (4, 7, 10):
        for seed in range(1, 30):
            t, d, q = pick_profile(n, seed)
            assert pick_profile(n, seed) == (t, d, q)
            h0 = (2 * n + 2) // 3
            assert threshold_tolerated(FaultProfile(n, t, d, q), h0) == (True, True)


# -- analyze subcommand -----------------------------------------------------


@pytest.mark.parametrize(
    ("argv", "want"),
    [
        (("analyze", "blockdepth", "--a", "3"), "28"),
        (("analyze", "blockdepth", "--a", "6"), "37"),
        (("analyze", "branches", "--delta", "0.66"), "51"),
        (("analyze", "branches", "--n", "9", "--dt", "5"), "4"),
        (("analyze", "confirm", "--n", "9", "--h", "6", "--alpha", "4/9"), "8"),
        (("analyze", "confirm", "--alpha", "2/3"), "9"),
        (("analyze", "flux", "--a", "3", "--w", "28", "--exact"), EXACT_FLUX),
    ],
)
def test_analyze_prints_single_values(capsys, argv, want):
    code, out, _ = run_cli(capsys, *argv)
    assert code == EX_OK
    assert out.strip() == want


def test_analyze_tables_are_csv(capsys):
    code, out, _ = run_cli(capsys, "analyze", "reference")
    assert code == EX_OK
    lines = out.strip().splitlines()
    assert lines[0].startswith("branches,")
    assert len(lines) == 6

    code, out, _ = run_cli(capsys, "analyze", "frontier", "--n", "9", "--h", "6")
    assert code == EX_OK
    assert len(out.strip().splitlines()) == 4

    code, out, _ = run_cli(capsys, "analyze", "blockdepth", "--curve", "2..4")
    assert code == EX_OK
    assert len(out.strip().splitlines()) == 4


def test_analyze_rejects_bad_requests(capsys):
    code, _, err = run_cli(capsys, "analyze", "blockdepth")
    assert code == EX_SCENARIO
    assert "blockdepth needs --a or --curve" in err

    code, _, err = run_cli(capsys, "analyze", "branches", "--n", "9", "--dt", "6")
    assert code == EX_SCENARIO
    assert err.startswith("error:")


def test_usage_errors_exit_64(capsys):
    assert run_cli(capsys)[0] == EX_USAGE
    assert run_cli(capsys, "frobnicate")[0] == EX_USAGE
    assert run_cli(capsys, "run")[0] == EX_USAGE  # --scenario is required


# -- run subcommand ---------------------------------------------------------


def write_scenario(tmp_path, scn, stem="scn"):
    path = tmp_path / (stem + ".json")
    path.write_text(json.dumps(scn.to_dict()))
    return str(path)


def test_run_writes_csv_and_jsonl(capsys, tmp_path):
    path = write_scenario(tmp_path, clean_scenario(4, heights=2))
    code, out, _ = run_cli(
        capsys, "run", "--scenario", path, "--seeds", "1..2",
        "--outdir", str(tmp_path), "--out", "mini",
    )
    assert code == EX_OK
    assert "wrote" in out
    csv_lines = (tmp_path / "mini.csv").read_text().splitlines()
    assert len(csv_lines) == 3 and csv_lines[0] == ",".join(CSV_COLUMNS)
    jsonl = (tmp_path / "mini.jsonl").read_text().splitlines()
    assert len(jsonl) == 2
    assert json.loads(jsonl[0])["seed"] == 1


def test_run_parallel_matches_serial(capsys, tmp_path):
    path = write_scenario(tmp_path, clean_scenario(4, heights=2))
    for jobs, stem in (("1", "serial"), ("2", "parallel")):
        code, _, _ = run_cli(
            capsys, "run", "--scenario", path, "--seeds", "1..4",
            "--jobs", jobs, "--outdir", str(tmp_path), "--out", stem,
        )
        assert code == EX_OK
    serial = (tmp_path / "serial.csv").read_bytes()
    assert serial == (tmp_path / "parallel.csv").read_bytes()


def test_run_honours_the_outdir_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTDIR_ENV, str(tmp_path))
    path = write_scenario(tmp_path, clean_scenario(4))
    code, _, _ = run_cli(capsys, "run", "--scenario", path, "--seeds", "1")
    assert code == EX_OK
    assert (tmp_path / "clean-n4.csv").exists()


def test_run_trace_dumps_event_logs(capsys, tmp_path):
    path = write_scenario(tmp_path, clean_scenario(4))
    code, _, _ = run_cli(
        capsys, "run", "--scenario", path, "--seeds", "1",
        "--outdir", str(tmp_path), "--trace",
    )
    assert code == EX_OK
    lines = (tmp_path / "clean-n4-seed1.trace.jsonl").read_text().splitlines()
    assert lines
    event = json.loads(lines[0])
    assert {"t", "ev"} <= set(event)


def test_run_rejects_broken_scenarios(capsys, tmp_path):
    code, _, err = run_cli(capsys, "run", "--scenario", str(tmp_path / "no.json"))
    assert code == EX_SCENARIO
    assert err.startswith("scenario error:")

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "bad", "n": 4}))
    code, _, err = run_cli(capsys, "run", "--scenario", str(bad))
    assert code == EX_SCENARIO
    assert "required field missing" in err


def test_run_reports_invariant_violations_with_exit_3(capsys, tmp_path):
    # Deceitful majority coalition, no standby pool: the survivors detect the
    # fraud, run out of replacements, and the run must say so loudly.
    stall = Scenario(
        name="stall-no-pool", n=9, t=0, d=5, q=0,
        h0=7, h_prime0=7, delta_ms=60, gst_ms=40, horizon_ms=120_000,
        heights=2, pool=0, partitions=((6, 7), (8, 9)),
        attack={"kind": "broadcast-fork"},
        delay={"model": "uniform", "lo_ms": 1, "hi_ms": 6},
    )
    path = write_scenario(tmp_path, stall)
    code, _, err = run_cli(
        capsys, "run", "--scenario", path, "--seeds", "1", "--outdir", str(tmp_path)
    )
    assert code == EX_INVARIANT
    assert "invariant violation" in err
    assert "pool exhausted" in err


# -- suite subcommand -------------------------------------------------------


def test_suite_zeroloss_passes(capsys):
    code, out, _ = run_cli(capsys, "suite", "zeroloss")
    assert code == EX_OK
    lines = out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_suite_agreement_small_batch(capsys):
    code, out, _ = run_cli(capsys, "suite", "agreement", "--seeds", "2")
    assert code == EX_OK
    assert all(line.startswith("PASS") for line in out.strip().splitlines())
