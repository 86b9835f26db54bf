import csv
import io
import json
import subprocess
import sys

import pytest

from splcnsw.cli import BENCH_COLUMNS, BENCH_VERSION, UsageError, bench, main, parse_sizes, rows_to_csv, run_pipeline
from splcnsw.core import save_instance

from helpers import splc_hand, two_by_two


@pytest.fixture
def golden(tmp_path):
    path = tmp_path / "golden.json"
    save_instance(two_by_two(), path)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_run_pipeline_exact_ratio_one(golden):
    rep = run_pipeline(golden, "exact")
    assert rep["ratio"] == pytest.approx(1.0)
    assert rep["instance"] == "golden" and rep["nsw_product"] == pytest.approx(4)
    for key in ("geometric_mean", "bound_geometric_mean", "wall_time", "seed", "parameters"):
        assert key in rep


def test_run_pipeline_market_factor_two(golden):
    assert run_pipeline(golden, "market")["ratio"] >= 0.5


def test_run_pipeline_stable(golden):
    rep = run_pipeline(golden, "stable", {"trials": 200, "seed": 1})
    assert rep["bound_kind"] == "relaxation" and rep["ratio"] > 0


def test_unknown_pipeline_usage_error(golden, capsys):
    with pytest.raises(UsageError):
        run_pipeline(golden, "magic")
    code, _, err = run(capsys, "run", golden, "magic")
    assert code == 2 and "usage" in err


def test_bad_arguments_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["solve-exact"])
    assert exc.value.code == 2


def test_gen_validate_round_trip(tmp_path, capsys):
    path = tmp_path / "g.json"
    assert run(capsys, "gen", "--seed", 5, "--n", 2, "--m", 3, "-o", path)[0] == 0
    code, out, _ = run(capsys, "validate", path)
    assert code == 0 and json.loads(out)["valid"]


def test_validate_bad_instance_exit_one(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"n": 1, "m": 1, "k": [2], "u": [[[1.0, 2.0]]]}', encoding="utf-8")
    code, _, err = run(capsys, "validate", path)
    assert code == 1
    rec = json.loads(err)
    assert rec["error"] == "InvalidInstance" and "nonincreasing marginals" in rec["message"]


def test_solve_exact(golden, capsys):
    code, out, _ = run(capsys, "solve-exact", golden)
    assert code == 0 and json.loads(out)["nsw_product"] == pytest.approx(4)


def test_solve_exact_limit_exit_one(golden, capsys):
    code, _, err = run(capsys, "solve-exact", golden, "--limit", 1)
    assert code == 1 and json.loads(err)["error"] == "SearchSpaceTooLarge"


def test_market_eq_verify_and_trace(tmp_path, capsys):
    inst_path, eq_path, trace = tmp_path / "s.json", tmp_path / "eq.json", tmp_path / "t.jsonl"
    save_instance(splc_hand(), inst_path)
    assert run(capsys, "market-eq", inst_path, "--trace", trace, "-o", eq_path)[0] == 0
    doc = json.loads(eq_path.read_text())
    assert doc["p"][0] == pytest.approx(1 / 3, abs=1e-3) and doc["violations"] == []
    records = [json.loads(line) for line in trace.read_text().splitlines()]
    assert records and {"gamma", "event", "prices", "surplus"} <= set(records[0])
    code, out, _ = run(capsys, "verify", inst_path, eq_path)
    assert code == 0 and json.loads(out)["ok"]
    doc["p"][0] *= 0.9
    eq_path.write_text(json.dumps(doc))
    code, out, _ = run(capsys, "verify", inst_path, eq_path)
    assert code == 1 and not json.loads(out)["ok"]


def test_market_round(golden, capsys):
    code, out, _ = run(capsys, "market-round", golden)
    doc = json.loads(out)
    assert code == 0 and doc["nsw"]["product"] == pytest.approx(4) and doc["ratio"] >= 0.5


def test_stable_relax_then_round(golden, tmp_path, capsys):
    x_path = tmp_path / "x.json"
    code, _, _ = run(capsys, "stable-relax", golden, "-o", x_path)
    assert code == 0
    relax = json.loads(x_path.read_text())
    assert relax["value"] >= 1.386
    code, out, _ = run(capsys, "stable-round", golden, "--x", x_path, "--trials", 500, "--seed", 3)
    doc = json.loads(out)
    assert code == 0 and doc["best_product"] == pytest.approx(4) and doc["stderr"] >= 0
    code, out, _ = run(capsys, "verify", golden, x_path)
    assert code == 0 and json.loads(out)["ok"]


def test_parse_sizes():
    assert parse_sizes("2x2,3x4") == [(2, 2), (3, 4)]
    with pytest.raises(UsageError):
        parse_sizes("2by2")


def test_bench_header_only(capsys):
    code, out, _ = run(capsys, "bench", "--count", 0)
    assert code == 0
    assert out == f"# {BENCH_VERSION}\n" + ",".join(BENCH_COLUMNS) + "\n"


def test_bench_deterministic(capsys):
    args = ("bench", "--seed", 9, "--count", 2, "--sizes", "2x2", "--trials", 100)
    first = run(capsys, *args)[1]
    second = run(capsys, *args)[1]
    assert first == second
    rows = list(csv.DictReader(io.StringIO(first.split("\n", 1)[1])))
    assert len(rows) == 6 and all(r["status"] == "ok" for r in rows)
    assert [r["pipeline"] for r in rows[:3]] == ["exact", "market", "stable"]


def test_bench_parallel_matches_serial(monkeypatch):
    serial = rows_to_csv(bench(4, 2, [(2, 2), (3, 2)], options={"trials": 50}, workers=1))
    parallel = rows_to_csv(bench(4, 2, [(2, 2), (3, 2)], options={"trials": 50}, workers=2))
    assert serial == parallel


def test_bench_over_oracle_limit_leaves_ratio_empty():
    rows = list(csv.DictReader(io.StringIO(rows_to_csv(bench(1, 1, [(2, 2)], options={"trials": 50, "limit": 1})).split("\n", 1)[1])))
    assert [r["status"] for r in rows] == ["skipped", "ok", "ok"]
    for r in rows:
        assert r["ratio_to_opt"] == "" and r["opt_geometric_mean"] == ""
    for r in rows[1:]:
        assert r["bound_geometric_mean"] != "" and r["ratio_to_bound"] != ""


def test_bench_unknown_pipeline(capsys):
    assert run(capsys, "bench", "--pipelines", "exact,magic")[0] == 2


def test_bad_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("NSW_SPLC_THREADS", "lots")
    assert run(capsys, "bench", "--count", 1, "--sizes", "1x1")[0] == 2


def test_console_entry_point(golden):
    res = subprocess.run([sys.executable, "-m", "splcnsw.cli", "solve-exact", str(golden)], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["nsw_product"] == pytest.approx(4)
