"""Command-line harness tests, run in process through main()."""

import json

import pytest

from fncache.analytics import (
    AvailabilityQuery,
    CostModelInputs,
    availability_hour,
    cost_hour,
    crossover_rate,
    loss_exact,
)
from fncache.cli import main
from fncache.config import SystemConfig, dump_config
from fncache.tracegen import read_trace


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------------------
# gen-trace
# ---------------------------------------------------------------------------


def test_gen_trace_writes_file_and_summary(tmp_path, capsys):
    out = tmp_path / "t.csv"
    code, stdout, _ = run_cli(
        capsys, "gen-trace", "--profile", "large-only", "--hours", "0.2",
        "--seed", "9", "--out", str(out), "--objects", "40", "--rate", "600")
    assert code == 0
    summary = json.loads(stdout)
    records = read_trace(str(out))
    assert summary["records"] == len(records) > 0
    assert summary["inputs"]["seed"] == 9
    assert all(r.size_bytes >= 10_000_000 for r in records)


def test_gen_trace_same_seed_same_file(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        code, _, _ = run_cli(
            capsys, "gen-trace", "--profile", "mixed", "--hours", "0.1",
            "--seed", "4", "--out", str(path))
        assert code == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_trace_stdout_mode(capsys):
    code, stdout, _ = run_cli(
        capsys, "gen-trace", "--profile", "mixed", "--hours", "0.05",
        "--seed", "2", "--objects", "10", "--rate", "200")
    assert code == 0
    assert stdout.splitlines()[0] == "timestamp_ms,op,key,size_bytes"


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def write_small_config(tmp_path, **over):
    base = dict(pool_size=6, lambda_memory_mb=128, seed=13, ec="2+1",
                net_latency_ms=1)
    base.update(over)
    cfg = SystemConfig.from_dict(base)
    path = tmp_path / "cfg.json"
    dump_config(cfg, str(path))
    return path


def test_replay_end_to_end(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path)
    trace = tmp_path / "t.csv"
    trace.write_text("timestamp_ms,op,key,size_bytes\n"
                     "0,PUT,alpha,4096\n"
                     "60,GET,alpha,4096\n"
                     "120,GET,alpha,4096\n")
    report_path = tmp_path / "report.json"
    code, _, _ = run_cli(
        capsys, "replay", "--trace", str(trace), "--config", str(cfg_path),
        "--report", str(report_path))
    assert code == 0
    doc = json.loads(report_path.read_text())
    assert doc["report"]["hit_ratio"] == 1.0
    assert doc["report"]["gets"] == 2
    assert doc["inputs"]["config"]["pool_size"] == 6
    assert doc["inputs"]["trace"] == str(trace)
    assert doc["report"]["hourly_cost"][0]["total"] > 0


def test_replay_seed_override_echoed(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path)
    trace = tmp_path / "t.csv"
    trace.write_text("0,PUT,k,512\n")
    code, stdout, _ = run_cli(
        capsys, "replay", "--trace", str(trace), "--config", str(cfg_path),
        "--seed", "77")
    assert code == 0
    assert json.loads(stdout)["inputs"]["config"]["seed"] == 77


def test_replay_malformed_trace_names_line(tmp_path, capsys):
    trace = tmp_path / "bad.csv"
    trace.write_text("0,PUT,k,512\n5,FROB,k,512\n")
    code, _, err = run_cli(capsys, "replay", "--trace", str(trace))
    assert code == 2
    assert "line 2" in err


def test_replay_missing_trace_file(tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "replay", "--trace", str(tmp_path / "nope.csv"))
    assert code == 2
    assert "error" in err


# ---------------------------------------------------------------------------
# avail
# ---------------------------------------------------------------------------


def test_avail_matches_library_zipf(capsys):
    code, stdout, _ = run_cli(
        capsys, "avail", "--n-lambda", "400", "--ec", "10+2",
        "--dist", "zipf:2.23:11")
    assert code == 0
    doc = json.loads(stdout)
    q = AvailabilityQuery.zipf(400, 12, 3, 2.23, n_max=11)
    expect = loss_exact(q)
    assert doc["loss_exact"] == pytest.approx(expect, rel=1e-12)
    assert doc["availability_hour_exact"] == pytest.approx(
        availability_hour(expect), rel=1e-12)
    assert doc["inputs"]["dist"] == "zipf:2.23:11"


def test_avail_table_point_mass(tmp_path, capsys):
    pmf = tmp_path / "pmf.txt"
    pmf.write_text(" ".join(["0"] * 12 + ["1.0"]))  # always reclaims 12
    code, stdout, _ = run_cli(
        capsys, "avail", "--n-lambda", "400", "--ec", "10+2",
        "--dist", f"table:{pmf}")
    assert code == 0
    doc = json.loads(stdout)
    assert doc["loss_exact"] == pytest.approx(3.915849e-3, rel=1e-5)


def test_avail_bad_dist_exits_nonzero(capsys):
    code, _, err = run_cli(
        capsys, "avail", "--n-lambda", "400", "--ec", "10+2",
        "--dist", "weibull:2")
    assert code == 2
    assert "weibull" in err


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------


def test_cost_matches_library(capsys):
    code, stdout, _ = run_cli(
        capsys, "cost", "--requests-per-hour", "1000")
    assert code == 0
    doc = json.loads(stdout)
    cfg = SystemConfig()
    inp = CostModelInputs(
        n_lambda=cfg.pool_size, memory_gb=cfg.lambda_memory_mb / 1024.0,
        c_req=cfg.c_req, c_dur=cfg.c_dur,
        f_w=3600.0 / cfg.t_warm_s, f_bak=3600.0 / cfg.t_bak_s,
        n_ser=1000 * 12)
    br = cost_hour(inp)
    assert doc["c_w"] == pytest.approx(br.c_w, rel=1e-12)
    assert doc["c_bak"] == pytest.approx(br.c_bak, rel=1e-12)
    assert doc["total"] == pytest.approx(br.total, rel=1e-12)


def test_cost_crossover_in_expected_band(capsys):
    code, stdout, _ = run_cli(
        capsys, "cost", "--crossover", "--fixed-price", "10.368")
    assert code == 0
    doc = json.loads(stdout)
    cfg = SystemConfig()
    inp = CostModelInputs(
        n_lambda=cfg.pool_size, memory_gb=cfg.lambda_memory_mb / 1024.0,
        c_req=cfg.c_req, c_dur=cfg.c_dur,
        f_w=3600.0 / cfg.t_warm_s, f_bak=3600.0 / cfg.t_bak_s)
    expect = crossover_rate(inp, 12, 10.368)
    rate = doc["crossover_requests_per_hour"]
    assert rate == pytest.approx(expect, rel=1e-12)
    assert 260_000 < rate < 360_000


def test_cost_crossover_requires_price(capsys):
    code, _, err = run_cli(capsys, "cost", "--crossover")
    assert code == 2
    assert "fixed-price" in err
