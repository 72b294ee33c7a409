from __future__ import annotations

import csv
import hashlib
import json

import pytest

from gradsync.cli import main
from gradsync.workload import generate_workload, load_workload


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def small(tmp_path):
    w, g = tmp_path / "w.json", tmp_path / "groups.json"
    assert main(["gen-workload", "--tensors", "30", "--total-params", "300000", "--seed", "2",
                 "--out", str(w), "--groups-out", str(g), "--groups", "5"]) == 0
    return w, g


def test_perf_golden(capsys):
    assert main(["perf"]) == 0
    out = capsys.readouterr().out
    assert "sustained: 59.67 TFLOPS" in out
    assert "peak: 83.93 TFLOPS" in out


def test_perf_explicit_files_and_aggregate(tmp_path, capsys):
    from gradsync.perfmodel import bundled

    out = tmp_path / "perf.json"
    assert main(["perf", "--timings", str(bundled("table1.json")), "--layers", str(bundled("fitted_layers.json")),
                 "--gpus", "27600", "--efficiency", "0.93", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["aggregate"]["sustained_flops"] == pytest.approx(1.5315e18, rel=1e-3)
    assert "EFLOPS" in capsys.readouterr().out


def test_gen_workload_roundtrip(small):
    w, g = small
    wl = load_workload(w)
    assert wl == generate_workload("fc-densenet-like", 300000, 30, 2)
    assert wl.total_params == 300000
    assert json.loads(g.read_text())["schema_version"] == 1


def test_gen_workload_precondition(tmp_path, capsys):
    assert main(["gen-workload", "--tensors", "10", "--total-params", "5", "--out", str(tmp_path / "x.json")]) == 2
    assert "total_params" in capsys.readouterr().err
    assert not (tmp_path / "x.json").exists()


def test_simulate_deterministic(small, tmp_path):
    w, g = small
    outs = []
    for i in range(2):
        out, log = tmp_path / f"r{i}.json", tmp_path / f"e{i}.csv"
        args = ["simulate", "--workload", str(w), "--workers", "8", "--coordinator", "bitvector",
                "--grouping", str(g), "--seed", "7", "--out", str(out), "--event-log", str(log)]
        assert main(args) == 0
        outs.append((sha(out), sha(log)))
    assert outs[0] == outs[1]
    doc = json.loads((tmp_path / "r0.json").read_text())
    assert doc["header"]["seed"] == 7 and doc["header"]["version"]
    assert doc["header"]["config"]["fusion_mode"] == "grouped"
    assert doc["summary"]["fallback_steps"] == [0]


def test_sweep_csv(small, tmp_path):
    w, _ = small
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--workload", str(w), "--workers", "1,2,4,...,8", "--strategies", "all", "--out", str(out)]) == 0
    text = out.read_text()
    assert text.startswith("# ")
    rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
    assert list(rows[0]) == ["strategy", "P", "throughput_per_s", "efficiency", "t_comm_ms_mean", "t_comp_ms_mean"]
    assert len(rows) == 3 * 4
    assert [(r["strategy"], int(r["P"])) for r in rows] == sorted((r["strategy"], int(r["P"])) for r in rows)
    assert all(float(r["efficiency"]) == 1.0 for r in rows if r["P"] == "1")


def test_config_file_and_override(small, tmp_path):
    w, _ = small
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"schema_version": 1, "workload": str(w), "workers": 4, "seed": 3, "steps": 2}))
    out = tmp_path / "o.json"
    assert main(["simulate", "--config", str(cfg), "--workers", "2", "--out", str(out)]) == 0
    head = json.loads(out.read_text())["header"]
    assert head["config"]["world_size"] == 2
    assert head["config"]["seed"] == 3 and head["config"]["steps"] == 2


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"schema_version": 1, "bogus": 1}, "bogus"),
        ({"schema_version": 9}, "schema_version"),
        ({"schema_version": 1, "steps": "many"}, "steps"),
        ({"schema_version": 1, "coordinator": "gossip"}, "coordinator"),
        ({"schema_version": 1, "cycle_time_ms": 0}, "cycle_time"),
    ],
)
def test_config_errors_exit_2(tmp_path, capsys, doc, field):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert field in capsys.readouterr().err


def test_missing_files_exit_2(tmp_path):
    assert main(["simulate", "--workload", str(tmp_path / "nope.json")]) == 2
    assert main(["perf", "--timings", str(tmp_path / "nope.json")]) == 2


def test_deadlock_exit_3(small, tmp_path):
    w, _ = small
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"schema_version": 1, "max_cycles_per_step": 2}))
    assert main(["simulate", "--config", str(cfg), "--workload", str(w), "--workers", "2"]) == 3


def test_log_env(small, tmp_path, monkeypatch, capsys):
    w, _ = small
    monkeypatch.setenv("GRADSYNC_LOG", "bogus-level")
    assert main(["simulate", "--workload", str(w), "--out", str(tmp_path / "x.json")]) == 0
