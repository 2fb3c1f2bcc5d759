from __future__ import annotations

import json
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from greensim.cli import main
from greensim.green500 import PowerTrace, RunMetadata, load_trace, load_traces, write_traces
from oracles import brute_force_min_window

SCHEMAS = resources.files("greensim") / "schemas"


def validate(path, schema_name):
    schema = json.loads((SCHEMAS / f"{schema_name}.schema.json").read_text())
    data = json.loads(path.read_text())
    jsonschema.validate(data, schema, cls=jsonschema.Draft202012Validator)
    return data


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--output-dir", str(out)]) == 0
    return out


def test_simulate_outputs(simulated):
    summary = validate(simulated / "summary.json", "summary")
    validate(simulated / "meta.json", "meta")
    assert summary["mflops_per_w"] == pytest.approx(5271.8, rel=0.02)
    assert summary["nodes"] == 56 and summary["throttle_events"] == 0
    traces = load_traces(simulated / "trace.csv")
    assert set(traces) == {"cluster", "network"}
    assert np.all(traces["network"].watts == 257.0)
    assert traces["cluster"].average_power() == pytest.approx(summary["mean_power_w"], rel=1e-12)


def test_simulate_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--output-dir", str(tmp_path / name), "--seed", "5",
                     "--cluster", "lcsc-full", "--node-traces"]) == 0
    for f in ("trace.csv", "summary.json", "meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_trace_roundtrips(simulated, tmp_path):
    traces = load_traces(simulated / "trace.csv")
    write_traces(tmp_path / "again.csv", traces.values())
    assert (tmp_path / "again.csv").read_bytes() == (simulated / "trace.csv").read_bytes()


def test_missing_cluster_file(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "cluster.json"
    assert main(["simulate", "--cluster", str(missing), "--output-dir", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_bad_settings_field_named(tmp_path, capsys):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"perf_model": {"eps_dgemm": 2.0}}))
    assert main(["simulate", "--settings", str(path), "--output-dir", str(tmp_path)]) == 1
    assert "eps_dgemm" in capsys.readouterr().err


def test_unknown_point(tmp_path, capsys):
    assert main(["simulate", "--point", "turbo", "--output-dir", str(tmp_path)]) == 1
    assert "turbo" in capsys.readouterr().err


def test_usage_error_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["measure", "--trace", "x.csv"])
    assert exc.value.code == 1


def test_catalog_env_override(tmp_path, monkeypatch):
    from greensim.catalog import default_catalog_path
    data = json.loads(default_catalog_path().read_text())
    data["clusters"]["lcsc-green500"]["switch_power_w"] = 0
    path = tmp_path / "cat.json"
    path.write_text(json.dumps(data))
    monkeypatch.setenv("GREENSIM_CATALOG", str(path))
    assert main(["simulate", "--output-dir", str(tmp_path)]) == 0
    assert np.all(load_trace(tmp_path / "trace.csv", "network").watts == 0)


# -- measure ----------------------------------------------------------------

def test_measure_full_system(simulated):
    code = main(["measure", "--trace", str(simulated / "trace.csv"), "--meta", str(simulated / "meta.json"),
                 "--output-dir", str(simulated)])
    assert code == 0
    report = validate(simulated / "report.json", "report")
    assert report["level"] == 3 and report["compliant"]


def write_node_run(tmp_path, nodes_measured=1):
    t = np.arange(0, 300.01, 0.5)
    write_traces(tmp_path / "nodes.csv",
                 [PowerTrace(t, np.full(len(t), 1017.0), f"node{i:03d}") for i in range(nodes_measured)])
    meta = RunMetadata(0, 300, 56, nodes_measured, "estimated", 257.0, gflops=301.5e3)
    (tmp_path / "meta.json").write_text(json.dumps(meta.to_dict()))
    return ["--trace", str(tmp_path / "nodes.csv"), "--meta", str(tmp_path / "meta.json"),
            "--output-dir", str(tmp_path)]


def test_measure_short_window_noncompliant(tmp_path):
    # 10% of the middle 80% of a 300 s run is 24 s
    assert main(["measure", *write_node_run(tmp_path), "--window", "100", "124"]) == 2
    report = validate(tmp_path / "report.json", "report")
    assert report["level"] is None and not report["compliant"]
    assert main(["measure", *write_node_run(tmp_path), "--window", "100", "148"]) == 0


def test_measure_published_run_fixture(tmp_path):
    t = np.arange(0, 301.0)
    write_traces(tmp_path / "t.csv", [PowerTrace(t, np.full(len(t), 57200.0)),
                                      PowerTrace(t, np.full(len(t), 257.0), "network")])
    meta = RunMetadata(0, 300, 56, 56, "measured", gflops=301.5e3)
    (tmp_path / "m.json").write_text(json.dumps(meta.to_dict()))
    assert main(["measure", "--trace", str(tmp_path / "t.csv"), "--meta", str(tmp_path / "m.json"),
                 "--output-dir", str(tmp_path)]) == 0
    report = validate(tmp_path / "report.json", "report")
    assert round(report["efficiency_mflops_per_w"], 1) == 5271.0


def test_measure_malformed_trace(tmp_path, capsys):
    args = write_node_run(tmp_path)
    (tmp_path / "nodes.csv").write_text("t_s,watts,channel\n0,1,node000\n0,2,node000\n")
    assert main(["measure", *args]) == 1
    assert "nodes.csv:3" in capsys.readouterr().err


# -- exploit ----------------------------------------------------------------

def test_exploit_constant(tmp_path):
    assert main(["exploit", *write_node_run(tmp_path, 2)]) == 0
    assert validate(tmp_path / "exploit-report.json", "exploit-report")["inflation_ratio"] == 1.0


def test_exploit_demo(tmp_path):
    assert main(["simulate", "--settings", "exploit-demo.json", "--point", "demo",
                 "--output-dir", str(tmp_path)]) == 0
    assert main(["exploit", "--trace", str(tmp_path / "trace.csv"), "--meta", str(tmp_path / "meta.json"),
                 "--output-dir", str(tmp_path)]) == 0
    rep = validate(tmp_path / "exploit-report.json", "exploit-report")
    assert rep["inflation_ratio"] >= 1.25
    trace = load_trace(tmp_path / "trace.csv", "cluster")
    start, avg = brute_force_min_window(trace, RunMetadata.load(tmp_path / "meta.json"))
    assert rep["window"][0] == pytest.approx(start, abs=1e-9)
    assert rep["inflation_ratio"] == pytest.approx(trace.average_power() / avg, rel=1e-12)


def test_exploit_short_trace(tmp_path, capsys):
    args = write_node_run(tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    meta["run_end_s"] = 600
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    assert main(["exploit", *args]) == 1


# -- tune and report ----------------------------------------------------------

def test_tune_coordinate_repeatable(tmp_path):
    outs = []
    for name in ("a", "b"):
        assert main(["tune", "--method", "coordinate", "--seed", "7", "--output-dir", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "tune-result.json").read_bytes())
    assert outs[0] == outs[1]
    res = validate(tmp_path / "a" / "tune-result.json", "tune-result")
    assert res["best_point"]["gpu_clock_mhz"] == 774


def test_tune_exhaustive_cli(tmp_path, exhaustive):
    assert main(["tune", "--method", "exhaustive", "--workers", "2", "--evaluations",
                 "--output-dir", str(tmp_path)]) == 0
    res = validate(tmp_path / "tune-result.json", "tune-result")
    assert res["best_point"]["gpu_clock_mhz"] == 774
    assert res["objective_mflops_per_w"] == exhaustive.objective_mflops_per_w
    assert (tmp_path / "evaluations.csv").read_text().count("\n") == 4 * 13 * 17 + 1


def test_tune_empty_feasible_set(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"search_space": {"freq_steps": [900], "voltage_offsets": [-0.05]}}))
    assert main(["tune", "--settings", str(path), "--output-dir", str(tmp_path)]) == 1


def test_report_renders(simulated, capsys):
    assert main(["report", "--input", str(simulated / "summary.json")]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# Simulation summary")
    assert "| mflops_per_w |" in text


def test_entry_point_runs():
    done = subprocess.run([sys.executable, "-m", "greensim.cli", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for cmd in ("simulate", "measure", "exploit", "tune", "report"):
        assert cmd in done.stdout
