import hashlib
import json
import logging
import os
import subprocess
import sys

import pytest

from coalflow.cli import main
from coalflow.flow_core import DiscreteFlow


def write_config(tmp_path, name="cfg.json", **kw):
    p = tmp_path / name
    p.write_text(json.dumps(kw))
    return str(p)


def run(tmp_path, command, cfg, out="out", *extra):
    out = str(tmp_path / out)
    return main([command, "--config", cfg, "--out", out, *extra]), out


def read_manifest(out):
    with open(os.path.join(out, "manifest.json")) as fh:
        return json.load(fh)


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def test_validate_ok(tmp_path):
    cfg = write_config(tmp_path, a="1", b="0")
    status, out = run(tmp_path, "validate-coeffs", cfg)
    assert status == 0
    m = read_manifest(out)
    assert m["status"] == 0 and m["command"] == "validate-coeffs"
    assert m["config_sha256"] == sha(cfg)
    assert set(m["files"]) == {"coefficients.json"}
    assert m["files"]["coefficients.json"] == sha(os.path.join(out, "coefficients.json"))
    assert {"coalflow", "numpy", "scipy", "python"} <= set(m["versions"])


def test_validate_nonperiodic(tmp_path, caplog):
    cfg = write_config(tmp_path, a="x", b="0")
    with caplog.at_level(logging.ERROR, logger="coalflow"):
        status, _ = run(tmp_path, "validate-coeffs", cfg)
    assert status == 1
    assert "NotPeriodic" in caplog.text


@pytest.mark.parametrize(
    "raw, field",
    [
        ({"a": "sin(", "b": "0"}, "coefficients"),
        ({"a": "1", "b": "0", "window": [1, 0]}, "window"),
        ({"a": "1", "b": "0", "h": -1}, "h"),
        ({"a": "1", "b": "0", "seeds": 0}, "seeds"),
        ({"a": "1", "b": "0", "starts": [[0]]}, "starts"),
        ({"a": 1, "b": "0"}, "a"),
    ],
)
def test_config_errors_name_the_field(tmp_path, caplog, raw, field):
    cfg = write_config(tmp_path, **raw)
    with caplog.at_level(logging.ERROR, logger="coalflow"):
        status, _ = run(tmp_path, "validate-coeffs", cfg)
    assert status == 1
    assert caplog.text.split("ERROR")[-1].strip().startswith(field) or f"{field}:" in caplog.text


def test_missing_and_malformed_config(tmp_path):
    assert run(tmp_path, "validate-coeffs", str(tmp_path / "nope.json"))[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(tmp_path, "validate-coeffs", str(bad))[0] == 1


def test_out_of_regime_h(tmp_path, caplog):
    cfg = write_config(tmp_path, a="2", b="0", h=1e-2)
    with caplog.at_level(logging.ERROR, logger="coalflow"):
        status, _ = run(tmp_path, "sample-map", cfg)
    assert status == 1 and "h:" in caplog.text


def test_sample_map(tmp_path):
    cfg = write_config(tmp_path, a="1+0.3*sin(2*pi*x)", b="0", h=1e-3, theta=0.25)
    status, out = run(tmp_path, "sample-map", cfg)
    assert status == 0
    with open(os.path.join(out, "map.json")) as fh:
        m = json.load(fh)
    assert m["theta"] == 0.25 and m["w"] > 0
    rows = [r for r in open(os.path.join(out, "map_graph.dat")) if not r.startswith("#")]
    assert all(len(r.split()) == 2 for r in rows) and len(rows) > 4


def test_simulate_sde_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, a="1", b="0.2", starts=[[0, 0.0], [0, 0.3]], dt=1e-3, seeds=5,
                       window=[0, 0.05], seed=4)
    s1, o1 = run(tmp_path, "simulate-sde", cfg, "o1")
    s2, o2 = run(tmp_path, "simulate-sde", cfg, "o2")
    assert s1 == s2 == 0
    assert sha(os.path.join(o1, "ensemble.csv")) == sha(os.path.join(o2, "ensemble.csv"))
    s3, o3 = run(tmp_path, "simulate-sde", cfg, "o3", "--seed", "5")
    assert sha(os.path.join(o1, "ensemble.csv")) != sha(os.path.join(o3, "ensemble.csv"))
    assert read_manifest(o3)["seed"] == 5


def test_simulate_disturbance_then_metric(tmp_path):
    # a small diffusivity keeps h = 0.05 in regime, so the flows stay short
    cfg = write_config(tmp_path, a="0.02", b="0", h=0.05, seeds=2, window=[-2, 2], starts=[[-2, 0.1], [0, 0.5]])
    status, out = run(tmp_path, "simulate-disturbance", cfg)
    assert status == 0
    files = read_manifest(out)["files"]
    assert {"flow_0.json", "flow_1.json", "path_0_0.csv", "path_1_1.csv"} <= set(files)
    assert len(DiscreteFlow.load(os.path.join(out, "flow_0.json"))) > 10
    mcfg = write_config(tmp_path, "metric.json", a="1", b="0",
                        flows=[os.path.join(out, "flow_0.json"), os.path.join(out, "flow_1.json")], n=1, grid=8)
    status, mout = run(tmp_path, "metric", mcfg, "m")
    assert status == 0
    with open(os.path.join(mout, "metric.json")) as fh:
        res = json.load(fh)
    assert 0 < res["flow_distance_c"] <= 1.0
    assert res["flow_distance_d_upper"] >= 0


def test_metric_requires_two_flows(tmp_path):
    cfg = write_config(tmp_path, a="1", b="0", flows=["x.json"])
    assert run(tmp_path, "metric", cfg)[0] == 1


def test_moments(tmp_path):
    cfg = write_config(tmp_path, a="1", b="0", h=[1e-3], n_samples=10_000, x=0.2)
    status, out = run(tmp_path, "moments", cfg)
    assert status == 0
    lines = open(os.path.join(out, "moments.csv")).read().splitlines()
    assert lines[0] == "h,t,x,b_h,a_h,M_h,lambda_h,B_h,A_h,ci_radius,samples"
    assert len(lines) == 2
    assert os.path.exists(os.path.join(out, "moments_reversed.csv"))


def test_path_convergence_jobs_invariant(tmp_path):
    cfg = write_config(tmp_path, a="1", b="0", h=[1e-2, 1e-3], seeds=1000, window=[0, 0.2],
                       starts=[[0, 0.5]], seed=1)
    s1, o1 = run(tmp_path, "path-convergence", cfg, "j1", "--jobs", "1")
    s2, o2 = run(tmp_path, "path-convergence", cfg, "j2", "--jobs", "2")
    assert s1 == s2
    assert sha(os.path.join(o1, "convergence.csv")) == sha(os.path.join(o2, "convergence.csv"))


def test_reverse_check_pass_and_fail(tmp_path, caplog):
    base = dict(a="1", b="0", h=1e-3, seeds=200, window=[0, 0.5], bins=[1, 2], seed=2)
    status, out = run(tmp_path, "reverse-check", write_config(tmp_path, **base), "ok")
    assert status == 0
    rows = open(os.path.join(out, "drift_table.csv")).read().splitlines()
    assert rows[0] == "t_center,x_center,n,drift_rate,drift_target,var_rate,var_target,ci_radius,pass"
    assert len(rows) == 3 and all(r.endswith(",1") for r in rows[1:])
    # with no tolerance left every bin fails and is named in the log
    strict = dict(base, drift_floor=0.0, var_rel_floor=0.0, n_sigma=1e-6)
    with caplog.at_level(logging.ERROR, logger="coalflow"):
        status, out = run(tmp_path, "reverse-check", write_config(tmp_path, "s.json", **strict), "bad")
    assert status == 2
    assert "bin t=" in caplog.text
    assert read_manifest(out)["status"] == 2


def test_h_override(tmp_path):
    cfg = write_config(tmp_path, a="1", b="0", h=[1e-2, 1e-3])
    status, out = run(tmp_path, "validate-coeffs", cfg, "o", "--h", "0.0001")
    assert status == 0 and read_manifest(out)["h"] == [1e-4]


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path, a="x", b="0")
    r = subprocess.run([sys.executable, "-m", "coalflow.cli", "validate-coeffs", "--config", cfg,
                        "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 1
    assert "NotPeriodic" in r.stderr
