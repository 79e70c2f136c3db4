import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import FIXTURES
from trackcert.cli import main
from trackcert.controller import TrackingPolicy, save_policy
from trackcert.numeric import Activation, MlpParams

SPEC = {"workspace": {"lo": [-2.5, -2.5], "hi": [2.5, 2.5]}, "obstacles": [{"c": [0.0, 0.0], "r": 0.5}],
        "goal": {"lo": [1.5, -0.5], "hi": [2.5, 0.5]}, "position_dims": [0, 1]}
STUB = {"start": [-2.0, 0.0], "goal": [2.0, 0.0], "K": 30, "via_sigma": 0.1}


@pytest.fixture
def toy(tmp_path):
    """Single-integrator loop x' = 0.5 x + 0.5 p + w with its files on disk."""
    save_policy(TrackingPolicy(MlpParams([(5.0 * np.eye(2), np.zeros(2))], Activation("identity")), 1, 2, 2),
                tmp_path / "policy.json")
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    return tmp_path


def _write(dir_, name, cfg):
    p = dir_ / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _read(path):
    return json.loads(open(path).read())


def _fixture_cfg(tmp_path, bench, name, **over):
    cfg = _read(FIXTURES / bench / name)
    for key in ("policy", "spec", "reference"):
        if isinstance(cfg.get(key), str):
            cfg[key] = str(FIXTURES / bench / cfg[key])
    cfg.update(over)
    return _write(tmp_path, name, cfg)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_missing_field_exit_2(tmp_path, capsys):
    assert main(["train", _write(tmp_path, "c.json", {"model": "unicycle3"}), "--out", str(tmp_path)]) == 2
    assert "train" in capsys.readouterr().err


def test_zero_horizon_exit_2(tmp_path):
    cfg = _fixture_cfg(tmp_path, "unicycle", "verify.json", K=0)
    assert main(["verify", cfg, "--out", str(tmp_path / "o")]) == 2


def test_bad_json_and_missing_file_exit_2(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    assert main(["verify", str(tmp_path / "bad.json")]) == 2
    assert main(["verify", str(tmp_path / "none.json")]) == 2
    assert main(["frobnicate", "x"]) == 2


def test_missing_policy_file_exit_2(tmp_path):
    cfg = _fixture_cfg(tmp_path, "unicycle", "verify.json", policy=str(tmp_path / "nope.json"))
    assert main(["verify", cfg, "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN = {"model": {"kind": "single_integrator", "dim": 2}, "seed": 0,
         "train": {"hidden": [4], "N": 2, "K": 20, "epochs": 2, "steps_per_epoch": 5, "batch_size": 8,
                   "train_refs": 10, "val_refs": 5, "x_L": [-9, -9], "x_U": [9, 9], "u_L": [-20, -20],
                   "u_U": [20, 20], "threshold": 10.0},
         "sampler": {"straight": True}}


def test_train_byte_identical(tmp_path):
    cfg = _write(tmp_path, "train.json", TRAIN)
    assert main(["train", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["train", cfg, "--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "policy.json").read_bytes(), (tmp_path / "b" / "policy.json").read_bytes()
    assert a == b
    log = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,L_track,L_state,L_ctrl,total" and len(log) == 3
    summary = _read(tmp_path / "a" / "train_summary.json")
    assert summary["meta"]["config_hash"] and "tool_version" in summary["meta"]
    assert _read(tmp_path / "a" / "resolved_config.json")["config"]["train"]["epochs"] == 2


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = _write(tmp_path, "train.json", TRAIN)
    monkeypatch.setenv("SAGE_SEED", "7")
    assert main(["train", cfg, "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("SAGE_SEED", "0")
    assert main(["train", cfg, "--out", str(tmp_path / "b")]) == 0
    monkeypatch.delenv("SAGE_SEED")
    assert main(["train", cfg, "--out", str(tmp_path / "c")]) == 0
    assert _read(tmp_path / "a" / "resolved_config.json")["config"]["train"]["seed"] == 7
    a, b, c = ((tmp_path / d / "policy.json").read_bytes() for d in "abc")
    assert a != b and b == c
    monkeypatch.setenv("SAGE_SEED", "x")
    assert main(["train", cfg, "--out", str(tmp_path / "d")]) == 2


def test_train_divergence_exit_1(tmp_path):
    bad = json.loads(json.dumps(TRAIN))
    bad["train"].update(lr=1e6, lr_final=1e6, epochs=5, steps_per_epoch=20, x_L=[-1e-3, -1e-3], x_U=[1e-3, 1e-3])
    bad["model"]["dt"] = 10.0
    assert main(["train", _write(tmp_path, "t.json", bad), "--out", str(tmp_path / "o")]) == 1


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def test_verify_unicycle_safe(tmp_path):
    cfg = _fixture_cfg(tmp_path, "unicycle", "verify.json")
    assert main(["verify", cfg, "--out", str(tmp_path / "o")]) == 0
    res = _read(tmp_path / "o" / "rsoa.json")
    assert res["status"] == "safe" and len(res["union"]) == 100
    assert (tmp_path / "o" / "boxes.csv").read_text().startswith("# trackcert")


def test_verify_blocked_unsafe(tmp_path):
    cfg = _fixture_cfg(tmp_path, "unicycle", "verify_blocked.json")
    assert main(["verify", cfg, "--out", str(tmp_path / "o")]) == 1
    assert _read(tmp_path / "o" / "rsoa.json")["first_violation_k"] >= 1


def test_verify_unknown_exit_3(toy, tmp_path):
    cfg = {"model": "quad3d", "policy": str(FIXTURES / "quad3d" / "policy.json"),
           "spec": str(FIXTURES / "quad3d" / "spec.json"), "reference": str(FIXTURES / "quad3d" / "ref.json"),
           "X_I": {"half_width": [0.1, 0.1, 0.1, 0, 1.6, 0, 0, 0, 0, 0, 0, 0]},
           "W": {"half_width": [0.0] * 12}, "K": 3}
    assert main(["verify", _write(tmp_path, "v.json", cfg), "--out", str(tmp_path / "o")]) == 3
    assert _read(tmp_path / "o" / "rsoa.json")["status"] == "unknown"


def _toy_verify(toy, **over):
    cfg = {"model": "single_integrator", "policy": "policy.json", "spec": "spec.json",
           "reference": {"dt": 0.1, "states": np.column_stack([np.linspace(-2, 2, 10), np.full(10, 1.2)]).tolist()},
           "X_I": {"half_width": [0.05, 0.05]}, "W": {"half_width": [0.01, 0.01]}, "grid": [2, 2]}
    cfg.update(over)
    return _write(toy, "verify.json", cfg)


def test_verify_toy_grid_and_export(toy):
    cfg = _toy_verify(toy)
    assert main(["verify", cfg]) == 1  # the end box is outside the goal
    rsoa = toy / "verify_out" / "rsoa.json"
    assert len(_read(rsoa)["cells"]) == 4
    out1, out2 = toy / "e1", toy / "e2"
    assert main(["export", str(rsoa), "--spec", str(toy / "spec.json"), "--out", str(out1)]) == 0
    assert main(["export", str(rsoa), "--spec", str(toy / "spec.json"), "--out", str(out2)]) == 0
    for name in ("boxes.csv", "plot.svg"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    rows = (out1 / "boxes.csv").read_text().strip().splitlines()
    assert len(rows) - 1 == 10 * 4


def test_export_spec_only(toy):
    assert main(["export", "--spec", str(toy / "spec.json"), "--out", str(toy / "e")]) == 0
    svg = (toy / "e" / "plot.svg").read_text()
    assert "obstacle" in svg and 'class="box"' not in svg and "<polyline" not in svg
    assert (toy / "e" / "boxes.csv").read_text().strip().count("\n") == 0


# ---------------------------------------------------------------------------
# library, run, coverage, sweep
# ---------------------------------------------------------------------------

def _toy_library(toy):
    cfg = {"model": "single_integrator", "policy": "policy.json", "spec": "spec.json", "stub": STUB,
           "X_I": {"half_width": [0.05, 0.05]}, "W": {"half_width": [0.01, 0.01]}, "C": 5, "seed": 0,
           "out_dir": "lib"}
    return _write(toy, "library.json", cfg)


def test_library_and_run(toy):
    assert main(["library", _toy_library(toy)]) == 0
    lib = _read(toy / "lib" / "library.json")
    assert len(lib["entries"]) == 5 and lib["complete"]
    assert {e["meta"]["mode"] for e in lib["entries"]} == {"above", "below"}
    run = {"model": "single_integrator", "policy": "policy.json", "spec": "spec.json", "library": "lib/library.json",
           "stub": STUB, "X_I": {"half_width": [0.05, 0.05], "center": [-2.0, 0.0]},
           "W": {"half_width": [0.01, 0.01]}, "draws": 20, "seed": 1}
    assert main(["run", _write(toy, "run.json", run)]) == 0
    s = _read(toy / "run_out" / "runs.json")["summary"]
    assert s["certified_runs"] == 20 and s["violations"] == 0 and s["safe_fraction"] == 1.0
    moved = dict(SPEC, obstacles=[{"c": [0.0, 1.0], "r": 0.5}])
    (toy / "spec2.json").write_text(json.dumps(moved))
    assert main(["run", _write(toy, "run2.json", dict(run, spec="spec2.json"))]) == 2


def test_coverage_requery_uses_stored_boxes(toy):
    cfg = {"model": "single_integrator", "policy": "policy.json", "spec": "spec.json", "stub": STUB,
           "X_I": {"lo": [-2.3, -0.3], "hi": [-1.7, 0.3]}, "grid": [2, 2], "W": {"half_width": [0.01, 0.01]},
           "out_dir": "cov"}
    path = _write(toy, "coverage.json", cfg)
    assert main(["coverage", path]) == 0
    cov = toy / "cov" / "coverage.json"
    before = cov.read_bytes()
    cells = _read(cov)["cells"]
    moved = dict(SPEC, obstacles=[{"c": cells[0]["boxes"][15]["lo"], "r": 0.05}])
    (toy / "moved.json").write_text(json.dumps(moved))
    assert main(["coverage", path, "--map", str(cov), "--requery", str(toy / "moved.json")]) == 0
    assert cov.read_bytes() == before
    rq = _read(toy / "cov" / "requery.json")
    assert 0 not in rq["safe_cells"] and len(rq["safe_cells"]) >= 1
    far = dict(SPEC, obstacles=[{"c": [40.0, 40.0], "r": 1.0}])
    (toy / "far.json").write_text(json.dumps(far))
    assert main(["coverage", path, "--map", str(cov), "--requery", str(toy / "far.json")]) == 0
    assert _read(toy / "cov" / "requery.json")["safe_cells"] == [0, 1, 2, 3]


def test_sweep_rows(toy):
    cfg = {"model": {"kind": "single_integrator", "dim": 2}, "seed": 0, "train": TRAIN["train"],
           "sampler": {"straight": True}, "widths": [2, 3, 5], "layers": 1,
           "reference": {"dt": 0.1, "states": np.column_stack([np.linspace(-2, 2, 20), np.zeros(20)]).tolist()},
           "X_I": {"half_width": [0.05, 0.05]}, "W": {"half_width": [0.01, 0.01]}, "K": 20}
    assert main(["sweep", _write(toy, "sweep.json", cfg)]) == 0
    lines = (toy / "sweep_out" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("# trackcert")
    assert lines[1] == "width,hidden_neurons,tracking_error,final_volume,status,wall_s"
    assert [r.split(",")[0] for r in lines[2:]] == ["2", "3", "5"]
    assert len(list((toy / "sweep_out" / "policies").iterdir())) == 3


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "trackcert.cli", "--version"], capture_output=True, text=True,
                         env={**os.environ})
    assert out.returncode == 0 and "trackcert" in out.stdout
