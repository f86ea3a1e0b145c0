import json
import math
import os
import shutil
import subprocess
import sys
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[2]
sys.path.insert(0, str(ROOT / "py_adapter"))

import epibench_adapter as ad  # noqa: E402

CLI = os.environ.get("EPIBENCH_CLI")
DATA = Path(os.environ.get("EPIBENCH_DATA_DIR", ROOT / "data"))

needs_cli = pytest.mark.skipif(not CLI or not Path(CLI).exists(), reason="EPIBENCH_CLI not set")


def cli(*args, check=True):
    res = subprocess.run([CLI, *map(str, args)], capture_output=True, text=True)
    if check and res.returncode != 0:
        raise AssertionError(f"epibench {' '.join(map(str, args))} -> {res.returncode}\n{res.stderr}")
    return res


def write_config(tmp: Path, panel: Path, out: Path, **overrides) -> Path:
    cfg = json.loads((DATA / "run_naive.json").read_text())
    cfg["dataset"]["panel"] = str(panel)
    cfg["dataset"]["adjacency"] = str(DATA / "synthetic_adjacency.csv")
    cfg["dataset"]["population"] = str(DATA / "synthetic_population.csv")
    cfg["output_dir"] = str(out)
    cfg.update(overrides)
    path = tmp / "run.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def assert_close_tree(a, b, path="$"):
    """Same JSON shape; numbers equal to 1e-12 (relative above 1), nulls in the same places."""
    if isinstance(a, dict):
        assert isinstance(b, dict) and a.keys() == b.keys(), path
        for k in a:
            assert_close_tree(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert isinstance(b, list) and len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            assert_close_tree(x, y, f"{path}[{i}]")
    elif isinstance(a, (int, float)) and not isinstance(a, bool):
        assert isinstance(b, (int, float)), path
        assert abs(a - b) <= 1e-12 * max(1.0, abs(b)), f"{path}: {a} vs {b}"
    else:
        assert a == b, f"{path}: {a!r} vs {b!r}"


# ----------------------------------------------------------------------------------------- protocol


@needs_cli
def test_naive_mimic_reproduces_in_process_scoretable(tmp_path):
    cfg = write_config(tmp_path, DATA / "synthetic_panel.csv", tmp_path / "inproc")
    cli("run", "--config", cfg)
    cli("export-tasks", "--config", cfg, "--out", tmp_path / "tasks")
    preds = tmp_path / "naive.csv"
    assert ad.main(["--tasks", str(tmp_path / "tasks"), "--out", str(preds), "--model", "naive"]) == 0
    cli("score", "--config", cfg, "--records", preds, "--out", tmp_path / "external.json")
    external = json.loads((tmp_path / "external.json").read_text())
    inproc = json.loads((tmp_path / "inproc" / "scoretable.json").read_text())
    assert_close_tree(external, inproc)


@needs_cli
def test_ridge_output_scores_and_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, DATA / "synthetic_panel.csv", tmp_path / "unused")
    cli("export-tasks", "--config", cfg, "--out", tmp_path / "tasks")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert ad.main(["--tasks", str(tmp_path / "tasks"), "--out", str(out), "--ridge", "10"]) == 0
    assert a.read_bytes() == b.read_bytes()
    cli("score", "--config", cfg, "--records", a, "--out", tmp_path / "ridge.json", "--model-label", "ridge")
    table = json.loads((tmp_path / "ridge.json").read_text())
    assert table["rows"], "empty score table"


@needs_cli
def test_bundle_alone_is_sufficient(tmp_path):
    cfg = write_config(tmp_path, DATA / "synthetic_panel.csv", tmp_path / "unused")
    cli("export-tasks", "--config", cfg, "--out", tmp_path / "tasks")
    sandbox = tmp_path / "sandbox"
    sandbox.mkdir()
    shutil.copytree(tmp_path / "tasks" / "round_003", sandbox / "round_003")
    script = ROOT / "py_adapter" / "epibench_adapter.py"
    res = subprocess.run([sys.executable, str(script), "--tasks", ".", "--out", "f.csv"], cwd=sandbox,
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    lines = (sandbox / "f.csv").read_text().splitlines()
    targets = (sandbox / "round_003" / "targets.csv").read_text().splitlines()
    assert len(lines) == len(targets)


@needs_cli
def test_malformed_manifest_names_bundle(tmp_path):
    cfg = write_config(tmp_path, DATA / "synthetic_panel.csv", tmp_path / "unused")
    cli("export-tasks", "--config", cfg, "--out", tmp_path / "tasks")
    m = tmp_path / "tasks" / "round_002" / "manifest.json"
    doc = json.loads(m.read_text())
    del doc["lookback"]
    m.write_text(json.dumps(doc))
    res = subprocess.run([sys.executable, str(ROOT / "py_adapter" / "epibench_adapter.py"), "--tasks",
                          str(tmp_path / "tasks"), "--out", str(tmp_path / "x.csv")], capture_output=True, text=True)
    assert res.returncode != 0
    assert "round_002" in res.stderr and "lookback" in res.stderr


# ----------------------------------------------------------------------------------------- ridge


def test_infinite_penalty_predicts_training_mean():
    rng = np.random.default_rng(0)
    series = 50 + 10 * rng.standard_normal(200)
    X, y = ad.lagged_design(series, 12, 3)
    m = ad.Ridge(1e15)
    m.fit(X, y)
    for _ in range(5):
        assert m.predict(50 + 10 * rng.standard_normal(12)) == pytest.approx(y.mean(), rel=1e-9)


def test_lagged_design_skips_missing():
    s = np.arange(20, dtype=float)
    s[10] = math.nan
    X, y = ad.lagged_design(s, 3, 2)
    assert np.isfinite(X).all() and np.isfinite(y).all()
    np.testing.assert_array_equal(X[0], [0, 1, 2])
    assert y[0] == 4
    assert len(y) == 16 - 4  # three windows and one target touch index 10


def test_negative_penalty_rejected(tmp_path):
    with pytest.raises(ad.BundleError):
        ad.AdapterConfig(tmp_path, tmp_path / "o.csv", ridge=-1.0).validate()


def _sinusoid_panel(path: Path, steps: int) -> None:
    # A noiseless sinusoid obeys x_t = 2 cos(w) x_{t-1} - x_{t-2} + c, so every lead is affine in the lags.
    start = date(2020, 1, 6)
    lines = ["date,region,value"]
    for t in range(steps):
        d = (start + timedelta(days=t)).isoformat()
        for j in range(4):
            v = 100 + 30 * math.sin(2 * math.pi * t / (13 + 4 * j) + j)
            lines.append(f"{d},r{j},{v!r}")
    path.write_text("\n".join(lines) + "\n")


@needs_cli
def test_zero_penalty_recovers_noiseless_linear_panel(tmp_path):
    _sinusoid_panel(tmp_path / "panel.csv", 160)
    cfg = write_config(tmp_path, tmp_path / "panel.csv", tmp_path / "unused", horizons=[1, 7, 14])
    cli("export-tasks", "--config", cfg, "--out", tmp_path / "tasks")
    preds = tmp_path / "ridge0.csv"
    assert ad.main(["--tasks", str(tmp_path / "tasks"), "--out", str(preds), "--ridge", "0"]) == 0
    cli("score", "--config", cfg, "--records", preds, "--out", tmp_path / "s.json")
    table = json.loads((tmp_path / "s.json").read_text())
    rows = [r for r in table["rows"] if r["stratum"] == "all"]
    assert rows
    for r in rows:
        assert r["rmse"] < 1e-6, r
