"""Reference out-of-process forecaster for epibench task bundles.

Reads every round_NNN/ bundle under a tasks directory, fits one model per (region, horizon) on the
bundle's training slice, and writes origin,horizon,region,prediction rows that `epibench score`
accepts. Only files inside each bundle are read.

Plugging in another learner: subclass Forecaster, implement fit/predict, register it in MODELS.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

REQUIRED_MANIFEST_KEYS = ("round", "horizons", "eval_origins_by_horizon", "lookback", "regions", "train_window", "files")


class BundleError(Exception):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    tasks: Path
    out: Path
    ridge: float = 1.0
    seed: int = 0
    model: str = "ridge"

    def validate(self) -> None:
        if not self.tasks.is_dir():
            raise BundleError(f"tasks directory {self.tasks} does not exist")
        if not (self.ridge >= 0.0 and math.isfinite(self.ridge)):
            raise BundleError(f"ridge penalty must be finite and >= 0, got {self.ridge}")
        if self.model not in MODELS:
            raise BundleError(f"unknown model '{self.model}' (known: {', '.join(sorted(MODELS))})")


# ----------------------------------------------------------------------------------------- bundles


@dataclass
class Bundle:
    path: Path
    manifest: dict
    dates: list[str]          # training-window dates, ascending
    regions: list[str]
    train: np.ndarray         # len(dates) x n, NaN where missing
    inputs: dict[str, np.ndarray]  # origin -> L x n lookback block
    targets: list[tuple[str, int, str]]


def _value(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        return math.nan
    return v if math.isfinite(v) else math.nan


def load_bundle(path: Path) -> Bundle:
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise BundleError(f"{path.name}: unreadable manifest ({e})") from e
    missing = [k for k in REQUIRED_MANIFEST_KEYS if k not in manifest]
    if missing:
        raise BundleError(f"{path.name}: manifest lacks {', '.join(missing)}")
    lookback = manifest["lookback"]
    if not isinstance(lookback, int) or lookback < 1:
        raise BundleError(f"{path.name}: manifest lookback must be a positive integer")
    regions = list(manifest["regions"])
    col = {r: j for j, r in enumerate(regions)}
    files = manifest["files"]

    rows: dict[str, dict[str, float]] = {}
    with open(path / files["train_panel"], newline="") as f:
        for rec in csv.DictReader(f):
            rows.setdefault(rec["date"], {})[rec["region"]] = _value(rec["value"])
    dates = sorted(rows)
    train = np.full((len(dates), len(regions)), np.nan)
    for i, d in enumerate(dates):
        for r, v in rows[d].items():
            if r not in col:
                raise BundleError(f"{path.name}: train_panel region '{r}' not in manifest")
            train[i, col[r]] = v

    blocks: dict[str, dict[str, dict[str, float]]] = {}
    with open(path / files["inputs"], newline="") as f:
        for rec in csv.DictReader(f):
            blocks.setdefault(rec["origin"], {}).setdefault(rec["date"], {})[rec["region"]] = _value(rec["value"])
    inputs = {}
    for origin, by_date in blocks.items():
        ds = sorted(by_date)[-lookback:]
        m = np.full((len(ds), len(regions)), np.nan)
        for i, d in enumerate(ds):
            for r, v in by_date[d].items():
                m[i, col[r]] = v
        inputs[origin] = m

    with open(path / files["targets"], newline="") as f:
        targets = [(rec["origin"], int(rec["horizon"]), rec["region"]) for rec in csv.DictReader(f)]
    return Bundle(path, manifest, dates, regions, train, inputs, targets)


def bundle_dirs(tasks: Path) -> list[Path]:
    dirs = sorted(p for p in tasks.iterdir() if p.is_dir() and p.name.startswith("round_"))
    if not dirs:
        raise BundleError(f"{tasks}: no round_NNN bundles")
    return dirs


# ----------------------------------------------------------------------------------------- models


def lagged_design(series: np.ndarray, lookback: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of L consecutive values and the value `horizon` steps after the last; rows touching NaN dropped."""
    X, y = [], []
    for t in range(lookback - 1, len(series) - horizon):
        window = series[t - lookback + 1 : t + 1]
        target = series[t + horizon]
        if np.isfinite(window).all() and math.isfinite(target):
            X.append(window)
            y.append(target)
    return np.asarray(X, dtype=float).reshape(-1, lookback), np.asarray(y, dtype=float)


class Forecaster:
    """One model per (region, horizon). `history` is the lookback block ending at the origin."""

    def fit(self, X: np.ndarray, y: np.ndarray) -> None:
        raise NotImplementedError

    def predict(self, history: np.ndarray) -> float:
        raise NotImplementedError


class Naive(Forecaster):
    def fit(self, X, y):
        pass

    def predict(self, history):
        return float(history[-1])


class Ridge(Forecaster):
    """Penalized least squares on the lags with an unpenalized intercept (features centered)."""

    def __init__(self, penalty: float):
        self.penalty = penalty

    def fit(self, X, y):
        if len(y) == 0:
            raise BundleError("no complete training windows")
        self.x_mean = X.mean(axis=0)
        self.y_mean = float(y.mean())
        Xc = X - self.x_mean
        yc = y - self.y_mean
        if self.penalty == 0.0:
            self.coef = np.linalg.lstsq(Xc, yc, rcond=None)[0]
        else:
            A = Xc.T @ Xc + self.penalty * np.eye(X.shape[1])
            self.coef = np.linalg.solve(A, Xc.T @ yc)

    def predict(self, history):
        return float(self.y_mean + (history - self.x_mean) @ self.coef)


class DeepModelStub(Forecaster):
    """Placeholder for a user-supplied neural forecaster; fit on (X, y), predict from one lookback block."""

    def fit(self, X, y):
        raise NotImplementedError("replace DeepModelStub with a real model")

    def predict(self, history):
        raise NotImplementedError("replace DeepModelStub with a real model")


MODELS = {
    "naive": lambda cfg: Naive(),
    "ridge": lambda cfg: Ridge(cfg.ridge),
}


# ----------------------------------------------------------------------------------------- driver


def forecast_bundle(bundle: Bundle, cfg: AdapterConfig) -> list[tuple[str, int, str, float]]:
    L = bundle.manifest["lookback"]
    col = {r: j for j, r in enumerate(bundle.regions)}
    models: dict[tuple[int, str], Forecaster] = {}
    out = []
    for origin, h, region in bundle.targets:
        key = (h, region)
        if key not in models:
            m = MODELS[cfg.model](cfg)
            X, y = lagged_design(bundle.train[:, col[region]], L, h)
            try:
                m.fit(X, y)
            except BundleError as e:
                raise BundleError(f"{bundle.path.name}: region {region} horizon {h}: {e}") from e
            models[key] = m
        if origin not in bundle.inputs:
            raise BundleError(f"{bundle.path.name}: no inputs for origin {origin}")
        history = bundle.inputs[origin][:, col[region]]
        out.append((origin, h, region, models[key].predict(history)))
    return out


def run_adapter(cfg: AdapterConfig) -> int:
    cfg.validate()
    np.random.seed(cfg.seed)  # nothing is random today; kept so stochastic learners stay reproducible
    rows = []
    for d in bundle_dirs(cfg.tasks):
        rows.extend(forecast_bundle(load_bundle(d), cfg))
    cfg.out.parent.mkdir(parents=True, exist_ok=True)
    with open(cfg.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["origin", "horizon", "region", "prediction"])
        for origin, h, region, p in rows:
            w.writerow([origin, h, region, repr(p)])
    return len(rows)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description="Ridge / naive forecaster over epibench task bundles")
    ap.add_argument("--tasks", required=True, type=Path, help="directory written by `epibench export-tasks`")
    ap.add_argument("--out", required=True, type=Path, help="forecast CSV to write")
    ap.add_argument("--ridge", type=float, default=1.0, help="ridge penalty (>= 0)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--model", default="ridge", choices=sorted(MODELS))
    args = ap.parse_args(argv)
    cfg = AdapterConfig(args.tasks, args.out, args.ridge, args.seed, args.model)
    try:
        n = run_adapter(cfg)
    except BundleError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"{n} forecasts written to {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
