"""Pipeline runner and command-line entry point.

A run is described by a JSON config (schema in the README). Contracts are
processed in list order; every adjacent pair forms a walk-forward split
where the model is selected, tuned and trained on the first contract and
evaluated, explained and backtested on the second.

Artifacts land under ``out_dir``::

    events/<contract>.bin, events/<contract>.ground_truth.csv   (synthetic runs)
    ticks/<contract>.csv  levels/<contract>.csv  features/<contract>.csv  labels/<contract>.csv
    select/<train>.json  tune/<train>.json  train/<train>.model.json
    train/<train>__<test>.predictions.csv  train/walk_forward.csv
    explain/<test>.shap.csv
    explain/<test>.shap_summary.csv  explain/<test>.decision_paths.csv
    backtest/<test>/{trades,equity,daily,sharpe}.csv  backtest/<test>/report.json
    report/<figure>.csv
    manifest.json

``PRICELEVELS_OUT_DIR`` and ``PRICELEVELS_DATA_DIR`` override the output
directory and the directory relative event paths are resolved against.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import enum
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import report as rpt
from .backtest import Signal, StrategyConfig, run_backtest
from .dataset import Dataset
from .explain import shap_values
from .extrema import DEFAULT_WIDTH_BOUNDS, DEFAULT_WINDOW, find_local_extrema, read_levels, write_levels
from .features import FeatureConfig, extract_features, feature_names
from .labeling import label_dataset
from .model.gbdt import Ensemble, TrainConfig, fit, sigmoid
from .model.metrics import confidence_sweep, precision_score
from .model.selection import DEFAULT_GRID, grid_search, rfecv
from .synth import SynthConfig, generate, write_ground_truth
from .tickdata import TickSeries, load_events, reconstruct_ticks, write_events

__all__ = ["STAGES", "REQUIRES", "PipelineConfig", "StageError", "run_pipeline", "experiment_matrix",
           "synthesize", "main"]

STAGES = ("ticks", "detect", "features", "label", "select", "tune", "train", "explain", "backtest", "report")
REQUIRES = {
    "ticks": (),
    "detect": ("ticks",),
    "features": ("ticks", "detect"),
    "label": ("ticks", "features"),
    "select": ("label",),
    "tune": ("label", "select"),
    "train": ("label", "tune"),
    "explain": ("label", "train"),
    "backtest": ("ticks", "label", "train"),
    "report": ("ticks", "detect", "label", "train", "explain", "backtest"),
}
MATRIX_COLUMNS = ("train", "test", "rebound", "precision", "trades", "net", "sharpe", "status")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage


def _default_detector():
    return {"window": DEFAULT_WINDOW, "width_bounds": list(DEFAULT_WIDTH_BOUNDS), "rel_height": 0.5}


def _default_model():
    return {"grid": DEFAULT_GRID, "base": {}, "folds": 5, "threshold": 0.5, "select_features": True}


@dataclass
class PipelineConfig:
    contracts: list = field(default_factory=list)     # [{"name": ..., "events": path, "format": "csv"|"binary"}]
    synth: dict | None = None                         # {"contracts": n, **SynthConfig fields}
    tick_size: float = 0.25
    detector: dict = field(default_factory=_default_detector)
    features: dict = field(default_factory=dict)
    label: dict = field(default_factory=lambda: {"cross_ticks": 3, "rebound_ticks": 15})
    model: dict = field(default_factory=_default_model)
    strategy: dict = field(default_factory=dict)
    explain: dict = field(default_factory=lambda: {"background": 50, "max_rows": 300, "top_k": 25})
    report: dict = field(default_factory=lambda: {"plots": False})
    matrix: dict = field(default_factory=lambda: {"rebounds": [5, 10, 15], "workers": 1})
    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = "."

    def __post_init__(self):
        det = {**_default_detector(), **self.detector}
        self.detector = det
        self.model = {**_default_model(), **self.model}
        self.label = {"cross_ticks": 3, "rebound_ticks": 15, **self.label}
        self.explain = {"background": 50, "max_rows": 300, "top_k": 25, **self.explain}
        self.matrix = {"rebounds": [5, 10, 15], "workers": 1, **self.matrix}
        if det["window"] < 3 or not 1 <= det["width_bounds"][0] <= det["width_bounds"][1]:
            raise ValueError("detector needs window >= 3 and ordered positive width bounds")
        if not 0 < det["rel_height"] <= 1:
            raise ValueError("detector rel_height must lie in (0, 1]")
        if self.tick_size <= 0:
            raise ValueError("tick_size must be positive")
        if self.label["cross_ticks"] < 1 or self.label["rebound_ticks"] < 1:
            raise ValueError("label cross_ticks and rebound_ticks must be positive")
        self.feature_config()
        self.strategy_config()
        self.train_base()
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = [k for k in self.model["grid"] if k not in fields]
        if unknown:
            raise ValueError(f"unknown grid parameters {unknown}")
        if self.model["folds"] < 2:
            raise ValueError("model folds must be >= 2")
        if self.synth is not None:
            self.synth_configs()
        elif not self.contracts:
            raise ValueError("config needs either contracts or a synth section")
        names = [c["name"] for c in self.contract_list()]
        if len(set(names)) != len(names):
            raise ValueError("contract names must be unique")
        if self.explain["background"] < 1 or self.explain["max_rows"] < 1:
            raise ValueError("explain background and max_rows must be positive")
        if not self.matrix["rebounds"] or self.matrix["workers"] < 1:
            raise ValueError("matrix needs at least one rebound size and one worker")

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        with open(path) as fh:
            d = json.load(fh)
        d.setdefault("data_dir", str(path.parent))
        return cls.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        del d["out_dir"], d["data_dir"]
        return d

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(**self.features)

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(**self.strategy)

    def train_base(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.model["base"]})

    def synth_configs(self) -> list[SynthConfig]:
        s = dict(self.synth)
        n = int(s.pop("contracts", 3))
        if n < 1:
            raise ValueError("synth needs at least one contract")
        prefix = s.pop("prefix", "SYN")
        s.pop("seed", None)
        s.pop("instrument", None)
        return [SynthConfig.from_dict({**s, "seed": self.seed + i, "instrument": f"{prefix}{i + 1}"})
                for i in range(n)]

    def contract_list(self) -> list[dict]:
        if self.synth is not None:
            return [{"name": c.instrument, "events": f"events/{c.instrument}.bin", "format": "binary",
                     "synthetic": True} for c in self.synth_configs()]
        return [dict(c) for c in self.contracts]

    def events_path(self, contract: dict, out: Path) -> Path:
        if contract.get("synthetic"):
            return out / contract["events"]
        p = Path(contract["events"])
        return p if p.is_absolute() else Path(self.data_dir) / p


# ---------------------------------------------------------------- helpers

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _clean(v):
    """JSON-safe copy with NaN turned into null and numpy scalars into Python ones."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return None if math.isnan(v) else float(v)
    if isinstance(v, enum.Enum):
        return v.value
    return v


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


class _Run:
    """Paths and shared state of one pipeline invocation."""

    def __init__(self, cfg: PipelineConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.contracts = cfg.contract_list()
        self.names = [c["name"] for c in self.contracts]
        self.pairs = list(zip(self.names, self.names[1:]))
        self._cache = {}

    def path(self, stage: str, name: str = "", kind: str = "") -> Path:
        """Artifact path; for ``backtest`` the ``kind`` picks a CSV (trades, equity, daily, sharpe), empty for the report."""
        o = self.out
        return {
            "ticks": o / "ticks" / f"{name}.csv",
            "detect": o / "levels" / f"{name}.csv",
            "features": o / "features" / f"{name}.csv",
            "label": o / "labels" / f"{name}.csv",
            "select": o / "select" / f"{name}.json",
            "tune": o / "tune" / f"{name}.json",
            "train": o / "train" / f"{name}.model.json",
            "predictions": o / "train" / f"{name}.predictions.csv",
            "walk_forward": o / "train" / "walk_forward.csv",
            "explain": o / "explain" / f"{name}.shap.csv",
            "backtest": o / "backtest" / name / (f"{kind}.csv" if kind else "report.json"),
        }[stage]

    def rel(self, p: Path) -> str:
        return Path(os.path.relpath(p, self.out)).as_posix()

    def train_names(self) -> list[str]:
        if not self.pairs:
            raise ValueError("walk-forward stages need at least two contracts")
        return [a for a, _ in self.pairs]

    def outputs_of(self, stage: str) -> list[Path]:
        """Files a stage is expected to produce (used for dependency checks)."""
        if stage in ("ticks", "detect", "features", "label"):
            return [self.path(stage, n) for n in self.names]
        if stage in ("select", "tune", "train"):
            out = [self.path(stage, n) for n in self.train_names()]
            if stage == "train":
                out += [self.path("predictions", f"{a}__{b}") for a, b in self.pairs]
                out.append(self.path("walk_forward"))
            return out
        if stage == "explain":
            return [self.path("explain", b) for _, b in self.pairs]
        if stage == "backtest":
            return [self.path("backtest", b, k) for _, b in self.pairs for k in ("", "trades", "equity", "daily", "sharpe")]
        return [self.out / "report" / f"{f}.csv" for f in rpt.FIGURES]

    def require(self, stage: str) -> None:
        for dep in REQUIRES[stage]:
            try:
                expected = self.outputs_of(dep)
            except ValueError as exc:
                raise StageError(stage, str(exc)) from None
            missing = [p for p in expected if not p.exists()]
            if missing:
                raise StageError(stage, f"missing {self.rel(missing[0])}; run stage '{dep}' first")

    def series(self, name: str) -> TickSeries:
        key = ("ticks", name)
        if key not in self._cache:
            self._cache[key] = TickSeries.from_csv(self.path("ticks", name))
        return self._cache[key]

    def labels(self, name: str) -> Dataset:
        return Dataset.from_csv(self.path("label", name), instrument=name)


# ---------------------------------------------------------------- stages

def _stage_ticks(run: _Run):
    cfg = run.cfg
    inputs, outputs = [], []
    for c in run.contracts:
        src = cfg.events_path(c, run.out)
        if not src.exists():
            hint = "run 'synth' first" if c.get("synthetic") else "check the contract's events path"
            raise StageError("ticks", f"missing event file {src}; {hint}")
        events = load_events(src, c.get("format"), cfg.tick_size)
        series = reconstruct_ticks(events, cfg.tick_size, c["name"])
        dst = run.path("ticks", c["name"])
        dst.parent.mkdir(parents=True, exist_ok=True)
        series.to_csv(dst)
        inputs.append(src)
        outputs.append(dst)
    return {"tick_size": cfg.tick_size, "contracts": run.names}, inputs, outputs


def _stage_detect(run: _Run):
    d = run.cfg.detector
    outputs = []
    for n in run.names:
        levels = find_local_extrema(run.series(n), d["window"], tuple(d["width_bounds"]), d["rel_height"])
        dst = run.path("detect", n)
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_levels(levels, dst)
        outputs.append(dst)
    return d, [run.path("ticks", n) for n in run.names], outputs


def _stage_features(run: _Run):
    fcfg = run.cfg.feature_config()
    outputs = []
    for n in run.names:
        levels = read_levels(run.path("detect", n))
        vectors = extract_features(run.series(n), levels, fcfg)
        vectors.sort(key=lambda v: (v.approach_index, v.level_id))
        names = feature_names(fcfg)
        X = np.vstack([v.values for v in vectors]) if vectors else np.zeros((0, len(names)))
        meta = {
            "level_id": np.array([v.level_id for v in vectors], np.int64),
            "peak_index": np.array([v.level.peak_index for v in vectors], np.int64),
            "side": np.array([v.level.side.sign for v in vectors], np.int64),
            "level_price": np.array([v.level.level_price for v in vectors], np.int64),
            "touch_index": np.array([v.approach.touch_index for v in vectors], np.int64),
            "approach_index": np.array([v.approach_index for v in vectors], np.int64),
        }
        dst = run.path("features", n)
        dst.parent.mkdir(parents=True, exist_ok=True)
        Dataset(X, None, names, True, meta, n).to_csv(dst)
        outputs.append(dst)
    inputs = [run.path(s, n) for n in run.names for s in ("ticks", "detect")]
    return dataclasses.asdict(fcfg), inputs, outputs


def _stage_label(run: _Run):
    lab = run.cfg.label
    outputs = []
    for n in run.names:
        feats = Dataset.from_csv(run.path("features", n), instrument=n)
        ds = label_dataset(run.series(n), feats, lab["cross_ticks"], lab["rebound_ticks"])
        dst = run.path("label", n)
        dst.parent.mkdir(parents=True, exist_ok=True)
        ds.to_csv(dst)
        outputs.append(dst)
    inputs = [run.path(s, n) for n in run.names for s in ("ticks", "features")]
    return lab, inputs, outputs


def _select_features(ds: Dataset, base: TrainConfig, m: dict):
    if not m["select_features"]:
        return list(ds.feature_names), None
    res = rfecv(ds, base, m["folds"], threshold=m["threshold"])
    return res.selected, res


def _stage_select(run: _Run):
    m = run.cfg.model
    base = run.cfg.train_base()
    outputs = []
    for n in run.train_names():
        selected, res = _select_features(run.labels(n), base, m)
        doc = {"selected": selected, "enabled": m["select_features"]}
        if res is not None:
            doc["path"] = [{"features": f, "score": s} for f, s in res.path]
            doc["eliminated"] = res.eliminated
        outputs.append(_write_json(run.path("select", n), doc))
    params = {"base": base.to_dict(), "folds": m["folds"], "threshold": m["threshold"],
              "select_features": m["select_features"]}
    return params, [run.path("label", n) for n in run.train_names()], outputs


def _tune(ds: Dataset, names, base: TrainConfig, m: dict):
    sub = Dataset(ds.columns(names), ds.y, list(names), ds.chronological, ds.meta, ds.instrument)
    return sub, grid_search(sub, m["grid"], m["folds"], base=base, threshold=m["threshold"])


def _stage_tune(run: _Run):
    m = run.cfg.model
    base = run.cfg.train_base()
    outputs, inputs = [], []
    for n in run.train_names():
        names = _read_json(run.path("select", n))["selected"]
        _, res = _tune(run.labels(n), names, base, m)
        doc = {"features": names, "best": res.best.to_dict(), "best_score": res.best_score,
               "table": [{"config": c.to_dict(), "score": s} for c, s in res.table]}
        outputs.append(_write_json(run.path("tune", n), doc))
        inputs += [run.path("label", n), run.path("select", n)]
    return {"grid": m["grid"], "folds": m["folds"], "threshold": m["threshold"]}, inputs, outputs


def _predict_rows(model: Ensemble, ds: Dataset, threshold: float):
    X = ds.columns(model.features)
    margin = model.margin(X)
    pred = model.predict(X, threshold)
    header = ["level_id", "approach_index", "side", "level_price", "margin", "probability", "predicted", "label"]
    rows = [[int(ds.meta["level_id"][i]), int(ds.meta["approach_index"][i]), int(ds.meta["side"][i]),
             int(ds.meta["level_price"][i]), float(margin[i]), float(sigmoid(margin[i])), int(pred[i]),
             int(ds.y[i])] for i in range(len(ds))]
    return header, rows, pred


def _stage_train(run: _Run):
    m = run.cfg.model
    outputs, inputs = [], []
    wf_rows = []
    for a, b in run.pairs:
        tuned = _read_json(run.path("tune", a))
        names = tuned["features"]
        train = run.labels(a)
        model = fit(train.columns(names), train.y, TrainConfig(**tuned["best"]), feature_names=names)
        run.path("train", a).parent.mkdir(parents=True, exist_ok=True)
        model.save(run.path("train", a))
        test = run.labels(b)
        header, rows, pred = _predict_rows(model, test, m["threshold"])
        outputs += [run.path("train", a),
                    rpt.write_table(run.path("predictions", f"{a}__{b}"), header, rows)]
        wf_rows.append([a, b, run.cfg.label["rebound_ticks"], precision_score(test.y, pred) if len(test) else None,
                        int(pred.sum()), len(test), test.n_positive / len(test) if len(test) else None,
                        tuned["best_score"]])
        inputs += [run.path("tune", a), run.path("label", a), run.path("label", b)]
    outputs.append(rpt.write_table(run.path("walk_forward"), ["train", "test", "rebound", "precision", "n_predicted",
                                                               "n_test", "base_rate", "cv_score"], wf_rows))
    return {"threshold": m["threshold"], "pairs": [list(p) for p in run.pairs]}, inputs, outputs


def _background(X: np.ndarray, k: int) -> np.ndarray:
    if len(X) <= k:
        return X
    return X[np.unique(np.linspace(0, len(X) - 1, k).round().astype(np.int64))]


def _stage_explain(run: _Run):
    e = run.cfg.explain
    outputs, inputs = [], []
    for a, b in run.pairs:
        model = Ensemble.load(run.path("train", a))
        train, test = run.labels(a), run.labels(b)
        rows = np.arange(len(test))
        if len(rows) > e["max_rows"]:
            rows = np.unique(np.linspace(0, len(test) - 1, e["max_rows"]).round().astype(np.int64))
        header = list(rpt.SHAP_FIXED_COLUMNS) + list(model.features)
        out_rows = []
        if len(rows):
            res = shap_values(model, test.columns(model.features)[rows],
                              _background(train.columns(model.features), e["background"]), test.y[rows])
            for k, i in enumerate(rows):
                out_rows.append([int(i), int(test.meta["level_id"][i]), int(test.y[i]), float(res.margins[k]),
                                 res.base_value] + [float(v) for v in res.values[k]])
        shap_path = rpt.write_table(run.path("explain", b), header, out_rows)
        outputs.append(shap_path)
        if out_rows:
            outputs.append(rpt.write_table(shap_path.with_name(f"{b}.shap_summary.csv"),
                                           *rpt.shap_summary([(b, shap_path)])))
            outputs.append(rpt.write_table(shap_path.with_name(f"{b}.decision_paths.csv"),
                                           *rpt.decision_path_table([(b, shap_path)], e["top_k"],
                                                                    run.cfg.model["threshold"])))
        inputs += [run.path("train", a), run.path("label", a), run.path("label", b)]
    return e, inputs, outputs


def _signals(pred_rows) -> list[Signal]:
    """Signals from rows with ``approach_index, side, level_price``; a ``predicted`` column filters them."""
    sig = [Signal(int(r["approach_index"]), int(r["side"]), int(r["level_price"]), int(r.get("level_id", -1)))
           for r in pred_rows if int(r.get("predicted", 1)) == 1]
    return sorted(sig, key=lambda s: (s.approach_index, s.level_id))


def _write_backtest(rep, folder: Path) -> list[Path]:
    trades = [[t.direction.name.lower(), t.entry_index, t.exit_index, t.entry_price, t.exit_price, t.entry_time,
               t.exit_time, t.gross, t.commission_cents / 100, t.net, t.reason.value, t.level_id]
              for t in rep.trades]
    out = [
        rpt.write_table(folder / "trades.csv", ["direction", "entry_index", "exit_index", "entry_price",
                                                "exit_price", "entry_time", "exit_time", "gross", "commission",
                                                "net", "reason", "level_id"], trades),
        rpt.write_table(folder / "equity.csv", ["time", "equity"],
                        [[int(t), int(e) / 100] for t, e in zip(rep.equity_times, rep.equity_cents)]),
        rpt.write_table(folder / "daily.csv", ["date", "net"], list(zip(rep.daily_days, rep.daily_net.tolist()))),
        rpt.write_table(folder / "sharpe.csv", ["date", "sharpe"],
                        list(zip(rep.sharpe.days, rep.sharpe.values.tolist()))),
    ]
    doc = {"stats": rep.stats.to_dict(), "total_net": rep.total_net,
           "final_equity": rep.final_equity_cents / 100, "initial_equity": rep.initial_equity_cents / 100,
           "n_signals": rep.n_signals, "n_skipped": rep.n_skipped, "n_unfilled": rep.n_unfilled,
           "sharpe": last_sharpe(rep), "sharpe_partial": rep.sharpe.partial, "strategy": rep.config.to_dict()}
    out.insert(0, _write_json(folder / "report.json", doc))
    return out


def last_sharpe(rep) -> float | None:
    """Most recent rolling Sharpe value of a backtest, None when undefined."""
    vals = rep.sharpe.values
    return float(vals[-1]) if len(vals) and not np.isnan(vals[-1]) else None


def _stage_backtest(run: _Run):
    strategy = run.cfg.strategy_config()
    outputs, inputs = [], []
    for a, b in run.pairs:
        pred_path = run.path("predictions", f"{a}__{b}")
        _, rows = rpt.read_table(pred_path, ("approach_index", "side", "level_price"))
        rep = run_backtest(run.series(b), _signals(rows), strategy)
        outputs += _write_backtest(rep, run.out / "backtest" / b)
        inputs += [run.path("ticks", b), pred_path]
    return strategy.to_dict(), inputs, outputs


def _stage_report(run: _Run, figures=None):
    r = run.cfg.report
    plots = bool(r.get("plots", False))
    inputs = {
        "class_balance": {"contracts": [(n, run.path("ticks", n), run.path("detect", n), run.path("label", n))
                                        for n in run.names]},
        "precision_by_contract": {"table": run.path("walk_forward")},
        "confidence_sweep": {"predictions": [(b, run.path("predictions", f"{a}__{b}")) for a, b in run.pairs],
                             **({"thresholds": r["thresholds"]} if "thresholds" in r else {})},
        "shap_summary": {"shap": [(b, run.path("explain", b)) for _, b in run.pairs]},
        "decision_paths": {"shap": [(b, run.path("explain", b)) for _, b in run.pairs],
                           "top_k": run.cfg.explain["top_k"], "threshold": run.cfg.model["threshold"]},
        "profit_sharpe": {"runs": [(b, run.path("backtest", b, "daily"), run.path("backtest", b, "sharpe"))
                                   for _, b in run.pairs]},
    }
    outputs, used = [], []
    for fig in figures or rpt.FIGURES:
        spec = rpt.FigureSpec(fig, inputs[fig], run.out / "report" / f"{fig}.csv", plots)
        outputs += rpt.render(spec)
        used += _paths_in(inputs[fig])
    return r, sorted(set(used)), outputs


def _paths_in(obj) -> list[Path]:
    if isinstance(obj, Path):
        return [obj]
    if isinstance(obj, dict):
        return [p for v in obj.values() for p in _paths_in(v)]
    if isinstance(obj, (list, tuple)):
        return [p for v in obj for p in _paths_in(v)]
    return []


_RUNNERS = {
    "ticks": _stage_ticks, "detect": _stage_detect, "features": _stage_features, "label": _stage_label,
    "select": _stage_select, "tune": _stage_tune, "train": _stage_train, "explain": _stage_explain,
    "backtest": _stage_backtest, "report": _stage_report,
}


# ---------------------------------------------------------------- orchestration

def synthesize(cfg: PipelineConfig, out: Path) -> dict:
    """Generate every synthetic contract's events and ground truth; returns the manifest source entry."""
    if cfg.synth is None:
        raise ValueError("config has no synth section")
    files = {}
    for sc in cfg.synth_configs():
        events, truth = generate(sc)
        dst = out / "events" / f"{sc.instrument}.bin"
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_events(events, dst, "binary", cfg.tick_size)
        gt = out / "events" / f"{sc.instrument}.ground_truth.csv"
        write_ground_truth(truth, gt)
        files[dst] = gt
    outputs = {Path(os.path.relpath(p, out)).as_posix(): sha256(p) for pair in files.items() for p in pair}
    return {"synth": [c.to_dict() for c in cfg.synth_configs()], "outputs": dict(sorted(outputs.items()))}


def _resolve_out(cfg: PipelineConfig, out_dir=None) -> Path:
    return Path(out_dir or os.environ.get("PRICELEVELS_OUT_DIR") or cfg.out_dir)


def _parse_stages(stages) -> list[str]:
    if stages is None:
        return list(STAGES)
    if isinstance(stages, str):
        stages = [s.strip() for s in stages.split(",") if s.strip()]
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}; choose from {', '.join(STAGES)}")
    return [s for s in STAGES if s in stages]


def run_pipeline(cfg: PipelineConfig, stages=None, out_dir=None, figures=None) -> dict:
    """Run ``stages`` in pipeline order and update ``manifest.json``; returns the manifest.

    Entries of stages not run this time are kept from an existing manifest.
    """
    out = _resolve_out(cfg, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if os.environ.get("PRICELEVELS_DATA_DIR"):
        cfg = dataclasses.replace(cfg, data_dir=os.environ["PRICELEVELS_DATA_DIR"])
    stages = _parse_stages(stages)
    run = _Run(cfg, out)
    manifest_path = out / "manifest.json"
    previous = _read_json(manifest_path) if manifest_path.exists() and stages != list(STAGES) else {}
    entries = {e["stage"]: e for e in previous.get("stages", [])}
    source = previous.get("source")
    if cfg.synth is not None and "ticks" in stages:
        source = synthesize(cfg, out)
    for stage in stages:
        run.require(stage)
        try:
            if stage == "report":
                params, inputs, outputs = _stage_report(run, figures)
            else:
                params, inputs, outputs = _RUNNERS[stage](run)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        entries[stage] = {
            "stage": stage,
            "params": params,
            "inputs": {run.rel(p): sha256(p) for p in inputs},
            "outputs": {run.rel(p): sha256(p) for p in outputs},
        }
    manifest = {"config": cfg.to_dict(), "source": source,
                "stages": [entries[s] for s in STAGES if s in entries]}
    _write_json(manifest_path, manifest)
    return _read_json(manifest_path)


# ---------------------------------------------------------------- experiment matrix

def _matrix_cell(cfg: PipelineConfig, out: str, rebound: int, train: str, test: str) -> list:
    out = Path(out)
    run = _Run(cfg, out)
    folder = out / "matrix" / f"rebound_{rebound}" / f"{train}__{test}"
    try:
        lab = cfg.label
        sets = {}
        for n in (train, test):
            feats = Dataset.from_csv(run.path("features", n), instrument=n)
            sets[n] = label_dataset(run.series(n), feats, lab["cross_ticks"], rebound)
            folder.mkdir(parents=True, exist_ok=True)
            sets[n].to_csv(folder / f"{n}.labels.csv")
        m, base = cfg.model, cfg.train_base()
        names, _ = _select_features(sets[train], base, m)
        sub, res = _tune(sets[train], names, base, m)
        model = fit(sub.X, sub.y, res.best, feature_names=names)
        model.save(folder / "model.json")
        header, rows, pred = _predict_rows(model, sets[test], m["threshold"])
        rpt.write_table(folder / "predictions.csv", header, rows)
        strategy = dataclasses.replace(cfg.strategy_config(), take_profit=rebound)
        pred_rows = [dict(zip(header, r)) for r in rows]
        rep = run_backtest(run.series(test), _signals(pred_rows), strategy)
        _write_backtest(rep, folder)
        prec = precision_score(sets[test].y, pred) if len(sets[test]) else None
        return [train, test, rebound, prec, len(rep.trades), rep.total_net, last_sharpe(rep), "ok"]
    except Exception as exc:  # a failed cell is reported, the matrix carries on
        return [train, test, rebound, None, None, None, None, f"failed: {type(exc).__name__}: {exc}"]


def experiment_matrix(cfg: PipelineConfig, rebounds=None, pairs=None, out_dir=None, workers=None) -> Path:
    """Walk-forward precision, trades, net and Sharpe for every rebound size and contract pair.

    Needs the ``features`` stage outputs. Writes ``matrix/matrix.csv`` and one
    folder of artifacts per cell; returns the table path.
    """
    out = _resolve_out(cfg, out_dir)
    run = _Run(cfg, out)
    rebounds = list(rebounds or cfg.matrix["rebounds"])
    pairs = [tuple(p) for p in (pairs or run.pairs)]
    if not pairs:
        raise StageError("matrix", "need at least one contract pair")
    for a, b in pairs:
        for n in (a, b):
            if n not in run.names:
                raise StageError("matrix", f"unknown contract {n!r}")
            for dep in ("ticks", "features"):
                if not run.path(dep, n).exists():
                    raise StageError("matrix", f"missing {run.rel(run.path(dep, n))}; run stage '{dep}' first")
    cells = [(r, a, b) for r in rebounds for a, b in pairs]
    workers = int(workers or cfg.matrix["workers"])
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_matrix_cell, *zip(*[(cfg, str(out), r, a, b) for r, a, b in cells])))
    else:
        rows = [_matrix_cell(cfg, str(out), r, a, b) for r, a, b in cells]
    return rpt.write_table(out / "matrix" / "matrix.csv", MATRIX_COLUMNS, rows)


# ---------------------------------------------------------------- command line

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pricelevels", description="Price-level rebound research pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON pipeline config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out-dir", help="override the output directory")

    common(sub.add_parser("synth", help="generate synthetic event files and ground truth"))
    for stage in STAGES:
        sp = sub.add_parser(stage, help=f"run the {stage} stage")
        common(sp)
        if stage == "report":
            sp.add_argument("--figure", choices=rpt.FIGURES, action="append", help="figure id (repeatable)")
    sp = sub.add_parser("run", help="run several stages in order")
    common(sp)
    sp.add_argument("--stages", default=",".join(STAGES), help="comma-separated stage list")
    sp = sub.add_parser("matrix", help="rebound-size by contract-pair experiment table")
    common(sp)
    sp.add_argument("--rebounds", help="comma-separated rebound sizes")
    sp.add_argument("--workers", type=int)
    sp = sub.add_parser("eval", help="precision of a saved model over probability thresholds")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="labeled dataset CSV")
    sp.add_argument("--thresholds", default=",".join(str(t) for t in rpt.DEFAULT_THRESHOLDS))
    return p


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _eval(args) -> int:
    model = Ensemble.load(args.model)
    ds = Dataset.from_csv(args.data)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["threshold", "precision", "n_predicted"])
    for pt in confidence_sweep(model, ds.columns(model.features), ds.y, thresholds):
        w.writerow([pt.threshold, "" if pt.precision is None else repr(pt.precision), pt.n_predicted])
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    stage = args.command
    try:
        if args.command == "eval":
            return _eval(args)
        cfg = _load_config(args)
        if args.command == "synth":
            out = _resolve_out(cfg, args.out_dir)
            src = synthesize(cfg, out)
            for rel in src["outputs"]:
                print(out / rel)
        elif args.command == "matrix":
            rebounds = [int(r) for r in args.rebounds.split(",")] if args.rebounds else None
            print(experiment_matrix(cfg, rebounds, out_dir=args.out_dir, workers=args.workers))
        else:
            stages = args.stages if args.command == "run" else [args.command]
            figures = getattr(args, "figure", None)
            manifest = run_pipeline(cfg, stages, args.out_dir, figures)
            for entry in manifest["stages"]:
                print(f"{entry['stage']}: {len(entry['outputs'])} outputs")
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: stage '{stage}': {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
