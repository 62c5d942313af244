"""Figure tables rendered from pipeline artifacts.

Every figure is a CSV with a fixed header; a PNG can be drawn from it when
matplotlib is installed. Tables depend only on their input files, and floats
are written with ``repr``, so reruns produce identical bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .explain import ShapResult, decision_paths, summary_report
from .model.gbdt import predict_at
from .model.metrics import precision_score

__all__ = ["FIGURES", "FigureSpec", "render", "class_balance", "precision_by_contract", "confidence_sweep",
           "shap_summary", "decision_path_table", "profit_sharpe", "read_table", "write_table",
           "SHAP_FIXED_COLUMNS"]

FIGURES = ("class_balance", "precision_by_contract", "confidence_sweep", "shap_summary", "decision_paths",
           "profit_sharpe")
SHAP_FIXED_COLUMNS = ("row", "level_id", "label", "margin", "base_value")
DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class FigureSpec:
    figure: str
    inputs: dict = field(default_factory=dict)   # name -> path or list of (contract, path...) tuples
    output: Path = Path("figure.csv")
    plot: bool = False

    def __post_init__(self):
        if self.figure not in FIGURES:
            raise ValueError(f"unknown figure {self.figure!r}; choose from {', '.join(FIGURES)}")
        self.output = Path(self.output)


def read_table(path, required=()) -> tuple[list[str], list[dict]]:
    """Header and rows of a CSV, checking that ``required`` columns are present."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = list(reader.fieldnames or [])
        rows = list(reader)
    for col in required:
        if col not in header:
            raise ValueError(f"{path}: missing column '{col}'")
    return header, rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, (np.integer, bool, np.bool_)):
        return int(v)
    return v


def write_table(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _count_rows(path) -> int:
    with open(path) as fh:
        return sum(1 for line in fh if line.strip() and not line.startswith("#")) - 1


def class_balance(contracts):
    """``contracts``: (name, ticks csv, levels csv, labels csv) tuples -> one row per contract."""
    header = ["contract", "ticks", "levels", "labeled", "rebounds", "crosses"]
    rows = []
    for name, ticks, levels, labels in contracts:
        read_table(levels, ("peak_index",))
        _, lab = read_table(labels, ("label",))
        rebounds = sum(int(r["label"]) == 1 for r in lab)
        rows.append([name, _count_rows(ticks), _count_rows(levels), len(lab), rebounds, len(lab) - rebounds])
    return header, rows


def precision_by_contract(table_path):
    """Mean test precision per (test contract, rebound size) from a walk-forward or matrix table.

    Runs without a precision (nothing predicted, or a failed cell) are
    counted but left out of the mean.
    """
    _, rows = read_table(table_path, ("test", "rebound", "precision"))
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["test"], int(r["rebound"])), []).append(r["precision"])
    header = ["contract", "rebound", "precision", "runs", "scored_runs"]
    out = []
    for (contract, rebound), vals in groups.items():
        scored = [float(v) for v in vals if v != ""]
        out.append([contract, rebound, float(np.mean(scored)) if scored else None, len(vals), len(scored)])
    return header, out


def confidence_sweep(predictions, thresholds=DEFAULT_THRESHOLDS):
    """``predictions``: (contract, predictions csv) pairs -> precision per probability threshold."""
    header = ["contract", "threshold", "precision", "n_predicted"]
    out = []
    for name, path in predictions:
        _, rows = read_table(path, ("margin", "label"))
        margin = np.array([float(r["margin"]) for r in rows])
        labels = np.array([int(r["label"]) for r in rows])
        for t in thresholds:
            pred = predict_at(margin, t)
            out.append([name, float(t), precision_score(labels, pred), int(pred.sum())])
    return header, out


def _shap_result(path) -> ShapResult:
    header, rows = read_table(path, SHAP_FIXED_COLUMNS)
    feats = [c for c in header if c not in SHAP_FIXED_COLUMNS]
    if not rows:
        raise ValueError(f"{path}: no explained rows")
    values = np.array([[float(r[f]) for f in feats] for r in rows]).reshape(len(rows), len(feats))
    margins = np.array([float(r["margin"]) for r in rows])
    labels = np.array([int(r["label"]) for r in rows])
    base = float(rows[0]["base_value"])
    return ShapResult(base, values, np.zeros_like(values), margins, feats, labels)


def shap_summary(shap_files):
    """``shap_files``: (contract, shap csv) pairs -> features ranked by mean absolute contribution."""
    header = ["contract", "rank", "feature", "mean_abs", "mean", "std"]
    out = []
    for name, path in shap_files:
        for s in summary_report(_shap_result(path)):
            out.append([name, s.rank, s.feature, s.mean_abs, s.mean, s.std])
    return header, out


def decision_path_table(shap_files, top_k: int = 25, threshold: float = 0.5):
    """Cumulative probability after each feature for the strongest rows of every contract."""
    header = ["contract", "row", "step", "feature", "probability", "label", "predicted", "misclassified"]
    out = []
    for name, path in shap_files:
        res = _shap_result(path)
        order, paths = decision_paths(res, min(top_k, len(res)), threshold)
        for p in paths:
            for step, prob in enumerate(p.probabilities):
                feat = "base" if step == 0 else order[step - 1]
                out.append([name, p.row, step, feat, float(prob), p.label, p.predicted, int(p.misclassified)])
    return header, out


def profit_sharpe(runs):
    """``runs``: (contract, daily csv, sharpe csv) -> daily net, cumulative equity and rolling Sharpe by date."""
    header = ["contract", "date", "daily_net", "equity", "sharpe"]
    out = []
    for name, daily_path, sharpe_path in runs:
        _, daily = read_table(daily_path, ("date", "net"))
        _, sharpe = read_table(sharpe_path, ("date", "sharpe"))
        by_day = {r["date"]: r["sharpe"] for r in sharpe}
        equity = 0
        for r in daily:
            cents = round(float(r["net"]) * 100)
            equity += cents
            s = by_day.get(r["date"], "")
            out.append([name, r["date"], cents / 100, equity / 100, float(s) if s != "" else None])
    return header, out


def _plot(figure, header, rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    col = {h: i for i, h in enumerate(header)}
    if figure == "class_balance":
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [r[col["labeled"]] for r in rows], 0.4, label="labeled levels")
        ax.bar(x + 0.2, [r[col["rebounds"]] for r in rows], 0.4, label="rebounds")
        ax.set_xticks(x, [r[0] for r in rows])
    elif figure == "precision_by_contract":
        labels = [f"{r[0]}/{r[1]}" for r in rows]
        ax.bar(labels, [r[col["precision"]] or 0.0 for r in rows])
        ax.set_ylabel("precision")
    elif figure == "confidence_sweep":
        for name in dict.fromkeys(r[0] for r in rows):
            pts = [(r[1], r[2]) for r in rows if r[0] == name and r[2] is not None]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
        ax.set_xlabel("threshold")
        ax.set_ylabel("precision")
    elif figure == "shap_summary":
        first = rows[0][0] if rows else ""
        sub = [r for r in rows if r[0] == first][:20][::-1]
        ax.barh([r[2] for r in sub], [r[3] for r in sub])
        ax.set_xlabel("mean |contribution|")
    elif figure == "decision_paths":
        for key in dict.fromkeys((r[0], r[1]) for r in rows):
            pts = [r[4] for r in rows if (r[0], r[1]) == key]
            ax.plot(pts, range(len(pts)), alpha=0.6)
        ax.set_xlabel("probability")
    else:
        for name in dict.fromkeys(r[0] for r in rows):
            ax.plot([r[3] for r in rows if r[0] == name], label=name)
        ax.set_ylabel("equity")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    ax.set_title(figure.replace("_", " "))
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render(spec: FigureSpec) -> list[Path]:
    """Write the figure's CSV (and PNG when ``spec.plot``); returns the written paths."""
    inp = spec.inputs
    try:
        if spec.figure == "class_balance":
            header, rows = class_balance(inp["contracts"])
        elif spec.figure == "precision_by_contract":
            header, rows = precision_by_contract(inp["table"])
        elif spec.figure == "confidence_sweep":
            header, rows = confidence_sweep(inp["predictions"], inp.get("thresholds", DEFAULT_THRESHOLDS))
        elif spec.figure == "shap_summary":
            header, rows = shap_summary(inp["shap"])
        elif spec.figure == "decision_paths":
            header, rows = decision_path_table(inp["shap"], inp.get("top_k", 25), inp.get("threshold", 0.5))
        else:
            header, rows = profit_sharpe(inp["runs"])
    except KeyError as exc:
        raise ValueError(f"figure {spec.figure} needs input {exc.args[0]!r}") from None
    out = [write_table(spec.output, header, rows)]
    if spec.plot:
        png = spec.output.with_suffix(".png")
        _plot(spec.figure, header, rows, png)
        out.append(png)
    return out
