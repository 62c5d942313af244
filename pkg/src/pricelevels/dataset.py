"""Feature matrix plus labels and per-row level metadata, with a CSV codec."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Dataset", "META_COLUMNS"]

META_COLUMNS = ("level_id", "peak_index", "side", "level_price", "touch_index", "approach_index",
                "outcome_index")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray | None
    feature_names: list[str]
    chronological: bool = True
    meta: dict[str, np.ndarray] = field(default_factory=dict)
    instrument: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if self.X.shape[1] != len(self.feature_names):
            raise ValueError(f"{self.X.shape[1]} columns but {len(self.feature_names)} feature names")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int8)
            if len(self.y) != len(self.X):
                raise ValueError("labels and rows differ in length")
            if not np.isin(self.y, (0, 1)).all():
                raise ValueError("labels must be 0 or 1")
        if not np.isfinite(self.X).all():
            raise ValueError("feature matrix contains non-finite values")
        if self.chronological and "approach_index" in self.meta and len(self.X) > 1:
            if np.any(np.diff(self.meta["approach_index"]) < 0):
                raise ValueError("rows are flagged chronological but approach_index decreases")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def n_positive(self) -> int:
        return 0 if self.y is None else int(self.y.sum())

    def class_counts(self) -> dict[str, int]:
        return {"rows": len(self), "rebound": self.n_positive, "cross": len(self) - self.n_positive}

    def columns(self, names) -> np.ndarray:
        """Feature columns by name, in the given order."""
        index = {n: i for i, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise KeyError(f"unknown features: {missing}")
        return self.X[:, [index[n] for n in names]]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.X[rows], None if self.y is None else self.y[rows], list(self.feature_names),
                       self.chronological, {k: v[rows] for k, v in self.meta.items()}, self.instrument)

    def to_csv(self, path) -> None:
        meta_cols = [c for c in META_COLUMNS if c in self.meta]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.feature_names) + meta_cols + (["label"] if self.y is not None else []))
            for i in range(len(self)):
                row = [repr(float(v)) for v in self.X[i]]
                row += [int(self.meta[c][i]) for c in meta_cols]
                if self.y is not None:
                    row.append(int(self.y[i]))
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, instrument: str = "") -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
        meta_cols = [c for c in header if c in META_COLUMNS]
        has_label = "label" in header
        names = [c for c in header if c not in META_COLUMNS and c != "label"]
        pos = {c: i for i, c in enumerate(header)}
        X = np.array([[float(r[pos[c]]) for c in names] for r in rows], dtype=np.float64).reshape(len(rows), len(names))
        y = np.array([int(r[pos["label"]]) for r in rows], np.int8) if has_label else None
        meta = {c: np.array([int(r[pos[c]]) for r in rows], np.int64) for c in meta_cols}
        return cls(X, y, names, chronological="approach_index" in meta, meta=meta, instrument=instrument)
