"""Cross-validated feature elimination, grid search and walk-forward evaluation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ..dataset import Dataset
from .gbdt import Ensemble, TrainConfig, fit, predict_at, presort
from .metrics import precision_score

__all__ = ["DEFAULT_GRID", "cv_splits", "CVResult", "cross_val_precision", "RFECVResult", "rfecv",
           "GridResult", "grid_search", "expand_grid", "WalkForwardRow", "walk_forward"]

DEFAULT_GRID = {
    "depth": [5, 6, 10],
    "iterations": [100, 500, 1000],
    "l2_leaf_reg": [1.0, 4.0, 7.0],
    "learning_rate": [0.03, 0.30],
    "ordered_time": [True],
}


def cv_splits(n_rows: int, k: int = 5, ordered_time: bool = True, seed: int = 0):
    """Train/test row indices for ``k`` folds.

    Chronological (``ordered_time``): the rows are cut into ``k + 1``
    contiguous blocks and fold i trains on blocks ``0..i`` and tests on block
    ``i + 1``, so no fold ever trains on the future. Otherwise a seeded
    shuffled k-fold split.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    if ordered_time:
        if n_rows < k + 1:
            raise ValueError(f"{n_rows} rows cannot form {k} chronological folds")
        blocks = np.array_split(np.arange(n_rows), k + 1)
        return [(np.concatenate(blocks[:i + 1]), blocks[i + 1]) for i in range(k)]
    if n_rows < k:
        raise ValueError(f"{n_rows} rows cannot form {k} folds")
    perm = np.random.default_rng(seed).permutation(n_rows)
    chunks = np.array_split(perm, k)
    return [(np.sort(np.concatenate(chunks[:i] + chunks[i + 1:])), np.sort(chunks[i])) for i in range(k)]


@dataclass
class CVResult:
    fold_scores: list          # precision per fold, None where excluded
    threshold: float = 0.5

    @property
    def score(self) -> float | None:
        """Mean precision over the folds that produced one."""
        valid = [s for s in self.fold_scores if s is not None]
        return float(np.mean(valid)) if valid else None


class _Folds:
    """Fold splits with each training matrix presorted once."""

    def __init__(self, X, y, k, ordered_time, seed):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y)
        self.splits = cv_splits(len(self.y), k, ordered_time, seed)
        self._sorted = {}

    def presorted(self, i, columns):
        if i not in self._sorted:
            self._sorted[i] = presort(self.X[self.splits[i][0]])
        Xt, order = self._sorted[i]
        return np.ascontiguousarray(Xt[columns]), np.ascontiguousarray(order[columns])

    def staged_scores(self, config: TrainConfig, stops, columns, threshold=0.5):
        """Per-fold precision after each tree count in ``stops``; shape (len(stops), k)."""
        stops = sorted(stops)
        out = [[None] * len(self.splits) for _ in stops]
        for i, (tr, te) in enumerate(self.splits):
            y_te = self.y[te]
            if not np.any(y_te == 1):
                continue  # undefined without positives in the test block
            y_tr = self.y[tr]
            if y_tr.min() == y_tr.max():
                continue  # single-class training block cannot be fitted
            model = fit(self.X[tr][:, columns], y_tr, config.replace(iterations=stops[-1]),
                        order=self.presorted(i, columns))
            margins = model.staged_margin(self.X[te][:, columns], stops)
            for s in range(len(stops)):
                out[s][i] = precision_score(y_te, predict_at(margins[s], threshold))
        return out


def _arrays(data, y=None):
    if isinstance(data, Dataset):
        if data.y is None:
            raise ValueError("dataset has no labels")
        return data.X, data.y, list(data.feature_names)
    X = np.asarray(data, dtype=np.float64)
    return X, np.asarray(y), [f"f{i}" for i in range(X.shape[1])]


def cross_val_precision(data, config: TrainConfig = TrainConfig(), k: int = 5, y=None,
                        threshold: float = 0.5) -> CVResult:
    """Mean fold precision of ``config``; folds without positive labels or predictions are excluded."""
    X, y, _ = _arrays(data, y)
    folds = _Folds(X, y, k, config.ordered_time, config.seed)
    scores = folds.staged_scores(config, [config.iterations], np.arange(X.shape[1]), threshold)
    return CVResult(scores[0], threshold)


@dataclass
class RFECVResult:
    selected: list[str]
    path: list[tuple[list[str], float | None]]   # (feature subset, mean CV precision) per step
    eliminated: list[str] = field(default_factory=list)

    @property
    def best_score(self) -> float | None:
        return max((s for _, s in self.path if s is not None), default=None)

    def scores_by_size(self) -> dict[int, float | None]:
        return {len(f): s for f, s in self.path}


def rfecv(data, config: TrainConfig = TrainConfig(), k: int = 5, y=None, threshold: float = 0.5,
          min_features: int = 1) -> RFECVResult:
    """Recursive elimination by total split gain, scored by cross-validated precision.

    At each step the current subset is scored, a model is fitted on all rows
    and the feature with the least gain importance is dropped (ties drop the
    later column). The subset with the best score wins, ties going to the
    smaller subset; if no step produced a score the full set is kept.
    """
    X, y, names = _arrays(data, y)
    if X.shape[1] < 1:
        raise ValueError("need at least one feature")
    if np.min(y) == np.max(y):
        raise ValueError("training data contains a single class")
    folds = _Folds(X, y, k, config.ordered_time, config.seed)
    full_sorted = presort(X)
    current = list(range(X.shape[1]))
    path = []
    eliminated = []
    while True:
        cols = np.array(current)
        scores = folds.staged_scores(config, [config.iterations], cols, threshold)[0]
        valid = [s for s in scores if s is not None]
        path.append(([names[c] for c in current], float(np.mean(valid)) if valid else None))
        if len(current) <= max(1, min_features):
            break
        model = fit(X[:, cols], y, config,
                    order=(np.ascontiguousarray(full_sorted[0][cols]), np.ascontiguousarray(full_sorted[1][cols])))
        imp = model.feature_importance()
        drop = len(imp) - 1 - int(np.argmin(imp[::-1]))
        eliminated.append(names[current[drop]])
        del current[drop]

    best = None
    for subset, score in path:
        if score is not None and (best is None or score >= best[1]):
            best = (subset, score)
    selected = best[0] if best is not None else path[0][0]
    return RFECVResult(list(selected), path, eliminated)


def expand_grid(grid: dict | None = None, base: TrainConfig = TrainConfig()) -> list[TrainConfig]:
    """All configs of ``grid`` in product order (axes in the dict's order, last axis fastest)."""
    grid = DEFAULT_GRID if grid is None else grid
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must have at least one value on every axis")
    keys = list(grid)
    return [base.replace(**dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass
class GridResult:
    best: TrainConfig
    best_score: float | None
    table: list[tuple[TrainConfig, float | None]]


def grid_search(data, grid: dict | None = None, k: int = 5, y=None, base: TrainConfig = TrainConfig(),
                threshold: float = 0.5) -> GridResult:
    """Exhaustive search for the config with the best mean CV precision.

    Configs differing only in ``iterations`` share one fit per fold, scored
    at each tree count. Ties keep the earliest config in grid order; cells
    whose fits fail or that produce no score are never selected unless
    every cell failed, in which case the first config is returned.
    """
    X, y, _ = _arrays(data, y)
    configs = expand_grid(grid, base)
    cols = np.arange(X.shape[1])
    scores: dict[int, float | None] = {}
    groups: dict[tuple, list[int]] = {}
    for i, c in enumerate(configs):
        groups.setdefault(repr(c.replace(iterations=1)), []).append(i)
    folds_by_split: dict[tuple, _Folds] = {}
    for members in groups.values():
        c0 = configs[members[0]]
        split_key = (c0.ordered_time, c0.seed)
        if split_key not in folds_by_split:
            folds_by_split[split_key] = _Folds(X, y, k, c0.ordered_time, c0.seed)
        stops = sorted({configs[i].iterations for i in members})
        try:
            staged = folds_by_split[split_key].staged_scores(c0, stops, cols, threshold)
        except ValueError:
            for i in members:
                scores[i] = None
            continue
        for i in members:
            fold_scores = [s for s in staged[stops.index(configs[i].iterations)] if s is not None]
            scores[i] = float(np.mean(fold_scores)) if fold_scores else None

    best_i = None
    for i in range(len(configs)):
        s = scores[i]
        if s is not None and (best_i is None or s > scores[best_i]):
            best_i = i
    table = [(configs[i], scores[i]) for i in range(len(configs))]
    if best_i is None:
        return GridResult(configs[0], None, table)
    return GridResult(configs[best_i], scores[best_i], table)


@dataclass
class WalkForwardRow:
    train: str
    test: str
    features: list[str]
    config: TrainConfig
    cv_score: float | None
    test_precision: float | None
    n_predicted: int
    n_test: int
    model: Ensemble | None = None


def walk_forward(datasets: list[Dataset], grid: dict | None = None, k: int = 5,
                 base: TrainConfig = TrainConfig(), threshold: float = 0.5,
                 select_features: bool = True) -> list[WalkForwardRow]:
    """Select, tune and train on each dataset, then test on the next one."""
    if len(datasets) < 2:
        raise ValueError("walk-forward evaluation needs at least 2 datasets")
    rows = []
    for i in range(len(datasets) - 1):
        train, test = datasets[i], datasets[i + 1]
        names = rfecv(train, base, k, threshold=threshold).selected if select_features else list(train.feature_names)
        sub = Dataset(train.columns(names), train.y, names, train.chronological, train.meta, train.instrument)
        result = grid_search(sub, grid, k, base=base, threshold=threshold)
        model = fit(sub.X, sub.y, result.best, feature_names=names)
        pred = model.predict(test.columns(names), threshold)
        rows.append(WalkForwardRow(train.instrument or f"run{i}", test.instrument or f"run{i + 1}", names,
                                   result.best, result.best_score, precision_score(test.y, pred),
                                   int(pred.sum()), len(test), model))
    return rows
