"""Class-weighted gradient-boosted trees for binary classification on log-loss."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np

from . import _kernels

__all__ = ["TrainConfig", "Tree", "Ensemble", "fit", "class_weights", "weighted_logloss", "sigmoid",
           "predict_at", "presort"]

FORMAT_NAME = "pricelevels-gbdt"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    depth: int = 6
    iterations: int = 100
    l2_leaf_reg: float = 3.0
    learning_rate: float = 0.1
    ordered_time: bool = True
    class_weights: str | tuple[float, float] = "balanced"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.l2_leaf_reg < 0:
            raise ValueError("l2_leaf_reg must be >= 0")
        cw = self.class_weights
        if isinstance(cw, list):
            object.__setattr__(self, "class_weights", cw := tuple(cw))
        if cw != "balanced" and not (isinstance(cw, tuple) and len(cw) == 2 and min(cw) > 0):
            raise ValueError("class_weights must be 'balanced' or a positive (negative, positive) pair")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["class_weights"], tuple):
            d["class_weights"] = list(d["class_weights"])
        return d


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray     # column index, -1 at leaves
    threshold: np.ndarray   # go left when x <= threshold
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray       # leaf values before learning-rate scaling
    gain: np.ndarray        # split gain at internal nodes

    def __len__(self) -> int:
        return len(self.feature)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value", "gain")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.asarray(d["feature"], np.int64), np.asarray(d["threshold"], np.float64),
                   np.asarray(d["left"], np.int64), np.asarray(d["right"], np.int64),
                   np.asarray(d["value"], np.float64), np.asarray(d["gain"], np.float64))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def class_weights(y: np.ndarray, spec="balanced") -> tuple[float, float]:
    """(negative, positive) weights; balanced gives ``N / (2 * N_c)``."""
    if spec == "balanced":
        n = len(y)
        n_pos = int(np.sum(y))
        return n / (2.0 * (n - n_pos)), n / (2.0 * n_pos)
    return float(spec[0]), float(spec[1])


def weighted_logloss(y: np.ndarray, margin: np.ndarray, w: np.ndarray) -> float:
    """Weighted mean log-loss of margins."""
    loss = np.logaddexp(0.0, margin) - y * margin
    return float(np.sum(w * loss) / np.sum(w))


@dataclass
class Ensemble:
    base_score: float
    learning_rate: float
    trees: list[Tree]
    features: list[str]
    config: TrainConfig = field(default_factory=TrainConfig)
    train_loss: list[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return len(self.features)

    def truncated(self, n_trees: int) -> "Ensemble":
        """The same model with only its first ``n_trees`` trees."""
        return Ensemble(self.base_score, self.learning_rate, self.trees[:n_trees], list(self.features),
                        self.config.replace(iterations=max(1, n_trees)), self.train_loss[:n_trees + 1])

    @cached_property
    def _packed(self):
        if not self.trees:
            empty_i, empty_f = np.zeros(0, np.int64), np.zeros(0)
            return empty_i, empty_f, empty_i, empty_i, empty_f, empty_i
        sizes = [len(t) for t in self.trees]
        roots = np.cumsum([0] + sizes[:-1]).astype(np.int64)
        cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])
        shift = np.repeat(roots, sizes)
        left = cat("left")
        right = cat("right")
        left = np.where(left >= 0, left + shift, -1)
        right = np.where(right >= 0, right + shift, -1)
        return cat("feature"), cat("threshold"), left, right, cat("value"), roots

    def _check(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def staged_margin(self, X, stops) -> np.ndarray:
        """Margins after each tree count in ``stops`` (ascending); shape (len(stops), n_rows)."""
        X = self._check(X)
        stops = np.asarray(stops, np.int64)
        if np.any(np.diff(stops) < 0) or (len(stops) and (stops[0] < 0 or stops[-1] > len(self.trees))):
            raise ValueError("stops must be ascending tree counts within the ensemble")
        return _kernels.predict_margin(X, *self._packed, self.learning_rate, self.base_score, stops)

    def margin(self, X) -> np.ndarray:
        return self.staged_margin(X, [len(self.trees)])[0]

    def predict_proba(self, X) -> np.ndarray:
        """Probability of the positive (rebound) class per row."""
        return sigmoid(self.margin(X))

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return predict_at(self.margin(X), threshold)

    def feature_importance(self) -> np.ndarray:
        """Total split gain per feature."""
        imp = np.zeros(self.n_features)
        for t in self.trees:
            internal = t.feature >= 0
            np.add.at(imp, t.feature[internal], t.gain[internal])
        return imp

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "features": list(self.features),
            "config": self.config.to_dict(),
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
            raise ValueError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} model")
        return cls(float(d["base_score"]), float(d["learning_rate"]),
                   [Tree.from_dict(t) for t in d["trees"]], list(d["features"]),
                   TrainConfig(**d["config"]), list(d.get("train_loss", [])))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Ensemble":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def predict_at(margin: np.ndarray, threshold: float) -> np.ndarray:
    """Positive iff the margin exceeds the threshold's log-odds (0 -> all rows, 1 -> none)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    m = np.asarray(margin)
    if threshold == 0.0:
        return np.ones(m.shape, np.int8)
    if threshold == 1.0:
        return np.zeros(m.shape, np.int8)
    return (m > math.log(threshold / (1.0 - threshold))).astype(np.int8)


def presort(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The transposed matrix and each column's stable row order, both feature-major.

    Order entries are ``rank << s | row`` with ``rank`` the dense rank of
    the row's value in that column, so tree growing can spot value changes
    without looking the values up. ``s`` is half the entry width: 16 bits
    up to 65536 rows, 32 bits beyond.
    """
    X = np.asarray(X, dtype=np.float64)
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    rank = np.zeros(order.shape, np.int64)
    rank[1:] = np.cumsum(xs[1:] != xs[:-1], axis=0)
    dtype = np.uint32 if len(X) <= 1 << 16 else np.uint64
    shift = dtype(np.dtype(dtype).itemsize * 4)
    keys = (rank.astype(dtype) << shift) | order.astype(dtype)
    return np.ascontiguousarray(X.T), np.ascontiguousarray(keys.T)


def fit(X, y, config: TrainConfig = TrainConfig(), feature_names=None, order=None) -> Ensemble:
    """Boost ``config.iterations`` trees on the class-weighted log-loss.

    ``order`` may pass a precomputed :func:`presort` of ``X`` when the same
    matrix is fitted repeatedly.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if not np.isfinite(X).all():
        raise ValueError("features contain non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("training data contains a single class")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length does not match X")

    yf = y.astype(np.float64)
    w_neg, w_pos = class_weights(y, config.class_weights)
    w = np.where(y == 1, w_pos, w_neg).astype(np.float64)
    base = math.log((w_pos * n_pos) / (w_neg * (len(y) - n_pos)))
    Xt, order = presort(X) if order is None else order
    lr = float(config.learning_rate)
    l2 = float(config.l2_leaf_reg)

    margin = np.full(len(y), base)
    grad = np.empty(len(y))
    hess = np.empty(len(y))
    expm = np.empty(len(y))
    loss = np.empty(len(y))
    _kernels.init_rows(yf, margin, expm, loss)
    trees = []
    history = [weighted_logloss(yf, margin, w)]
    for _ in range(config.iterations):
        _kernels.gradients(yf, margin, expm, grad, hess)
        feat, thr, left, right, value, gain, n_nodes, leaf = _kernels.grow_tree(
            Xt, order, grad, hess, w, yf, margin, expm, loss, config.depth, l2, lr, 1e-12)
        trees.append(Tree(feat[:n_nodes].copy(), thr[:n_nodes].copy(), left[:n_nodes].copy(),
                          right[:n_nodes].copy(), value[:n_nodes].copy(), gain[:n_nodes].copy()))
        history.append(_kernels.apply_tree(margin, value, leaf, lr, w, loss))
    return Ensemble(base, lr, trees, names, config, history)
