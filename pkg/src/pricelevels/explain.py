"""Exact Shapley-value explanations of tree-ensemble margins.

The game explained for a row ``x`` against one background row ``z`` is
``v(S) = f(x_S, z_rest)``: features in ``S`` take their value from ``x``, the
rest from ``z``. Per tree this is solved exactly by walking every path on
which ``x`` and ``z`` disagree. A leaf reached with features ``A`` following
``x`` and ``B`` following ``z`` credits each feature of ``A`` with
``v * |B|! (|A|-1)! / (|A|+|B|)!`` and debits each feature of ``B`` with
``v * |A|! (|B|-1)! / (|A|+|B|)!``. Averaging over the background gives the
contributions, and ``base_value`` is the mean background margin, so
``base_value + sum(contributions)`` equals the row's margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .model.gbdt import Ensemble, predict_at, sigmoid

__all__ = ["Explanation", "ShapResult", "shap_values", "explain", "FeatureSummary", "summary_report",
           "beeswarm_rows", "DecisionPath", "decision_paths", "brute_force_shapley"]

_FACT = np.array([math.factorial(i) for i in range(171)], dtype=np.float64)


# stack actions of the tree walk
_VISIT, _RESTORE, _SWITCH = 0, 1, 2


@njit(cache=True)
def _walk(root, x, z, feature, threshold, left, right, value, scale, state, path, fact, phi, stack):
    """Depth-first walk of one tree for the pair (x, z), adding leaf credits into ``phi``.

    ``state[f]`` is 1 when feature f follows x on the current path, 2 when it
    follows z and 0 when no split on f has been met yet.
    """
    top = 0
    stack[0, 0] = _VISIT
    stack[0, 1] = root
    stack[0, 2] = 0
    stack[0, 3] = 0
    stack[0, 4] = 0
    while top >= 0:
        action, nd, depth, n_a, n_b = stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3], stack[top, 4]
        top -= 1
        if action == _RESTORE:
            state[nd] = 0
            continue
        if action == _SWITCH:
            state[path[depth - 1]] = 2
        f = feature[nd]
        if f < 0:
            n = n_a + n_b
            if n == 0:
                continue
            v = value[nd] * scale
            w_a = fact[n_b] * fact[n_a - 1] / fact[n] if n_a > 0 else 0.0
            w_b = fact[n_a] * fact[n_b - 1] / fact[n] if n_b > 0 else 0.0
            for i in range(depth):
                g = path[i]
                if state[g] == 1:
                    phi[g] += v * w_a
                else:
                    phi[g] -= v * w_b
            continue
        t = threshold[nd]
        x_left = x[f] <= t
        z_left = z[f] <= t
        x_next = left[nd] if x_left else right[nd]
        z_next = left[nd] if z_left else right[nd]
        s = state[f]
        if x_left == z_left or s == 1:
            nxt = x_next
        elif s == 2:
            nxt = z_next
        else:
            # new feature on this path: x branch first, then z branch, then forget f
            path[depth] = f
            state[f] = 1
            top += 1
            stack[top, 0] = _RESTORE
            stack[top, 1] = f
            top += 1
            stack[top, 0] = _SWITCH
            stack[top, 1] = z_next
            stack[top, 2] = depth + 1
            stack[top, 3] = n_a
            stack[top, 4] = n_b + 1
            nxt = x_next
            depth += 1
            n_a += 1
        top += 1
        stack[top, 0] = _VISIT
        stack[top, 1] = nxt
        stack[top, 2] = depth
        stack[top, 3] = n_a
        stack[top, 4] = n_b


@njit(cache=True)
def _shap(X, B, feature, threshold, left, right, value, roots, lr, fact):
    n, p = X.shape
    out = np.zeros((n, p))
    phi = np.zeros(p)
    state = np.zeros(p, np.int64)
    path = np.zeros(p + 1, np.int64)
    stack = np.zeros((2 * p + 4, 5), np.int64)
    for i in range(n):
        phi[:] = 0.0
        for b in range(B.shape[0]):
            for t in range(roots.shape[0]):
                _walk(roots[t], X[i], B[b], feature, threshold, left, right, value, lr, state, path, fact, phi,
                      stack)
        for j in range(p):
            out[i, j] = phi[j] / B.shape[0]
    return out


@dataclass(frozen=True)
class Explanation:
    row: int
    base_value: float
    contributions: np.ndarray
    feature_values: np.ndarray
    features: tuple[str, ...]
    margin: float
    label: int | None = None

    @property
    def probability(self) -> float:
        return float(sigmoid(self.margin))


@dataclass
class ShapResult:
    base_value: float
    values: np.ndarray          # (rows, features), margin units
    X: np.ndarray
    margins: np.ndarray
    features: list[str]
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.values)

    def local_accuracy_error(self) -> float:
        """Largest ``|base + sum(phi) - margin|`` over the rows."""
        if not len(self):
            return 0.0
        return float(np.max(np.abs(self.base_value + self.values.sum(axis=1) - self.margins)))

    def explanations(self) -> list[Explanation]:
        feats = tuple(self.features)
        return [Explanation(i, self.base_value, self.values[i], self.X[i], feats, float(self.margins[i]),
                            None if self.labels is None else int(self.labels[i])) for i in range(len(self))]


def shap_values(ensemble: Ensemble, X, background, labels=None) -> ShapResult:
    """Interventional Shapley contributions of every feature to each row's margin."""
    X = ensemble._check(X)
    B = np.asarray(background, dtype=np.float64)
    if B.ndim == 1:
        B = B[None, :]
    if len(B) == 0:
        raise ValueError("background must contain at least one row")
    B = ensemble._check(B)
    feature, threshold, left, right, value, roots = ensemble._packed
    values = _shap(X, B, feature, threshold, left, right, value, roots, ensemble.learning_rate, _FACT)
    base = float(np.mean(ensemble.margin(B)))
    return ShapResult(base, values, X, ensemble.margin(X), list(ensemble.features),
                      None if labels is None else np.asarray(labels))


def explain(ensemble: Ensemble, X, background, labels=None) -> list[Explanation]:
    return shap_values(ensemble, X, background, labels).explanations()


def brute_force_shapley(value_fn, n_features: int) -> np.ndarray:
    """Shapley values of an arbitrary set function by enumerating every coalition.

    ``value_fn`` maps a boolean mask of length ``n_features`` to a number.
    Exponential; intended as a reference for small games.
    """
    n = n_features
    cache = {}

    def v(mask_bits):
        if mask_bits not in cache:
            cache[mask_bits] = value_fn(np.array([(mask_bits >> j) & 1 == 1 for j in range(n)]))
        return cache[mask_bits]

    phi = np.zeros(n)
    for j in range(n):
        for s in range(1 << n):
            if s >> j & 1:
                continue
            k = bin(s).count("1")
            w = math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
            phi[j] += w * (v(s | (1 << j)) - v(s))
    return phi


@dataclass(frozen=True)
class FeatureSummary:
    rank: int
    feature: str
    mean_abs: float
    mean: float
    std: float


def summary_report(result: ShapResult) -> list[FeatureSummary]:
    """Features ranked by mean absolute contribution (ties by column order)."""
    if not len(result):
        raise ValueError("nothing to summarize")
    vals = result.values
    mean_abs = np.abs(vals).mean(axis=0)
    order = sorted(range(vals.shape[1]), key=lambda j: (-mean_abs[j], j))
    return [FeatureSummary(r + 1, result.features[j], float(mean_abs[j]), float(vals[:, j].mean()),
                           float(vals[:, j].std())) for r, j in enumerate(order)]


def beeswarm_rows(result: ShapResult):
    """(row, feature, feature value, contribution) for every cell, row-major."""
    for i in range(len(result)):
        for j, name in enumerate(result.features):
            yield i, name, float(result.X[i, j]), float(result.values[i, j])


@dataclass(frozen=True)
class DecisionPath:
    row: int
    probabilities: np.ndarray   # sigmoid(base + cumulative contributions), base first
    label: int | None
    predicted: int
    misclassified: bool


def decision_paths(result: ShapResult, top_k: int = 25, threshold: float = 0.5):
    """Cumulative probability paths of the ``top_k`` rows with the strongest single contribution.

    Features are accumulated from the least to the most important (mean
    absolute contribution over all rows), so every path ends at the row's
    predicted probability. Returns ``(feature_order, paths)``.
    """
    n = len(result)
    if not 1 <= top_k <= n:
        raise ValueError(f"top_k must be in [1, {n}]")
    strength = np.abs(result.values).max(axis=1)
    rows = sorted(range(n), key=lambda i: (-strength[i], i))[:top_k]
    mean_abs = np.abs(result.values).mean(axis=0)
    order = sorted(range(result.values.shape[1]), key=lambda j: (mean_abs[j], j))
    paths = []
    for i in rows:
        cum = result.base_value + np.concatenate([[0.0], np.cumsum(result.values[i, order])])
        prob = sigmoid(cum)
        pred = int(predict_at(result.margins[i:i + 1], threshold)[0])
        label = None if result.labels is None else int(result.labels[i])
        paths.append(DecisionPath(i, prob, label, pred, label is not None and label != pred))
    return [result.features[j] for j in order], paths
