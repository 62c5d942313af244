"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line that is printed in the terminal summary.
"""
import csv
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_events, record_criterion
from extrema_oracle import brute_levels
from pricelevels.backtest import Direction, ExitReason, Signal, StrategyConfig, Trade, run_backtest, trade_statistics
from pricelevels.cli import PipelineConfig, run_pipeline
from pricelevels.explain import shap_values
from pricelevels.extrema import PriceLevel, Side, find_local_extrema
from pricelevels.features import (Approach, FeatureConfig, extract_features, feature_names, market_shift_features,
                                  pl_feature_names, price_level_features)
from pricelevels.labeling import Label, label_features, label_level
from pricelevels.model import TrainConfig, fit, grid_search, rfecv
from pricelevels.synth import SynthConfig, generate
from pricelevels.tickdata import EventKind, TickSeries, reconstruct_ticks, tick_rule_labels


def walk(seed, n, p_flat=0.2):
    rng = np.random.default_rng(seed)
    steps = rng.choice([-1, 1], n) * (rng.random(n) >= p_flat)
    return 10_000 + np.cumsum(steps)


def as_tuples(levels):
    return [(lv.peak_index, lv.side.value, lv.prominence, lv.width) for lv in levels]


def test_criterion_1_extrema_oracle():
    mismatches, slowest, n_levels = [], 0.0, 0
    for seed in range(50):
        x = walk(seed, 20_000)
        t0 = time.perf_counter()
        got = find_local_extrema(x)
        slowest = max(slowest, time.perf_counter() - t0)
        unbounded = find_local_extrema(x, width_bounds=(0, 10**6))
        n_levels += len(unbounded)
        if as_tuples(got) != brute_levels(x) or as_tuples(unbounded) != brute_levels(x, bounds=(0, 10**6)):
            mismatches.append(seed)
    ok = not mismatches and slowest < 10.0
    record_criterion(1, ok, f"50 series x 20000 ticks, {n_levels} extrema before width filter, "
                            f"mismatching seeds {mismatches}, slowest detection {slowest:.3f}s")
    assert ok


def reference_aggressor(trade_prices):
    labels = np.empty(len(trade_prices), np.int64)
    prev = None
    for i, p in enumerate(trade_prices.tolist()):
        if prev is None or p > prev:
            lab = 1
        elif p < prev:
            lab = -1
        else:
            lab = -labels[i - 1]
        labels[i] = lab
        prev = p
    return labels


def test_criterion_2_tick_rule_and_volume():
    ev = random_events(np.random.default_rng(2), 1_000_000)
    trades = ev.kind == EventKind.TRADE
    prices, sizes = ev.price[trades], ev.size[trades]
    ticks = reconstruct_ticks(ev)
    ref = reference_aggressor(prices)
    labels_ok = np.array_equal(tick_rule_labels(prices), ref)

    # reference per-tick volumes: a new tick starts whenever the traded price changes
    tick_id = np.concatenate([[0], np.cumsum(prices[1:] != prices[:-1])])
    ask = np.zeros(tick_id[-1] + 1, np.int64)
    bid = np.zeros_like(ask)
    np.add.at(ask, tick_id[ref > 0], sizes[ref > 0])
    np.add.at(bid, tick_id[ref < 0], sizes[ref < 0])
    total = int(sizes.sum())
    conserved = int(ticks.vol_bid.sum() + ticks.vol_ask.sum()) == total
    per_tick = np.array_equal(ticks.vol_ask, ask) and np.array_equal(ticks.vol_bid, bid)
    ok = labels_ok and conserved and per_tick
    record_criterion(2, ok, f"{len(ev)} events, {len(prices)} trades, {len(ticks)} ticks, volume {total}; "
                            f"labels match {labels_ok}, conserved {conserved}, per-tick match {per_tick}")
    assert ok


def feature_series(rng, n, zero_p):
    cols = {}
    for name in ("vol_bid", "vol_ask", "trades_bid", "trades_ask", "ob_max_bid", "ob_max_ask"):
        cols[name] = np.where(rng.random(n) < zero_p, 0, rng.integers(0, 30, n))
    return TickSeries.from_prices(1000 + np.cumsum(rng.choice([-1, 1], n)), **cols)


def test_criterion_3_feature_contract():
    rng = np.random.default_rng(3)
    names = tuple(feature_names())
    dims, n_vectors, finite = set(), 0, True
    for zero_p in (0.0, 0.5, 0.9, 1.0):
        s = feature_series(rng, 20_000, zero_p)
        vecs = extract_features(s, find_local_extrema(s, 201, (10, 400)))
        n_vectors += len(vecs)
        dims |= {(fv.names, len(fv.values)) for fv in vecs}
        finite &= all(np.isfinite(fv.values).all() for fv in vecs)
    dims_ok = dims == {(names, len(names))}

    # a level traded only at its own price: offsets 1..depth-1 are exact zero blocks
    zero_ok = True
    for depth in (1, 3, 10):
        prices = np.full(9, 70)
        prices[0] = prices[-1] = 60
        s = TickSeries.from_prices(prices, vol_bid=np.arange(9), vol_ask=np.arange(9) % 4, trades_ask=np.ones(9))
        cfg = FeatureConfig(depth=depth, ratio_depth=min(3, depth))
        pl = price_level_features(s, PriceLevel(Side.MAXIMUM, 4, 70, 120, 10, 65.0, (1, 7), 4), cfg)
        pl_names = pl_feature_names(cfg)
        blocks = [[pl[i] for i, nm in enumerate(pl_names) if nm.endswith(f"_{d}")] for d in range(1, depth)]
        zero_ok &= len(blocks) == depth - 1 and all(b and all(v == 0 for v in b) for b in blocks)

    ms_ok = True
    for window in (1, 21, 237):
        s = feature_series(rng, 600, 0.5)
        ms = market_shift_features(s, 500, FeatureConfig(long_window=window, short_window=window))
        ms_ok &= list(ms[2:]) == [0.0, 0.0, 0.0]

    ok = dims_ok and finite and zero_ok and ms_ok
    record_criterion(3, ok, f"{n_vectors} vectors of {len(names)} features; one dimensionality {dims_ok}, "
                            f"zero blocks {zero_ok}, MS2-4 zero when long=short {ms_ok}, finite {finite}")
    assert ok


def reference_outcome(prices, sign, level_price, touch, cross, rebound):
    for i in range(touch, len(prices)):
        rel = sign * (int(prices[i]) - level_price)
        if rel >= cross:
            return Label.CROSS, i
        if rel <= -rebound:
            return Label.REBOUND, i
    return Label.UNDETERMINED, None


CERTAIN = ((11260, 1.0), (11140, 1.0), (11320, 1.0), (11080, 1.0))


def test_criterion_4_labeling():
    rng = np.random.default_rng(4)
    exclusive = monotone = True
    for _ in range(10_000):
        n = int(rng.integers(5, 200))
        prices = 500 + np.cumsum(rng.integers(-3, 4, n))
        side = Side.MAXIMUM if rng.random() < 0.5 else Side.MINIMUM
        touch = int(rng.integers(0, n))
        lp = int(prices[touch]) + int(rng.integers(-2, 3))
        s = TickSeries.from_prices(prices)
        lv = PriceLevel(side, 0, lp, 120, 10, lp - 5.0, (0, 0), 0)
        app = Approach(touch, max(touch - 2, 0))
        seq = []
        for r in range(1, 31):
            got = label_level(s, lv, app, 3, r)
            exclusive &= got == reference_outcome(prices, side.sign, lp, touch, 3, r)
            seq.append(got[0])
        # growing the rebound size never creates a rebound and never undoes a cross
        for a, b in zip(seq, seq[1:]):
            monotone &= not (b is Label.REBOUND and a is not Label.REBOUND)
            monotone &= not (a is Label.CROSS and b is not Label.CROSS)

    planted = []
    for seed in (0, 1, 2):
        ev, gt = generate(SynthConfig(seed=seed, n_ticks=60_000, levels=CERTAIN))
        s = reconstruct_ticks(ev)
        for lab in label_features(s, extract_features(s, find_local_extrema(s))):
            lv = lab.level
            hit = (gt.level_price == lv.level_price) & (gt.side == lv.side.sign) & \
                  (np.abs(gt.peak_tick - lv.peak_index) <= 250)
            if hit.any():
                planted.append(lab.label)
    all_rebound = bool(planted) and all(lab is Label.REBOUND for lab in planted)
    ok = exclusive and monotone and all_rebound
    record_criterion(4, ok, f"10000 levels x 30 rebound sizes: exclusive {exclusive}, monotone {monotone}; "
                            f"planted p=1: {sum(lab is Label.REBOUND for lab in planted)}/{len(planted)} rebound")
    assert ok


def xor_data(rng, n=400):
    X = rng.integers(0, 2, size=(n, 2)).astype(float) + rng.normal(0, 0.05, (n, 2))
    y = ((X[:, 0] > 0.5) ^ (X[:, 1] > 0.5)).astype(np.int8)
    return X, y


def test_criterion_5_model_suite():
    monotone = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, p = int(rng.integers(100, 600)), int(rng.integers(1, 12))
        X = rng.normal(size=(n, p))
        y = (X @ rng.normal(size=p) + rng.normal(0, 1, n) > rng.normal()).astype(int)
        y[:2] = [0, 1]
        cfg = TrainConfig(depth=int(rng.integers(1, 8)), iterations=50, learning_rate=float(rng.choice([0.03, 0.3, 1.0])),
                          l2_leaf_reg=float(rng.choice([0.0, 1.0, 7.0])))
        loss = np.asarray(fit(X, y, cfg).train_loss)
        monotone += bool(np.all(np.diff(loss) <= 1e-12))  # float summation slack

    kept = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        X = rng.normal(size=(300, 6))
        y = (X[:, 3] + rng.normal(0, 0.3, 300) > 0).astype(int)
        kept += "f3" in rfecv(X, TrainConfig(depth=2, iterations=20, learning_rate=0.3), k=3, y=y).selected

    depth_two = 0
    for seed in range(20):
        X, y = xor_data(np.random.default_rng(seed))
        res = grid_search(X, {"depth": [1, 2], "iterations": [30]}, y=y,
                          base=TrainConfig(learning_rate=0.3, ordered_time=False))
        depth_two += res.best.depth == 2

    rng = np.random.default_rng(5)
    X = rng.normal(size=(5000, 60))
    logit = 1.2 * X[:, 0] - 0.8 * X[:, 1] + 0.6 * X[:, 2] * X[:, 3]
    y = (rng.random(5000) < 1 / (1 + np.exp(-logit))).astype(np.int8)
    fit(X[:50], y[:50], TrainConfig(depth=2, iterations=2))  # compile outside the clock
    t0 = time.perf_counter()
    best = grid_search(X, y=y).best
    fit(X, y, best)
    elapsed = time.perf_counter() - t0

    ok = monotone == 20 and kept >= 95 and depth_two == 20 and elapsed < 300
    record_criterion(5, ok, f"monotone loss {monotone}/20, RFECV kept planted {kept}/100, XOR depth 2 chosen "
                            f"{depth_two}/20, 5000x60 grid search + fit {elapsed:.1f}s (limit 300s)")
    assert ok


def enumerate_shapley(model, x, background):
    """Interventional Shapley values by summing over every coalition."""
    p = len(x)
    cache = {}

    def value(subset):
        if subset not in cache:
            rows = background.copy()
            rows[:, list(subset)] = x[list(subset)]
            cache[subset] = float(np.mean(model.margin(rows)))
        return cache[subset]

    phi = np.zeros(p)
    for j in range(p):
        others = [i for i in range(p) if i != j]
        for size in range(p):
            weight = math.factorial(size) * math.factorial(p - size - 1) / math.factorial(p)
            for s in itertools.combinations(others, size):
                phi[j] += weight * (value(tuple(sorted(s + (j,)))) - value(s))
    return phi


def test_criterion_6_shapley_exactness():
    worst_phi, worst_acc, n_rows = 0.0, 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(1, 7))
        X = rng.normal(size=(150, p))
        y = (X @ rng.normal(size=p) + rng.normal(0, 0.5, 150) > 0).astype(int)
        y[:2] = [0, 1]
        cfg = TrainConfig(depth=int(rng.integers(1, 7)), iterations=int(rng.integers(1, 15)), learning_rate=0.3)
        model = fit(X, y, cfg)
        background = X[rng.choice(150, 5, replace=False)]
        rows = X[:4]
        res = shap_values(model, rows, background)
        for i, x in enumerate(rows):
            worst_phi = max(worst_phi, float(np.max(np.abs(res.values[i] - enumerate_shapley(model, x, background)))))
        worst_acc = max(worst_acc, res.local_accuracy_error())
        n_rows += len(rows)
    ok = worst_phi < 1e-9 and worst_acc < 1e-9
    record_criterion(6, ok, f"100 ensembles, {n_rows} rows: max |phi - enumeration| {worst_phi:.2e}, "
                            f"max local accuracy error {worst_acc:.2e}")
    assert ok


def test_criterion_7_backtest_accounting():
    identity_runs = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = 3000
        prices = 5000 + np.cumsum(rng.integers(-2, 3, n))
        idx = np.sort(rng.choice(n - 1, 80, replace=False))
        sig = [Signal(int(i), int(s), int(prices[i] + s * rng.integers(0, 3)))
               for i, s in zip(idx, rng.choice([1, -1], 80))]
        s = TickSeries.from_prices(prices, step_ns=int(rng.integers(1, 900)) * 10**9)
        rep = run_backtest(s, sig, StrategyConfig(take_profit=int(rng.integers(5, 16))), initial_equity=10_000.0)
        gross = sum(t.gross_cents for t in rep.trades)
        identity_runs += rep.final_equity_cents - rep.initial_equity_cents == gross - 420 * len(rep.trades)

    ledger = [Trade(Direction.LONG, 0, 1, 0, 0, 0, 60 * 10**9, (1 if i % 3 else -1) * 1250, 420,
                    ExitReason.TAKE_PROFIT) for i in range(6378)]
    commission = trade_statistics(ledger).all.total_commission

    cfg = StrategyConfig(take_profit=5)
    tp = run_backtest(TickSeries.from_prices([98, 100, 99, 97, 95, 95]), [Signal(0, 1, 100)], cfg).trades[0]
    gap = run_backtest(TickSeries.from_prices([98, 100, 101, 102, 103, 104]), [Signal(0, 1, 100)], cfg).trades[0]
    ok = identity_runs == 200 and commission == 26787.6 and tp.net == 58.30 and gap.net == -54.20
    record_criterion(7, ok, f"equity identity {identity_runs}/200 runs, 6378-trade commission {commission}, "
                            f"take-profit net {tp.net}, gapped stop-loss net {gap.net}")
    assert ok


SMALL = {
    "synth": {"contracts": 2, "n_ticks": 50_000},
    "model": {"grid": {"depth": [2, 3], "iterations": [20, 40], "learning_rate": [0.3]},
              "base": {"depth": 3, "iterations": 20, "learning_rate": 0.3}, "folds": 3},
    "explain": {"background": 10, "max_rows": 40, "top_k": 10},
    "seed": 7,
}


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_end_to_end_determinism(tmp_path):
    run_pipeline(PipelineConfig.from_dict(SMALL), out_dir=tmp_path / "a")
    run_pipeline(PipelineConfig.from_dict(SMALL), out_dir=tmp_path / "b")
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    n_csv = sum(name.endswith(".csv") for name in a)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = "manifest.json" in a and n_csv > 0 and not differing
    record_criterion(8, ok, f"{len(a)} files ({n_csv} CSV) per run, differing {differing[:5]}")
    assert ok


def test_criterion_9_desk_scale_sanity(tmp_path):
    run_pipeline(PipelineConfig.from_dict({"synth": {"contracts": 3}, "seed": 11}), out_dir=tmp_path)
    with open(tmp_path / "train" / "walk_forward.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    details, ok = [], bool(rows)
    for r in rows:
        prec = float(r["precision"]) if r["precision"] else float("nan")
        base = float(r["base_rate"])
        net = json.loads((tmp_path / "backtest" / r["test"] / "report.json").read_text())["total_net"]
        ok &= prec >= base + 0.10 and net > 0
        details.append(f"{r['train']}->{r['test']} precision {prec:.3f} vs base {base:.3f}, net {net:.2f}")
    record_criterion(9, ok, "; ".join(details))
    assert ok
