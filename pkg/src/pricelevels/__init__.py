"""Tick-level research pipeline for price-level rebounds.

Raw trades and book updates become ticks, ticks yield local extrema, the
extrema get microstructure feature vectors and cross/rebound labels, a
boosted-tree classifier scores them, Shapley values explain the scores and a
backtester trades the signals.
"""

from .backtest import BacktestReport, Signal, StrategyConfig, Trade, run_backtest
from .dataset import Dataset
from .explain import ShapResult, explain, shap_values
from .extrema import PriceLevel, Side, find_local_extrema
from .features import FeatureConfig, FeatureVector, extract_features
from .labeling import Label, build_dataset, label_dataset, label_features
from .model import Ensemble, TrainConfig, fit, grid_search, rfecv, walk_forward
from .synth import SynthConfig, generate
from .tickdata import EventArray, MarketEvent, TickSeries, load_events, reconstruct_ticks, write_events

__version__ = "0.1.0"

__all__ = [
    "BacktestReport", "Signal", "StrategyConfig", "Trade", "run_backtest",
    "Dataset",
    "ShapResult", "explain", "shap_values",
    "PriceLevel", "Side", "find_local_extrema",
    "FeatureConfig", "FeatureVector", "extract_features",
    "Label", "build_dataset", "label_dataset", "label_features",
    "Ensemble", "TrainConfig", "fit", "grid_search", "rfecv", "walk_forward",
    "SynthConfig", "generate",
    "EventArray", "MarketEvent", "TickSeries", "load_events", "reconstruct_ticks", "write_events",
]
