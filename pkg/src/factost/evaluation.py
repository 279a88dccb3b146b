"""Point/probabilistic metrics, naive baselines and the node-scaling probe."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils._python_dispatch import TorchDispatchMode

from .adapter import STAdapter, sta_forward
from .backbone import Backbone, QuantileForecast, SeriesWindow
from .data import calendar_features


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("truth contains non-finite values")
    return p, t


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.abs(p - t).mean())


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(((p - t) ** 2).mean()))


def pinball(pred, truth, quantiles) -> float:
    """Mean pinball loss; ``pred`` is ``[..., |Q|]``, ``truth`` is ``[...]``."""
    p = np.asarray(pred, dtype=np.float64)
    diff = np.asarray(truth, dtype=np.float64)[..., None] - p
    q = np.asarray(quantiles, dtype=np.float64)
    return float(np.maximum((q - 1) * diff, q * diff).mean())


def _values(qf) -> tuple[np.ndarray, tuple[float, ...]]:
    if isinstance(qf, QuantileForecast):
        return qf.values, tuple(qf.quantiles)
    values, quantiles = qf
    return np.asarray(values, dtype=np.float64), tuple(quantiles)


def interval_coverage(qforecast, truth, lo_q: float, hi_q: float) -> float:
    """Share of truth points inside ``[q_lo, q_hi]``. ``qforecast`` is a
    :class:`QuantileForecast` or a ``(values [..., |Q|], quantiles)`` pair."""
    values, quantiles = _values(qforecast)
    if lo_q not in quantiles or hi_q not in quantiles:
        raise KeyError(f"interval ({lo_q}, {hi_q}) needs levels present in {quantiles}")
    if not lo_q < hi_q:
        raise ValueError("lo_q must be below hi_q")
    lo = values[..., quantiles.index(lo_q)]
    hi = values[..., quantiles.index(hi_q)]
    t = np.asarray(truth, dtype=np.float64)
    return float(((t >= lo) & (t <= hi)).mean())


def crossing_rate(qforecast) -> float:
    """Share of horizon points where any adjacent quantile pair is inverted."""
    values, quantiles = _values(qforecast)
    if len(quantiles) < 2:
        raise ValueError("crossing rate needs at least two quantile levels")
    crossed = (np.diff(values, axis=-1) < 0).any(axis=-1)
    return float(crossed.mean())


def persistence_baseline(window: SeriesWindow | np.ndarray, horizon: int | None = None) -> np.ndarray:
    ctx = window.context if isinstance(window, SeriesWindow) else np.asarray(window)
    if horizon is None:
        horizon = len(window.target)
    return np.repeat(ctx[..., -1:], horizon, axis=-1)


@dataclass
class HistoricalAverage:
    """Mean of training values per calendar cell, per node."""

    cycles: tuple[str, ...]
    table: dict                 # (node, cell) -> mean
    node_mean: np.ndarray

    def predict(self, node: int, timestamps) -> np.ndarray:
        idx = calendar_features(np.asarray(timestamps), self.cycles)
        cells = zip(*(np.atleast_1d(idx[c]) for c in self.cycles))
        return np.array([self.table.get((node, cell), self.node_mean[node]) for cell in cells])


def historical_average_baseline(values: np.ndarray, timestamps: np.ndarray,
                                cycles=("time_of_day",)) -> HistoricalAverage:
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    idx = calendar_features(np.asarray(timestamps), cycles)
    keys = list(zip(*(np.atleast_1d(idx[c]) for c in cycles)))
    table = {}
    for n in range(values.shape[0]):
        sums: dict = {}
        for k, v in zip(keys, values[n]):
            s = sums.setdefault(k, [0.0, 0])
            s[0] += v
            s[1] += 1
        for k, (s, c) in sums.items():
            table[(n, k)] = s / c
    return HistoricalAverage(tuple(cycles), table, values.mean(axis=1))


def metric_report(pred: np.ndarray, truth: np.ndarray, quantiles, lo_q=0.1, hi_q=0.9) -> dict:
    quantiles = tuple(quantiles)
    med = pred[..., quantiles.index(0.5)]
    return {
        "mae": mae(med, truth),
        "rmse": rmse(med, truth),
        "pinball": pinball(pred, truth, quantiles),
        f"coverage_{lo_q}_{hi_q}": interval_coverage((pred, quantiles), truth, lo_q, hi_q),
        "crossing_rate": crossing_rate((pred, quantiles)),
    }


def write_report(metrics: dict, jsonl_path=None, csv_path=None, dataset: str = "",
                 horizon: int = 0, config: dict | None = None) -> None:
    if jsonl_path:
        with open(jsonl_path, "a", encoding="utf-8") as fh:
            if config is not None:
                fh.write(json.dumps({"split": "config", "config": config}, sort_keys=True) + "\n")
            fh.write(json.dumps({"dataset": dataset, "horizon": horizon, **metrics}, sort_keys=True) + "\n")
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "dataset", "horizon", "value"])
            for k, v in metrics.items():
                w.writerow([k, dataset, horizon, repr(float(v))])


# ----------------------------------------------------------------------------
# scaling probe
# ----------------------------------------------------------------------------

class LargestAllocation(TorchDispatchMode):
    """Records the element count of the largest tensor produced by any op."""

    def __init__(self):
        super().__init__()
        self.max_numel = 0
        self.op = None

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        for t in (out if isinstance(out, (tuple, list)) else (out,)):
            if isinstance(t, torch.Tensor) and t.numel() > self.max_numel:
                self.max_numel = t.numel()
                self.op = str(func)
        return out


@dataclass
class ScalingRow:
    n_nodes: int
    wall_time: float
    peak_intermediate: int
    peak_op: str


@dataclass
class ScalingResult:
    rows: list[ScalingRow]
    time_slope: float
    alloc_ratios: list[float]


def scaling_probe(backbone: Backbone, make_adapter, n_list, L: int, H: int, repeats: int = 5,
                  warmup: int = 2, freq_seconds: int = 300, seed: int = 0) -> ScalingResult:
    """Time ``sta_forward`` across node counts and track its largest intermediate.

    ``make_adapter(n)`` returns an adapter for ``n`` nodes. Timing is the
    median over ``repeats`` runs after ``warmup`` runs, single-threaded.
    """
    n_list = list(n_list)
    if len(n_list) < 3 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be increasing with at least 3 points")
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    rows = []
    try:
        for n in n_list:
            adapter = make_adapter(n)
            panel = rng.normal(size=(1, n, L))
            ts = 1704067200 + freq_seconds * np.arange(L)[None]
            run = lambda: sta_forward(panel, ts, backbone, adapter, targets=H, stride=freq_seconds)
            with torch.no_grad():
                for _ in range(warmup):
                    run()
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    run()
                    times.append(time.perf_counter() - t0)
                with LargestAllocation() as tracker:
                    run()
            rows.append(ScalingRow(n, statistics.median(times), tracker.max_numel, tracker.op))
    finally:
        torch.set_num_threads(threads)
    x = np.log([r.n_nodes for r in rows])
    y = np.log([r.wall_time for r in rows])
    slope = float(np.polyfit(x, y, 1)[0])
    ratios = [b.peak_intermediate / a.peak_intermediate for a, b in zip(rows, rows[1:])]
    return ScalingResult(rows, slope, ratios)
