"""Synthetic series, CSV panels, calendar features and window/split bookkeeping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .backbone import SeriesWindow
from .config import CALENDAR_CYCLES
from .errors import ConfigError, DataError, WindowError

Primitive = Callable[..., np.ndarray]


# ----------------------------------------------------------------------------
# synthetic generators
# ----------------------------------------------------------------------------

_COMMON_PERIODS = (12, 24, 48, 96, 168)


def sinusoid(rng: np.random.Generator, length: int, period: float | None = None,
             amplitude: float | None = None, phase: float | None = None) -> np.ndarray:
    if period is None:
        if rng.random() < 0.5:
            period = float(rng.choice(_COMMON_PERIODS))
        else:
            period = float(np.exp(rng.uniform(np.log(6), np.log(200))))
    if amplitude is None:
        amplitude = float(rng.uniform(0.5, 3.0))
    if phase is None:
        phase = float(rng.uniform(0, 2 * np.pi))
    t = np.arange(length)
    return amplitude * np.sin(2 * np.pi * t / period + phase)


def linear_trend(rng: np.random.Generator, length: int, slope: float | None = None,
                 intercept: float | None = None) -> np.ndarray:
    if slope is None:
        # total rise over the series in +-[0.5, 4]
        slope = float(rng.uniform(0.5, 4.0) * rng.choice((-1, 1)) / length)
    if intercept is None:
        intercept = float(rng.normal(0, 1))
    return intercept + slope * np.arange(length)


def smooth_noise(rng: np.random.Generator, length: int, length_scale: float | None = None,
                 scale: float | None = None) -> np.ndarray:
    if length_scale is None:
        length_scale = float(rng.uniform(2.0, 30.0))
    if scale is None:
        scale = float(rng.uniform(0.3, 2.0))
    raw = gaussian_filter1d(rng.normal(size=length), length_scale, mode="wrap")
    std = raw.std()
    return scale * raw / std if std > 0 else raw


def white_noise(rng: np.random.Generator, length: int, scale: float | None = None) -> np.ndarray:
    if scale is None:
        scale = float(rng.uniform(0.05, 1.0))
    return scale * rng.normal(size=length)


DEFAULT_POOL: tuple[Primitive, ...] = (sinusoid, linear_trend, smooth_noise, white_noise)


def kernel_synth(rng: np.random.Generator, length: int,
                 pool: Sequence[Primitive] = DEFAULT_POOL) -> np.ndarray:
    """Compose 1-3 random primitive draws with random ``+``/``*`` operators."""
    if length < 16:
        raise ValueError(f"length must be >= 16, got {length}")
    n_draws = int(rng.integers(1, 4))
    out = pool[int(rng.integers(len(pool)))](rng, length)
    for _ in range(n_draws - 1):
        nxt = pool[int(rng.integers(len(pool)))](rng, length)
        out = out + nxt if rng.random() < 0.5 else out * nxt
    return np.asarray(out, dtype=np.float64)


def synth_corpus(n_series: int, length: int, seed: int,
                 pool: Sequence[Primitive] = DEFAULT_POOL) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if n_series == 0:
        return np.zeros((0, length))
    return np.stack([kernel_synth(rng, length, pool) for _ in range(n_series)])


# ----------------------------------------------------------------------------
# panels
# ----------------------------------------------------------------------------

@dataclass
class STDataset:
    values: np.ndarray          # [N, T]
    timestamps: np.ndarray      # [T] epoch seconds
    node_ids: list[str]
    freq_seconds: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.values.ndim != 2:
            raise DataError(f"values must be [N, T], got shape {self.values.shape}")
        if self.values.shape[0] != len(self.node_ids):
            raise DataError(f"{self.values.shape[0]} value rows but {len(self.node_ids)} node ids")
        if self.values.shape[1] != len(self.timestamps):
            raise DataError(f"{self.values.shape[1]} time steps but {len(self.timestamps)} timestamps")
        if np.isnan(self.values).any():
            raise DataError("dataset contains NaN values")
        if len(self.timestamps) > 1:
            steps = np.diff(self.timestamps)
            bad = np.nonzero(steps != self.freq_seconds)[0]
            if len(bad):
                raise DataError(
                    f"timestamp stride violated at index {bad[0] + 1}: "
                    f"expected {self.freq_seconds}s, got {steps[bad[0]]}s")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


def _parse_timestamp(raw: str) -> int:
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        return _parse_iso(raw)


def _parse_iso(raw: str) -> int:
    dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def load_csv(path, freq: int | None = None, forward_fill: bool = False) -> STDataset:
    """Read ``timestamp,node_a,node_b,...`` rows into a panel.

    Row numbers in error messages are 1-based file lines (header is line 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file (missing header)") from None
        if not header or header[0].strip() == "" and len(header) == 1:
            raise DataError(f"{path}: missing header")
        nodes = [h.strip() for h in header[1:]]
        ts: list[int] = []
        rows: list[list[float]] = []
        line_nos: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                ts.append(_parse_timestamp(row[0]))
            except ValueError:
                raise DataError(f"{path}: line {line_no}: unparsable timestamp {row[0]!r}") from None
            vals = []
            for col, cell in enumerate(row[1:], start=1):
                cell = cell.strip()
                if cell == "" or cell.lower() in ("nan", "na", "null"):
                    if not forward_fill:
                        raise DataError(
                            f"{path}: line {line_no}: missing value in column {header[col]!r} "
                            "(enable forward_fill to impute)")
                    if not rows:
                        raise DataError(
                            f"{path}: line {line_no}: missing value in first row cannot be forward-filled")
                    vals.append(rows[-1][col - 1])
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: line {line_no}: unparsable number {cell!r} in column {header[col]!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: line {line_no}: non-finite value in column {header[col]!r}")
                vals.append(v)
            rows.append(vals)
            line_nos.append(line_no)
    timestamps = np.asarray(ts, dtype=np.int64)
    if freq is None:
        freq = int(timestamps[1] - timestamps[0]) if len(timestamps) > 1 else 1
    if freq <= 0:
        raise DataError(f"{path}: timestamps must be strictly increasing")
    if len(timestamps) > 1:
        steps = np.diff(timestamps)
        bad = np.nonzero(steps != freq)[0]
        if len(bad):
            i = int(bad[0]) + 1
            raise DataError(
                f"{path}: line {i + 2}: timestamp stride violation "
                f"(expected +{freq}s, got {int(steps[i - 1]):+d}s)")
    values = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(nodes)).T
    return STDataset(values, timestamps, nodes, int(freq))


def write_csv(dataset: STDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *dataset.node_ids])
        for t in range(dataset.n_steps):
            writer.writerow([int(dataset.timestamps[t]), *(repr(float(v)) for v in dataset.values[:, t])])


# ----------------------------------------------------------------------------
# calendar
# ----------------------------------------------------------------------------

def calendar_features(timestamp, cycles: Sequence[str] = tuple(CALENDAR_CYCLES)) -> dict:
    """UTC calendar indices. Works elementwise on arrays of epoch seconds."""
    ts = np.asarray(timestamp, dtype=np.int64)
    out = {}
    for c in cycles:
        if c == "minute_of_hour":
            idx = (ts // 60) % 60
        elif c == "time_of_day":
            idx = (ts // 3600) % 24
        elif c == "day_of_week":
            # 1970-01-01 was a Thursday; Monday = 0
            idx = (ts // 86400 + 3) % 7
        elif c == "week_of_month":
            dt = ts.astype("datetime64[s]")
            dom = (dt.astype("datetime64[D]") - dt.astype("datetime64[M]")).astype(np.int64) + 1
            idx = np.minimum(3, (dom - 1) // 7)
        elif c == "month_of_year":
            idx = ts.astype("datetime64[s]").astype("datetime64[M]").astype(np.int64) % 12
        else:
            raise ConfigError(f"unknown calendar cycle {c!r}")
        out[c] = int(idx) if idx.ndim == 0 else idx
    return out


# ----------------------------------------------------------------------------
# windows and splits
# ----------------------------------------------------------------------------

def window_starts(n_steps: int, L: int, H: int, stride: int, lo: int = 0) -> np.ndarray:
    if stride < 1:
        raise WindowError(f"stride must be >= 1, got {stride}")
    if L + H > n_steps:
        raise WindowError(f"context {L} + horizon {H} exceeds available {n_steps} steps")
    return lo + np.arange(0, n_steps - L - H + 1, stride)


def window_iter(dataset: STDataset, L: int, H: int, stride: int = 1,
                span: range | None = None) -> Iterator[tuple[str, SeriesWindow]]:
    span = span if span is not None else range(dataset.n_steps)
    starts = window_starts(len(span), L, H, stride, lo=span.start)
    for node, series in zip(dataset.node_ids, dataset.values):
        for s in starts:
            yield node, SeriesWindow(
                context=series[s:s + L], target=series[s + L:s + L + H],
                context_timestamps=dataset.timestamps[s:s + L],
                target_timestamps=dataset.timestamps[s + L:s + L + H])


def split(n_steps: int, ratios: Sequence[float] = (0.7, 0.1, 0.2)) -> tuple[range, range, range]:
    """Contiguous chronological train/val/test ranges."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    b1 = int(round(n_steps * ratios[0]))
    b2 = int(round(n_steps * (ratios[0] + ratios[1])))
    parts = (range(0, b1), range(b1, b2), range(b2, n_steps))
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) == 0:
            raise ConfigError(f"{name} split is empty for {n_steps} steps and ratios {tuple(ratios)}")
    return parts


def split_starts(span: range, L: int, H: int, stride: int) -> np.ndarray:
    """Window start offsets whose full context+target lies inside ``span``."""
    return window_starts(len(span), L, H, stride, lo=span.start)


def few_shot_subset(starts: np.ndarray, frac: float) -> np.ndarray:
    """Trailing ``frac`` of the (chronological) training windows."""
    if not 0.0 < frac <= 1.0:
        raise ConfigError(f"few_shot_frac must be in (0, 1], got {frac}")
    n = len(starts)
    k = max(1, int(round(n * frac)))
    return starts[n - k:]


# ----------------------------------------------------------------------------
# spatio-temporal fixture
# ----------------------------------------------------------------------------

FIXTURE_START = 1704067200  # 2024-01-01T00:00:00Z, a Monday


def make_st_fixture(n_nodes: int = 20, n_days: int = 14, freq_seconds: int = 300,
                    seed: int = 0, noise: float = 0.08) -> STDataset:
    """Nodes sharing a daily cycle with amplitude, phase and level keyed to node id."""
    rng = np.random.default_rng(seed)
    steps_per_day = 86400 // freq_seconds
    T = n_days * steps_per_day
    ts = FIXTURE_START + freq_seconds * np.arange(T)
    day_frac = (ts % 86400) / 86400.0
    ids = np.arange(n_nodes)
    amp = 1.0 + 0.5 * (ids % 4)
    phase = ids / n_nodes
    level = 5.0 + 0.5 * (ids % 3)
    shape2 = 0.4 * np.cos(np.pi * ids / n_nodes)
    arg = 2 * np.pi * (day_frac[None, :] + phase[:, None])
    clean = level[:, None] + amp[:, None] * (np.sin(arg) + shape2[:, None] * np.sin(2 * arg))
    values = clean + noise * amp[:, None] * rng.normal(size=clean.shape)
    return STDataset(values, ts, [f"node{i}" for i in ids], freq_seconds)
