"""Sensor series ingestion, gap-aware sliding windows and the train/test split."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .training import MinMaxNormalizer

log = logging.getLogger(__name__)

AIRU_FEATURES = ("PM1", "PM2.5", "PM10", "Temperature", "Humidity", "RED", "NOX")
AIRU_TARGET = "Ozone"


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    timestamps: np.ndarray
    features: np.ndarray
    target: np.ndarray
    feature_names: tuple[str, ...] = AIRU_FEATURES
    target_name: str = AIRU_TARGET
    dropped_rows: int = 0

    def __len__(self) -> int:
        return len(self.target)

    def matrix(self) -> np.ndarray:
        """Features with the target appended as the last column."""
        return np.column_stack([self.features, self.target])


@dataclass
class WindowedDataset:
    X: np.ndarray
    y: np.ndarray
    target_time: np.ndarray
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)


def read_series(path, features=AIRU_FEATURES, target=AIRU_TARGET, time_col: str = "timestamp",
                numeric_time: bool | None = None) -> RawSeries:
    """Read a comma-delimited file with a header; rows with missing values are dropped."""
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in (time_col, *features, target) if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    df = df[[time_col, *features, target]]
    for c in (*features, target):
        df[c] = pd.to_numeric(df[c], errors="coerce")
    before = len(df)
    df = df.replace([np.inf, -np.inf], np.nan).dropna()
    dropped = before - len(df)
    if dropped:
        log.info("dropped %d rows with missing or non-numeric values", dropped)
    ts = df[time_col]
    if numeric_time or (numeric_time is None and pd.api.types.is_numeric_dtype(ts)):
        times = ts.to_numpy(dtype=np.float64)
    else:
        times = pd.to_datetime(ts).to_numpy().astype("datetime64[s]").astype(np.int64).astype(np.float64)
    if len(times) > 1 and np.any(np.diff(times) <= 0):
        raise DataError(f"{path}: timestamps are not strictly increasing")
    return RawSeries(times, df[list(features)].to_numpy(np.float64), df[target].to_numpy(np.float64),
                     tuple(features), target, dropped)


def contiguous_blocks(times: np.ndarray, step: float | None = None) -> list[tuple[int, int]]:
    """Half-open row ranges with no gaps. ``step`` defaults to the median spacing."""
    if len(times) == 0:
        return []
    if len(times) == 1:
        return [(0, 1)]
    d = np.diff(times)
    step = float(np.median(d)) if step is None else step
    breaks = np.flatnonzero(~np.isclose(d, step, rtol=1e-6, atol=1e-9)) + 1
    edges = [0, *breaks.tolist(), len(times)]
    return list(zip(edges[:-1], edges[1:]))


def window_indices(times: np.ndarray, n: int, step: float | None = None) -> np.ndarray:
    """Target row indices t such that rows t-n..t are gap-free (window + target)."""
    out = []
    for a, b in contiguous_blocks(times, step):
        out.extend(range(a + n, b))
    return np.asarray(out, dtype=np.int64)


def make_windows(features: np.ndarray, target: np.ndarray, targets_at: np.ndarray, n: int):
    offsets = np.arange(-n, 0)
    X = features[targets_at[:, None] + offsets[None, :]]
    return X, target[targets_at]


def load_and_window(path_or_series, n: int = 24, test_start=None, test_end=None,
                    step: float | None = None, **read_kw):
    """Window a series and split it by target timestamp.

    Windows whose target falls in ``[test_start, test_end)`` form the test
    set; everything else trains. The normaliser is fitted on rows outside the
    test period only. Returns ``(train, test, normalizer)`` with normalised
    windows.
    """
    series = path_or_series if isinstance(path_or_series, RawSeries) else read_series(
        path_or_series, **read_kw)
    if len(series) <= n:
        raise DataError(f"need more than {n} rows for one window, have {len(series)}")
    t_idx = window_indices(series.timestamps, n, step)
    if len(t_idx) == 0:
        raise DataError("no gap-free window of the requested length")
    times = series.timestamps
    lo = _to_time(test_start, -np.inf)
    hi = _to_time(test_end, np.inf)
    in_test_row = (times >= lo) & (times < hi)
    if test_start is None and test_end is None:
        in_test_row[:] = False
    train_rows = ~in_test_row
    if not train_rows.any():
        raise DataError("the test period covers every row")
    norm = MinMaxNormalizer.fit(series.matrix()[train_rows])
    mat = norm.transform(series.matrix())
    feats, targ = mat[:, :-1], mat[:, -1]
    test_mask = in_test_row[t_idx]
    parts = []
    for name, sel in (("train", ~test_mask), ("test", test_mask)):
        idx = t_idx[sel]
        X, y = make_windows(feats, targ, idx, n)
        parts.append(WindowedDataset(X, y, times[idx], name, {"n": n}))
    log.info("windows: %d train, %d test (%d rows dropped)", len(parts[0]), len(parts[1]),
             series.dropped_rows)
    return parts[0], parts[1], norm


def _to_time(value, default: float) -> float:
    if value is None:
        return default
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value)
    return float(pd.Timestamp(value).to_datetime64().astype("datetime64[s]").astype(np.int64))


def synthetic_series(rows: int = 3000, m: int = 7, seed: int = 0, noise: float = 0.05,
                     gap_every: int | None = None) -> RawSeries:
    """Sinusoid-plus-noise stand-in for the air-quality series.

    Features are phase-shifted periodic signals with noise; the target is a
    fixed nonlinear mix of their recent values plus noise, scaled to 0..90
    like an ozone reading.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(rows, dtype=np.float64)
    periods = rng.uniform(12, 96, m)
    phases = rng.uniform(0, 2 * np.pi, m)
    amps = rng.uniform(0.5, 2.0, m)
    offsets = rng.uniform(-1, 3, m)
    feats = offsets + amps * np.sin(2 * np.pi * t[:, None] / periods + phases)
    feats += noise * amps * rng.standard_normal(feats.shape)
    lag = np.roll(feats, 1, axis=0)
    lag[0] = feats[0]
    mix = rng.standard_normal(m) / np.sqrt(m)
    core = np.tanh(lag @ mix) + 0.3 * np.sin(2 * np.pi * t / 24.0) + 0.2 * lag[:, 0] * lag[:, 1] / amps[:2].prod()
    core += noise * rng.standard_normal(rows)
    target = np.round(45 + 40 * core / np.abs(core).max())
    times = t * 3600.0
    if gap_every:
        keep = (np.arange(rows) % gap_every) != gap_every - 1
        times, feats, target = times[keep], feats[keep], target[keep]
    names = AIRU_FEATURES if m == 7 else tuple(f"f{i}" for i in range(m))
    return RawSeries(times, feats, target, names, AIRU_TARGET)


def write_series(series: RawSeries, path) -> None:
    df = pd.DataFrame(series.features, columns=list(series.feature_names))
    df.insert(0, "timestamp", series.timestamps)
    df[series.target_name] = series.target
    df.to_csv(path, index=False)


def save_prepared(path, train: WindowedDataset, test: WindowedDataset, norm: MinMaxNormalizer) -> None:
    np.savez_compressed(Path(path), X_train=train.X, y_train=train.y, t_train=train.target_time,
                        X_test=test.X, y_test=test.y, t_test=test.target_time,
                        norm_mins=norm.mins, norm_maxs=norm.maxs)


def load_prepared(path):
    try:
        z = np.load(Path(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read prepared dataset {path}: {exc}") from exc
    n = z["X_train"].shape[1]
    train = WindowedDataset(z["X_train"], z["y_train"], z["t_train"], "train", {"n": n})
    test = WindowedDataset(z["X_test"], z["y_test"], z["t_test"], "test", {"n": n})
    return train, test, MinMaxNormalizer(z["norm_mins"], z["norm_maxs"])
