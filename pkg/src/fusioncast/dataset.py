"""Multimodal dataset handling: loading, temporal splits, window construction,
normalization, endogenous-text generation, and synthetic event data.

A dataset couples a numeric matrix (one row per timestamp) with dated text
records. Windows pair an L-step look-back with an H-step target horizon and
carry every text record whose span intersects the look-back; text never leaks
in from the horizon.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import ArgumentError, FormatError, InsufficientDataError, OrderingError

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TextRecord:
    start: pd.Timestamp
    end: pd.Timestamp
    text: str


@dataclass
class MultimodalSeries:
    """Aligned numeric series and dated text records."""

    timestamps: pd.DatetimeIndex
    values: np.ndarray  # [T, N]
    texts: list[TextRecord]
    variable_names: list[str]
    target_index: int
    event_labels: np.ndarray | None = None  # bool [T], ground truth for synthetic data

    def __post_init__(self):
        if len(self.timestamps) != self.values.shape[0]:
            raise FormatError(
                f"{self.values.shape[0]} value rows for {len(self.timestamps)} timestamps"
            )
        diffs = np.diff(self.timestamps.asi8)
        if len(diffs) and diffs.min() <= 0:
            raise OrderingError("timestamps must be strictly increasing")
        for rec in self.texts:
            if rec.start > rec.end:
                raise FormatError(f"text record ends before it starts: {rec}")

    def __len__(self):
        return self.values.shape[0]


@dataclass
class MultimodalWindow:
    """One forecasting instance: look-back X, target Y, and aligned texts."""

    x: np.ndarray  # [L, N]
    y: np.ndarray  # [H, N]
    texts: list[TextRecord]
    endo_text: str
    window_id: int
    span: tuple[pd.Timestamp, pd.Timestamp]  # look-back span
    horizon_span: tuple[pd.Timestamp, pd.Timestamp]

    @property
    def raw_texts(self) -> list[str]:
        return [rec.text for rec in self.texts]


@dataclass
class SplitConfig:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    lookback: int = 96
    horizon: int = 12
    label_len: int = 48

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) <= 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ArgumentError(f"split fractions must be positive and sum to 1, got {fracs}")
        if self.lookback < 2:
            raise ArgumentError("lookback must be at least 2")
        if self.horizon < 1:
            raise ArgumentError("horizon must be at least 1")


@dataclass
class NormStats:
    mean: np.ndarray  # [N]
    std: np.ndarray  # [N], floored at STD_FLOOR

    @classmethod
    def fit(cls, values: np.ndarray) -> "NormStats":
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        if (std < STD_FLOOR).any():
            flat = [i for i, s in enumerate(std) if s < STD_FLOOR]
            warnings.warn(f"zero-variance variable(s) {flat}: std floored at {STD_FLOOR}")
            std = np.maximum(std, STD_FLOOR)
        return cls(mean=mean.astype(np.float64), std=std.astype(np.float64))


def load_dataset(series_path, text_path=None) -> MultimodalSeries:
    """Load a series CSV (``date,<var1>,...,OT``) plus optional text CSV
    (``start_date,end_date,text``)."""

    df = pd.read_csv(series_path)
    if "date" not in df.columns:
        raise FormatError(f"{series_path}: missing required column 'date'")
    if "OT" not in df.columns:
        raise FormatError(f"{series_path}: missing required column 'OT'")
    variable_names = [c for c in df.columns if c != "date"]
    try:
        dates = pd.DatetimeIndex(pd.to_datetime(df["date"], format="ISO8601"))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{series_path}: unparseable 'date' column: {exc}") from exc
    values = np.empty((len(df), len(variable_names)), dtype=np.float64)
    for j, name in enumerate(variable_names):
        col = pd.to_numeric(df[name], errors="coerce")
        values[:, j] = col.to_numpy(dtype=np.float64)
    blank = np.isnan(values).any(axis=1)
    if blank.any():
        warnings.warn(f"{series_path}: dropping {int(blank.sum())} row(s) with blank values")
        values = values[~blank]
        dates = dates[~blank]
    if dates.duplicated().any():
        raise OrderingError(f"{series_path}: duplicate timestamps")
    if len(dates) > 1 and (np.diff(dates.asi8) <= 0).any():
        raise OrderingError(f"{series_path}: timestamps not in increasing order")

    texts: list[TextRecord] = []
    if text_path is not None:
        tdf = pd.read_csv(text_path)
        for col in ("start_date", "end_date", "text"):
            if col not in tdf.columns:
                raise FormatError(f"{text_path}: missing required column '{col}'")
        for _, row in tdf.iterrows():
            start = pd.Timestamp(row["start_date"])
            end = pd.Timestamp(row["end_date"])
            if start > end:
                raise FormatError(f"{text_path}: record starting {start} ends earlier, at {end}")
            texts.append(TextRecord(start=start, end=end, text=str(row["text"])))
        texts.sort(key=lambda r: (r.start, r.end, r.text))

    return MultimodalSeries(
        timestamps=dates,
        values=values,
        texts=texts,
        variable_names=variable_names,
        target_index=variable_names.index("OT"),
    )


def load_event_labels(path, n_rows: int) -> np.ndarray:
    """Load an ``index,is_event`` CSV into a bool vector of length n_rows."""
    df = pd.read_csv(path)
    for col in ("index", "is_event"):
        if col not in df.columns:
            raise FormatError(f"{path}: missing required column '{col}'")
    labels = np.zeros(n_rows, dtype=bool)
    idx = df["index"].to_numpy(dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= n_rows):
        raise FormatError(f"{path}: label index out of range for {n_rows} rows")
    labels[idx] = df["is_event"].to_numpy(dtype=np.int64) != 0
    return labels


def temporal_split(
    series: MultimodalSeries, cfg: SplitConfig
) -> tuple[MultimodalSeries, MultimodalSeries, MultimodalSeries]:
    """Chronological 70/10/20 partition (fractions from cfg). Text records go
    to the split containing their end instant."""

    n = len(series)
    if n == 0:
        raise InsufficientDataError("cannot split an empty series")
    # epsilon guard: 0.7 + 0.1 is 0.7999... in binary, which would floor wrong
    b1 = int(np.floor(cfg.train_frac * n + 1e-9))
    b2 = int(np.floor((cfg.train_frac + cfg.val_frac) * n + 1e-9))
    bounds = [(0, b1), (b1, b2), (b2, n)]
    need = cfg.lookback + cfg.horizon
    for name, (lo, hi) in zip(("train", "val", "test"), bounds):
        if hi - lo < need:
            raise InsufficientDataError(
                f"{name} split has {hi - lo} rows; need at least L+H={need}"
            )

    splits = []
    for lo, hi in bounds:
        ts = series.timestamps[lo:hi]
        texts = [rec for rec in series.texts if ts[0] <= rec.end <= ts[-1]]
        splits.append(
            MultimodalSeries(
                timestamps=ts,
                values=series.values[lo:hi],
                texts=texts,
                variable_names=list(series.variable_names),
                target_index=series.target_index,
                event_labels=None
                if series.event_labels is None
                else series.event_labels[lo:hi],
            )
        )
    return tuple(splits)


def make_windows(split: MultimodalSeries, cfg: SplitConfig) -> list[MultimodalWindow]:
    """Stride-1 sliding windows; count = T - L - H + 1, nothing dropped."""

    L, H = cfg.lookback, cfg.horizon
    n = len(split)
    if n < L + H:
        raise InsufficientDataError(f"split has {n} rows; need at least L+H={L + H}")
    windows = []
    for i in range(n - L - H + 1):
        lb_start, lb_end = split.timestamps[i], split.timestamps[i + L - 1]
        texts = [rec for rec in split.texts if rec.start <= lb_end and rec.end >= lb_start]
        windows.append(
            MultimodalWindow(
                x=split.values[i : i + L].copy(),
                y=split.values[i + L : i + L + H].copy(),
                texts=texts,
                endo_text="",
                window_id=i,
                span=(lb_start, lb_end),
                horizon_span=(split.timestamps[i + L], split.timestamps[i + L + H - 1]),
            )
        )
    return windows


def normalize(windows: list[MultimodalWindow], stats: NormStats) -> list[MultimodalWindow]:
    """Per-variable z-score of X and Y using training-split statistics."""
    out = []
    for w in windows:
        out.append(
            replace(w, x=(w.x - stats.mean) / stats.std, y=(w.y - stats.mean) / stats.std)
        )
    return out


def denormalize(pred: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of :func:`normalize` for arrays whose last axis is variables."""
    return pred * stats.std + stats.mean


def _dominant_period(col: np.ndarray) -> float | None:
    """Period (in steps) of the largest non-DC spectral bin; ties go to the
    lower frequency. None when the series carries no oscillation."""
    L = len(col)
    mags = np.abs(np.fft.rfft(col - col.mean()))
    if len(mags) < 2:
        return None
    band = mags[1 : L // 2 + 1]
    if band.size == 0 or band.max() <= 1e-9 * max(1.0, np.abs(col).max()):
        return None
    k = int(np.argmax(band)) + 1  # argmax returns the first (lowest-frequency) max
    return L / k


def generate_endogenous_text(window: MultimodalWindow) -> str:
    """Deterministic statistics rendering of the look-back, one line per
    variable. Pure function of window.x."""

    lines = []
    L = window.x.shape[0]
    t = np.arange(L, dtype=np.float64)
    for j in range(window.x.shape[1]):
        col = window.x[:, j].astype(np.float64)
        slope = np.polyfit(t, col, 1)[0] if L > 1 else 0.0
        scale = max(np.abs(col).max(), 1.0)
        if abs(slope) <= 1e-12 * scale:
            trend = "flat"
        elif slope > 0:
            trend = "increasing"
        else:
            trend = "decreasing"
        period = _dominant_period(col)
        period_part = (
            "no dominant period" if period is None else f"dominant period {period:.4f} steps"
        )
        lines.append(
            f"series {j + 1}: mean {col.mean():.4f}, std {col.std():.4f}, "
            f"min {col.min():.4f}, max {col.max():.4f}, last {col[-1]:.4f}, "
            f"trend {trend}, {period_part}."
        )
    return " ".join(lines)


def attach_endogenous_text(windows: list[MultimodalWindow]) -> list[MultimodalWindow]:
    return [replace(w, endo_text=generate_endogenous_text(w)) for w in windows]


def synthesize_event_dataset(
    n_points: int,
    event_rate: float,
    shift_magnitude: float,
    noise_std: float,
    seed: int,
    period: int = 24,
    amplitude: float = 1.0,
    base_level: float = 10.0,
    announce_lead: int = 4,
    start_date: str = "2000-01-01",
) -> MultimodalSeries:
    """Seasonal sine plus noise with random persistent level shifts.

    Each shift at instant tau is announced by a text record spanning
    [tau - announce_lead, tau - 1] carrying the exact signed magnitude, so the
    shift is knowable from text before it appears in the numbers. Ground-truth
    event labels mark the shift instants.
    """

    if n_points <= 0:
        raise ArgumentError("n_points must be positive")
    if not 0.0 <= event_rate <= 1.0:
        raise ArgumentError("event_rate must lie in [0, 1]")
    lead = max(announce_lead, 1)
    rng = np.random.default_rng(seed)
    t = np.arange(n_points)
    base = base_level + amplitude * np.sin(2 * np.pi * t / period)
    noise = rng.normal(0.0, noise_std, size=n_points)

    eligible = t >= lead
    event_mask = (rng.random(n_points) < event_rate) & eligible
    event_idx = np.flatnonzero(event_mask)
    shifts = np.where(rng.random(len(event_idx)) < 0.5, -1.0, 1.0) * shift_magnitude

    level = np.zeros(n_points)
    for tau, d in zip(event_idx, shifts):
        level[tau:] += d

    dates = pd.date_range(start_date, periods=n_points, freq="D")
    texts = [
        TextRecord(
            start=dates[tau - lead],
            end=dates[tau - 1],
            text=f"EVENT: level shift of {d:+.4f}",
        )
        for tau, d in zip(event_idx, shifts)
    ]
    labels = np.zeros(n_points, dtype=bool)
    labels[event_idx] = True

    return MultimodalSeries(
        timestamps=pd.DatetimeIndex(dates),
        values=(base + level + noise).reshape(-1, 1),
        texts=texts,
        variable_names=["OT"],
        target_index=0,
        event_labels=labels,
    )


def write_dataset(series: MultimodalSeries, series_path, text_path, labels_path=None):
    """Write a series back to the CSV layout accepted by :func:`load_dataset`."""
    df = pd.DataFrame(series.values, columns=series.variable_names)
    df.insert(0, "date", series.timestamps.strftime("%Y-%m-%d %H:%M:%S"))
    df.to_csv(series_path, index=False)
    tdf = pd.DataFrame(
        {
            "start_date": [r.start.strftime("%Y-%m-%d %H:%M:%S") for r in series.texts],
            "end_date": [r.end.strftime("%Y-%m-%d %H:%M:%S") for r in series.texts],
            "text": [r.text for r in series.texts],
        }
    )
    tdf.to_csv(text_path, index=False)
    if labels_path is not None and series.event_labels is not None:
        idx = np.flatnonzero(series.event_labels)
        pd.DataFrame({"index": idx, "is_event": np.ones(len(idx), dtype=int)}).to_csv(
            labels_path, index=False
        )
