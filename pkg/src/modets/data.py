"""Series ingestion, chronological splits, sliding windows and synthetic tasks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

EPS = 1e-5


class DataError(ValueError):
    """Malformed input data or an impossible windowing request."""


@dataclass
class RawSeries:
    values: np.ndarray                      # (N, V)
    timestamps: np.ndarray | None = None    # (N,) float seconds, strictly increasing
    variate_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
            if len(self.timestamps) != len(self.values):
                raise DataError("timestamps and values differ in length")
            if np.any(np.diff(self.timestamps) <= 0):
                raise DataError("timestamps must be strictly increasing")
        if not self.variate_names:
            self.variate_names = [f"x{i}" for i in range(self.values.shape[1])]

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_variates(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "RawSeries":
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return RawSeries(self.values[start:stop], ts, list(self.variate_names))

    def median_interval(self) -> float:
        if self.timestamps is None or len(self.timestamps) < 2:
            return 1.0
        return float(np.median(np.diff(self.timestamps)))


@dataclass
class NormStats:
    mean: np.ndarray   # (M, V)
    std: np.ndarray    # (M, V), already floored at eps
    eps: float = EPS


@dataclass
class WindowDataset:
    inputs: np.ndarray              # (M, L, V)
    targets: np.ndarray             # (M, H, V)
    stats: NormStats | None = None  # set once standardised
    split: str = "train"
    deltas: np.ndarray | None = None   # (M, L) gap/median ratios, when timestamps exist
    input_index: np.ndarray | None = None   # (M,) first input row of each window
    median_interval: float = 1.0

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def lookback(self) -> int:
        return self.inputs.shape[1]

    @property
    def horizon(self) -> int:
        return self.targets.shape[1]

    @property
    def standardized(self) -> bool:
        return self.stats is not None

    def subset(self, idx) -> "WindowDataset":
        idx = np.asarray(idx)
        stats = None if self.stats is None else NormStats(self.stats.mean[idx], self.stats.std[idx],
                                                          self.stats.eps)
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx], stats=stats,
                       deltas=None if self.deltas is None else self.deltas[idx],
                       input_index=None if self.input_index is None else self.input_index[idx])


# -- CSV ----------------------------------------------------------------------

def _parse_time(text: str) -> float:
    """ISO date/time (naive values read as UTC) or a bare number of seconds."""
    text = text.strip()
    if "-" in text[1:] or ":" in text:
        stamp = datetime.fromisoformat(text)
        if stamp.tzinfo is None:
            stamp = stamp.replace(tzinfo=timezone.utc)
        return stamp.timestamp()
    return float(text)


def load_csv(path) -> RawSeries:
    """Read an ETT-style CSV: header, timestamp column, then numeric columns."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    times, rows = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column and at least one variate")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                t = _parse_time(row[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            vals = []
            for col, cell in zip(header[1:], row[1:]):
                cell = cell.strip()
                if not cell:
                    raise DataError(f"{path}:{lineno}: missing value in column {col!r}")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in {col!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if times and t <= times[-1]:
                raise DataError(f"{path}:{lineno}: timestamp not strictly after the previous row")
            times.append(t)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return RawSeries(np.array(rows), np.array(times), [h.strip() for h in header[1:]])


def write_csv(series: RawSeries, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date"] + list(series.variate_names))
        ts = series.timestamps if series.timestamps is not None else np.arange(len(series), dtype=float)
        for t, row in zip(ts, series.values):
            stamp = datetime.fromtimestamp(t, timezone.utc).strftime("%Y-%m-%d %H:%M:%S")
            w.writerow([stamp] + [repr(float(v)) for v in row])


# -- splitting and windows ------------------------------------------------------

def ett_preset_rows(series: RawSeries) -> tuple[int, int, int]:
    """Rows for 12/4/4 months of 30 days at the series' own granularity."""
    step = series.median_interval()
    per_day = int(round(86400.0 / step))
    month = 30 * per_day
    return 12 * month, 4 * month, 4 * month


def chronological_split(s: RawSeries, ratios=(0.7, 0.1, 0.2), min_length: int | None = None
                        ) -> tuple[RawSeries, RawSeries, RawSeries]:
    """Contiguous, ordered, non-overlapping train/val/test pieces.

    ``ratios`` may be a 3-tuple summing to 1 or the string ``"ett"``.
    Empty pieces are allowed; non-empty pieces shorter than ``min_length``
    raise.
    """
    n = len(s)
    if isinstance(ratios, str):
        if ratios.lower() != "ett":
            raise DataError(f"unknown split preset {ratios!r}")
        a, b, c = ett_preset_rows(s)
        if a + b + c > n:
            raise DataError(f"series of {n} rows is shorter than the ETT preset ({a + b + c})")
    else:
        r = [float(x) for x in ratios]
        if len(r) != 3 or min(r) < 0 or abs(sum(r) - 1.0) > 1e-9:
            raise DataError("split ratios must be three non-negative numbers summing to 1")
        a = int(round(n * r[0]))
        b = int(round(n * r[1]))
        c = n - a - b
    parts = (s.slice(0, a), s.slice(a, a + b), s.slice(a + b, a + b + c))
    if min_length is not None:
        for name, p in zip(("train", "val", "test"), parts):
            if 0 < len(p) < min_length:
                raise DataError(f"{name} segment has {len(p)} rows, need at least {min_length}")
    return parts


def window_count(n: int, L: int, H: int, stride: int = 1) -> int:
    if n < L + H:
        return 0
    return (n - L - H) // stride + 1


def make_windows(s: RawSeries, L: int, H: int, stride: int = 1, split: str = "train") -> WindowDataset:
    """Window m covers inputs [m*stride, m*stride+L) and targets [m*stride+L, m*stride+L+H)."""
    if stride < 1:
        raise DataError("stride must be >= 1")
    n = len(s)
    if n < L + H:
        raise DataError(f"{split}: {n} rows cannot hold a window of {L}+{H}")
    M = window_count(n, L, H, stride)
    starts = np.arange(M) * stride
    idx_in = starts[:, None] + np.arange(L)
    idx_out = starts[:, None] + L + np.arange(H)
    deltas = None
    med = s.median_interval()
    if s.timestamps is not None:
        from .params import delta_from_timestamps
        series_deltas = delta_from_timestamps(s.timestamps, med, 1e-3, 10.0)
        deltas = series_deltas[idx_in]
        deltas[:, 0] = 1.0
    return WindowDataset(s.values[idx_in], s.values[idx_out], None, split, deltas, starts, med)


def make_irregular_windows(observed: RawSeries, reference: RawSeries, L: int, H: int,
                           stride: int = 1, split: str = "train") -> WindowDataset:
    """Inputs are ``L`` consecutive irregular observations; targets are the
    next ``H`` rows of the regularly sampled ``reference`` after the last
    observation time.  Step sizes come from the observation gaps measured in
    units of the reference sampling interval.
    """
    if observed.timestamps is None or reference.timestamps is None:
        raise DataError("irregular windows need timestamps on both series")
    med = reference.median_interval()
    ref_t = reference.timestamps
    from .params import delta_from_timestamps
    obs_deltas = delta_from_timestamps(observed.timestamps, med, 1e-3, 10.0)
    inputs, targets, deltas, starts = [], [], [], []
    for start in range(0, len(observed) - L + 1, stride):
        last_t = observed.timestamps[start + L - 1]
        pos = int(np.searchsorted(ref_t, last_t, side="right"))
        if pos + H > len(ref_t):
            break
        inputs.append(observed.values[start:start + L])
        targets.append(reference.values[pos:pos + H])
        d = obs_deltas[start:start + L].copy()
        d[0] = 1.0
        deltas.append(d)
        starts.append(start)
    if not inputs:
        raise DataError(f"{split}: not enough observations for a window of {L}+{H}")
    return WindowDataset(np.array(inputs), np.array(targets), None, split, np.array(deltas),
                         np.array(starts), med)


# -- normalisation ----------------------------------------------------------------

def standardize(w: WindowDataset, eps: float = EPS) -> WindowDataset:
    """Scale each window by the mean/std of its own lookback rows.

    Targets use the stats of their input window, so no target information
    leaks into the normalisation.
    """
    if w.standardized:
        return w
    mean = w.inputs.mean(axis=1)
    std = np.maximum(w.inputs.std(axis=1), eps)
    x = (w.inputs - mean[:, None]) / std[:, None]
    y = (w.targets - mean[:, None]) / std[:, None]
    return replace(w, inputs=x, targets=y, stats=NormStats(mean, std, eps))


def destandardize(pred: np.ndarray, stats: NormStats) -> np.ndarray:
    pred = np.asarray(pred)
    return pred * stats.std[:, None] + stats.mean[:, None]


# -- synthetic data ---------------------------------------------------------------

@dataclass
class SynthSpec:
    n: int = 1000
    v: int = 2
    frequencies: list = field(default_factory=lambda: [1 / 24, 1 / 60])  # cycles per step
    amplitudes: list = field(default_factory=lambda: [1.0, 0.5])
    phases: list | None = None
    trend_slope: float = 0.0
    noise_std: float = 0.0
    interval: float = 3600.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise DataError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _per_channel(values, v: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (v, arr.shape[0]))
    if arr.shape[0] != v:
        raise DataError(f"{what}: expected {v} rows, got {arr.shape[0]}")
    return arr


def synth_generate(spec: SynthSpec | dict) -> RawSeries:
    """Sum of sinusoids + linear trend + Gaussian noise, a pure function of its SynthSpec."""
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(spec.seed)
    freqs = _per_channel(spec.frequencies, spec.v, "frequencies")
    amps = _per_channel(spec.amplitudes, spec.v, "amplitudes")
    if freqs.shape != amps.shape:
        raise DataError("frequencies and amplitudes must have matching shapes")
    if spec.phases is None:
        phases = rng.uniform(0.0, 2 * np.pi, freqs.shape)
    else:
        phases = _per_channel(spec.phases, spec.v, "phases")
    t = np.arange(spec.n, dtype=np.float64)
    arg = 2 * np.pi * freqs[None, :, :] * t[:, None, None] + phases[None]
    values = (amps[None] * np.sin(arg)).sum(axis=-1)
    values = values + spec.trend_slope * t[:, None]
    if spec.noise_std > 0:
        values = values + rng.normal(0.0, spec.noise_std, values.shape)
    return RawSeries(values, t * spec.interval)


def irregular_resample(s: RawSeries, keep_prob: float, seed: int = 0,
                       min_length: int | None = None) -> RawSeries:
    """Keep each row independently with probability ``keep_prob``."""
    if not 0 < keep_prob <= 1:
        raise DataError("keep_prob must lie in (0, 1]")
    if keep_prob == 1:
        out = s
    else:
        if s.timestamps is None:
            raise DataError("irregular resampling needs timestamps")
        keep = np.random.default_rng(seed).random(len(s)) < keep_prob
        out = RawSeries(s.values[keep], s.timestamps[keep], list(s.variate_names))
    if min_length is not None and len(out) < min_length:
        raise DataError(f"resampled series has {len(out)} rows, need {min_length}")
    return out


def inject_gaussian_noise(w: WindowDataset, std: float, seed: int = 0) -> WindowDataset:
    """Add N(0, std^2) to the (standardised) inputs only."""
    if std < 0:
        raise DataError("noise std must be >= 0")
    if std == 0:
        return w
    noise = np.random.default_rng(seed).normal(0.0, std, w.inputs.shape)
    return replace(w, inputs=w.inputs + noise)


def prepare_splits(series: RawSeries, L: int, H: int, ratios=(0.7, 0.1, 0.2), stride: int = 1,
                   eval_stride: int = 1) -> dict[str, WindowDataset]:
    """Split, window and standardise in one go; returns train/val/test datasets."""
    parts = chronological_split(series, ratios)
    out = {}
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) < L + H:
            continue
        st = stride if name == "train" else eval_stride
        out[name] = standardize(make_windows(part, L, H, st, split=name))
    if "train" not in out:
        raise DataError(f"training segment too short for L={L}, H={H}")
    return out


def prepare_irregular_splits(series: RawSeries, L: int, H: int, keep_prob: float,
                             ratios=(0.7, 0.1, 0.2), stride: int = 1, eval_stride: int = 1,
                             seed: int = 0) -> dict[str, WindowDataset]:
    """Like :func:`prepare_splits`, but each split's inputs are an independent
    Bernoulli subsample (seeds ``seed``, ``seed+1``, ``seed+2``) while the
    targets stay on the original regular grid.
    """
    parts = chronological_split(series, ratios)
    out = {}
    for i, (name, part) in enumerate(zip(("train", "val", "test"), parts)):
        if len(part) < L + H:
            continue
        obs = irregular_resample(part, keep_prob, seed=seed + i)
        st = stride if name == "train" else eval_stride
        try:
            out[name] = standardize(make_irregular_windows(obs, part, L, H, st, split=name))
        except DataError:
            if name == "train":
                raise
    if "train" not in out:
        raise DataError(f"training segment too short for L={L}, H={H}")
    return out
