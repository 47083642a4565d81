"""Dataset ingestion, chronological splits, normalization, windows and batches."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .embeddings import time_index
from .errors import ConfigError, DataFormatError

STD_FLOOR = 1e-6


@dataclass
class TrafficSeries:
    """Raw readings (T, N, C); ``offset`` is the global row index of row 0."""

    values: np.ndarray
    steps_per_day: int = 288
    start_weekday: int = 0
    offset: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise DataFormatError(f"traffic series must be (T, N, C) with every extent >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataFormatError("traffic series contains non-finite values")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def __len__(self) -> int:
        return self.values.shape[0]

    def time_slots(self) -> tuple[np.ndarray, np.ndarray]:
        steps = self.offset + np.arange(len(self))
        return time_index(steps, self.steps_per_day, self.start_weekday)

    def segment(self, start: int, stop: int) -> "TrafficSeries":
        return TrafficSeries(self.values[start:stop], self.steps_per_day, self.start_weekday, self.offset + start)


# ---------------------------------------------------------------- file formats


def _parse_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header
                for col, cell in enumerate(row, start=1):
                    try:
                        float(cell)
                    except ValueError:
                        raise DataFormatError(f"{path}: unparseable cell {cell!r} at row {lineno}, column {col}") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataFormatError(f"{path}: row {i + 1} has {len(r)} columns, expected {width}")
    return np.array(rows, dtype=np.float64)


def load_csv(paths, steps_per_day=288, start_weekday=0) -> TrafficSeries:
    """One CSV per channel, each T rows by N columns."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    channels = [_parse_csv(p) for p in paths]
    shapes = {c.shape for c in channels}
    if len(shapes) != 1:
        raise DataFormatError(f"channel files disagree on shape: {sorted(shapes)}")
    return TrafficSeries(np.stack(channels, axis=-1), steps_per_day, start_weekday)


def _flatbin_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def load_flatbin(path) -> TrafficSeries:
    """Raw little-endian row-major payload plus a JSON sidecar of the same stem."""
    meta_path, data_path = _flatbin_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"{meta_path}: cannot read sidecar ({exc})") from None
    missing = [k for k in ("T", "N", "C", "dtype") if k not in meta]
    if missing:
        raise DataFormatError(f"{meta_path}: sidecar lacks {', '.join(missing)}")
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    expected = int(meta["T"]) * int(meta["N"]) * int(meta["C"])
    raw = data_path.read_bytes()
    if len(raw) % dtype.itemsize or len(raw) // dtype.itemsize != expected:
        raise DataFormatError(
            f"{data_path}: payload holds {len(raw) / dtype.itemsize:g} elements, sidecar expects {expected}"
        )
    values = np.frombuffer(raw, dtype=dtype).reshape(meta["T"], meta["N"], meta["C"])
    return TrafficSeries(values, int(meta.get("steps_per_day", 288)), int(meta.get("start_weekday", 0)))


def save_flatbin(series: TrafficSeries, path, dtype="float32") -> tuple[Path, Path]:
    meta_path, data_path = _flatbin_paths(path)
    dt = np.dtype(dtype).newbyteorder("<")
    T, N, C = series.shape
    data_path.parent.mkdir(parents=True, exist_ok=True)
    data_path.write_bytes(np.ascontiguousarray(series.values, dtype=dt).tobytes())
    meta = {"T": T, "N": N, "C": C, "dtype": dt.name, "steps_per_day": series.steps_per_day,
            "start_weekday": series.start_weekday}
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return meta_path, data_path


def load(path, format="flatbin", steps_per_day=288, start_weekday=0) -> TrafficSeries:
    if format == "csv":
        return load_csv(path, steps_per_day, start_weekday)
    if format == "flatbin":
        return load_flatbin(path)
    raise ConfigError(f"unknown dataset format {format!r}; use 'csv' or 'flatbin'")


def convert_archive(archive, out, channels: Sequence[int] = (0,), steps_per_day=288, start_weekday=0,
                    dtype="float32") -> TrafficSeries:
    """Convert a public ``.npz`` archive (key ``data``, shape (T, N[, F])) to flatbin in directory ``out``."""
    archive = Path(archive)
    try:
        with np.load(archive) as npz:
            if "data" not in npz:
                raise DataFormatError(f"{archive}: no 'data' array (found {list(npz.keys())})")
            data = np.asarray(npz["data"])
    except (OSError, ValueError, EOFError) as exc:
        raise DataFormatError(f"{archive}: unreadable archive ({exc})") from None
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise DataFormatError(f"{archive}: expected (T, N, F) data, got shape {data.shape}")
    if max(channels) >= data.shape[2]:
        raise DataFormatError(f"{archive}: channel {max(channels)} requested but only {data.shape[2]} present")
    series = TrafficSeries(data[:, :, list(channels)], steps_per_day, start_weekday)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_flatbin(series, out / archive.stem, dtype=dtype)
    return series


# ---------------------------------------------------------------- splitting


def split(series: TrafficSeries, ratios=(6, 2, 2), min_length: int = 24) -> tuple[TrafficSeries, ...]:
    """Contiguous chronological cut; the last segment takes the remainder."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {ratios}")
    T = len(series)
    total = sum(ratios)
    n_train = int(T * ratios[0] // total)
    n_val = int(T * ratios[1] // total)
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, T)]
    for name, (a, b) in zip(("train", "val", "test"), bounds):
        if b - a < min_length:
            raise ConfigError(f"{name} segment has {b - a} rows, fewer than input+output steps ({min_length})")
    return tuple(series.segment(a, b) for a, b in bounds)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        return (values - self.mean) / self.std

    def invert(self, values):
        return values * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalizer(train: TrafficSeries) -> NormStats:
    v = train.values.reshape(-1, train.shape[2])
    return NormStats(v.mean(axis=0), np.maximum(v.std(axis=0), STD_FLOOR))


# ---------------------------------------------------------------- windows


def make_windows(length: int, input_steps=12, output_steps=12) -> np.ndarray:
    """Start rows of every (input, target) window fitting in ``length`` rows."""
    count = length - input_steps - output_steps + 1
    if count < 1:
        raise ConfigError(f"segment of {length} rows is shorter than {input_steps}+{output_steps} steps")
    return np.arange(count)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # (B, T_h, N, C), normalized
    targets: np.ndarray  # (B, T_out, N, C), raw scale
    tod: np.ndarray  # (B, T_h)
    dow: np.ndarray
    starts: np.ndarray  # window start rows, segment-local
    last_raw: np.ndarray = field(repr=False, default=None)  # (B, N, C) raw value at the last input step

    def __len__(self) -> int:
        return len(self.starts)


class WindowSet:
    """All windows of one segment, ready to be cut into batches."""

    def __init__(self, segment: TrafficSeries, stats: NormStats, input_steps=12, output_steps=12):
        self.segment = segment
        self.input_steps = input_steps
        self.output_steps = output_steps
        self.raw = segment.values
        self.normalized = stats.apply(segment.values)
        self.tod, self.dow = segment.time_slots()
        self.starts = make_windows(len(segment), input_steps, output_steps)

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, starts: np.ndarray, dtype=np.float64) -> WindowBatch:
        starts = np.asarray(starts)
        inp = starts[:, None] + np.arange(self.input_steps)
        tgt = starts[:, None] + self.input_steps + np.arange(self.output_steps)
        return WindowBatch(
            inputs=self.normalized[inp].astype(dtype),
            targets=self.raw[tgt],
            tod=self.tod[inp],
            dow=self.dow[inp],
            starts=starts,
            last_raw=self.raw[inp[:, -1]],
        )

    def batches(self, batch_size=32, shuffle_seed=None, dtype=np.float64) -> Iterator[WindowBatch]:
        for ids in batch_indices(len(self), batch_size, shuffle_seed):
            yield self.batch(self.starts[ids], dtype)


def batch_indices(n: int, batch_size=32, shuffle_seed=None) -> list[np.ndarray]:
    """Window ids per batch; shuffled by ``shuffle_seed`` when given, last partial batch kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class ForecastData:
    series: TrafficSeries
    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: NormStats

    @property
    def num_nodes(self) -> int:
        return self.series.shape[1]

    @property
    def channels(self) -> int:
        return self.series.shape[2]


def prepare(series: TrafficSeries, input_steps=12, output_steps=12, ratios=(6, 2, 2)) -> ForecastData:
    train, val, test = split(series, ratios, min_length=input_steps + output_steps)
    stats = fit_normalizer(train)
    sets = [WindowSet(s, stats, input_steps, output_steps) for s in (train, val, test)]
    return ForecastData(series, *sets, stats)


# ---------------------------------------------------------------- synthetic data


def synthetic_sinusoid(length=200, num_nodes=2, steps_per_day=24, base=100.0, amplitude=50.0) -> TrafficSeries:
    """Noise-free daily sinusoid; node i is phase-shifted by i/num_nodes of a day."""
    t = np.arange(length)[:, None]
    phase = np.arange(num_nodes)[None, :] / num_nodes
    values = base + amplitude * np.sin(2 * np.pi * (t / steps_per_day + phase))
    return TrafficSeries(values[:, :, None], steps_per_day, 0)


def synthetic_traffic(length=2016, num_nodes=8, steps_per_day=288, seed=0, noise=0.05) -> TrafficSeries:
    """Two-pattern mixture: an urban double-peak profile and a suburban afternoon hump.

    Each node mixes the patterns with its own weight, a weekend dip applies to
    the urban part, a spatially correlated AR(1) term adds persistence, and
    multiplicative noise keeps values positive.
    """
    rng = np.random.default_rng(seed)
    tod, dow = time_index(np.arange(length), steps_per_day, 0)
    hour = 24.0 * tod / steps_per_day
    urban = 0.3 + np.exp(-0.5 * ((hour - 8.0) / 1.5) ** 2) + 0.8 * np.exp(-0.5 * ((hour - 17.5) / 2.0) ** 2)
    urban = urban * np.where(dow >= 5, 0.6, 1.0)
    suburban = 0.2 + np.exp(-0.5 * ((hour - 14.0) / 3.0) ** 2)
    mix = rng.uniform(0.1, 0.9, size=num_nodes)
    scale = rng.uniform(150.0, 400.0, size=num_nodes)
    level = mix[None, :] * urban[:, None] + (1.0 - mix[None, :]) * suburban[:, None]
    ar = np.zeros((length, num_nodes))
    shocks = rng.normal(0.0, 0.08, size=(length, num_nodes))
    shocks = 0.6 * shocks + 0.4 * shocks.mean(axis=1, keepdims=True)
    for t in range(1, length):
        ar[t] = 0.9 * ar[t - 1] + shocks[t]
    values = scale[None, :] * level * np.exp(ar) * (1.0 + noise * rng.normal(size=(length, num_nodes)))
    return TrafficSeries(np.maximum(values, 0.0)[:, :, None], steps_per_day, 0)
