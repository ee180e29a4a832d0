"""Synthetic trajectory generators, CSV ingestion and standardization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.linalg import sqrtm

from .exceptions import ConfigError, NumericalError
from .inference import TimeSeries
from .solver import particle_generator

__all__ = [
    "Dataset",
    "CsvSchema",
    "LV_DIFFUSION_COV",
    "lotka_volterra_drift",
    "double_well_drift",
    "simulate_lotka_volterra",
    "generate_lotka_volterra",
    "generate_double_well",
    "load_csv",
    "write_dataset_csv",
    "standardize",
    "write_manifest",
]

LV_DIFFUSION_COV = np.array([[0.05, 0.03], [0.03, 0.09]])
LV_BOX = (0.0, 1e3)
SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """Collection of series with split tags and optional normalization."""

    series: list
    splits: list
    normalization: tuple | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.series) != len(self.splits):
            raise ValueError("one split tag per series is required")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        dims = {s.dim for s in self.series}
        if len(dims) > 1:
            raise ValueError(f"series have differing channel counts {sorted(dims)}")

    @property
    def channels(self) -> int:
        return self.series[0].dim if self.series else 0

    def split(self, name: str) -> list:
        return [s for s, tag in zip(self.series, self.splits) if tag == name]

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        """Map standardized values back to raw units."""
        if self.normalization is None:
            return np.asarray(values)
        mean, std = self.normalization
        return np.asarray(values) * std + mean

    def inverse_transform_cov(self, cov: np.ndarray) -> np.ndarray:
        if self.normalization is None:
            return np.asarray(cov)
        std = self.normalization[1]
        return np.asarray(cov) * std[:, None] * std[None, :]

    def manifest(self) -> dict:
        norm = None
        if self.normalization is not None:
            norm = {"mean": self.normalization[0].tolist(), "std": self.normalization[1].tolist()}
        return {
            "n_series": len(self.series),
            "channels": self.channels,
            "normalization": norm,
            "splits": {name: int(sum(t == name for t in self.splits)) for name in SPLITS},
            "generator": self.info.get("generator"),
            "seed": self.info.get("seed"),
            "rejections": self.info.get("rejections", 0),
        }


# ----------------------------------------------------------------------
# generators


def lotka_volterra_drift(x):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([2.0 * x1 - x1 * x2, x1 * x2 - 4.0 * x2], axis=-1)


def double_well_drift(x):
    x = np.asarray(x, dtype=float)
    return 4.0 * x * (1.0 - x * x)


def _lv_diffusion() -> np.ndarray:
    return np.real(sqrtm(LV_DIFFUSION_COV))


def simulate_lotka_volterra(x0, n_steps: int, fine_dt: float, rng: np.random.Generator, stride: int = 1, diffusion: np.ndarray | None = None, chunk: int = 20000, truncate: bool = False):
    """Euler-Maruyama path of the stochastic Lotka-Volterra system.

    Returns every ``stride``-th state including the initial one.  If the
    path leaves the box ``[0, 1e3]^2`` the result is ``None``, or with
    ``truncate`` the states recorded before the exit.
    """
    L = _lv_diffusion() if diffusion is None else np.asarray(diffusion)
    x1, x2 = (float(v) for v in x0)
    out = [(x1, x2)]
    sq = np.sqrt(fine_dt)
    lo, hi = LV_BOX
    done = 0
    while done < n_steps:
        n = min(chunk, n_steps - done)
        dw = (rng.standard_normal((n, 2)) @ L.T * sq).tolist()
        for j, (w1, w2) in enumerate(dw):
            x1, x2 = x1 + (2.0 * x1 - x1 * x2) * fine_dt + w1, x2 + (x1 * x2 - 4.0 * x2) * fine_dt + w2
            if not (lo <= x1 <= hi and lo <= x2 <= hi):
                return np.array(out) if truncate else None
            if (done + j + 1) % stride == 0:
                out.append((x1, x2))
        done += n
    return np.array(out)


def _simulate_lv_batch(x0: np.ndarray, noise_gens: list, n_steps: int, fine_dt: float, stride: int, L: np.ndarray, chunk: int = 5000):
    """Vectorized over paths; returns (coarse paths, alive mask)."""
    P = x0.shape[0]
    x = x0.copy()
    alive = np.ones(P, dtype=bool)
    out = [x.copy()]
    sq = np.sqrt(fine_dt)
    done = 0
    while done < n_steps:
        n = min(chunk, n_steps - done)
        dw = np.stack([g.standard_normal((n, 2)) for g in noise_gens], axis=1) @ L.T * sq
        for j in range(n):
            x1, x2 = x[:, 0], x[:, 1]
            drift = np.stack([2.0 * x1 - x1 * x2, x1 * x2 - 4.0 * x2], axis=-1)
            x = x + drift * fine_dt + dw[j]
            inside = np.all((x >= LV_BOX[0]) & (x <= LV_BOX[1]) & np.isfinite(x), axis=-1)
            alive &= inside
            x = np.where(alive[:, None], x, 1.0)
            if (done + j + 1) % stride == 0:
                out.append(x.copy())
        done += n
    return np.stack(out, axis=1), alive


def generate_lotka_volterra(
    paths: int = 32,
    fine_dt: float = 1e-4,
    coarse_points: int = 200,
    t_end: float = 10.0,
    train_fraction: float = 0.5,
    seed: int = 0,
    init_low: float = 1.0,
    init_high: float = 4.0,
    max_attempts: int = 100,
) -> Dataset:
    """Stochastic Lotka-Volterra trajectories.

    Each path is simulated at (about) ``fine_dt`` and subsampled to
    ``coarse_points`` equally spaced times on ``[0, t_end]``.  The fine step
    is shrunk slightly, if needed, so that the coarse spacing is an integer
    number of fine steps.  The first ``train_fraction`` of every path becomes
    a training series and the rest a test series.  Path slot ``i`` uses the
    random streams ``i, i + paths, i + 2 paths, ...`` until it stays inside
    the box; every discarded attempt counts as a rejection.
    """
    if paths < 1 or coarse_points < 2:
        raise ValueError("need at least one path and two coarse points")
    spacing = t_end / (coarse_points - 1)
    if fine_dt > spacing:
        raise ValueError("fine_dt must not exceed the coarse spacing")
    stride = int(np.ceil(spacing / fine_dt - 1e-9))
    eff_dt = spacing / stride
    n_steps = stride * (coarse_points - 1)
    L = _lv_diffusion()

    result = np.empty((paths, coarse_points, 2))
    pending = np.arange(paths)
    attempt = 0
    rejections = 0
    while pending.size:
        if attempt >= max_attempts:
            raise NumericalError(f"{pending.size} Lotka-Volterra paths diverged after {max_attempts} attempts")
        gens = [particle_generator(seed, int(i) + attempt * paths) for i in pending]
        x0 = np.stack([g.uniform(init_low, init_high, size=2) for g in gens])
        coarse, alive = _simulate_lv_batch(x0, gens, n_steps, eff_dt, stride, L)
        result[pending[alive]] = coarse[alive]
        rejections += int(np.sum(~alive))
        pending = pending[~alive]
        attempt += 1

    times = np.linspace(0.0, t_end, coarse_points)
    n_train = int(round(train_fraction * coarse_points))
    series, splits = [], []
    for i in range(paths):
        series.append(TimeSeries(times[:n_train], result[i, :n_train]))
        splits.append("train")
    for i in range(paths):
        series.append(TimeSeries(times[n_train:], result[i, n_train:]))
        splits.append("test")
    info = {
        "generator": {
            "name": "lotka_volterra",
            "paths": paths,
            "fine_dt": fine_dt,
            "effective_fine_dt": eff_dt,
            "coarse_points": coarse_points,
            "t_end": t_end,
            "train_fraction": train_fraction,
            "init_range": [init_low, init_high],
        },
        "seed": seed,
        "rejections": rejections,
        "forecast_pairs": [[i, paths + i] for i in range(paths)],
    }
    return Dataset(series, splits, None, info)


def generate_double_well(paths: int = 1, dt: float = 0.01, steps: int = 1000, init: float | Sequence[float] = 0.0, seed: int = 0, label_modes: bool = False, train_fraction: float = 1.0) -> Dataset:
    """Euler-Maruyama paths of ``dx = 4x(1 - x^2) dt + dw``.

    With ``label_modes`` the info dictionary records, per path, the sign of
    the path mean over its last quarter (+1 or -1).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0 = np.broadcast_to(np.asarray(init, dtype=float), (paths,)).copy()
    gens = [particle_generator(seed, i) for i in range(paths)]
    dw = np.stack([g.standard_normal(steps) for g in gens], axis=1) * np.sqrt(dt)
    out = np.empty((steps + 1, paths))
    out[0] = x = x0
    for k in range(steps):
        x = x + 4.0 * x * (1.0 - x * x) * dt + dw[k]
        out[k + 1] = x
    times = np.arange(steps + 1) * dt
    n_train = int(round(train_fraction * (steps + 1)))
    series, splits, pairs = [], [], []
    for i in range(paths):
        series.append(TimeSeries(times[:n_train], out[:n_train, i]))
        splits.append("train")
        if n_train < steps + 1:
            series.append(TimeSeries(times[n_train:], out[n_train:, i]))
            splits.append("test")
            pairs.append([len(series) - 2, len(series) - 1])
    info = {
        "generator": {"name": "double_well", "paths": paths, "dt": dt, "steps": steps, "init": x0.tolist(), "train_fraction": train_fraction},
        "seed": seed,
        "rejections": 0,
    }
    if pairs:
        info["forecast_pairs"] = pairs
    if label_modes:
        tail = out[-max(1, (steps + 1) // 4):]
        info["modes"] = np.where(tail.mean(axis=0) >= 0.0, 1, -1).tolist()
    return Dataset(series, splits, None, info)


# ----------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    time: str = "t"
    channels: tuple = ()
    controls: tuple = ()
    series_id: str | None = None
    split: str | None = None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CsvSchema":
        known = {"time", "channels", "controls", "series_id", "split"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown CSV schema keys {sorted(unknown)}")
        return cls(
            d.get("time", "t"),
            tuple(d.get("channels", ())),
            tuple(d.get("controls", ())),
            d.get("series_id"),
            d.get("split"),
        )


def load_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    """Read comma-separated data with a header row into a :class:`Dataset`.

    Rows are grouped by ``schema.series_id`` in order of first appearance;
    without it the whole file is one series.  Errors name the file line.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        cols = {name: i for i, name in enumerate(header)}
        channels = schema.channels or tuple(
            h for h in header if h not in {schema.time, schema.series_id, schema.split, *schema.controls}
        )
        needed = [schema.time, *channels, *schema.controls]
        needed += [c for c in (schema.series_id, schema.split) if c]
        missing = [c for c in needed if c not in cols]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        groups: dict[str, dict] = {}
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
            try:
                t = float(row[cols[schema.time]])
                y = [float(row[cols[c]]) for c in channels]
                u = [float(row[cols[c]]) for c in schema.controls]
            except ValueError as exc:
                raise ConfigError(f"{path}:{line}: {exc}") from None
            key = row[cols[schema.series_id]] if schema.series_id else ""
            g = groups.setdefault(key, {"t": [], "y": [], "u": [], "split": None, "lines": []})
            if g["t"] and t <= g["t"][-1]:
                raise ConfigError(f"{path}:{line}: time {t} does not increase within series {key!r}")
            g["t"].append(t)
            g["y"].append(y)
            g["u"].append(u)
            g["lines"].append(line)
            if schema.split:
                tag = row[cols[schema.split]]
                if tag not in SPLITS:
                    raise ConfigError(f"{path}:{line}: unknown split tag {tag!r}")
                if g["split"] not in (None, tag):
                    raise ConfigError(f"{path}:{line}: series {key!r} mixes split tags")
                g["split"] = tag
    if not groups:
        raise ConfigError(f"{path}: no data rows")
    series, splits = [], []
    for key, g in groups.items():
        u = np.array(g["u"]) if schema.controls else None
        series.append(TimeSeries(np.array(g["t"]), np.array(g["y"]), u))
        splits.append(g["split"] or "train")
    info = {"generator": {"name": "csv", "path": str(path), "channels": list(channels)}, "seed": None}
    return Dataset(series, splits, None, info)


def write_dataset_csv(path: str | Path, dataset: Dataset) -> None:
    """Columns ``series_id, split, t, y_1..D[, u_1..m]``."""
    D = dataset.channels
    m = 0 if not dataset.series or dataset.series[0].controls is None else dataset.series[0].controls.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["series_id", "split", "t"] + [f"y_{i + 1}" for i in range(D)] + [f"u_{i + 1}" for i in range(m)])
        for j, (s, tag) in enumerate(zip(dataset.series, dataset.splits)):
            for k in range(len(s)):
                row = [j, tag, repr(float(s.times[k]))] + [repr(float(v)) for v in s.observations[k]]
                if m:
                    row += [repr(float(v)) for v in s.controls[k]]
                w.writerow(row)


def standardize(dataset: Dataset, split: str = "train") -> Dataset:
    """Per-channel z-scoring with statistics of one split only."""
    ref = dataset.split(split)
    if not ref:
        raise ValueError(f"split {split!r} is empty")
    stacked = np.concatenate([s.observations for s in ref], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    zero = np.flatnonzero(std <= 0.0)
    if zero.size:
        raise ValueError(f"channels {zero.tolist()} have zero variance in the {split} split; drop them")
    series = [TimeSeries(s.times, (s.observations - mean) / std, s.controls) for s in dataset.series]
    return replace(dataset, series=series, normalization=(mean, std))


def write_manifest(path: str | Path, dataset: Dataset, extra: Mapping[str, Any] | None = None) -> None:
    doc = dataset.manifest()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
