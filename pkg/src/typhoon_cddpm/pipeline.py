"""Cleaning, pairing, scaling, augmentation and splitting of ingested records.

Processed-dataset directory layout::

    processed.json               grid size, channel order, split seeds
    norm_stats.json              per-channel {"min": .., "max": ..} in physical units
    split.<seed>.json            {"train": [typhoon ids], "test": [typhoon ids]}
    pairs/<typhoon_id>/<stamp>.npz
                                 condition (H, W) and targets (4, H, W), physical units
"""

from __future__ import annotations

import bisect
import hashlib
import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateChannelError, DomainError, EmptyDatasetError, SplitError
from .ingestion import ERA5_VARIABLES, SATELLITE, UNITS, RawRecord, Source, to_utc

CHANNELS = ERA5_VARIABLES
ALL_CHANNELS = CHANNELS + (SATELLITE,)
DEFAULT_GRID = 64


@dataclass(eq=False)
class FieldGrid:
    values: np.ndarray
    channel: str
    normalized: bool = False
    units: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"FieldGrid needs a 2-D array, got {self.values.shape}")
        if self.channel not in ALL_CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        if not np.isfinite(self.values).all():
            raise ValueError(f"non-finite values in {self.channel} grid")
        if self.normalized and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError(f"normalized {self.channel} grid outside [0, 1]")
        if not self.units:
            self.units = "1" if self.normalized else UNITS[self.channel]

    @property
    def shape(self):
        return self.values.shape


@dataclass(eq=False)
class SamplePair:
    condition: FieldGrid
    targets: tuple
    timestamp: datetime
    typhoon_id: str

    def __post_init__(self):
        self.targets = tuple(self.targets)
        self.timestamp = to_utc(self.timestamp)
        if self.condition.channel != SATELLITE:
            raise ValueError("condition must be the satellite channel")
        if tuple(t.channel for t in self.targets) != CHANNELS:
            raise ValueError(f"targets must be ordered {CHANNELS}")
        shape = self.condition.shape
        if any(t.shape != shape for t in self.targets):
            raise ValueError("condition and targets must share H x W")

    @property
    def normalized(self) -> bool:
        return self.condition.normalized and all(t.normalized for t in self.targets)

    def target_array(self) -> np.ndarray:
        return np.stack([t.values for t in self.targets])

    def grids(self):
        return (self.condition,) + self.targets


@dataclass(frozen=True)
class NormStats:
    """Per-channel (min, max) in physical units, fitted on the training split."""

    ranges: dict

    def __post_init__(self):
        for ch, (lo, hi) in self.ranges.items():
            if not lo < hi:
                raise DegenerateChannelError(f"channel {ch} has min {lo} >= max {hi}")

    def to_dict(self) -> dict:
        return {ch: {"min": float(lo), "max": float(hi)} for ch, (lo, hi) in self.ranges.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls({ch: (float(v["min"]), float(v["max"])) for ch, v in d.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class AugmentConfig:
    """Photometric augmentation settings (normalized units).

    Each transform fires independently with its own probability. By default
    only the satellite condition is perturbed; the targets stay untouched.
    """

    noise_std: float = 0.02
    gaussian_sigma: float = 1.0
    contrast_range: tuple = (0.8, 1.2)
    noise_p: float = 0.5
    smooth_p: float = 0.5
    contrast_p: float = 0.5
    apply_to_targets: bool = False

    def __post_init__(self):
        if self.noise_std < 0 or self.gaussian_sigma < 0:
            raise ValueError("noise_std and gaussian_sigma must be >= 0")
        lo, hi = self.contrast_range
        if not (0 < lo <= 1 <= hi):
            raise ValueError("contrast_range must satisfy 0 < lo <= 1 <= hi")
        for p in (self.noise_p, self.smooth_p, self.contrast_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(noise_p=0.0, smooth_p=0.0, contrast_p=0.0)


# --------------------------------------------------------------------- cleaning

def _fill_nearest(grid: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(grid)
    idx = ndimage.distance_transform_edt(bad, return_distances=False, return_indices=True)
    return grid[tuple(idx)]


def clean(records: Sequence[RawRecord], max_bad_fraction: float = 0.05) -> list[RawRecord]:
    """Deduplicate and remove non-finite values.

    A frame with more than ``max_bad_fraction`` non-finite pixels is dropped;
    otherwise bad pixels take the value of the nearest finite pixel. For
    repeated (source, variable, typhoon, timestamp) keys the first record wins.
    """
    seen = set()
    out = []
    for r in records:
        key = (r.source, r.variable, r.typhoon_id, r.timestamp)
        if key in seen:
            continue
        seen.add(key)
        if not r.dirty:
            out.append(r)
            continue
        bad = ~np.isfinite(r.grid)
        if bad.mean() > max_bad_fraction or bad.all():
            continue
        out.append(replace(r, grid=_fill_nearest(r.grid.astype(np.float64))))
    if not out:
        raise EmptyDatasetError("every record was dropped during cleaning")
    return out


# -------------------------------------------------------------------- alignment

@dataclass
class AlignDiagnostics:
    n_unmatched_satellite: int = 0
    n_unused_era5: int = 0


def align(satellite_records: Sequence[RawRecord], era5_records: Sequence[RawRecord],
          grid_size: int = DEFAULT_GRID,
          tolerance: timedelta = timedelta(0)) -> tuple[list[SamplePair], AlignDiagnostics]:
    """Pair each satellite frame with the four ERA5 fields at the nearest matching hour.

    ERA5 timestamps missing any of the four variables are unusable. All grids
    are resampled to ``grid_size`` x ``grid_size`` (physical units kept).
    """
    by_time: dict[datetime, dict[str, RawRecord]] = {}
    for r in era5_records:
        if r.source is not Source.ERA5:
            raise ValueError(f"not an ERA5 record: {r!r}")
        by_time.setdefault(r.timestamp, {})[r.variable] = r
    complete = sorted(ts for ts, v in by_time.items() if all(c in v for c in CHANNELS))

    pairs, used = [], set()
    diag = AlignDiagnostics()
    for s in satellite_records:
        if s.variable != SATELLITE:
            raise ValueError(f"not a satellite record: {s!r}")
        match = _nearest(complete, s.timestamp, tolerance)
        if match is None:
            diag.n_unmatched_satellite += 1
            continue
        used.add(match)
        fields = by_time[match]
        cond = resample(FieldGrid(s.grid, SATELLITE, units=s.units), grid_size)
        targets = tuple(resample(FieldGrid(fields[c].grid, c, units=fields[c].units), grid_size)
                        for c in CHANNELS)
        pairs.append(SamplePair(cond, targets, s.timestamp, s.typhoon_id or "unknown"))
    diag.n_unused_era5 = sum(len(by_time[ts]) for ts in by_time if ts not in used)
    if not pairs:
        raise EmptyDatasetError("no satellite frame matched a complete ERA5 timestamp")
    return pairs, diag


def _nearest(sorted_times, ts, tolerance):
    if not sorted_times:
        return None
    i = bisect.bisect_left(sorted_times, ts)
    best = None
    for j in (i - 1, i):
        if 0 <= j < len(sorted_times):
            d = abs(sorted_times[j] - ts)
            if d <= tolerance and (best is None or d < abs(best - ts)):
                best = sorted_times[j]
    return best


# ----------------------------------------------------------------- normalization

def fit_norm(training_pairs: Sequence[SamplePair], channels=ALL_CHANNELS) -> NormStats:
    if not training_pairs:
        raise EmptyDatasetError("cannot fit normalization on an empty split")
    if any(p.normalized for p in training_pairs):
        raise ValueError("fit_norm expects physical units")
    ranges = {}
    for ch in channels:
        lo, hi = np.inf, -np.inf
        for p in training_pairs:
            g = p.condition if ch == SATELLITE else p.targets[CHANNELS.index(ch)]
            lo = min(lo, float(g.values.min()))
            hi = max(hi, float(g.values.max()))
        if not lo < hi:
            raise DegenerateChannelError(f"channel {ch} is constant ({lo}) over the training split")
        ranges[ch] = (lo, hi)
    return NormStats(ranges)


def _range(grid: FieldGrid, stats: NormStats):
    if grid.channel not in stats.ranges:
        raise TypeError(f"norm stats have no channel {grid.channel!r}")
    return stats.ranges[grid.channel]


def normalize(grid: FieldGrid, stats: NormStats) -> FieldGrid:
    """Min-max scale to [0, 1]; values outside the fitted range are clipped."""
    if grid.normalized:
        raise ValueError("grid is already normalized")
    lo, hi = _range(grid, stats)
    v = np.clip((grid.values - lo) / (hi - lo), 0.0, 1.0)
    return FieldGrid(v, grid.channel, normalized=True, units="1")


def denormalize(grid: FieldGrid, stats: NormStats) -> FieldGrid:
    if not grid.normalized:
        raise ValueError("grid is not normalized")
    lo, hi = _range(grid, stats)
    return FieldGrid(grid.values * (hi - lo) + lo, grid.channel, normalized=False)


def normalize_pair(pair: SamplePair, stats: NormStats) -> SamplePair:
    return SamplePair(normalize(pair.condition, stats),
                      tuple(normalize(t, stats) for t in pair.targets),
                      pair.timestamp, pair.typhoon_id)


def denormalize_array(values: np.ndarray, channel: str, stats: NormStats) -> np.ndarray:
    lo, hi = stats.ranges[channel]
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


# -------------------------------------------------------------------- resampling

def resample_array(values: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resampling with corner alignment (first/last pixels map onto each other)."""
    if target_size < 2:
        raise DomainError(f"target_size must be >= 2, got {target_size}")
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    if h < 2 or w < 2:
        raise DomainError(f"grid must be at least 2x2, got {values.shape}")
    if (h, w) == (target_size, target_size):
        return values.copy()
    rows = np.linspace(0.0, h - 1.0, target_size)
    cols = np.linspace(0.0, w - 1.0, target_size)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = ndimage.map_coordinates(values, [rr, cc], order=1, mode="nearest")
    # guard against round-off creeping past the input range
    return np.clip(out, values.min(), values.max())


def resample(grid: FieldGrid, target_size: int) -> FieldGrid:
    return FieldGrid(resample_array(grid.values, target_size), grid.channel,
                     grid.normalized, grid.units)


# ------------------------------------------------------------------ augmentation

def _augment_values(v: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < config.noise_p:
        v = v + rng.normal(0.0, config.noise_std, v.shape)
    if rng.random() < config.smooth_p and config.gaussian_sigma > 0:
        v = ndimage.gaussian_filter(v, config.gaussian_sigma, mode="nearest")
    if rng.random() < config.contrast_p:
        c = rng.uniform(*config.contrast_range)
        m = v.mean()
        v = (v - m) * c + m
    return np.clip(v, 0.0, 1.0)


def augment(pair: SamplePair, config: AugmentConfig, rng_seed) -> SamplePair:
    """Random noise, Gaussian smoothing and contrast jitter; no geometric changes."""
    if not pair.normalized:
        raise ValueError("augment expects a normalized pair")
    rng = np.random.default_rng(rng_seed)
    cond = FieldGrid(_augment_values(pair.condition.values, config, rng), SATELLITE, True)
    targets = pair.targets
    if config.apply_to_targets:
        targets = tuple(FieldGrid(_augment_values(t.values, config, rng), t.channel, True)
                        for t in targets)
    return SamplePair(cond, targets, pair.timestamp, pair.typhoon_id)


# ------------------------------------------------------------------------ split

def split_ids(pairs: Sequence[SamplePair], train_fraction: float = 0.8,
              seed: int = 0) -> tuple[list[str], list[str]]:
    """Choose the typhoons for each side of a grouped split.

    The training side is the subset of typhoons whose frame count is closest
    to ``round(train_fraction * n)`` (ties go to the larger subset); the
    typhoon order is shuffled by ``seed`` first, so equally good subsets are
    picked reproducibly at random.
    """
    if len(pairs) < 5:
        raise SplitError(f"need at least 5 pairs to split, got {len(pairs)}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    sizes: dict[str, int] = {}
    for p in pairs:
        sizes[p.typhoon_id] = sizes.get(p.typhoon_id, 0) + 1
    if len(sizes) < 2:
        raise SplitError("need frames from at least two typhoons for a grouped split")

    rng = np.random.default_rng(seed)
    order = [sorted(sizes)[i] for i in rng.permutation(len(sizes))]
    n = len(pairs)
    target = int(np.floor(train_fraction * n + 0.5))

    # 0/1 subset-sum; first_item[s] is the item that first made sum s reachable
    first_item = [-1] * (n + 1)
    reachable = np.zeros(n + 1, dtype=bool)
    reachable[0] = True
    for i, tid in enumerate(order):
        k = sizes[tid]
        newly = np.zeros_like(reachable)
        newly[k:] = reachable[:-k] & ~reachable[k:]
        for s in np.flatnonzero(newly):
            first_item[s] = i
        reachable |= newly

    candidates = [s for s in range(1, n) if reachable[s]]
    best = min(candidates, key=lambda s: (abs(s - target), -s))
    train, s = set(), best
    while s > 0:
        i = first_item[s]
        train.add(order[i])
        s -= sizes[order[i]]
    train_ids = [t for t in order if t in train]
    test_ids = [t for t in order if t not in train]
    return train_ids, test_ids


def split(pairs: Sequence[SamplePair], train_fraction: float = 0.8,
          seed: int = 0) -> tuple[list[SamplePair], list[SamplePair]]:
    train_ids, _ = split_ids(pairs, train_fraction, seed)
    keep = set(train_ids)
    train = [p for p in pairs if p.typhoon_id in keep]
    test = [p for p in pairs if p.typhoon_id not in keep]
    return train, test


def hash_pairs(pairs: Sequence[SamplePair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(f"{p.typhoon_id}|{p.timestamp.isoformat()}|{p.normalized}".encode())
        for g in p.grids():
            h.update(g.channel.encode())
            h.update(np.ascontiguousarray(g.values).tobytes())
    return h.hexdigest()


def pairs_to_arrays(pairs: Sequence[SamplePair], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack normalized pairs into (N, 1, H, W) conditions and (N, 4, H, W) targets."""
    x = np.stack([p.condition.values[None] for p in pairs]).astype(dtype)
    y = np.stack([p.target_array() for p in pairs]).astype(dtype)
    return x, y


# ----------------------------------------------------------- processed datasets

PROCESSED_FORMAT = "typhoon-cddpm-processed"


@dataclass
class ProcessedDataset:
    train: list
    test: list
    stats: NormStats
    seed: int
    grid_size: int
    diagnostics: dict = field(default_factory=dict)

    def normalized(self, which: str) -> list[SamplePair]:
        return [normalize_pair(p, self.stats) for p in getattr(self, which)]


def prepare_dataset(records: Sequence[RawRecord], grid_size: int = DEFAULT_GRID, seed: int = 0,
                    train_fraction: float = 0.8, max_bad_fraction: float = 0.05,
                    tolerance: timedelta = timedelta(0)) -> ProcessedDataset:
    """clean -> align -> grouped split -> fit min-max stats on the training side."""
    cleaned = clean(records, max_bad_fraction)
    sat = sorted((r for r in cleaned if r.variable == SATELLITE),
                 key=lambda r: (r.timestamp, r.typhoon_id or ""))
    era5 = sorted((r for r in cleaned if r.source is Source.ERA5), key=lambda r: r.timestamp)
    pairs, diag = align(sat, era5, grid_size, tolerance)
    train, test = split(pairs, train_fraction, seed)
    stats = fit_norm(train)
    return ProcessedDataset(train, test, stats, seed, grid_size, {
        "n_records": len(records), "n_clean": len(cleaned), "n_pairs": len(pairs),
        "n_unmatched_satellite": diag.n_unmatched_satellite, "n_unused_era5": diag.n_unused_era5,
    })


def _stamp(ts: datetime) -> str:
    return ts.strftime("%Y%m%dT%H%M%SZ")


def save_processed(ds: ProcessedDataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    for p in ds.train + ds.test:
        d = out_dir / "pairs" / p.typhoon_id
        d.mkdir(parents=True, exist_ok=True)
        np.savez(d / f"{_stamp(p.timestamp)}.npz", condition=p.condition.values,
                 targets=p.target_array(), timestamp=p.timestamp.isoformat(),
                 typhoon_id=p.typhoon_id)
    ds.stats.save(out_dir / "norm_stats.json")
    train_ids = sorted({p.typhoon_id for p in ds.train})
    test_ids = sorted({p.typhoon_id for p in ds.test})
    (out_dir / f"split.{ds.seed}.json").write_text(
        json.dumps({"train": train_ids, "test": test_ids}, indent=2))
    (out_dir / "processed.json").write_text(json.dumps({
        "format": PROCESSED_FORMAT, "version": 1, "grid_size": ds.grid_size,
        "channels": list(CHANNELS), "condition": SATELLITE, "seed": ds.seed,
        "diagnostics": ds.diagnostics,
    }, indent=2))
    return out_dir


def load_processed(directory, seed: int | None = None) -> ProcessedDataset:
    directory = Path(directory)
    meta = json.loads((directory / "processed.json").read_text())
    if meta.get("format") != PROCESSED_FORMAT:
        raise OSError(f"{directory} is not a processed dataset")
    if tuple(meta["channels"]) != CHANNELS:
        raise ValueError(f"channel order {meta['channels']} differs from {CHANNELS}")
    seed = meta["seed"] if seed is None else seed
    ids = json.loads((directory / f"split.{seed}.json").read_text())
    stats = NormStats.load(directory / "norm_stats.json")

    def _load(tids):
        out = []
        for tid in tids:
            for f in sorted((directory / "pairs" / tid).glob("*.npz")):
                with np.load(f) as z:
                    targets = tuple(FieldGrid(z["targets"][i], c) for i, c in enumerate(CHANNELS))
                    out.append(SamplePair(FieldGrid(z["condition"], SATELLITE), targets,
                                          str(z["timestamp"]), str(z["typhoon_id"])))
        out.sort(key=lambda p: (p.timestamp, p.typhoon_id))
        return out

    return ProcessedDataset(_load(ids["train"]), _load(ids["test"]), stats, seed,
                            int(meta["grid_size"]), meta.get("diagnostics", {}))
