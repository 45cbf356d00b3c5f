"""Reading ERA5 / Digital Typhoon containers and generating synthetic stand-ins.

Longitudes are held in the 0-360 convention everywhere inside the package;
files written with -180..180 longitudes are converted when read.

Container formats
-----------------
ERA5
    A NetCDF file (classic/64-bit offset, or NetCDF4/HDF5) with a time axis
    (``time`` or ``valid_time``), ``latitude``/``lat`` and ``longitude``/``lon``
    axes, and one ``(time, lat, lon)`` variable per short name (``u10``,
    ``v10``, ``sp``, ``t2m``). ``scale_factor``/``add_offset`` packing and
    ``_FillValue``/``missing_value`` are honoured.
Digital Typhoon
    A directory tree of HDF5 frames, ``<root>/<typhoon_id>/<stamp>.h5``. Each
    frame holds an ``Infrared`` 2-D dataset plus 1-D ``lat`` and ``lon``
    datasets, and ``timestamp`` (ISO 8601, UTC), ``typhoon_id`` and ``units``
    attributes.
"""

from __future__ import annotations

import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import h5py
import numpy as np
from scipy.io import netcdf_file

from .errors import DomainError, EmptyDatasetError, MissingVariableError

logger = logging.getLogger(__name__)

ERA5_VARIABLES = ("u10", "v10", "sp", "t2m")
SATELLITE = "satellite"
VARIABLES = ERA5_VARIABLES + (SATELLITE,)
UNITS = {"u10": "m s-1", "v10": "m s-1", "sp": "Pa", "t2m": "K", SATELLITE: "1"}

_LAT_NAMES = ("latitude", "lat")
_LON_NAMES = ("longitude", "lon")
_TIME_NAMES = ("time", "valid_time")
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_COORD_TOL = 1e-9


class Source(str, Enum):
    ERA5 = "ERA5"
    DIGITAL_TYPHOON = "DigitalTyphoon"


@dataclass(frozen=True)
class GeoWindow:
    """Latitude/longitude box; defaults to the +-5 degree box around Taiwan."""

    lat_min: float = 18.9037
    lat_max: float = 28.9037
    lon_min: float = 116.0794
    lon_max: float = 126.0794

    def __post_init__(self):
        lon_min, lon_max = self.lon_min, self.lon_max
        if not (-180.0 <= lon_min < 360.0 and -180.0 <= lon_max < 360.0):
            raise DomainError(f"longitudes out of range: {lon_min}, {lon_max}")
        object.__setattr__(self, "lon_min", float(lon_min % 360.0))
        object.__setattr__(self, "lon_max", float(lon_max % 360.0))
        if not (-90.0 <= self.lat_min < self.lat_max <= 90.0):
            raise DomainError(f"bad latitude bounds: {self.lat_min}, {self.lat_max}")
        if not self.lon_min < self.lon_max:
            raise DomainError(
                "lon_min must be < lon_max in 0-360 (windows crossing the 0 meridian are unsupported)"
            )

    @classmethod
    def parse(cls, text: str) -> "GeoWindow":
        """Parse ``"lat0,lat1,lon0,lon1"``."""
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected lat0,lat1,lon0,lon1, got {text!r}")
        return cls(*parts)

    def to_dict(self) -> dict:
        return {"lat_min": self.lat_min, "lat_max": self.lat_max,
                "lon_min": self.lon_min, "lon_max": self.lon_max}

    def lat_mask(self, lat):
        return (lat >= self.lat_min - _COORD_TOL) & (lat <= self.lat_max + _COORD_TOL)

    def lon_mask(self, lon):
        return (lon >= self.lon_min - _COORD_TOL) & (lon <= self.lon_max + _COORD_TOL)

    def contains(self, lat: float, lon: float) -> bool:
        return bool(self.lat_mask(np.asarray(lat)) and self.lon_mask(np.asarray(lon) % 360.0))


@dataclass(eq=False)
class RawRecord:
    timestamp: datetime
    source: Source
    variable: str
    grid: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    units: str = ""
    typhoon_id: str | None = None

    def __post_init__(self):
        self.source = Source(self.source)
        if self.variable not in VARIABLES:
            raise ValueError(f"unknown variable {self.variable!r}")
        self.timestamp = to_utc(self.timestamp)
        self.grid = np.asarray(self.grid)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError(f"grid must be 2-D, got shape {self.grid.shape}")
        if self.grid.shape != (self.lat.size, self.lon.size):
            raise ValueError(
                f"grid shape {self.grid.shape} does not match coordinates "
                f"({self.lat.size}, {self.lon.size})"
            )
        for name, axis in (("lat", self.lat), ("lon", self.lon)):
            if axis.size > 1 and not _strictly_monotonic(axis):
                raise ValueError(f"{name} coordinates are not strictly monotonic")
        if not self.units:
            self.units = UNITS[self.variable]

    @property
    def dirty(self) -> bool:
        """True if the grid holds NaN/Inf and still needs cleaning."""
        return not np.isfinite(self.grid).all()

    def __eq__(self, other):
        if not isinstance(other, RawRecord):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.source == other.source
            and self.variable == other.variable
            and self.units == other.units
            and self.typhoon_id == other.typhoon_id
            and np.array_equal(self.lat, other.lat)
            and np.array_equal(self.lon, other.lon)
            and np.array_equal(self.grid, other.grid, equal_nan=True)
        )

    def __repr__(self):
        return (f"RawRecord({self.timestamp.isoformat()}, {self.source.value}, {self.variable}, "
                f"shape={self.grid.shape}, typhoon_id={self.typhoon_id!r})")


@dataclass
class DTDiagnostics:
    n_files: int = 0
    n_outside: int = 0
    skipped: list = field(default_factory=list)

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)


def to_utc(ts) -> datetime:
    if isinstance(ts, np.datetime64):
        ts = datetime.fromtimestamp(
            ts.astype("datetime64[us]").astype(np.int64) / 1e6, tz=timezone.utc)
    if isinstance(ts, str):
        ts = datetime.fromisoformat(ts.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def _strictly_monotonic(a: np.ndarray) -> bool:
    d = np.diff(a)
    return bool(np.all(d > 0) or np.all(d < 0))


def crop(record: RawRecord, window: GeoWindow) -> RawRecord | None:
    """Restrict a record to ``window``; ``None`` if nothing is left."""
    lat_keep = window.lat_mask(record.lat)
    lon_keep = window.lon_mask(record.lon % 360.0)
    if not lat_keep.any() or not lon_keep.any():
        return None
    return RawRecord(
        timestamp=record.timestamp,
        source=record.source,
        variable=record.variable,
        grid=record.grid[np.ix_(lat_keep, lon_keep)],
        lat=record.lat[lat_keep],
        lon=record.lon[lon_keep],
        units=record.units,
        typhoon_id=record.typhoon_id,
    )


# --------------------------------------------------------------------------- ERA5

def _sniff(path: Path) -> str:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
    except OSError as exc:
        raise OSError(f"cannot open {path}: {exc}") from exc
    if magic[:3] == b"CDF":
        return "netcdf3"
    if magic == b"\x89HDF\r\n\x1a\n":
        return "hdf5"
    raise OSError(f"{path} is not a NetCDF or HDF5 container")


def _decode(value):
    if isinstance(value, bytes):
        return value.decode()
    if isinstance(value, np.ndarray) and value.size == 1:
        return value.item()
    return value


def _read_container(path: Path) -> dict[str, tuple[np.ndarray, dict]]:
    kind = _sniff(path)
    out = {}
    try:
        if kind == "netcdf3":
            with netcdf_file(path, "r", mmap=False) as nc:
                for name, var in nc.variables.items():
                    attrs = {k: _decode(v) for k, v in var._attributes.items()}
                    data = np.array(var.data)
                    out[name] = (data.astype(data.dtype.newbyteorder("=")), attrs)
        else:
            with h5py.File(path, "r") as h5:
                for name, ds in h5.items():
                    if isinstance(ds, h5py.Dataset):
                        attrs = {k: _decode(v) for k, v in ds.attrs.items()}
                        out[name] = (np.array(ds[()]), attrs)
    except OSError:
        raise
    except Exception as exc:  # scipy/h5py raise assorted types on damaged files
        raise OSError(f"corrupt container {path}: {exc}") from exc
    return out


def _unpack(data: np.ndarray, attrs: dict) -> np.ndarray:
    data = np.asarray(data)
    mask = np.zeros(data.shape, dtype=bool)
    for key in ("_FillValue", "missing_value"):
        if key in attrs:
            mask |= data == attrs[key]
    scale = attrs.get("scale_factor")
    offset = attrs.get("add_offset")
    if scale is not None or offset is not None or mask.any():
        data = data.astype(np.float64)
        if scale is not None:
            data = data * scale
        if offset is not None:
            data = data + offset
        data[mask] = np.nan
    return data


_UNITS_RE = re.compile(r"^\s*(\w+)\s+since\s+(\d{4})-(\d{1,2})-(\d{1,2})"
                       r"(?:[ T](\d{1,2}):(\d{1,2})(?::(\d{1,2})(?:\.\d*)?)?)?")
_UNIT_SECONDS = {"seconds": 1, "second": 1, "minutes": 60, "minute": 60,
                 "hours": 3600, "hour": 3600, "days": 86400, "day": 86400}


def decode_times(values: np.ndarray, units: str) -> list[datetime]:
    m = _UNITS_RE.match(units or "")
    if not m or m.group(1) not in _UNIT_SECONDS:
        raise OSError(f"unsupported time units {units!r}")
    parts = [int(g) if g else 0 for g in m.groups()[1:]]
    origin = datetime(*parts, tzinfo=timezone.utc)
    step = _UNIT_SECONDS[m.group(1)]
    return [origin + timedelta(seconds=float(v) * step) for v in np.asarray(values).ravel()]


def _pick(names, available, what, path):
    for n in names:
        if n in available:
            return n
    raise OSError(f"{path}: no {what} axis (looked for {', '.join(names)})")


def _check_coverage(axis: np.ndarray, lo: float, hi: float, what: str, path):
    step = np.abs(np.diff(axis)).max() if axis.size > 1 else 0.0
    if lo < axis.min() - step - _COORD_TOL or hi > axis.max() + step + _COORD_TOL:
        raise DomainError(
            f"{path}: window {what} [{lo}, {hi}] outside file extent "
            f"[{axis.min()}, {axis.max()}]"
        )


def read_era5(path, window: GeoWindow | None = None,
              variables: Iterable[str] = ERA5_VARIABLES) -> list[RawRecord]:
    """Read the requested ERA5 variables from one file, cropped to ``window``.

    Returns one record per (timestamp, variable), sorted by timestamp and then
    by the fixed channel order.
    """
    path = Path(path)
    window = window or GeoWindow()
    variables = [v for v in ERA5_VARIABLES if v in set(variables)]
    unknown = set(variables) - set(ERA5_VARIABLES)
    if unknown:
        raise ValueError(f"not ERA5 variables: {sorted(unknown)}")

    content = _read_container(path)
    lat_name = _pick(_LAT_NAMES, content, "latitude", path)
    lon_name = _pick(_LON_NAMES, content, "longitude", path)
    time_name = _pick(_TIME_NAMES, content, "time", path)
    for v in variables:
        if v not in content:
            raise MissingVariableError(v, path)

    lat = np.asarray(content[lat_name][0], dtype=np.float64)
    lon = np.asarray(content[lon_name][0], dtype=np.float64) % 360.0
    times = decode_times(*_time_args(content[time_name]))

    lat_order = np.argsort(lat)
    lon_order = np.argsort(lon)
    lat, lon = lat[lat_order], lon[lon_order]
    _check_coverage(lat, window.lat_min, window.lat_max, "latitude", path)
    _check_coverage(lon, window.lon_min, window.lon_max, "longitude", path)
    lat_keep = window.lat_mask(lat)
    lon_keep = window.lon_mask(lon)
    if lat_keep.sum() < 1 or lon_keep.sum() < 1:
        raise DomainError(f"{path}: window contains no grid points")

    records = []
    for v in variables:
        data, attrs = content[v]
        data = _unpack(data, attrs)
        if data.ndim != 3 or data.shape[0] != len(times):
            raise OSError(f"{path}: variable {v} has shape {data.shape}, expected (time, lat, lon)")
        data = data[:, lat_order][:, :, lon_order]
        data = data[:, lat_keep][:, :, lon_keep]
        units = str(attrs.get("units", UNITS[v]))
        for i, ts in enumerate(times):
            records.append(RawRecord(ts, Source.ERA5, v, data[i].copy(),
                                     lat[lat_keep], lon[lon_keep], units))
    order = {v: i for i, v in enumerate(ERA5_VARIABLES)}
    records.sort(key=lambda r: (r.timestamp, order[r.variable]))
    return records


def _time_args(entry):
    values, attrs = entry
    return values, str(attrs.get("units", ""))


def read_era5_dir(directory, window: GeoWindow | None = None,
                  variables: Iterable[str] = ERA5_VARIABLES) -> list[RawRecord]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix in (".nc", ".nc4", ".h5"))
    if not files:
        raise EmptyDatasetError(f"no ERA5 files in {directory}")
    records = []
    for f in files:
        records.extend(read_era5(f, window, variables))
    order = {v: i for i, v in enumerate(ERA5_VARIABLES)}
    records.sort(key=lambda r: (r.timestamp, order[r.variable]))
    return records


# ----------------------------------------------------------------- Digital Typhoon

def _frame_selected(lat, lon, window: GeoWindow, predicate: str) -> bool:
    if predicate == "intersects":
        return bool(window.lat_mask(lat).any() and window.lon_mask(lon).any())
    if predicate == "center":
        return window.contains(0.5 * (lat.min() + lat.max()), 0.5 * (lon.min() + lon.max()))
    raise ValueError(f"unknown frame predicate {predicate!r}")


def read_digital_typhoon(path, window: GeoWindow | None = None,
                         predicate: str = "intersects") -> tuple[list[RawRecord], DTDiagnostics]:
    """Read every HDF5 frame below ``path``, cropped to ``window``.

    ``predicate`` decides which frames belong to the region: ``"intersects"``
    keeps any frame overlapping the window, ``"center"`` only frames whose
    centre falls inside it. Unreadable frames are skipped with a warning and
    listed in the returned diagnostics.
    """
    path = Path(path)
    window = window or GeoWindow()
    files = sorted(path.rglob("*.h5")) if path.is_dir() else []
    diag = DTDiagnostics(n_files=len(files))
    records = []
    for f in files:
        try:
            with h5py.File(f, "r") as h5:
                grid = np.array(h5["Infrared"][()])
                lat = np.array(h5["lat"][()], dtype=np.float64)
                lon = np.array(h5["lon"][()], dtype=np.float64) % 360.0
                ts = to_utc(str(_decode(h5.attrs["timestamp"])))
                tid = str(_decode(h5.attrs.get("typhoon_id", f.parent.name)))
                units = str(_decode(h5.attrs.get("units", UNITS[SATELLITE])))
            rec = RawRecord(ts, Source.DIGITAL_TYPHOON, SATELLITE, grid, lat, lon, units, tid)
        except Exception as exc:
            warnings.warn(f"skipping unreadable frame {f}: {exc}", stacklevel=2)
            diag.skipped.append((str(f), str(exc)))
            continue
        if not _frame_selected(rec.lat, rec.lon, window, predicate):
            diag.n_outside += 1
            continue
        cropped = crop(rec, window)
        if cropped is None:
            diag.n_outside += 1
            continue
        records.append(cropped)
    if not records:
        raise EmptyDatasetError(f"no usable Digital Typhoon frames under {path}")
    records.sort(key=lambda r: (r.timestamp, r.typhoon_id))
    return records, diag


# ------------------------------------------------------------------------ writing

def _stamp(ts: datetime) -> str:
    return ts.strftime("%Y%m%dT%H%M%SZ")


def write_fixture(records: Sequence[RawRecord], path) -> None:
    """Persist records in the container format their reader expects.

    ERA5 records go to one NetCDF file at ``path``; satellite records go to a
    Digital Typhoon tree rooted at directory ``path``.
    """
    records = list(records)
    if not records:
        raise ValueError("write_fixture needs at least one record")
    sources = {r.source for r in records}
    if len(sources) != 1:
        raise ValueError("cannot mix ERA5 and Digital Typhoon records in one fixture")
    if sources.pop() is Source.ERA5:
        _write_era5(records, Path(path))
    else:
        _write_dt(records, Path(path))


def _write_era5(records: list[RawRecord], path: Path) -> None:
    lat, lon = records[0].lat, records[0].lon
    for r in records:
        if not (np.array_equal(r.lat, lat) and np.array_equal(r.lon, lon)):
            raise ValueError("ERA5 records must share coordinate axes")
    times = sorted({r.timestamp for r in records})
    variables = [v for v in ERA5_VARIABLES if any(r.variable == v for r in records)]
    index = {(r.timestamp, r.variable): r for r in records}
    if len(index) != len(records):
        raise ValueError("duplicate (timestamp, variable) records")
    if len(index) != len(times) * len(variables):
        raise ValueError("ERA5 fixture needs every variable at every timestamp")

    try:
        nc = netcdf_file(path, "w", version=2)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    with nc:
        nc.createDimension("time", len(times))
        nc.createDimension("latitude", lat.size)
        nc.createDimension("longitude", lon.size)
        t = nc.createVariable("time", "d", ("time",))
        t[:] = [(ts - _EPOCH).total_seconds() for ts in times]
        t.units = "seconds since 1970-01-01 00:00:00"
        la = nc.createVariable("latitude", "d", ("latitude",))
        la[:] = lat
        la.units = "degrees_north"
        lo = nc.createVariable("longitude", "d", ("longitude",))
        lo[:] = lon
        lo.units = "degrees_east"
        for v in variables:
            var = nc.createVariable(v, "d", ("time", "latitude", "longitude"))
            var[:] = np.stack([index[(ts, v)].grid for ts in times]).astype(np.float64)
            var.units = index[(times[0], v)].units


def _write_dt(records: list[RawRecord], root: Path) -> None:
    for r in records:
        tid = r.typhoon_id or "unknown"
        target = root / tid
        target.mkdir(parents=True, exist_ok=True)
        with h5py.File(target / f"{_stamp(r.timestamp)}-{tid}.h5", "w") as h5:
            h5.create_dataset("Infrared", data=r.grid)
            h5.create_dataset("lat", data=r.lat)
            h5.create_dataset("lon", data=r.lon)
            h5.attrs["timestamp"] = r.timestamp.isoformat()
            h5.attrs["typhoon_id"] = tid
            h5.attrs["units"] = r.units


# ------------------------------------------------------------------ dataset dirs

DATASET_FORMAT = "typhoon-cddpm-dataset"
DATASET_VERSION = 1


def _record_key(r: RawRecord) -> str:
    return f"{SATELLITE}@{r.typhoon_id}" if r.variable == SATELLITE else r.variable


def save_dataset(records: Sequence[RawRecord], out_dir, window: GeoWindow | None = None) -> Path:
    """Write records as ``samples/<stamp>.npz`` plus ``manifest.json``.

    Each npz holds, for every record at that timestamp, the grid under its key
    (``u10``, ..., or ``satellite@<typhoon_id>``) and coordinates under
    ``<key>.lat`` / ``<key>.lon``.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to save")
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    by_time: dict[datetime, list[RawRecord]] = {}
    for r in records:
        by_time.setdefault(r.timestamp, []).append(r)

    entries, shapes = [], {}
    for ts in sorted(by_time):
        arrays = {}
        for r in by_time[ts]:
            key = _record_key(r)
            if key in arrays:
                raise ValueError(f"duplicate record {key} at {ts.isoformat()}")
            arrays[key] = r.grid
            arrays[f"{key}.lat"] = r.lat
            arrays[f"{key}.lon"] = r.lon
            shapes[r.variable] = list(r.grid.shape)
        rel = f"samples/{_stamp(ts)}.npz"
        np.savez(out_dir / rel, **arrays)
        entries.append({
            "timestamp": ts.isoformat(),
            "file": rel,
            "variables": sorted({r.variable for r in by_time[ts]}, key=VARIABLES.index),
            "typhoon_ids": sorted({r.typhoon_id for r in by_time[ts] if r.typhoon_id}),
        })
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "lon_convention": "0-360",
        "window": (window or GeoWindow()).to_dict(),
        "grid_shape": shapes,
        "units": {r.variable: r.units for r in records},
        "samples": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir


def load_dataset(directory) -> list[RawRecord]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise OSError(f"{directory} is not a dataset directory")
    units = manifest.get("units", {})
    records = []
    for entry in manifest["samples"]:
        ts = to_utc(entry["timestamp"])
        with np.load(directory / entry["file"]) as npz:
            for key in npz.files:
                if key.endswith(".lat") or key.endswith(".lon"):
                    continue
                if key.startswith(f"{SATELLITE}@"):
                    variable, tid, source = SATELLITE, key.split("@", 1)[1], Source.DIGITAL_TYPHOON
                else:
                    variable, tid, source = key, None, Source.ERA5
                records.append(RawRecord(ts, source, variable, npz[key], npz[f"{key}.lat"],
                                         npz[f"{key}.lon"], units.get(variable, ""), tid))
    return records


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticVortex:
    timestamp: datetime
    typhoon_id: str
    center_lat: float
    center_lon: float
    rmw: float          # radius of maximum wind, degrees
    vmax: float         # m s-1
    pressure_drop: float  # Pa
    phase: float


def synth_vortices(n_samples: int, grid_size: int, seed: int,
                   window: GeoWindow | None = None, frames_per_typhoon: int = 5,
                   start: datetime = datetime(2022, 9, 1, tzinfo=timezone.utc)) -> list[SyntheticVortex]:
    """Vortex parameters behind :func:`synth_dataset`, one per sample.

    Centres are snapped to grid nodes so the vortex axis is sampled exactly.
    Frames of one typhoon are one hour apart; typhoons start a day apart.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if grid_size < 8:
        raise ValueError("grid_size must be >= 8")
    window = window or GeoWindow()
    rng = np.random.default_rng(seed)
    lat = np.linspace(window.lat_min, window.lat_max, grid_size)
    lon = np.linspace(window.lon_min, window.lon_max, grid_size)
    lat_span = window.lat_max - window.lat_min
    lon_span = window.lon_max - window.lon_min

    out = []
    n_typhoons = -(-n_samples // frames_per_typhoon)
    for k in range(n_typhoons):
        tid = f"SYN{k:04d}"
        c_lat = window.lat_min + lat_span * rng.uniform(0.3, 0.7)
        c_lon = window.lon_min + lon_span * rng.uniform(0.3, 0.7)
        d_lat, d_lon = rng.uniform(0.0, 0.15), rng.uniform(-0.2, 0.0)
        vmax = rng.uniform(20.0, 55.0)
        rmw = rng.uniform(0.6, 1.2)
        drop = 1500.0 + 90.0 * (vmax - 20.0) + rng.uniform(-200.0, 200.0)
        phase = rng.uniform(0, 2 * np.pi)
        t0 = start + timedelta(days=k)
        for j in range(min(frames_per_typhoon, n_samples - len(out))):
            cl = np.clip(c_lat + d_lat * j, window.lat_min + 0.25 * lat_span, window.lat_max - 0.25 * lat_span)
            cn = np.clip(c_lon + d_lon * j, window.lon_min + 0.25 * lon_span, window.lon_max - 0.25 * lon_span)
            cl = lat[np.abs(lat - cl).argmin()]
            cn = lon[np.abs(lon - cn).argmin()]
            out.append(SyntheticVortex(t0 + timedelta(hours=j), tid, float(cl), float(cn), float(rmw),
                                       float(vmax * (1 + 0.02 * j)), float(drop * (1 + 0.02 * j)),
                                       float(phase + 0.3 * j)))
    return out


def vortex_fields(v: SyntheticVortex, lat: np.ndarray, lon: np.ndarray,
                  window: GeoWindow, noise: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Analytic fields of one vortex on the (lat, lon) grid."""
    LON, LAT = np.meshgrid(lon, lat)
    dx = LON - v.center_lon
    dy = LAT - v.center_lat
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)

    # Rankine profile: solid-body core, 1/r decay outside.
    vt = np.where(r < v.rmw, v.vmax * r / v.rmw, v.vmax * v.rmw / np.maximum(r, 1e-12))
    with np.errstate(invalid="ignore", divide="ignore"):
        u10 = np.where(r > 0, -vt * dy / r, 0.0)
        v10 = np.where(r > 0, vt * dx / r, 0.0)

    rp = 2.0 * v.rmw
    frac_lat = (LAT - window.lat_min) / (window.lat_max - window.lat_min)
    sp = 101000.0 + 60.0 * frac_lat - v.pressure_drop * np.exp(-0.5 * (r / rp) ** 2)

    hour = v.timestamp.hour + v.timestamp.minute / 60.0
    t2m = (302.0 - 4.0 * frac_lat + 1.2 * np.sin(2 * np.pi * (hour - 9.0) / 24.0)
           + 1.0 * np.exp(-0.5 * (r / v.rmw) ** 2))

    amp = 0.45 + 0.5 * (v.vmax - 20.0) / 40.0
    bands = 0.75 + 0.25 * np.cos(2.0 * theta - 2.5 * r + v.phase)
    eye = 1.0 - 0.8 * np.exp(-((r / (0.35 * v.rmw)) ** 2))
    sat = amp * np.exp(-((r / (3.0 * v.rmw)) ** 2)) * bands * eye
    if noise is not None:
        sat = sat + noise
    return {"u10": u10, "v10": v10, "sp": sp, "t2m": t2m, SATELLITE: np.clip(sat, 0.0, 1.0)}


def synth_dataset(n_samples: int, grid_size: int, seed: int,
                  window: GeoWindow | None = None, frames_per_typhoon: int = 5) -> list[RawRecord]:
    """Deterministic typhoon-like samples: a satellite frame plus four ERA5 fields each."""
    window = window or GeoWindow()
    vortices = synth_vortices(n_samples, grid_size, seed, window, frames_per_typhoon)
    lat = np.linspace(window.lat_min, window.lat_max, grid_size)
    lon = np.linspace(window.lon_min, window.lon_max, grid_size)
    noise_rng = np.random.default_rng([seed, 1])
    records = []
    for v in vortices:
        fields = vortex_fields(v, lat, lon, window, noise_rng.normal(0.0, 0.01, (grid_size, grid_size)))
        for name in ERA5_VARIABLES:
            records.append(RawRecord(v.timestamp, Source.ERA5, name, fields[name], lat, lon))
        records.append(RawRecord(v.timestamp, Source.DIGITAL_TYPHOON, SATELLITE, fields[SATELLITE],
                                 lat, lon, typhoon_id=v.typhoon_id))
    return records


def validate_records(records: Sequence[RawRecord], require_clean: bool = True) -> None:
    """Schema check shared by ingested and synthetic data."""
    for r in records:
        if not isinstance(r, RawRecord):
            raise TypeError(f"not a RawRecord: {r!r}")
        if r.source is Source.ERA5 and r.variable not in ERA5_VARIABLES:
            raise ValueError(f"ERA5 record with variable {r.variable}")
        if r.source is Source.DIGITAL_TYPHOON and r.variable != SATELLITE:
            raise ValueError(f"Digital Typhoon record with variable {r.variable}")
        if r.source is Source.DIGITAL_TYPHOON and not r.typhoon_id:
            raise ValueError("satellite record without typhoon_id")
        if require_clean and r.dirty:
            raise ValueError(f"non-finite values in {r!r}")
        if r.timestamp.tzinfo is None:
            raise ValueError("naive timestamp")
