"""
Dataset objects, raster ingestion in the on-disk event layout, windowing,
feature selection and normalization.

On-disk layout::

    <root>/schema.json
    <root>/<year>/<event_id>/<YYYY-MM-DD>.tif     (one multi-band raster per day)

Band order equals the channel schema order. Nodata is stored as NaN.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import rasterio
from rasterio.transform import from_origin

from . import config_store, event_log
from .errors import (
    ConfigError,
    DateFormatError,
    DuplicateDateError,
    EmptyEventError,
    FeatureLookupError,
    SchemaMismatchError,
    ShapeError,
)
from .utils_misc import date_from_name, day_of_year

GROUPS = ("vegetation", "topography", "weather", "landcover", "fire")
NAMED_FEATURE_SETS = ("Veg", "Multi", "All")
DEFAULT_RESOLUTION_M = 375.0
RASTER_SUFFIXES = (".tif", ".tiff")


@dataclass(frozen=True)
class ChannelSpec:
    """One raster band: name, feature group, and how it is treated."""
    name: str
    group: str
    categorical: bool = False
    units: str = ""
    forecast: bool = False

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ConfigError(f"channel {self.name!r}: unknown group {self.group!r}")

    @property
    def continuous(self) -> bool:
        return not self.categorical and self.group != "fire"

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ChannelSpec":
        return cls(
            name=str(data["name"]),
            group=str(data["group"]),
            categorical=bool(data.get("categorical", False)),
            units=str(data.get("units", "")),
            forecast=bool(data.get("forecast", False)),
        )


def validate_schema(schema: Sequence[ChannelSpec]) -> int:
    """
    Check name uniqueness and the single fire channel; return the fire index.
    """
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise ConfigError("channel names must be unique within a schema")
    fire = [i for i, c in enumerate(schema) if c.group == "fire"]
    if len(fire) != 1:
        raise ConfigError(f"schema must have exactly one fire channel, found {len(fire)}")
    return fire[0]


@dataclass
class FireEventCube:
    """One wildfire event: a day x channel x H x W raster stack plus metadata."""
    event_id: str
    year: int
    dates: List[dt.date]
    raster: np.ndarray
    channel_schema: List[ChannelSpec]
    fire_channel_index: int
    nodata_mask: Optional[np.ndarray] = None
    resolution_m: float = DEFAULT_RESOLUTION_M
    allow_gaps: bool = True

    def __post_init__(self):
        if self.raster.ndim != 4:
            raise ShapeError(f"raster must be D x C x H x W, got shape {self.raster.shape}")
        days, channels, height, width = self.raster.shape
        if len(self.dates) != days:
            raise ShapeError(f"{len(self.dates)} dates for {days} raster days")
        if channels != len(self.channel_schema):
            raise SchemaMismatchError(
                f"raster has {channels} channels, schema has {len(self.channel_schema)}"
            )
        if validate_schema(self.channel_schema) != self.fire_channel_index:
            raise ConfigError("fire_channel_index does not point at the fire channel")
        if height < 8 or width < 8 or height % 8 or width % 8:
            raise ShapeError(f"H and W must be >= 8 and divisible by 8, got {height}x{width}")
        for prev, cur in zip(self.dates, self.dates[1:]):
            if cur <= prev:
                raise DuplicateDateError(f"{self.event_id}: dates not strictly increasing at {cur}")
            if not self.allow_gaps and (cur - prev).days != 1:
                raise ConfigError(f"{self.event_id}: date gap between {prev} and {cur}")
        if self.nodata_mask is not None and self.nodata_mask.shape != (days, height, width):
            raise ShapeError("nodata_mask must be D x H x W")
        self.raster.flags.writeable = False
        if self.nodata_mask is not None:
            self.nodata_mask.flags.writeable = False

    @property
    def num_days(self) -> int:
        return self.raster.shape[0]

    @property
    def channel_names(self) -> List[str]:
        return [c.name for c in self.channel_schema]

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return self.raster.shape[2], self.raster.shape[3]

    def fire_masks(self) -> np.ndarray:
        """Binary fire masks (D x H x W), nodata counted as not burning."""
        fire = self.raster[:, self.fire_channel_index]
        return np.nan_to_num(fire, nan=0.0) > 0


@dataclass
class WindowSample:
    """A T-day input window and the next-day binary target."""
    event_id: str
    year: int
    target_date: dt.date
    inputs: np.ndarray
    target: np.ndarray
    valid: np.ndarray
    day_of_year: List[int]
    prevalence: float
    channels: Tuple[ChannelSpec, ...] = field(default_factory=tuple)

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def fire_channel_index(self) -> int:
        return next(i for i, c in enumerate(self.channels) if c.group == "fire")


@dataclass(frozen=True)
class FeatureSet:
    """A named, ordered subset of channel names."""
    name: str
    channel_names: Tuple[str, ...]

    @classmethod
    def named(cls, schema: Sequence[ChannelSpec], name: str) -> "FeatureSet":
        """
        Veg: vegetation + fire. Multi: every non-forecast channel. All: every channel.
        """
        if name == "Veg":
            keep = [c.name for c in schema if c.group in ("vegetation", "fire")]
        elif name == "Multi":
            keep = [c.name for c in schema if not c.forecast]
        elif name == "All":
            keep = [c.name for c in schema]
        else:
            raise ConfigError(f"unknown feature set {name!r}; expected one of {NAMED_FEATURE_SETS}")
        return cls(name, tuple(keep))

    @classmethod
    def custom(cls, names: Iterable[str]) -> "FeatureSet":
        return cls("custom", tuple(names))


def sample_key(sample: WindowSample) -> str:
    return f"{sample.event_id}@{sample.target_date.isoformat()}"


def fire_size(sample: WindowSample) -> int:
    """Number of burning target pixels."""
    return int(np.count_nonzero(sample.target[sample.valid]))


# =============================
# Schema sidecar
# =============================

def write_schema(root: Path, schema: Sequence[ChannelSpec], *, resolution_m: float = DEFAULT_RESOLUTION_M) -> Path:
    validate_schema(schema)
    document = {"resolution_m": resolution_m, "channels": [c.to_dict() for c in schema]}
    return config_store.save_document(document, Path(root) / "schema.json")


def load_schema(root: Path) -> List[ChannelSpec]:
    document = config_store.load_document(Path(root) / "schema.json")
    schema = [ChannelSpec.from_dict(entry) for entry in document.get("channels", [])]
    validate_schema(schema)
    return schema


# =============================
# Raster ingestion
# =============================

def _event_rasters(path: Path) -> List[Tuple[dt.date, Path]]:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in RASTER_SUFFIXES)
    dated: Dict[dt.date, Path] = {}
    for file in files:
        day = date_from_name(file.stem)
        if day is None:
            raise DateFormatError(f"{file.name}: filename does not encode a YYYY-MM-DD date")
        if day in dated:
            raise DuplicateDateError(f"{path.name}: {dated[day].name} and {file.name} share date {day}")
        dated[day] = file
    return sorted(dated.items())


def load_event(path: Path, schema: Sequence[ChannelSpec]) -> FireEventCube:
    """
    Read one event directory into a cube; the fire band is binarized at > 0.
    """
    path = Path(path)
    schema = list(schema)
    fire_index = validate_schema(schema)
    if not path.is_dir():
        raise EmptyEventError(f"{path}: not an event directory")
    days: List[dt.date] = []
    layers: List[np.ndarray] = []
    resolution = DEFAULT_RESOLUTION_M
    for day, file in _event_rasters(path):
        with rasterio.open(file) as src:
            if src.count != len(schema):
                raise SchemaMismatchError(
                    f"{file.name}: {src.count} bands, schema declares {len(schema)}"
                )
            data = src.read(out_dtype="float32")
            if src.nodata is not None and not np.isnan(src.nodata):
                data[data == np.float32(src.nodata)] = np.nan
            resolution = float(abs(src.transform.a)) or resolution
        days.append(day)
        layers.append(data)
    if not layers:
        raise EmptyEventError(f"{path}: no readable daily rasters")
    raster = np.stack(layers).astype(np.float32, copy=False)
    nodata = np.isnan(raster).any(axis=1)
    fire = raster[:, fire_index]
    raster[:, fire_index] = np.where(np.isnan(fire), np.nan, (fire > 0).astype(np.float32))
    year_name = path.parent.name
    year = int(year_name) if year_name.isdigit() else days[0].year
    return FireEventCube(
        event_id=path.name,
        year=year,
        dates=days,
        raster=raster,
        channel_schema=schema,
        fire_channel_index=fire_index,
        nodata_mask=nodata if nodata.any() else None,
        resolution_m=resolution,
    )


def write_event(cube: FireEventCube, root: Path) -> Path:
    """
    Write a cube as float32 GeoTIFFs under <root>/<year>/<event_id>/.
    """
    event_dir = Path(root) / str(cube.year) / cube.event_id
    event_dir.mkdir(parents=True, exist_ok=True)
    _, channels, height, width = cube.raster.shape
    transform = from_origin(0.0, height * cube.resolution_m, cube.resolution_m, cube.resolution_m)
    for day, layer in zip(cube.dates, cube.raster):
        with rasterio.open(
            event_dir / f"{day.isoformat()}.tif",
            "w",
            driver="GTiff",
            height=height,
            width=width,
            count=channels,
            dtype="float32",
            nodata=float("nan"),
            transform=transform,
        ) as dst:
            dst.write(layer.astype(np.float32, copy=False))
            for idx, spec in enumerate(cube.channel_schema, start=1):
                dst.set_band_description(idx, spec.name)
    return event_dir


def scan_dataset(root: Path) -> Dict[int, List[Path]]:
    """Map year -> sorted event directories."""
    index: Dict[int, List[Path]] = {}
    for year_dir in sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.isdigit()):
        events = sorted(p for p in year_dir.iterdir() if p.is_dir())
        if events:
            index[int(year_dir.name)] = events
    return index


def load_dataset(root: Path, years: Optional[Iterable[int]] = None) -> List[FireEventCube]:
    schema = load_schema(root)
    wanted = set(years) if years is not None else None
    cubes: List[FireEventCube] = []
    for year, events in scan_dataset(root).items():
        if wanted is not None and year not in wanted:
            continue
        cubes.extend(load_event(event, schema) for event in events)
    return cubes


# =============================
# Feature selection and windowing
# =============================

def select_features(cube: FireEventCube, features: FeatureSet) -> FireEventCube:
    """
    Restrict a cube to the requested channels in schema order; fire is always kept.
    """
    names = cube.channel_names
    unknown = [n for n in features.channel_names if n not in names]
    if unknown:
        raise FeatureLookupError(f"unknown channel(s): {', '.join(unknown)}")
    wanted = set(features.channel_names) | {names[cube.fire_channel_index]}
    keep = [i for i, n in enumerate(names) if n in wanted]
    if keep == list(range(len(names))):
        return cube
    schema = [cube.channel_schema[i] for i in keep]
    return FireEventCube(
        event_id=cube.event_id,
        year=cube.year,
        dates=list(cube.dates),
        raster=cube.raster[:, keep].copy(),
        channel_schema=schema,
        fire_channel_index=keep.index(cube.fire_channel_index),
        nodata_mask=cube.nodata_mask,
        resolution_m=cube.resolution_m,
        allow_gaps=cube.allow_gaps,
    )


def window_samples(cube: FireEventCube, T: int, features: FeatureSet) -> List[WindowSample]:
    """
    One sample per target day with T consecutive predecessors.
    Windows spanning a date gap, and fully-nodata targets, are dropped.
    """
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if T >= cube.num_days:
        return []
    sub = select_features(cube, features)
    fire = sub.fire_channel_index
    samples: List[WindowSample] = []
    for t in range(T, sub.num_days):
        if (sub.dates[t] - sub.dates[t - T]).days != T:
            continue
        fire_today = sub.raster[t, fire]
        valid = ~np.isnan(fire_today)
        if sub.nodata_mask is not None:
            valid &= ~sub.nodata_mask[t]
        if not valid.any():
            continue
        target = ((np.nan_to_num(fire_today, nan=0.0) > 0) & valid).astype(np.float32)
        samples.append(
            WindowSample(
                event_id=sub.event_id,
                year=sub.year,
                target_date=sub.dates[t],
                inputs=sub.raster[t - T : t].copy(),
                target=target,
                valid=valid,
                day_of_year=[day_of_year(d) for d in sub.dates[t - T : t]],
                prevalence=float(target[valid].mean()),
                channels=tuple(sub.channel_schema),
            )
        )
    return samples


def build_samples(cubes: Iterable[FireEventCube], T: int, features: str = "All") -> List[WindowSample]:
    """Window every cube with a named feature set (Veg, Multi, All) or a comma-separated channel list."""
    samples: List[WindowSample] = []
    for cube in cubes:
        if features in NAMED_FEATURE_SETS:
            feature_set = FeatureSet.named(cube.channel_schema, features)
        else:
            feature_set = FeatureSet.custom(n.strip() for n in features.split(",") if n.strip())
        samples.extend(window_samples(cube, T, feature_set))
    return samples


# =============================
# Normalization
# =============================

@dataclass
class ChannelStats:
    """Per-channel training mean/std; only continuous channels are used."""
    channel_names: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> Dict[str, object]:
        return {
            "channel_names": list(self.channel_names),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ChannelStats":
        return cls(
            tuple(data["channel_names"]),
            np.asarray(data["mean"], dtype=np.float64),
            np.asarray(data["std"], dtype=np.float64),
        )


def compute_stats(samples: Sequence[WindowSample]) -> ChannelStats:
    """
    Channel mean/std over every input day of the (training) samples, NaN ignored.
    """
    if not samples:
        raise ConfigError("cannot compute statistics from an empty sample list")
    channels = samples[0].channels
    total = np.zeros(len(channels))
    total_sq = np.zeros(len(channels))
    count = np.zeros(len(channels))
    for sample in samples:
        values = sample.inputs.astype(np.float64)
        finite = np.isfinite(values)
        filled = np.where(finite, values, 0.0)
        total += filled.sum(axis=(0, 2, 3))
        total_sq += (filled ** 2).sum(axis=(0, 2, 3))
        count += finite.sum(axis=(0, 2, 3))
    count = np.maximum(count, 1)
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    return ChannelStats(tuple(c.name for c in channels), mean, np.sqrt(var))


def normalize(samples: Sequence[WindowSample], stats: ChannelStats) -> List[WindowSample]:
    """
    Z-score continuous channels with training statistics; categorical and fire
    channels pass through. Nodata inputs become 0 after normalization.
    """
    if not samples:
        return []
    channels = samples[0].channels
    names = tuple(c.name for c in channels)
    if names != tuple(stats.channel_names):
        raise SchemaMismatchError(f"statistics cover {stats.channel_names}, samples have {names}")
    std = np.array(stats.std, dtype=np.float64)
    for idx, spec in enumerate(channels):
        if spec.continuous and std[idx] == 0:
            event_log.warn(f"channel {spec.name!r} has zero variance; using std=1", channel=spec.name)
            std[idx] = 1.0
    continuous = np.array([c.continuous for c in channels])
    mean = np.where(continuous, stats.mean, 0.0)
    scale = np.where(continuous, std, 1.0)
    mean = mean.reshape(1, -1, 1, 1)
    scale = scale.reshape(1, -1, 1, 1)
    out: List[WindowSample] = []
    for sample in samples:
        values = (sample.inputs.astype(np.float64) - mean) / scale
        values = np.nan_to_num(values, nan=0.0).astype(np.float32)
        out.append(dataclasses.replace(sample, inputs=values))
    return out
