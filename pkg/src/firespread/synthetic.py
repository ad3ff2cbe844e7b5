"""
Synthetic multi-year fire datasets from a stochastic cellular automaton.

A non-burning cell with at least one burning neighbour ignites the next day with
probability

    sigmoid(b + s * (w_veg*veg - w_moist*moisture + w_wind*align + w_nb*n_burning))

where `align` is the mean projection of the local wind onto the unit vectors
pointing from burning neighbours to the cell and `s` is the year's concept shift.
Burning cells extinguish after `burn_days` days and never re-ignite.
Covariate shift rescales/offsets the latent channel fields of a year.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.ndimage import convolve, gaussian_filter
from scipy.special import expit

from . import config_store
from .core_data import ChannelSpec, FireEventCube, WindowSample, validate_schema, write_event, write_schema
from .errors import ConfigError
from .scheduler import run_jobs
from .utils_misc import derive_seed

REQUIRED_CHANNELS = ("wind_u", "wind_v", "vegetation", "moisture", "elevation", "landcover", "fire")
LANDCOVER_EDGES = (-0.7, 0.0, 0.7)

_NEIGHBOURS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
_KERNEL = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=np.float64)


def default_schema() -> List[ChannelSpec]:
    return [
        ChannelSpec("wind_u", "weather", units="m/s"),
        ChannelSpec("wind_v", "weather", units="m/s"),
        ChannelSpec("vegetation", "vegetation", units="index"),
        ChannelSpec("moisture", "weather", units="index"),
        ChannelSpec("elevation", "topography", units="m/100"),
        ChannelSpec("landcover", "landcover", categorical=True, units="class"),
        ChannelSpec("fire", "fire", units="binary"),
    ]


@dataclass(frozen=True)
class CACoefficients:
    bias: float = -3.0
    w_veg: float = 1.0
    w_moist: float = 1.0
    w_wind: float = 1.0
    w_nb: float = 0.9

    def scaled(self, factor: float) -> "CACoefficients":
        """Concept shift: scale the weights, keep the bias."""
        return CACoefficients(
            self.bias, self.w_veg * factor, self.w_moist * factor, self.w_wind * factor, self.w_nb * factor
        )


@dataclass
class SynthYearSpec:
    year_label: int
    covariate_shift: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    concept_shift: float = 1.0
    ignition_rate: float = 3.0

    def __post_init__(self):
        if not self.concept_shift > 0:
            raise ConfigError(f"year {self.year_label}: concept_shift must be > 0, got {self.concept_shift}")
        if self.ignition_rate < 0:
            raise ConfigError(f"year {self.year_label}: ignition_rate must be >= 0")
        for name, (_, scale) in self.covariate_shift.items():
            if not scale > 0:
                raise ConfigError(f"year {self.year_label}: covariate scale for {name!r} must be > 0")

    def shift_for(self, channel: str) -> Tuple[float, float]:
        offset, scale = self.covariate_shift.get(channel, (0.0, 1.0))
        return float(offset), float(scale)


@dataclass
class SynthConfig:
    seed: int
    years: List[SynthYearSpec]
    events_per_year: int = 20
    H: int = 64
    W: int = 64
    max_days: int = 12
    schema: List[ChannelSpec] = field(default_factory=default_schema)
    burn_days: int = 3
    coefficients: CACoefficients = field(default_factory=CACoefficients)
    field_sigma: float = 4.0

    def __post_init__(self):
        if not self.years:
            raise ConfigError("at least one year is required")
        if self.events_per_year < 1:
            raise ConfigError("events_per_year must be >= 1")
        if self.max_days < 2:
            raise ConfigError("max_days must be >= 2")
        if self.H < 8 or self.W < 8 or self.H % 8 or self.W % 8:
            raise ConfigError("H and W must be >= 8 and divisible by 8")
        if self.burn_days < 1:
            raise ConfigError("burn_days must be >= 1")
        validate_schema(self.schema)
        missing = [c for c in REQUIRED_CHANNELS if c not in {s.name for s in self.schema}]
        if missing:
            raise ConfigError(f"schema is missing synthetic channel(s): {', '.join(missing)}")
        labels = [y.year_label for y in self.years]
        if len(set(labels)) != len(labels):
            raise ConfigError("year labels must be unique")

    def to_dict(self) -> Dict[str, object]:
        return {
            "seed": self.seed,
            "events_per_year": self.events_per_year,
            "H": self.H,
            "W": self.W,
            "max_days": self.max_days,
            "burn_days": self.burn_days,
            "field_sigma": self.field_sigma,
            "coefficients": dataclasses.asdict(self.coefficients),
            "schema": [c.to_dict() for c in self.schema],
            "years": [
                {
                    "year_label": y.year_label,
                    "covariate_shift": {k: list(v) for k, v in sorted(y.covariate_shift.items())},
                    "concept_shift": y.concept_shift,
                    "ignition_rate": y.ignition_rate,
                }
                for y in self.years
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "SynthConfig":
        years = [
            SynthYearSpec(
                year_label=int(y["year_label"]),
                covariate_shift={k: (float(v[0]), float(v[1])) for k, v in y.get("covariate_shift", {}).items()},
                concept_shift=float(y.get("concept_shift", 1.0)),
                ignition_rate=float(y.get("ignition_rate", 3.0)),
            )
            for y in data["years"]
        ]
        schema = [ChannelSpec.from_dict(c) for c in data["schema"]] if data.get("schema") else default_schema()
        coefficients = CACoefficients(**data["coefficients"]) if data.get("coefficients") else CACoefficients()
        return cls(
            seed=int(data["seed"]),
            years=years,
            events_per_year=int(data.get("events_per_year", 20)),
            H=int(data.get("H", 64)),
            W=int(data.get("W", 64)),
            max_days=int(data.get("max_days", 12)),
            schema=schema,
            burn_days=int(data.get("burn_days", 3)),
            coefficients=coefficients,
            field_sigma=float(data.get("field_sigma", 4.0)),
        )


def load_synth_config(path: Path) -> SynthConfig:
    return SynthConfig.from_dict(config_store.load_document(path))


# =============================
# Cellular automaton
# =============================

def _shifted(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[i, j] = arr[i - dy, j - dx], zero outside the grid."""
    height, width = arr.shape
    out = np.zeros_like(arr)
    out[max(dy, 0) : height + min(dy, 0), max(dx, 0) : width + min(dx, 0)] = arr[
        max(-dy, 0) : height - max(dy, 0), max(-dx, 0) : width - max(dx, 0)
    ]
    return out


class FireAutomaton:
    """
    Burn state per cell: 0 unburnt, 1..burn_days burning (age), -1 extinguished.
    """

    def __init__(self, shape: Tuple[int, int], coefficients: CACoefficients, burn_days: int = 3):
        self.state = np.zeros(shape, dtype=np.int16)
        self.coefficients = coefficients
        self.burn_days = burn_days

    @property
    def burning(self) -> np.ndarray:
        return self.state > 0

    @property
    def extinguished(self) -> np.ndarray:
        return self.state < 0

    def ignite(self, cells: Sequence[Tuple[int, int]]) -> None:
        for row, col in cells:
            if self.state[row, col] == 0:
                self.state[row, col] = 1

    def spread_probability(
        self, vegetation: np.ndarray, moisture: np.ndarray, wind_u: np.ndarray, wind_v: np.ndarray
    ) -> np.ndarray:
        coef = self.coefficients
        burning = self.burning.astype(np.float64)
        count = convolve(burning, _KERNEL, mode="constant", cval=0.0)
        align = np.zeros_like(burning)
        for dy, dx in _NEIGHBOURS:
            # neighbour at (i - dy, j - dx); direction neighbour -> cell is (dy, dx)
            norm = np.hypot(dx, dy)
            align += _shifted(burning, dy, dx) * (wind_u * dx + wind_v * dy) / norm
        align = np.divide(align, count, out=np.zeros_like(align), where=count > 0)
        logit = coef.bias + (
            coef.w_veg * vegetation - coef.w_moist * moisture + coef.w_wind * align + coef.w_nb * count
        )
        prob = expit(logit)
        return np.where((count > 0) & (self.state == 0), prob, 0.0)

    def step(
        self,
        rng: np.random.Generator,
        vegetation: np.ndarray,
        moisture: np.ndarray,
        wind_u: np.ndarray,
        wind_v: np.ndarray,
    ) -> np.ndarray:
        """Advance one day; return the new burning mask."""
        prob = self.spread_probability(vegetation, moisture, wind_u, wind_v)
        ignite = rng.random(self.state.shape) < prob
        burning = self.state > 0
        self.state[burning] += 1
        self.state[self.state > self.burn_days] = -1
        self.state[ignite] = 1
        return self.burning


# =============================
# Field generation
# =============================

def smooth_field(rng: np.random.Generator, shape: Tuple[int, int], sigma: float) -> np.ndarray:
    """Low-pass filtered noise standardized to zero mean, unit std."""
    noise = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    std = noise.std()
    return (noise - noise.mean()) / (std if std > 0 else 1.0)


def _event_fields(rng: np.random.Generator, config: SynthConfig, year: SynthYearSpec, days: int) -> Dict[str, np.ndarray]:
    shape = (config.H, config.W)
    sigma = config.field_sigma

    def shifted(name: str, values: np.ndarray) -> np.ndarray:
        offset, scale = year.shift_for(name)
        return values * scale + offset

    vegetation = shifted("vegetation", smooth_field(rng, shape, sigma))
    elevation = shifted("elevation", smooth_field(rng, shape, sigma * 2))
    landcover_latent = shifted("landcover", smooth_field(rng, shape, sigma))
    landcover = (np.digitize(landcover_latent, LANDCOVER_EDGES) + 1).astype(np.float64)
    moisture_base = smooth_field(rng, shape, sigma)
    base_u, base_v = rng.normal(0.0, 1.0, size=2)
    wind_u = np.empty((days,) + shape)
    wind_v = np.empty((days,) + shape)
    moisture = np.empty((days,) + shape)
    for day in range(days):
        wind_u[day] = shifted("wind_u", base_u + rng.normal(0.0, 0.3) + 0.2 * smooth_field(rng, shape, sigma))
        wind_v[day] = shifted("wind_v", base_v + rng.normal(0.0, 0.3) + 0.2 * smooth_field(rng, shape, sigma))
        moisture[day] = shifted("moisture", moisture_base + rng.normal(0.0, 0.2))
    return {
        "vegetation": vegetation,
        "elevation": elevation,
        "landcover": landcover,
        "moisture": moisture,
        "wind_u": wind_u,
        "wind_v": wind_v,
    }


def simulate_event(config: SynthConfig, year: SynthYearSpec, index: int) -> FireEventCube:
    """Generate one event deterministically from (seed, year, index)."""
    rng = np.random.default_rng(derive_seed(config.seed, year.year_label, index))
    days = config.max_days
    fields = _event_fields(rng, config, year, days)
    automaton = FireAutomaton((config.H, config.W), config.coefficients.scaled(year.concept_shift), config.burn_days)
    n_ignitions = int(rng.poisson(year.ignition_rate)) if year.ignition_rate > 0 else 0
    cells = [(int(rng.integers(config.H)), int(rng.integers(config.W))) for _ in range(n_ignitions)]
    automaton.ignite(cells)

    masks = np.zeros((days, config.H, config.W), dtype=np.float32)
    masks[0] = automaton.burning
    for day in range(1, days):
        masks[day] = automaton.step(
            rng,
            fields["vegetation"],
            fields["moisture"][day - 1],
            fields["wind_u"][day - 1],
            fields["wind_v"][day - 1],
        )

    layers = {
        "wind_u": fields["wind_u"],
        "wind_v": fields["wind_v"],
        "moisture": fields["moisture"],
        "vegetation": np.broadcast_to(fields["vegetation"], masks.shape),
        "elevation": np.broadcast_to(fields["elevation"], masks.shape),
        "landcover": np.broadcast_to(fields["landcover"], masks.shape),
        "fire": masks,
    }
    raster = np.stack([layers[c.name] if c.name in layers else np.zeros(masks.shape) for c in config.schema], axis=1)
    start = dt.date(year.year_label, 1, 1) + dt.timedelta(days=int(rng.integers(150, 270)))
    return FireEventCube(
        event_id=f"fire_{year.year_label}_{index:03d}",
        year=year.year_label,
        dates=[start + dt.timedelta(days=d) for d in range(days)],
        raster=raster.astype(np.float32),
        channel_schema=list(config.schema),
        fire_channel_index=[c.name for c in config.schema].index("fire"),
    )


def _write_one(config: SynthConfig, year: SynthYearSpec, index: int, root: Path) -> str:
    return str(write_event(simulate_event(config, year, index), root))


def generate(config: SynthConfig, root: Path, *, parallel: int = 1) -> Path:
    """
    Write a synthetic dataset (schema sidecar + per-year event directories).
    Events are independent given their derived seeds, so `parallel` only
    changes wall-clock time.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_schema(root, config.schema)
    config_store.save_document(config.to_dict(), root / "synth_config.json")
    jobs = [
        ((year.year_label, index), _write_one, (config, year, index, root))
        for year in config.years
        for index in range(config.events_per_year)
    ]
    results = run_jobs(jobs, parallel=parallel)
    failed = [res for res in results.values() if not res.ok]
    if failed:
        raise failed[0].error
    return root


def persistence_scores(sample: WindowSample) -> np.ndarray:
    """Predict tomorrow's fire as the last input day's fire mask."""
    last = sample.inputs[-1, sample.fire_channel_index]
    return (np.nan_to_num(last, nan=0.0) > 0).astype(np.float32)
