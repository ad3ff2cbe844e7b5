"""Small builders shared by the test modules."""

import datetime as dt
from typing import List, Optional

import numpy as np

from src.firespread.core_data import ChannelSpec, FeatureSet, FireEventCube, build_samples, window_samples
from src.firespread.models import ModelConfig
from src.firespread.synthetic import SynthConfig, SynthYearSpec, simulate_event
from src.firespread.training import TrainConfig

START = dt.date(2020, 6, 1)


def small_schema() -> List[ChannelSpec]:
    return [
        ChannelSpec("ndvi", "vegetation"),
        ChannelSpec("evi", "vegetation"),
        ChannelSpec("temp", "weather"),
        ChannelSpec("temp_forecast", "weather", forecast=True),
        ChannelSpec("landcover", "landcover", categorical=True),
        ChannelSpec("fire", "fire"),
    ]


def make_cube(
    event_id: str = "evt",
    year: int = 2020,
    days: int = 6,
    size: int = 8,
    seed: int = 0,
    schema: Optional[List[ChannelSpec]] = None,
    dates: Optional[List[dt.date]] = None,
) -> FireEventCube:
    """Random continuous bands, integer landcover and a fire square that grows a pixel a day."""
    schema = schema or small_schema()
    rng = np.random.default_rng(seed)
    raster = rng.standard_normal((days, len(schema), size, size)).astype(np.float32)
    fire_index = [c.group for c in schema].index("fire")
    for c, spec in enumerate(schema):
        if spec.categorical:
            raster[:, c] = rng.integers(1, 5, size=(size, size))
    fire = np.zeros((days, size, size), dtype=np.float32)
    for d in range(days):
        r = min(d + 1, size // 2)
        fire[d, size // 2 - r : size // 2 + r, size // 2 - r : size // 2 + r] = 1.0
    raster[:, fire_index] = fire
    return FireEventCube(
        event_id=event_id,
        year=year,
        dates=dates or [START.replace(year=year) + dt.timedelta(days=d) for d in range(days)],
        raster=raster,
        channel_schema=list(schema),
        fire_channel_index=fire_index,
    )


def cube_samples(cube: FireEventCube, T: int = 1):
    return window_samples(cube, T, FeatureSet.named(cube.channel_schema, "All"))


def tiny_model_config(**overrides) -> ModelConfig:
    params = dict(
        encoder_widths=[4, 8, 8, 8],
        decoder_widths=[8, 8, 4],
        attention_heads=2,
        key_width=8,
        window_size=2,
        in_channels=6,
    )
    params.update(overrides)
    return ModelConfig(**params)


def tiny_train_config(**overrides) -> TrainConfig:
    params = dict(iterations=4, batch_size=2, eval_every=2, learning_rate=1e-3, seed=0, eval_batch_size=4)
    params.update(overrides)
    return TrainConfig(**params)


def tiny_synth_config(seed: int = 0, years=(2018, 2019, 2020), **overrides) -> SynthConfig:
    params = dict(
        seed=seed,
        years=[SynthYearSpec(y, ignition_rate=3.0) for y in years],
        events_per_year=3,
        H=16,
        W=16,
        max_days=5,
        field_sigma=2.0,
    )
    params.update(overrides)
    return SynthConfig(**params)


def desk_samples(seed: int, years) -> List:
    """T=1 samples of a full-size synthetic set: 20 events a year, 64x64, 12 days, 7 channels."""
    config = SynthConfig(seed=seed, years=[y if isinstance(y, SynthYearSpec) else SynthYearSpec(y) for y in years])
    return build_samples([simulate_event(config, year, i) for year in config.years for i in range(config.events_per_year)], 1)
