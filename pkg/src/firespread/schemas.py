"""
Published schemas for the JSON documents the command line accepts.
Unknown keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = 1


class ChannelDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    group: Literal["vegetation", "topography", "weather", "landcover", "fire"]
    categorical: bool = False
    units: str = ""
    forecast: bool = False


class CoefficientsDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bias: float = -3.0
    w_veg: float = 1.0
    w_moist: float = 1.0
    w_wind: float = 1.0
    w_nb: float = 0.9


class SynthYearDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    year_label: int
    covariate_shift: Dict[str, Tuple[float, float]] = Field(default_factory=dict)
    concept_shift: float = Field(1.0, gt=0)
    ignition_rate: float = Field(3.0, ge=0)

    @field_validator("covariate_shift")
    @classmethod
    def _positive_scale(cls, value: Dict[str, Tuple[float, float]]):
        for name, (_, scale) in value.items():
            if scale <= 0:
                raise ValueError(f"scale for {name!r} must be > 0")
        return value


class SynthDoc(_Document):
    seed: int = 0
    years: List[SynthYearDoc] = Field(min_length=1)
    events_per_year: int = Field(20, ge=1)
    H: int = Field(64, ge=8, multiple_of=8)
    W: int = Field(64, ge=8, multiple_of=8)
    max_days: int = Field(12, ge=2)
    burn_days: int = Field(3, ge=1)
    field_sigma: float = Field(4.0, gt=0)
    coefficients: Optional[CoefficientsDoc] = None
    schema_: Optional[List[ChannelDoc]] = Field(None, alias="schema")


class ModelDoc(_Document):
    encoder_family: Literal["residual_conv", "windowed_attention"] = "residual_conv"
    encoder_widths: List[int] = Field(default_factory=lambda: [8, 16, 32, 64], min_length=4, max_length=4)
    fusion: Literal["none", "data", "feature"] = "none"
    T: int = Field(1, ge=1)
    in_channels: int = Field(7, ge=1)
    pe_mode: Literal["relative_window", "absolute_day_of_year"] = "relative_window"
    attention_heads: int = Field(4, ge=1)
    key_width: int = Field(32, ge=2)
    decoder_widths: List[int] = Field(default_factory=lambda: [32, 16, 8], min_length=3, max_length=3)
    window_size: int = Field(4, ge=1)
    checkpoint_path: Optional[str] = None

    @model_validator(mode="after")
    def _fusion_window(self):
        if self.fusion == "none" and self.T != 1:
            raise ValueError("fusion 'none' requires T=1")
        return self


class TrainDoc(_Document):
    iterations: int = Field(2000, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    loss: Literal["bce", "focal", "dice", "jaccard"] = "focal"
    selection_metric: Literal["AP", "F1"] = "AP"
    seed: int = 0
    eval_every: int = Field(200, ge=1)
    focal_gamma: float = Field(2.0, ge=0)
    focal_alpha: Optional[float] = Field(None, gt=0, lt=1)
    dice_eps: float = Field(1.0, ge=0)
    pos_weight: float = Field(1.0, gt=0)
    threshold: float = Field(0.5, gt=0, lt=1)
    eval_batch_size: int = Field(32, ge=1)


class GridDoc(_Document):
    learning_rates: List[float] = Field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4, 1e-5], min_length=1)
    losses: List[Literal["bce", "focal", "dice", "jaccard"]] = Field(
        default_factory=lambda: ["bce", "focal", "dice", "jaccard"], min_length=1
    )
    pretraining: List[bool] = Field(default_factory=lambda: [False], min_length=1)
    pretrained_checkpoint: Optional[str] = None
    fold: int = 0


def to_plain(doc: BaseModel) -> dict:
    """Document as plain keyword arguments, without the format stamp."""
    data = doc.model_dump(by_alias=True, exclude_none=False)
    data.pop("format_version", None)
    return data
