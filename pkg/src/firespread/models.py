"""
Model zoo: a four-stage encoder (residual-conv or windowed-attention), a U-Net
style decoder, and three ways to use T input days:

    none     single day, T must be 1
    data     the T days concatenated channel-wise, oldest day first
    feature  each day encoded by the shared encoder, then collapsed over time
             by a lightweight temporal attention block (LTAE)

Inputs are batches shaped (B, T, C, H, W) with H, W divisible by 8; outputs
are one logit per pixel, (B, H, W).
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import event_log
from .core_data import WindowSample
from .errors import CheckpointError, ConfigError, ShapeError

ENCODER_FAMILIES = ("residual_conv", "windowed_attention")
FUSIONS = ("none", "data", "feature")
PE_MODES = ("relative_window", "absolute_day_of_year")
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    encoder_family: str = "residual_conv"
    encoder_widths: List[int] = field(default_factory=lambda: [8, 16, 32, 64])
    fusion: str = "none"
    T: int = 1
    in_channels: int = 7
    pe_mode: str = "relative_window"
    attention_heads: int = 4
    key_width: int = 32
    decoder_widths: List[int] = field(default_factory=lambda: [32, 16, 8])
    window_size: int = 4
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        self.encoder_widths = [int(w) for w in self.encoder_widths]
        self.decoder_widths = [int(w) for w in self.decoder_widths]
        if self.encoder_family not in ENCODER_FAMILIES:
            raise ConfigError(f"encoder_family must be one of {ENCODER_FAMILIES}, got {self.encoder_family!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")
        if len(self.encoder_widths) != 4 or any(w <= 0 for w in self.encoder_widths):
            raise ConfigError("encoder_widths must be 4 positive integers")
        if len(self.decoder_widths) != 3 or any(w <= 0 for w in self.decoder_widths):
            raise ConfigError("decoder_widths must be 3 positive integers")
        if self.T < 1 or self.in_channels < 1:
            raise ConfigError("T and in_channels must be >= 1")
        if self.fusion == "none" and self.T != 1:
            raise ConfigError(f"fusion 'none' requires T=1, got T={self.T}")
        if self.attention_heads < 1 or self.key_width % self.attention_heads:
            raise ConfigError(f"attention_heads={self.attention_heads} must divide key_width={self.key_width}")
        if self.key_width % 2:
            raise ConfigError("key_width must be even")
        if self.fusion == "feature":
            bad = [w for w in self.encoder_widths if w % self.attention_heads]
            if bad:
                raise ConfigError(f"attention_heads={self.attention_heads} must divide encoder widths {bad}")
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")

    @property
    def deepest_width(self) -> int:
        return self.encoder_widths[-1]

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known - {"format_version"})
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})


# =============================
# Positional encoding
# =============================

def positional_encoding(t_bar: float, d: int) -> np.ndarray:
    """pe[2k] = sin(t / 10000^(2k/d)), pe[2k+1] = cos(t / 10000^(2k/d))."""
    if d % 2:
        raise ConfigError(f"encoding width must be even, got {d}")
    if t_bar < 0:
        raise ConfigError("t_bar must be >= 0")
    k = np.arange(d // 2, dtype=np.float64)
    angles = t_bar / np.power(10000.0, 2.0 * k / d)
    pe = np.empty(d, dtype=np.float64)
    pe[0::2] = np.sin(angles)
    pe[1::2] = np.cos(angles)
    return pe


def _encoding_table(t_bar: torch.Tensor, d: int) -> torch.Tensor:
    """Batched positional_encoding: (B, T) -> (B, T, d)."""
    k = torch.arange(d // 2, dtype=t_bar.dtype, device=t_bar.device)
    angles = t_bar.unsqueeze(-1) / torch.pow(10000.0, 2.0 * k / d)
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)


# =============================
# Building blocks
# =============================

def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


class ConvNormAct(nn.Sequential):
    """3x3 conv + GroupNorm + ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1),
            nn.GroupNorm(_groups(out_channels), out_channels),
            nn.ReLU(inplace=False),
        )


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(ConvNormAct(width, width), ConvNormAct(width, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class ResidualConvEncoder(nn.Module):
    """Stage 1 keeps resolution; stages 2-4 halve it."""

    def __init__(self, in_channels: int, widths: Sequence[int]):
        super().__init__()
        stages = []
        prev = in_channels
        for idx, width in enumerate(widths):
            stride = 1 if idx == 0 else 2
            stages.append(nn.Sequential(ConvNormAct(prev, width, stride), ResidualBlock(width)))
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class WindowAttentionBlock(nn.Module):
    """Pre-norm self-attention inside non-overlapping square windows, then an MLP."""

    def __init__(self, width: int, heads: int, window_size: int):
        super().__init__()
        self.window_size = window_size
        self.norm1 = nn.GroupNorm(1, width)
        self.attn = nn.MultiheadAttention(width, heads if width % heads == 0 else 1, batch_first=True)
        self.norm2 = nn.GroupNorm(1, width)
        self.mlp = nn.Sequential(nn.Conv2d(width, 2 * width, 1), nn.GELU(), nn.Conv2d(2 * width, width, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        ws = math.gcd(self.window_size, math.gcd(h, w))
        y = self.norm1(x)
        y = y.view(b, c, h // ws, ws, w // ws, ws).permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)
        y, _ = self.attn(y, y, y, need_weights=False)
        y = y.view(b, h // ws, w // ws, ws, ws, c).permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)
        x = x + y
        return x + self.mlp(self.norm2(x))


class WindowedAttentionEncoder(nn.Module):
    def __init__(self, in_channels: int, widths: Sequence[int], heads: int, window_size: int):
        super().__init__()
        stages = []
        prev = in_channels
        for idx, width in enumerate(widths):
            if idx == 0:
                embed = nn.Conv2d(prev, width, kernel_size=3, padding=1)
            else:
                embed = nn.Conv2d(prev, width, kernel_size=2, stride=2)
            stages.append(nn.Sequential(embed, WindowAttentionBlock(width, heads, window_size)))
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class UNetDecoder(nn.Module):
    def __init__(self, encoder_widths: Sequence[int], decoder_widths: Sequence[int]):
        super().__init__()
        blocks = []
        prev = encoder_widths[-1]
        for skip, width in zip(reversed(encoder_widths[:-1]), decoder_widths):
            blocks.append(nn.Sequential(ConvNormAct(prev + skip, width), ConvNormAct(width, width)))
            prev = width
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(prev, 1, kernel_size=1)

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        x = features[-1]
        for block, skip in zip(self.blocks, reversed(features[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x).squeeze(1)


class LTAE(nn.Module):
    """
    Lightweight temporal attention. A learned master query per head attends
    over the T deepest-scale embeddings (plus sinusoidal positions); the
    softmax mask is upsampled and applied per channel group at every scale.
    """

    def __init__(self, width: int, heads: int, key_width: int, pe_mode: str):
        super().__init__()
        self.heads = heads
        self.key_width = key_width
        self.d_k = key_width // heads
        self.pe_mode = pe_mode
        self.norm = nn.GroupNorm(heads, width)
        self.embed = nn.Conv2d(width, key_width, kernel_size=1)
        self.keys = nn.Conv2d(key_width, heads * self.d_k, kernel_size=1)
        self.query = nn.Parameter(torch.randn(heads, self.d_k) * (self.d_k ** -0.5))

    def positions(self, batch: int, T: int, day_of_year: Optional[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
        if self.pe_mode == "relative_window":
            t_bar = torch.arange(1, T + 1, dtype=like.dtype, device=like.device).expand(batch, T)
        else:
            if day_of_year is None:
                raise ConfigError("absolute_day_of_year encoding needs day_of_year")
            t_bar = day_of_year.to(dtype=like.dtype, device=like.device)
        return _encoding_table(t_bar, self.key_width)

    def attention(self, deepest: torch.Tensor, day_of_year: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, T, C, h, w) -> mask (B, heads, T, h, w), softmax over T."""
        b, t, c, h, w = deepest.shape
        z = self.embed(self.norm(deepest.reshape(b * t, c, h, w)))
        pe = self.positions(b, t, day_of_year, z).reshape(b * t, self.key_width, 1, 1)
        keys = self.keys(z + pe).view(b, t, self.heads, self.d_k, h, w)
        scores = torch.einsum("bthdxy,hd->bhtxy", keys, self.query) / math.sqrt(self.d_k)
        return torch.softmax(scores, dim=2)

    def collapse(self, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Weighted temporal sum of (B, T, C, H, W) under the upsampled mask."""
        b, t, c, h, w = features.shape
        if mask.shape[-2:] != (h, w):
            mask = F.interpolate(mask.reshape(b, self.heads * t, *mask.shape[-2:]), size=(h, w), mode="nearest")
            mask = mask.view(b, self.heads, t, h, w)
        grouped = features.view(b, t, self.heads, c // self.heads, h, w)
        weights = mask.permute(0, 2, 1, 3, 4).unsqueeze(3)
        return (grouped * weights).sum(dim=1).reshape(b, c, h, w)

    def forward(
        self, features: Sequence[torch.Tensor], day_of_year: Optional[torch.Tensor] = None
    ) -> Tuple[List[torch.Tensor], torch.Tensor]:
        mask = self.attention(features[-1], day_of_year)
        return [self.collapse(f, mask) for f in features], mask


# =============================
# Full model
# =============================

class FireSpreadNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        encoder_in = config.in_channels * config.T if config.fusion == "data" else config.in_channels
        if config.encoder_family == "residual_conv":
            self.encoder = ResidualConvEncoder(encoder_in, config.encoder_widths)
        else:
            self.encoder = WindowedAttentionEncoder(
                encoder_in, config.encoder_widths, config.attention_heads, config.window_size
            )
        self.ltae = (
            LTAE(config.deepest_width, config.attention_heads, config.key_width, config.pe_mode)
            if config.fusion == "feature"
            else None
        )
        self.decoder = UNetDecoder(config.encoder_widths, config.decoder_widths)

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 5:
            raise ShapeError(f"expected (B, T, C, H, W) input, got shape {tuple(x.shape)}")
        _, t, c, h, w = x.shape
        if t != self.config.T:
            raise ConfigError(f"model expects T={self.config.T}, input has T={t}")
        if c != self.config.in_channels:
            raise ConfigError(f"model expects {self.config.in_channels} channels, input has {c}")
        if h % 8 or w % 8:
            raise ShapeError(f"H and W must be divisible by 8, got {h}x{w}")

    def fused_features(
        self, x: torch.Tensor, day_of_year: Optional[torch.Tensor] = None
    ) -> Tuple[List[torch.Tensor], Optional[torch.Tensor]]:
        """Multi-scale features after temporal fusion, plus the LTAE mask if any."""
        self._check(x)
        if self.ltae is None:
            return self.encoder(pack_data_fusion(x)), None
        b, t, c, h, w = x.shape
        per_day = self.encoder(x.reshape(b * t, c, h, w))
        per_day = [f.view(b, t, *f.shape[1:]) for f in per_day]
        return self.ltae(per_day, day_of_year)

    def forward(self, x: torch.Tensor, day_of_year: Optional[torch.Tensor] = None) -> torch.Tensor:
        features, _ = self.fused_features(x, day_of_year)
        return self.decoder(features)


def pack_data_fusion(x: Union[np.ndarray, torch.Tensor, WindowSample]):
    """
    Concatenate days along channels, oldest first: channel k of day j -> j*C + k.
    Accepts (T, C, H, W) or (B, T, C, H, W).
    """
    if isinstance(x, WindowSample):
        x = x.inputs
    if x.ndim == 4:
        t, c, h, w = x.shape
        return x.reshape(t * c, h, w)
    b, t, c, h, w = x.shape
    return x.reshape(b, t * c, h, w)


def encode(model: FireSpreadNet, x: torch.Tensor) -> List[torch.Tensor]:
    """Shared encoder on (B, C, H, W): feature maps at strides 1, 2, 4, 8."""
    return model.encoder(x)


def ltae_fuse(
    model: FireSpreadNet, features: Sequence[torch.Tensor], day_of_year: Optional[torch.Tensor] = None
) -> Tuple[List[torch.Tensor], torch.Tensor]:
    if model.ltae is None:
        raise ConfigError("model has no temporal attention block (fusion != 'feature')")
    return model.ltae(features, day_of_year)


def decode(model: FireSpreadNet, features: Sequence[torch.Tensor]) -> torch.Tensor:
    return model.decoder(features)


def sample_tensors(
    samples: Sequence[WindowSample], dtype: torch.dtype = torch.float32, device: Union[str, torch.device, None] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into (B, T, C, H, W) inputs and (B, T) day-of-year."""
    x = torch.from_numpy(np.stack([np.nan_to_num(s.inputs, nan=0.0) for s in samples])).to(device=device, dtype=dtype)
    doy = torch.tensor([s.day_of_year for s in samples], dtype=dtype, device=device)
    return x, doy


def forward(model: FireSpreadNet, sample: WindowSample) -> torch.Tensor:
    """Logits (H, W) for one sample."""
    ref = next(model.parameters())
    x, doy = sample_tensors([sample], ref.dtype, ref.device)
    return model(x, doy)[0]


@torch.no_grad()
def predict_scores(model: FireSpreadNet, samples: Sequence[WindowSample], batch_size: int = 32) -> List[np.ndarray]:
    """Sigmoid probabilities per sample, evaluated in batches."""
    was_training = model.training
    model.eval()
    ref = next(model.parameters())
    scores: List[np.ndarray] = []
    for start in range(0, len(samples), batch_size):
        x, doy = sample_tensors(samples[start : start + batch_size], ref.dtype, ref.device)
        probs = torch.sigmoid(model(x, doy)).cpu().numpy()
        scores.extend(probs.astype(np.float64))
    model.train(was_training)
    return scores


def predict(model: FireSpreadNet, sample: WindowSample, thr: float = 0.5) -> np.ndarray:
    """Binary fire map for the day after the sample window."""
    return (predict_scores(model, [sample])[0] >= thr).astype(np.uint8)


@torch.no_grad()
def deepest_features(model: FireSpreadNet, x: torch.Tensor, day_of_year: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Globally average-pooled deepest (post-fusion) features, (B, D4)."""
    features, _ = model.fused_features(x, day_of_year)
    return features[-1].mean(dim=(-2, -1))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def profile_model(config: ModelConfig, H: int = 64, W: int = 64, repeats: int = 5) -> Dict[str, float]:
    """Parameter count, float32 size and mean forward wall-clock on random input."""
    model = FireSpreadNet(dataclasses.replace(config, checkpoint_path=None)).eval()
    x = torch.randn(1, config.T, config.in_channels, H, W)
    doy = torch.arange(1, config.T + 1, dtype=torch.float32).unsqueeze(0)
    with torch.no_grad():
        model(x, doy)
        start = time.perf_counter()
        for _ in range(max(1, repeats)):
            model(x, doy)
        seconds = (time.perf_counter() - start) / max(1, repeats)
    params = count_parameters(model)
    return {"parameters": params, "size_mb": params * 4 / 2 ** 20, "forward_seconds": seconds}


# =============================
# Checkpoints
# =============================

@dataclass
class LoadReport:
    matched: List[str]
    missing: List[str]
    unexpected: List[str]

    def to_dict(self) -> Dict[str, List[str]]:
        return dataclasses.asdict(self)


def save_checkpoint(model: FireSpreadNet, path: Path, *, encoder_only: bool = False) -> Path:
    """
    One archive: {"format_version", "config" (JSON text), "model_state_dict"}
    with dot-separated parameter names mapped to tensors.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    if encoder_only:
        state = {k: v for k, v in state.items() if k.startswith("encoder.")}
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": json.dumps(model.config.to_dict(), sort_keys=True),
            "model_state_dict": {k: v.detach().cpu().clone() for k, v in state.items()},
        },
        path,
    )
    return path


def _read_checkpoint(path: Path) -> Dict[str, object]:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "model_state_dict" not in payload:
        raise CheckpointError(f"{path}: not a firespread checkpoint")
    return payload


def load_weights(
    model: nn.Module, source: Union[Path, Dict[str, torch.Tensor]], *, prefix: Optional[str] = None
) -> LoadReport:
    """
    Partial load: copy every checkpoint tensor whose name exists in the model
    (optionally only names under `prefix`). A matched name with a different
    shape is an error.
    """
    state = source if isinstance(source, dict) else _read_checkpoint(source)["model_state_dict"]
    if prefix is not None:
        state = {k: v for k, v in state.items() if k.startswith(prefix)}
    own = model.state_dict()
    mismatched = [k for k, v in state.items() if k in own and own[k].shape != v.shape]
    if mismatched:
        raise CheckpointError("shape mismatch for parameter(s)", mismatched)
    matched = sorted(k for k in state if k in own)
    with torch.no_grad():
        for name in matched:
            own[name].copy_(state[name])
    return LoadReport(
        matched=matched,
        missing=sorted(k for k in own if k not in state),
        unexpected=sorted(k for k in state if k not in own),
    )


def load_checkpoint(path: Path) -> FireSpreadNet:
    payload = _read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(json.loads(payload["config"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: missing or invalid config header") from exc
    model = FireSpreadNet(dataclasses.replace(config, checkpoint_path=None))
    report = load_weights(model, payload["model_state_dict"])
    if report.missing:
        raise CheckpointError("checkpoint lacks parameter(s)", report.missing)
    return model


def build_model(config: ModelConfig, seed: Optional[int] = None) -> FireSpreadNet:
    """
    Instantiate a model; `checkpoint_path` pre-loads encoder weights only.
    """
    if seed is not None:
        torch.manual_seed(seed)
    model = FireSpreadNet(config)
    if config.checkpoint_path:
        report = load_weights(model, Path(config.checkpoint_path), prefix="encoder.")
        if not report.matched:
            raise CheckpointError(f"{config.checkpoint_path}: no encoder parameters matched")
        event_log.log_event(
            "pretrained_encoder_loaded",
            {"path": str(config.checkpoint_path), "matched": len(report.matched), "unexpected": report.unexpected},
        )
        model.load_report = report
    return model
