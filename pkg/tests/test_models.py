import dataclasses
from pathlib import Path

import numpy as np
import pytest
import torch

from helpers import cube_samples, make_cube, tiny_model_config
from src.firespread.errors import CheckpointError, ConfigError, ShapeError
from src.firespread.models import (
    FireSpreadNet,
    ModelConfig,
    build_model,
    count_parameters,
    decode,
    deepest_features,
    encode,
    forward,
    load_checkpoint,
    load_weights,
    ltae_fuse,
    pack_data_fusion,
    positional_encoding,
    predict,
    predict_scores,
    profile_model,
    save_checkpoint,
)
from src.firespread.objectives import bce_loss


def _inputs(T: int, C: int = 6, size: int = 16, batch: int = 2, seed: int = 0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, T, C, size, size, generator=gen, dtype=dtype)
    doy = torch.arange(150, 150 + T, dtype=dtype).expand(batch, T).clone()
    return x, doy


# -- configuration and shapes -------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_model_config(attention_heads=3)
    with pytest.raises(ConfigError):
        tiny_model_config(fusion="none", T=3)
    with pytest.raises(ConfigError):
        tiny_model_config(encoder_widths=[4, 8, 8])
    with pytest.raises(ConfigError):
        tiny_model_config(fusion="feature", T=2, encoder_widths=[3, 8, 8, 8])
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"encoder_widht": [1, 2, 3, 4]})
    config = tiny_model_config(fusion="feature", T=3)
    assert ModelConfig.from_dict(config.to_dict()) == config


@pytest.mark.parametrize("family", ["residual_conv", "windowed_attention"])
def test_stride_arithmetic(family):
    config = ModelConfig(encoder_family=family, encoder_widths=[8, 16, 32, 64], in_channels=7)
    model = FireSpreadNet(config)
    x = torch.randn(1, 7, 64, 64)
    features = encode(model, x)
    assert [tuple(f.shape[1:]) for f in features] == [(8, 64, 64), (16, 32, 32), (32, 16, 16), (64, 8, 8)]
    logits = decode(model, features)
    assert logits.shape == (1, 64, 64)
    assert torch.isfinite(logits).all()


@pytest.mark.parametrize("fusion, T", [("none", 1), ("data", 3), ("feature", 3)])
@pytest.mark.parametrize("family", ["residual_conv", "windowed_attention"])
def test_every_config_gives_finite_full_resolution_logits(family, fusion, T):
    model = FireSpreadNet(tiny_model_config(encoder_family=family, fusion=fusion, T=T))
    x, doy = _inputs(T)
    logits = model(x, doy)
    assert logits.shape == (2, 16, 16)
    assert torch.isfinite(logits).all()


def test_input_checks():
    model = FireSpreadNet(tiny_model_config(fusion="data", T=2))
    with pytest.raises(ConfigError):
        model(*_inputs(3))
    with pytest.raises(ConfigError):
        model(*_inputs(2, C=5))
    with pytest.raises(ShapeError):
        model(*_inputs(2, size=12))


def _conv_norm_act(cin: int, cout: int) -> int:
    return 9 * cin * cout + cout + 2 * cout


def test_parameter_count_matches_layer_arithmetic():
    widths, decoder, channels = [8, 16, 32, 64], [32, 16, 8], 7
    expected = 0
    prev = channels
    for width in widths:
        expected += _conv_norm_act(prev, width) + 2 * _conv_norm_act(width, width)
        prev = width
    for skip, width in zip(reversed(widths[:-1]), decoder):
        expected += _conv_norm_act(prev + skip, width) + _conv_norm_act(width, width)
        prev = width
    expected += prev + 1
    config = ModelConfig(encoder_widths=widths, decoder_widths=decoder, in_channels=channels)
    assert count_parameters(FireSpreadNet(config)) == expected
    assert profile_model(config, H=16, W=16, repeats=1)["parameters"] == expected


def test_zero_parameters_give_a_constant_map():
    model = FireSpreadNet(tiny_model_config())
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.decoder.head.bias.fill_(0.3)
    logits = model(*_inputs(1))
    assert torch.allclose(logits, torch.full_like(logits, 0.3))


# -- positional encoding and fusion --------------------------------------------

def test_positional_encoding_values():
    np.testing.assert_allclose(positional_encoding(0, 4), [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(positional_encoding(1, 4), [0.841471, 0.540302, 0.010000, 0.999950], atol=1e-6)
    with pytest.raises(ConfigError):
        positional_encoding(1, 5)


def test_data_fusion_layout():
    x = torch.randn(5, 7, 8, 8)
    packed = pack_data_fusion(x)
    assert packed.shape == (35, 8, 8)
    for j in range(5):
        for k in range(7):
            assert torch.equal(packed[j * 7 + k], x[j, k])
    single = torch.randn(1, 7, 8, 8)
    assert torch.equal(pack_data_fusion(single), single[0])


def test_data_fusion_with_one_day_equals_single_day_model():
    torch.manual_seed(0)
    plain = FireSpreadNet(tiny_model_config(fusion="none", T=1))
    fused = FireSpreadNet(tiny_model_config(fusion="data", T=1))
    fused.load_state_dict(plain.state_dict())
    x, doy = _inputs(1)
    assert torch.equal(plain(x, doy), fused(x, doy))


def _ltae_model(**overrides) -> FireSpreadNet:
    params = dict(fusion="feature", T=4)
    params.update(overrides)
    torch.manual_seed(1)
    return FireSpreadNet(tiny_model_config(**params))


def test_ltae_mask_is_a_distribution_over_days():
    model = _ltae_model()
    x, doy = _inputs(4)
    _, mask = model.fused_features(x, doy)
    assert mask.shape == (2, 2, 4, 2, 2)
    torch.testing.assert_close(mask.sum(dim=2), torch.ones(2, 2, 2, 2), atol=1e-6, rtol=0)


def test_ltae_single_day_is_identity():
    model = _ltae_model(T=1)
    x, _ = _inputs(1)
    per_day = [f.unsqueeze(1) for f in encode(model, x[:, 0])]
    fused, mask = ltae_fuse(model, per_day)
    assert torch.equal(mask, torch.ones_like(mask))
    for a, b in zip(fused, per_day):
        assert torch.equal(a, b[:, 0])


def test_ltae_uniform_mask_for_identical_days():
    model = _ltae_model()
    with torch.no_grad():
        model.ltae.query.zero_()
    day, _ = _inputs(1)
    x = day.expand(2, 4, *day.shape[2:]).contiguous()
    fused, mask = model.fused_features(x)
    torch.testing.assert_close(mask, torch.full_like(mask, 0.25))
    single = encode(model, day[:, 0])
    for a, b in zip(fused, single):
        torch.testing.assert_close(a, b, atol=1e-5, rtol=1e-5)


def test_ltae_without_feature_fusion_is_an_error():
    model = FireSpreadNet(tiny_model_config())
    with pytest.raises(ConfigError):
        ltae_fuse(model, encode(model, torch.randn(1, 6, 16, 16)))


def test_relative_encoding_ignores_the_calendar():
    model = _ltae_model(pe_mode="relative_window").eval()
    x, doy = _inputs(4)
    assert torch.equal(model(x, doy), model(x, doy + 37))


def test_absolute_encoding_sees_the_calendar():
    model = _ltae_model(pe_mode="absolute_day_of_year").eval()
    x, doy = _inputs(4)
    diff = (model(x, doy) - model(x, doy + 37)).abs().max().item()
    assert diff > 1e-6
    with pytest.raises(ConfigError):
        model(x)


@pytest.mark.parametrize("fusion", ["data", "feature"])
def test_end_to_end_gradient_matches_finite_differences(fusion):
    torch.manual_seed(3)
    model = FireSpreadNet(tiny_model_config(fusion=fusion, T=2)).double()
    x, doy = _inputs(2, size=8, batch=1, dtype=torch.float64)
    target = (torch.rand(1, 8, 8, generator=torch.Generator().manual_seed(4)) > 0.7).double()

    def loss_value() -> torch.Tensor:
        return bce_loss(model(x, doy), target)

    model.zero_grad()
    loss_value().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(20):
        p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            original = p[idx].item()
            p[idx] = original + h
            up = loss_value().item()
            p[idx] = original - h
            down = loss_value().item()
            p[idx] = original
        numeric = (up - down) / (2 * h)
        scale = max(abs(numeric), abs(analytic), 1e-4)
        assert abs(numeric - analytic) / scale < 1e-4


# -- inference helpers -----------------------------------------------------------

def test_prediction_helpers():
    samples = cube_samples(make_cube(days=3))
    model = FireSpreadNet(tiny_model_config())
    scores = predict_scores(model, samples, batch_size=1)
    assert len(scores) == 2
    assert all(s.shape == (8, 8) and s.dtype == np.float64 for s in scores)
    assert all(((s >= 0) & (s <= 1)).all() for s in scores)
    assert set(np.unique(predict(model, samples[0]))) <= {0, 1}
    assert forward(model, samples[0]).shape == (8, 8)
    x = torch.randn(3, 1, 6, 16, 16)
    pooled = deepest_features(model, x)
    assert pooled.shape == (3, model.config.deepest_width)
    assert torch.equal(deepest_features(model, x[:1]), deepest_features(model, x[:1]))


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path: Path):
    model = FireSpreadNet(tiny_model_config(fusion="feature", T=2)).eval()
    path = save_checkpoint(model, tmp_path / "model.pt")
    restored = load_checkpoint(path).eval()
    assert restored.config == model.config
    x, doy = _inputs(2)
    assert torch.equal(model(x, doy), restored(x, doy))


def test_encoder_only_checkpoint_leaves_decoder_untouched(tmp_path: Path):
    torch.manual_seed(0)
    donor = FireSpreadNet(tiny_model_config())
    path = save_checkpoint(donor, tmp_path / "encoder.pt", encoder_only=True)
    torch.manual_seed(1)
    target = FireSpreadNet(tiny_model_config())
    decoder_before = {k: v.clone() for k, v in target.state_dict().items() if k.startswith("decoder.")}
    report = load_weights(target, path)
    assert report.matched and all(name.startswith("encoder.") for name in report.matched)
    assert all(name.startswith("decoder.") for name in report.missing)
    for name, value in decoder_before.items():
        assert torch.equal(target.state_dict()[name], value)
    for name in report.matched:
        assert torch.equal(target.state_dict()[name], donor.state_dict()[name])


def test_shape_mismatch_names_the_parameter(tmp_path: Path):
    path = save_checkpoint(FireSpreadNet(tiny_model_config()), tmp_path / "a.pt")
    other = FireSpreadNet(tiny_model_config(in_channels=5))
    with pytest.raises(CheckpointError) as info:
        load_weights(other, path)
    assert "encoder.stages.0.0.0.weight" in info.value.names


def test_build_model_preloads_the_encoder(tmp_path: Path):
    donor = FireSpreadNet(tiny_model_config())
    path = save_checkpoint(donor, tmp_path / "pre.pt")
    model = build_model(dataclasses.replace(tiny_model_config(), checkpoint_path=str(path)), seed=0)
    assert all(name.startswith("encoder.") for name in model.load_report.matched)
    assert torch.equal(model.encoder.stages[0][0][0].weight, donor.encoder.stages[0][0][0].weight)


def test_unreadable_checkpoint(tmp_path: Path):
    bad = tmp_path / "bad.pt"
    bad.write_text("not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
