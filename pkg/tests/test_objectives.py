import dataclasses
import math

import numpy as np
import pytest
import torch
from scipy.stats import wilcoxon

from helpers import cube_samples, make_cube
from src.firespread.errors import ConfigError
from src.firespread.objectives import (
    FocalConfig,
    alpha_from_prevalence,
    average_precision,
    bce_loss,
    dice_loss,
    f1_at_threshold,
    focal_loss,
    jaccard_loss,
    macro_average_precision,
    make_loss,
    pooled_average_precision,
    pr_curve,
    prevalence,
    probs_to_logits,
    wilcoxon_signed_rank,
)


def _t(values) -> torch.Tensor:
    return torch.tensor(values, dtype=torch.float64)


# -- losses -------------------------------------------------------------------

def test_bce_hand_values():
    assert bce_loss(_t([0.0]), _t([1.0])).item() == pytest.approx(math.log(2), abs=1e-9)
    p = np.array([0.9, 0.2, 0.6, 0.4])
    y = np.array([1.0, 0.0, 0.0, 1.0])
    expected = -np.mean(2.0 * y * np.log(p) + (1 - y) * np.log(1 - p))
    got = bce_loss(probs_to_logits(_t(p)), _t(y), pos_weight=2.0).item()
    assert got == pytest.approx(expected, abs=1e-9)


def test_bce_perfect_prediction_bound():
    eps = 1e-6
    y = _t([1.0, 0.0, 1.0, 0.0])
    loss = bce_loss(probs_to_logits(y, eps=eps), y).item()
    assert loss <= -math.log(1 - eps) + 1e-12


def test_focal_hand_value():
    loss = focal_loss(_t([0.0]), _t([1.0]), cfg=FocalConfig(alpha=0.25, gamma=2.0)).item()
    assert loss == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-9)
    assert loss == pytest.approx(0.0433217, abs=1e-6)


def test_focal_with_gamma_zero_is_half_bce():
    gen = torch.Generator().manual_seed(0)
    logits = torch.randn(8, 8, generator=gen, dtype=torch.float64) * 3
    target = (torch.rand(8, 8, generator=gen) > 0.7).to(torch.float64)
    focal = focal_loss(logits, target, cfg=FocalConfig(alpha=0.5, gamma=0.0)).item()
    assert focal == pytest.approx(0.5 * bce_loss(logits, target).item(), abs=1e-9)


def test_focal_vanishes_for_confident_hits():
    assert focal_loss(_t([40.0]), _t([1.0])).item() < 1e-12


def test_dice_and_jaccard_hand_fixtures():
    logits = _t([0.0, 0.0, 0.0, 0.0])
    target = _t([1.0, 1.0, 0.0, 0.0])
    assert dice_loss(logits, target, eps=1e-12).item() == pytest.approx(0.5, abs=1e-6)
    assert jaccard_loss(logits, target, eps=1e-12).item() == pytest.approx(2 / 3, abs=1e-6)


def test_overlap_losses_at_the_extremes():
    target = _t([1.0, 1.0, 0.0, 0.0])
    perfect = _t([30.0, 30.0, -30.0, -30.0])
    disjoint = -perfect
    for loss in (dice_loss, jaccard_loss):
        assert loss(perfect, target, eps=1e-12).item() == pytest.approx(0.0, abs=1e-6)
        assert loss(disjoint, target, eps=1e-12).item() == pytest.approx(1.0, abs=1e-6)


def test_jaccard_coefficient_follows_from_dice():
    gen = torch.Generator().manual_seed(1)
    logits = torch.randn(8, 8, generator=gen, dtype=torch.float64)
    target = (torch.rand(8, 8, generator=gen) > 0.5).to(torch.float64)
    d = 1.0 - dice_loss(logits, target, eps=0.0).item()
    j = 1.0 - jaccard_loss(logits, target, eps=0.0).item()
    assert j == pytest.approx(d / (2 - d), abs=1e-12)


@pytest.mark.parametrize("name", ["bce", "focal", "dice", "jaccard"])
def test_loss_gradients_match_finite_differences(name):
    gen = torch.Generator().manual_seed(2)
    logits = torch.randn(8, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    target = (torch.rand(8, 8, generator=gen) > 0.6).to(torch.float64)
    valid = torch.rand(8, 8, generator=gen) > 0.1
    loss = make_loss(name, focal=FocalConfig(alpha=0.3, gamma=2.0), pos_weight=1.5, eps=1e-3)
    assert torch.autograd.gradcheck(lambda x: loss(x, target, valid), (logits,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_valid_mask_excludes_pixels():
    logits = _t([0.0, 25.0])
    target = _t([1.0, 0.0])
    valid = torch.tensor([True, False])
    assert bce_loss(logits, target, valid).item() == pytest.approx(math.log(2))


def test_empty_mask_gives_nan_with_warning():
    with pytest.warns(RuntimeWarning):
        loss = bce_loss(_t([0.0]), _t([1.0]), torch.tensor([False]))
    assert torch.isnan(loss)


def test_make_loss_rejects_unknown_name():
    with pytest.raises(ConfigError):
        make_loss("hinge")
    with pytest.raises(ConfigError):
        FocalConfig(alpha=1.5)


@pytest.mark.parametrize("prev, alpha", [(0.05, 0.95), (0.5, 0.5), (0.0, 0.99), (1.0, 0.01)])
def test_alpha_from_prevalence(prev, alpha):
    assert alpha_from_prevalence(prev) == pytest.approx(alpha)


def test_prevalence_over_samples():
    samples = cube_samples(make_cube(days=3))
    expected = sum(s.target.sum() for s in samples) / sum(s.target.size for s in samples)
    assert prevalence(samples) == pytest.approx(expected)
    assert alpha_from_prevalence(samples) == pytest.approx(1 - expected)


# -- metrics ------------------------------------------------------------------

def brute_force_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    """Sum over every distinct threshold, highest first, of recall gain times precision."""
    positives = labels.sum()
    ap, last_recall = 0.0, 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= thr
        tp = float(np.sum(predicted & (labels == 1)))
        precision = tp / float(predicted.sum())
        recall = tp / positives
        ap += (recall - last_recall) * precision
        last_recall = recall
    return ap


def test_average_precision_hand_examples():
    assert average_precision([0.9, 0.1], [1, 0]) == 1.0
    assert average_precision([0.9, 0.1], [0, 1]) == 0.5
    assert average_precision([0.3, 0.3, 0.3, 0.3], [1, 0, 0, 0]) == 0.25
    assert math.isnan(average_precision([0.3, 0.2], [0, 0]))


def test_average_precision_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        labels = (rng.random(n) < rng.uniform(0.05, 0.6)).astype(int)
        if labels.sum() == 0:
            labels[int(rng.integers(n))] = 1
        scores = rng.random(n)
        if rng.random() < 0.5:
            scores = np.round(scores, 1)
        assert average_precision(scores, labels) == pytest.approx(brute_force_ap(scores, labels), abs=1e-9)


def test_average_precision_is_rank_based():
    rng = np.random.default_rng(1)
    scores = rng.random(50)
    labels = (rng.random(50) < 0.3).astype(int)
    labels[0] = 1
    base = average_precision(scores, labels)
    assert average_precision(np.exp(3 * scores) - 7, labels) == pytest.approx(base, abs=1e-12)
    assert average_precision(scores ** 3, labels) == pytest.approx(base, abs=1e-12)


def test_pr_curve_is_ordered():
    rng = np.random.default_rng(2)
    scores = rng.random(40)
    labels = (rng.random(40) < 0.4).astype(int)
    labels[:2] = 1
    curve = pr_curve(scores, labels)
    assert np.all(np.diff(curve.thresholds) < 0)
    assert np.all(np.diff(curve.recall) >= 0)
    assert curve.recall[-1] == 1.0
    assert curve.ap == pytest.approx(average_precision(scores, labels))


def test_f1_examples():
    assert f1_at_threshold([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert f1_at_threshold([0.9, 0.8, 0.1], [1, 0, 1], 0.5) == pytest.approx(0.5)
    assert f1_at_threshold([0.1, 0.2, 0.3], [1, 0, 1], 0.5) == 0.0
    assert math.isnan(f1_at_threshold([0.9], [0]))


def test_pooled_and_macro_ap_skip_fire_free_samples():
    samples = cube_samples(make_cube(days=4))
    empty = dataclasses.replace(samples[0], target=np.zeros_like(samples[0].target))
    samples = samples + [empty]
    scores = [s.target.astype(np.float64) for s in samples]
    assert pooled_average_precision(scores, samples) == 1.0
    mean, skipped = macro_average_precision(scores, samples)
    assert mean == 1.0
    assert skipped == 1


# -- paired test --------------------------------------------------------------

def enumerated_wilcoxon_p(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided p by enumerating every sign assignment of the mid-ranks."""
    diff = a - b
    diff = diff[diff != 0]
    n = diff.size
    abs_diff = np.abs(diff)
    ranks = np.array([np.sum(abs_diff < v) + (np.sum(abs_diff == v) + 1) / 2 for v in abs_diff])
    w = min(ranks[diff > 0].sum(), ranks[diff < 0].sum())
    signs = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    t_plus = signs @ ranks
    return min(1.0, 2 * float(np.mean(t_plus <= w + 1e-9)))


def test_wilcoxon_identical_samples():
    assert wilcoxon_signed_rank([0.1, 0.2, 0.3], [0.1, 0.2, 0.3]) == (0.0, 1.0)


def test_wilcoxon_all_positive_differences():
    a = np.linspace(0.5, 0.6, 12)
    w, p = wilcoxon_signed_rank(a, a - np.linspace(0.01, 0.12, 12))
    assert w == 0.0
    assert p == pytest.approx(2 / 2 ** 12, abs=1e-12)


def test_wilcoxon_exact_matches_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(3, 13))
        a = np.round(rng.random(n), 2)
        b = np.round(rng.random(n), 2)
        if np.all(a == b):
            continue
        _, p = wilcoxon_signed_rank(a, b)
        assert p == pytest.approx(enumerated_wilcoxon_p(a, b), abs=1e-6)


def test_wilcoxon_large_sample_normal_approximation():
    rng = np.random.default_rng(5)
    a = rng.random(40)
    b = a - rng.normal(0.05, 0.1, 40)
    w, p = wilcoxon_signed_rank(a, b)
    reference = wilcoxon(a, b, correction=True, method="approx")
    assert w == pytest.approx(reference.statistic)
    assert p == pytest.approx(reference.pvalue, rel=1e-9)


def test_wilcoxon_rejects_unpaired_input():
    with pytest.raises(ConfigError):
        wilcoxon_signed_rank([0.1, 0.2], [0.1])
