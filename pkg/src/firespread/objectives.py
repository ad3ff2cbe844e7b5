"""
Training losses and evaluation metrics.

Losses take raw logits and compute probabilities with log-sigmoid so they stay
finite for saturated predictions; only pixels where `valid` is true count.
An empty validity mask yields a NaN loss and a RuntimeWarning.

Metrics follow the "NaN and skip" convention: a sample with no positive label
has undefined AP and is excluded from aggregation, with the skip counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import norm, rankdata
from sklearn.metrics import average_precision_score, f1_score, precision_recall_curve

from . import event_log
from .core_data import WindowSample
from .errors import ConfigError

LOSSES = ("bce", "focal", "dice", "jaccard")
EXACT_WILCOXON_MAX_N = 25


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"focal alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")


def probs_to_logits(p: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Inverse sigmoid with probabilities clipped to [eps, 1 - eps]."""
    p = torch.as_tensor(p).clamp(eps, 1.0 - eps)
    return torch.log(p) - torch.log1p(-p)


def _masked(logits: torch.Tensor, target: torch.Tensor, valid: Optional[torch.Tensor]):
    if logits.shape != target.shape:
        raise ConfigError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ in shape")
    target = target.to(logits.dtype)
    if valid is None:
        valid = torch.ones_like(target, dtype=torch.bool)
    valid = valid.to(torch.bool)
    if not bool(valid.any()):
        event_log.warn("loss mask is empty; returning NaN")
        return None
    return logits[valid], target[valid]


def _nan_like(logits: torch.Tensor) -> torch.Tensor:
    return torch.full((), float("nan"), dtype=logits.dtype, device=logits.device)


def bce_loss(
    logits: torch.Tensor, target: torch.Tensor, valid: Optional[torch.Tensor] = None, pos_weight: float = 1.0
) -> torch.Tensor:
    """Mean over valid pixels of -[w*y*log p + (1-y)*log(1-p)]."""
    masked = _masked(logits, target, valid)
    if masked is None:
        return _nan_like(logits)
    x, y = masked
    loss = -(pos_weight * y * F.logsigmoid(x) + (1.0 - y) * F.logsigmoid(-x))
    return loss.mean()


def focal_loss(
    logits: torch.Tensor, target: torch.Tensor, valid: Optional[torch.Tensor] = None, cfg: FocalConfig = FocalConfig()
) -> torch.Tensor:
    """Mean over valid pixels of -alpha_t * (1 - p_t)^gamma * log p_t."""
    masked = _masked(logits, target, valid)
    if masked is None:
        return _nan_like(logits)
    x, y = masked
    log_pt = y * F.logsigmoid(x) + (1.0 - y) * F.logsigmoid(-x)
    pt = torch.exp(log_pt)
    alpha_t = y * cfg.alpha + (1.0 - y) * (1.0 - cfg.alpha)
    loss = -alpha_t * (1.0 - pt).pow(cfg.gamma) * log_pt
    return loss.mean()


def _overlap_sums(logits, target, valid):
    masked = _masked(logits, target, valid)
    if masked is None:
        return None
    x, y = masked
    p = torch.sigmoid(x)
    return (p * y).sum(), p.sum(), y.sum()


def dice_loss(
    logits: torch.Tensor, target: torch.Tensor, valid: Optional[torch.Tensor] = None, eps: float = 1e-6
) -> torch.Tensor:
    sums = _overlap_sums(logits, target, valid)
    if sums is None:
        return _nan_like(logits)
    inter, sum_p, sum_y = sums
    return 1.0 - (2.0 * inter + eps) / (sum_p + sum_y + eps)


def jaccard_loss(
    logits: torch.Tensor, target: torch.Tensor, valid: Optional[torch.Tensor] = None, eps: float = 1e-6
) -> torch.Tensor:
    sums = _overlap_sums(logits, target, valid)
    if sums is None:
        return _nan_like(logits)
    inter, sum_p, sum_y = sums
    return 1.0 - (inter + eps) / (sum_p + sum_y - inter + eps)


def make_loss(name: str, *, focal: Optional[FocalConfig] = None, pos_weight: float = 1.0, eps: float = 1.0):
    """Bind a named loss to its hyperparameters: fn(logits, target, valid)."""
    if name == "bce":
        return lambda x, y, v: bce_loss(x, y, v, pos_weight)
    if name == "focal":
        cfg = focal or FocalConfig()
        return lambda x, y, v: focal_loss(x, y, v, cfg)
    if name == "dice":
        return lambda x, y, v: dice_loss(x, y, v, eps)
    if name == "jaccard":
        return lambda x, y, v: jaccard_loss(x, y, v, eps)
    raise ConfigError(f"unknown loss {name!r}; expected one of {LOSSES}")


def prevalence(samples: Sequence[WindowSample]) -> float:
    """Positive fraction over all valid target pixels."""
    positives = sum(float(s.target[s.valid].sum()) for s in samples)
    total = sum(int(s.valid.sum()) for s in samples)
    return positives / total if total else 0.0


def alpha_from_prevalence(train: Union[float, Sequence[WindowSample]]) -> float:
    """Focal alpha = negative-class frequency, clipped to [0.01, 0.99]."""
    value = float(train) if isinstance(train, (int, float)) else prevalence(train)
    return float(np.clip(1.0 - value, 0.01, 0.99))


# =============================
# Metrics
# =============================

@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def _flat(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ConfigError(f"{scores.size} scores for {labels.size} labels")
    return scores, labels


def average_precision(scores, labels) -> float:
    """
    Step-wise AP, sum over descending unique thresholds of (R_n - R_{n-1}) * P_n.
    NaN when there is no positive label.
    """
    scores, labels = _flat(scores, labels)
    if labels.sum() == 0:
        return float("nan")
    return float(average_precision_score(labels, scores))


def pr_curve(scores, labels) -> PRCurve:
    """Precision/recall per threshold, thresholds in descending order."""
    scores, labels = _flat(scores, labels)
    if labels.sum() == 0:
        empty = np.array([], dtype=np.float64)
        return PRCurve(empty, empty, empty, float("nan"))
    precision, recall, thresholds = precision_recall_curve(labels, scores)
    # drop the (recall=0, precision=1) end point; reverse to descending thresholds
    return PRCurve(thresholds[::-1], precision[:-1][::-1], recall[:-1][::-1], average_precision(scores, labels))


def f1_at_threshold(scores, labels, thr: float = 0.5) -> float:
    """F1 of predictions scores >= thr; 0 when precision + recall = 0."""
    scores, labels = _flat(scores, labels)
    if labels.sum() == 0:
        return float("nan")
    return float(f1_score(labels, (scores >= thr).astype(np.int64), zero_division=0))


def pooled_average_precision(scores: Sequence[np.ndarray], samples: Sequence[WindowSample]) -> float:
    """AP over the valid pixels of all samples pooled together."""
    flat_scores = [np.asarray(s)[sample.valid] for s, sample in zip(scores, samples)]
    flat_labels = [sample.target[sample.valid] for sample in samples]
    if not flat_scores:
        return float("nan")
    return average_precision(np.concatenate(flat_scores), np.concatenate(flat_labels))


def macro_average_precision(scores: Sequence[np.ndarray], samples: Sequence[WindowSample]) -> Tuple[float, int]:
    """Mean of per-sample AP over samples with a positive target; returns (mean, skipped)."""
    values: List[float] = []
    skipped = 0
    for s, sample in zip(scores, samples):
        ap = average_precision(np.asarray(s)[sample.valid], sample.target[sample.valid])
        if math.isnan(ap):
            skipped += 1
        else:
            values.append(ap)
    return (float(np.mean(values)) if values else float("nan")), skipped


# =============================
# Paired test
# =============================

def _exact_signed_rank_cdf(doubled_ranks: np.ndarray, w: int) -> float:
    """P(T+ <= w) under the null, by counting sign assignments over integer ranks."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks.astype(np.int64):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return float(counts[: w + 1].sum() / counts.sum())


def wilcoxon_signed_rank(paired_a: Sequence[float], paired_b: Sequence[float]) -> Tuple[float, float]:
    """
    Two-sided Wilcoxon signed-rank test; returns (W, p) with W the smaller
    signed rank sum. Zero differences are dropped; exact null for n <= 25,
    normal approximation with continuity correction above.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"paired samples differ in length: {a.size} vs {b.size}")
    diff = a - b
    diff = diff[diff != 0]
    n = diff.size
    if n == 0:
        return 0.0, 1.0
    ranks = rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = 2.0 * _exact_signed_rank_cdf(doubled, int(round(2 * w)))
    else:
        mean = ranks.sum() / 2.0
        sd = math.sqrt((ranks ** 2).sum() / 4.0)
        z = max(abs(w_plus - mean) - 0.5, 0.0) / sd
        p = 2.0 * float(norm.sf(z))
    return w, min(1.0, p)
