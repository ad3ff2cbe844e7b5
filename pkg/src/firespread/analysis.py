"""
Domain-shift diagnostics, the cross-year experiment, fire-size analyses,
dataset replication diffing and embedding export.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import ks_2samp, pearsonr

from . import event_log
from .core_data import (
    FeatureSet,
    FireEventCube,
    WindowSample,
    compute_stats,
    load_event,
    load_schema,
    normalize,
    scan_dataset,
    window_samples,
)
from .errors import AnalysisError, DatasetDiffError
from .folds import CrossYearProtocol, split_samples
from .models import FireSpreadNet, ModelConfig, deepest_features, sample_tensors
from .scheduler import run_jobs
from .training import TrainConfig, evaluate, model_from_state, train_run
from src.config import settings

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
KS_SUBSAMPLE = 5000
SIZE_BINS = 30


def _nanmean(values: Sequence[float]) -> float:
    finite = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(finite)) if finite else float("nan")


# =============================
# Domain report
# =============================

@dataclass
class DomainReport:
    years: List[int]
    balanced_events: int
    channels: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    zero_fire_probability: Dict[str, float] = field(default_factory=dict)
    landcover: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)
    fire_sizes: Dict[str, Any] = field(default_factory=dict)
    comparisons: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)
    cross_year: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _balanced(cubes: Sequence[FireEventCube], seed: int) -> Dict[int, List[FireEventCube]]:
    by_year: Dict[int, List[FireEventCube]] = {}
    for cube in sorted(cubes, key=lambda c: (c.year, c.event_id)):
        by_year.setdefault(cube.year, []).append(cube)
    size = min(len(v) for v in by_year.values())
    rng = np.random.default_rng(seed)
    return {
        year: [events[i] for i in sorted(rng.choice(len(events), size=size, replace=False))]
        for year, events in sorted(by_year.items())
    }


def _channel_values(cubes: Sequence[FireEventCube], channel: int) -> np.ndarray:
    values = np.concatenate([c.raster[:, channel].ravel() for c in cubes]).astype(np.float64)
    return values[np.isfinite(values)]


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """Half the L1 distance between two histograms, each normalized to mass 1."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.sum() == 0 or q.sum() == 0:
        return float("nan")
    return float(0.5 * np.abs(p / p.sum() - q / q.sum()).sum())


def domain_report(cubes: Sequence[FireEventCube], seed: int = 0, bins: int = 32) -> DomainReport:
    """
    Per-year marginals on a year-balanced event subsample. Histograms share
    bin edges across years, so total-variation distances are comparable.
    """
    if not cubes:
        raise AnalysisError("no events to summarize")
    balanced = _balanced(cubes, seed)
    years = list(balanced)
    schema = cubes[0].channel_schema
    report = DomainReport(years=years, balanced_events=len(next(iter(balanced.values()))), cross_year=len(years) >= 2)
    rng = np.random.default_rng(seed)
    all_features = FeatureSet.named(schema, "All")

    for idx, spec in enumerate(schema):
        if not spec.continuous:
            continue
        per_year = {year: _channel_values(events, idx) for year, events in balanced.items()}
        pooled = np.concatenate([np.zeros(0)] + list(per_year.values()))
        lo, hi = (float(pooled.min()), float(pooled.max())) if pooled.size else (0.0, 1.0)
        edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
        summary: Dict[str, Any] = {"edges": edges.tolist(), "years": {}}
        for year, values in per_year.items():
            counts, _ = np.histogram(values, bins=edges)
            summary["years"][str(year)] = {
                "mean": float(values.mean()) if values.size else float("nan"),
                "std": float(values.std()) if values.size else float("nan"),
                "quantiles": [float(q) for q in np.quantile(values, QUANTILES)] if values.size else [],
                "histogram": counts.tolist(),
            }
        report.channels[spec.name] = summary
        if report.cross_year:
            for a, b in combinations(years, 2):
                va, vb = per_year[a], per_year[b]
                sa = rng.choice(va, size=min(KS_SUBSAMPLE, va.size), replace=False) if va.size else va
                sb = rng.choice(vb, size=min(KS_SUBSAMPLE, vb.size), replace=False) if vb.size else vb
                ks = ks_2samp(sa, sb).statistic if sa.size and sb.size else float("nan")
                report.comparisons.setdefault(spec.name, {})[f"{a}-{b}"] = {
                    "tv": total_variation(summary["years"][str(a)]["histogram"], summary["years"][str(b)]["histogram"]),
                    "ks": float(ks),
                }

    categorical = [(i, c) for i, c in enumerate(schema) if c.categorical]
    for idx, spec in categorical:
        classes = sorted({float(v) for events in balanced.values() for v in np.unique(_channel_values(events, idx))})
        report.landcover[spec.name] = {}
        for year, events in balanced.items():
            values = _channel_values(events, idx)
            report.landcover[spec.name][str(year)] = {
                f"{cls:g}": float(np.count_nonzero(values == cls) / values.size) if values.size else 0.0
                for cls in classes
            }

    sizes: Dict[int, np.ndarray] = {}
    for year, events in balanced.items():
        samples = [s for cube in events for s in window_samples(cube, 1, all_features)]
        counts = np.array([int(np.count_nonzero(s.target)) for s in samples], dtype=np.int64)
        report.zero_fire_probability[str(year)] = float(np.mean(counts == 0)) if counts.size else float("nan")
        sizes[year] = counts
    largest = max((int(v.max()) for v in sizes.values() if v.size), default=0)
    size_edges = np.logspace(0, math.log10(max(largest, 1) + 1), SIZE_BINS + 1)
    report.fire_sizes = {
        "edges": size_edges.tolist(),
        "years": {str(y): np.histogram(v[v > 0], bins=size_edges)[0].tolist() for y, v in sizes.items()},
    }
    return report


# =============================
# Growth curves
# =============================

def growth_curves(cubes: Sequence[FireEventCube], horizon: int = 35) -> Dict[str, Dict[str, Any]]:
    """
    Mean active-pixel count per day since ignition (first non-empty fire mask),
    with a normal-approximation 95% interval, per year.
    """
    if horizon < 2:
        raise AnalysisError(f"horizon must be >= 2, got {horizon}")
    trajectories: Dict[int, List[np.ndarray]] = {}
    for cube in cubes:
        active = cube.fire_masks().reshape(cube.num_days, -1).sum(axis=1)
        trajectories.setdefault(cube.year, [])
        burning = np.flatnonzero(active)
        if burning.size:
            trajectories[cube.year].append(active[burning[0] : burning[0] + horizon].astype(np.float64))
    curves: Dict[str, Dict[str, Any]] = {}
    for year, runs in sorted(trajectories.items()):
        if not runs:
            curves[str(year)] = {
                "mean": [0.0] * horizon, "lower": [0.0] * horizon, "upper": [0.0] * horizon,
                "n": [0] * horizon, "no_fires": True, "single_event": False,
            }
            continue
        mean, lower, upper, count = [], [], [], []
        for day in range(horizon):
            values = np.array([r[day] for r in runs if r.size > day])
            if not values.size:
                break
            sd = values.std(ddof=1) if values.size > 1 else 0.0
            half = 1.96 * sd / math.sqrt(values.size)
            mean.append(float(values.mean()))
            lower.append(float(values.mean() - half))
            upper.append(float(values.mean() + half))
            count.append(int(values.size))
        curves[str(year)] = {
            "mean": mean, "lower": lower, "upper": upper, "n": count,
            "no_fires": False, "single_event": len(runs) == 1,
        }
    return curves


# =============================
# AP versus fire size
# =============================

def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(pearsonr(x, y)[0])


def ap_vs_size(per_event: Sequence[Dict[str, Any]], bins: int = SIZE_BINS) -> Dict[str, Any]:
    """
    Pearson r between log10(fire size) and per-event AP (overall and per test
    year) plus mean AP in log-spaced size bins.
    """
    table = pd.DataFrame(list(per_event), columns=["event_id", "year", "ap", "size"])
    table = table[(table["size"] > 0) & table["ap"].notna()].reset_index(drop=True)
    if len(table) < 3:
        raise AnalysisError(f"need at least 3 events with positive size, got {len(table)}")
    table["log10_size"] = np.log10(table["size"].astype(np.float64))
    overall = _pearson(table["log10_size"].to_numpy(), table["ap"].to_numpy())
    per_year = {
        str(year): _pearson(group["log10_size"].to_numpy(), group["ap"].to_numpy())
        for year, group in table.groupby("year", sort=True)
    }
    lo, hi = table["log10_size"].min(), table["log10_size"].max()
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    table["bin"] = np.clip(np.digitize(table["log10_size"], edges) - 1, 0, bins - 1)
    binned = table.groupby("bin")["ap"].agg(["mean", "count"]).reindex(range(bins))
    return {
        "r": overall,
        "r_undefined": math.isnan(overall),
        "r_per_year": per_year,
        "bin_edges_log10": edges.tolist(),
        "bin_mean_ap": binned["mean"].tolist(),
        "bin_count": binned["count"].fillna(0).astype(int).tolist(),
        "table": table[["event_id", "year", "ap", "size", "log10_size"]],
    }


# =============================
# Cross-year matrix
# =============================

@dataclass
class CrossYearMatrix:
    years: List[int]
    cells: List[List[float]]
    failed: List[int] = field(default_factory=list)

    @property
    def row_averages(self) -> List[float]:
        return [_nanmean(row) for row in self.cells]

    @property
    def column_averages(self) -> List[float]:
        return [_nanmean([row[j] for row in self.cells]) for j in range(len(self.years))]

    @property
    def diagonal_mean(self) -> float:
        return _nanmean([self.cells[i][i] for i in range(len(self.years))])

    @property
    def off_diagonal_mean(self) -> float:
        n = len(self.years)
        return _nanmean([self.cells[i][j] for i in range(n) for j in range(n) if i != j])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "years": self.years,
            "cells": self.cells,
            "row_averages": self.row_averages,
            "column_averages": self.column_averages,
            "diagonal_mean": self.diagonal_mean,
            "off_diagonal_mean": self.off_diagonal_mean,
            "failed_rows": self.failed,
        }

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.cells, index=self.years, columns=self.years)
        frame.index.name = "train_year"
        return frame


def _cross_year_row(
    model_config: ModelConfig, protocol: CrossYearProtocol, samples: Sequence[WindowSample], cfg: TrainConfig, year: int
) -> List[float]:
    plan = protocol.plan_for(year)
    train, val, _ = split_samples(samples, plan, protocol.shared_validation)
    if not train or not val:
        raise AnalysisError(f"year {year}: empty training or validation split")
    stats = compute_stats(train)
    record = train_run(model_config, normalize(train, stats), normalize(val, stats), cfg)
    model = model_from_state(model_config, record.best_states[cfg.selection_metric])
    row = []
    for other in protocol.plans:
        _, _, test = split_samples(samples, other)
        row.append(evaluate(model, normalize(test, stats), cfg.threshold, cfg.eval_batch_size)["ap"])
    return row


def cross_year_run(
    samples: Sequence[WindowSample],
    protocol: CrossYearProtocol,
    model_config: ModelConfig,
    cfg: TrainConfig,
    *,
    parallel: int = 1,
) -> CrossYearMatrix:
    """
    One model per training year (checkpoint chosen on the shared validation
    set), evaluated on every year's test set. A failed row becomes NaN.
    """
    years = [plan.test_years[0] for plan in protocol.plans]
    if len(years) < 2:
        raise AnalysisError("the cross-year experiment needs at least 2 years")
    jobs = [(year, _cross_year_row, (model_config, protocol, list(samples), cfg, year)) for year in years]
    results = run_jobs(jobs, parallel=parallel)
    cells, failed = [], []
    for year in years:
        res = results[year]
        if res.ok:
            cells.append([float(v) for v in res.value])
        else:
            failed.append(year)
            cells.append([float("nan")] * len(years))
            event_log.log_event("cell_failed", {"train_year": year, "error": str(res.error)})
    return CrossYearMatrix(years, cells, failed)


# =============================
# Dataset diff
# =============================

def _band_moments(root: Path, events: Sequence[Path], schema) -> Dict[str, np.ndarray]:
    channels = len(schema)
    total = np.zeros(channels)
    total_sq = np.zeros(channels)
    count = np.zeros(channels)
    for event in events:
        raster = load_event(event, schema).raster.astype(np.float64)
        finite = np.isfinite(raster)
        filled = np.where(finite, raster, 0.0)
        total += filled.sum(axis=(0, 2, 3))
        total_sq += (filled ** 2).sum(axis=(0, 2, 3))
        count += finite.sum(axis=(0, 2, 3))
    count = np.maximum(count, 1)
    mean = total / count
    return {"mean": mean, "std": np.sqrt(np.maximum(total_sq / count - mean ** 2, 0.0))}


def _relative(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.divide(np.abs(a - b), scale, out=np.zeros_like(a), where=scale > 0)


def dataset_diff(root_a: Path, root_b: Path, tolerance: Optional[float] = None) -> Dict[str, Any]:
    """
    Per-band mean/std relative differences between two dataset roots, over
    the events both contain.
    """
    tolerance = settings.extra.get("diff_tolerance", 1e-5) if tolerance is None else tolerance
    schema_a, schema_b = load_schema(root_a), load_schema(root_b)
    if [c.name for c in schema_a] != [c.name for c in schema_b]:
        raise DatasetDiffError("schemas differ: " + ", ".join(c.name for c in schema_a) + " vs " + ", ".join(c.name for c in schema_b))
    events_a = {(year, p.name): p for year, paths in scan_dataset(root_a).items() for p in paths}
    events_b = {(year, p.name): p for year, paths in scan_dataset(root_b).items() for p in paths}
    shared = sorted(set(events_a) & set(events_b))
    only_a = sorted(f"{y}/{e}" for y, e in set(events_a) - set(events_b))
    only_b = sorted(f"{y}/{e}" for y, e in set(events_b) - set(events_a))
    if not shared:
        raise DatasetDiffError(f"no shared events; only in a: {only_a}; only in b: {only_b}")
    moments_a = _band_moments(root_a, [events_a[k] for k in shared], schema_a)
    moments_b = _band_moments(root_b, [events_b[k] for k in shared], schema_b)
    rel_mean = _relative(moments_a["mean"], moments_b["mean"])
    rel_std = _relative(moments_a["std"], moments_b["std"])
    bands = {
        spec.name: {
            "mean_a": float(moments_a["mean"][i]),
            "mean_b": float(moments_b["mean"][i]),
            "std_a": float(moments_a["std"][i]),
            "std_b": float(moments_b["std"][i]),
            "relative_mean_difference": float(rel_mean[i]),
            "relative_std_difference": float(rel_std[i]),
            "flagged": bool(max(rel_mean[i], rel_std[i]) > tolerance),
        }
        for i, spec in enumerate(schema_a)
    }
    max_rel = float(max(rel_mean.max(), rel_std.max()))
    return {
        "shared_events": len(shared),
        "only_in_a": only_a,
        "only_in_b": only_b,
        "tolerance": tolerance,
        "bands": bands,
        "max_relative_difference": max_rel,
        "max_relative_difference_percent": 100.0 * max_rel,
    }


# =============================
# Embedding export
# =============================

def embedding_export(
    model: FireSpreadNet, samples: Sequence[WindowSample], path: Optional[Path] = None, batch_size: int = 32
) -> pd.DataFrame:
    """Pooled deepest-layer features per sample; written as CSV when `path` is given."""
    ref = next(model.parameters())
    model.eval()
    vectors = []
    for start in range(0, len(samples), batch_size):
        x, doy = sample_tensors(samples[start : start + batch_size], ref.dtype, ref.device)
        vectors.append(deepest_features(model, x, doy).cpu().numpy())
    width = model.config.deepest_width
    matrix = np.concatenate(vectors) if vectors else np.zeros((0, width))
    frame = pd.DataFrame(matrix, columns=[f"f{i}" for i in range(width)])
    frame.insert(0, "year", [s.year for s in samples])
    frame.insert(0, "date", [s.target_date.isoformat() for s in samples])
    frame.insert(0, "event_id", [s.event_id for s in samples])
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    return frame

