"""
Deterministic training, checkpoint selection, and fold-plan execution.

One training pass logs validation AP and F1 at every evaluation and keeps the
best state for each, so AP-selected and F1-selected test scores come out of
the same run.
"""

from __future__ import annotations

import copy
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from . import config_store, event_log
from .core_data import WindowSample, compute_stats, fire_size, normalize
from .errors import ConfigError, ProtocolError, TrainingDivergedError
from .folds import FoldPlan, split_samples
from .models import (
    FireSpreadNet,
    ModelConfig,
    build_model,
    count_parameters,
    predict_scores,
    sample_tensors,
    save_checkpoint,
)
from .objectives import (
    LOSSES,
    FocalConfig,
    alpha_from_prevalence,
    f1_at_threshold,
    macro_average_precision,
    make_loss,
    pooled_average_precision,
    wilcoxon_signed_rank,
)
from .scheduler import run_jobs
from .synthetic import persistence_scores
from .utils_misc import config_hash
from src.config import settings

SELECTION_METRICS = ("AP", "F1")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    loss: str = "focal"
    selection_metric: str = "AP"
    seed: int = 0
    eval_every: int = 200
    focal_gamma: float = 2.0
    focal_alpha: Optional[float] = None
    dice_eps: float = 1.0
    pos_weight: float = 1.0
    threshold: float = 0.5
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"selection_metric must be one of {SELECTION_METRICS}")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known - {"format_version"})
        if unknown:
            raise ConfigError(f"unknown train config key(s): {', '.join(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class RunRecord:
    config_hash: str
    selection_metric: str
    eval_every: int
    evaluations: List[Dict[str, float]] = field(default_factory=list)
    best_step: Dict[str, int] = field(default_factory=dict)
    best_value: Dict[str, float] = field(default_factory=dict)
    checkpoint_paths: Dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0
    test_metrics: Dict[str, float] = field(default_factory=dict)
    parameter_count: int = 0
    best_states: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict, repr=False)

    @property
    def best_checkpoint(self) -> Optional[str]:
        return self.checkpoint_paths.get(self.selection_metric)

    def to_dict(self, *, include_timing: bool = True) -> Dict[str, Any]:
        doc = {
            "config_hash": self.config_hash,
            "selection_metric": self.selection_metric,
            "eval_every": self.eval_every,
            "evaluations": self.evaluations,
            "best_step": self.best_step,
            "best_value": self.best_value,
            "checkpoint_paths": self.checkpoint_paths,
            "test_metrics": self.test_metrics,
            "parameter_count": self.parameter_count,
        }
        if include_timing:
            doc["seconds"] = self.seconds
        return doc


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.use_deterministic_algorithms(True, warn_only=True)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=cfg.weight_decay
    )


def argmax_earliest(values: Sequence[float]) -> int:
    """Index of the maximum; NaN never wins; ties go to the first occurrence."""
    best, best_value = 0, -math.inf
    for idx, value in enumerate(values):
        value = -math.inf if value is None or math.isnan(value) else value
        if value > best_value:
            best, best_value = idx, value
    return best


def score_metrics(scores: Sequence[np.ndarray], samples: Sequence[WindowSample], thr: float = 0.5) -> Dict[str, float]:
    """Pooled AP, macro AP (with skipped count) and pooled F1 at `thr`."""
    if not samples:
        return {"ap": float("nan"), "macro_ap": float("nan"), "skipped": 0, "f1": float("nan")}
    macro, skipped = macro_average_precision(scores, samples)
    flat_scores = np.concatenate([s[sample.valid] for s, sample in zip(scores, samples)])
    flat_labels = np.concatenate([sample.target[sample.valid] for sample in samples])
    return {
        "ap": pooled_average_precision(scores, samples),
        "macro_ap": macro,
        "skipped": skipped,
        "f1": f1_at_threshold(flat_scores, flat_labels, thr),
    }


def evaluate(model: FireSpreadNet, samples: Sequence[WindowSample], thr: float = 0.5, batch_size: int = 32) -> Dict[str, float]:
    return score_metrics(predict_scores(model, samples, batch_size), samples, thr)


def _parameter_norm(model: FireSpreadNet) -> float:
    with torch.no_grad():
        return float(torch.sqrt(sum((p.double() ** 2).sum() for p in model.parameters())))


def train_run(
    model_config: ModelConfig,
    train: Sequence[WindowSample],
    val: Sequence[WindowSample],
    cfg: TrainConfig,
    *,
    checkpoint_dir: Optional[Path] = None,
    model: Optional[FireSpreadNet] = None,
) -> RunRecord:
    """
    Exactly cfg.iterations AdamW steps over seeded, per-epoch reshuffled
    batches; validation every eval_every steps and after the last step.
    """
    if not train or not val:
        raise ProtocolError("training and validation splits must be non-empty")
    seed_everything(cfg.seed)
    if model is None:
        model = build_model(model_config, seed=cfg.seed)
    alpha = cfg.focal_alpha if cfg.focal_alpha is not None else alpha_from_prevalence(train)
    loss_fn = make_loss(
        cfg.loss, focal=FocalConfig(alpha, cfg.focal_gamma), pos_weight=cfg.pos_weight, eps=cfg.dice_eps
    )
    device = torch.device(settings.device)
    model.to(device)
    optimizer = make_optimizer(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    record = RunRecord(
        config_hash=config_hash({"model": model_config.to_dict(), "train": cfg.to_dict()}),
        selection_metric=cfg.selection_metric,
        eval_every=cfg.eval_every,
        parameter_count=count_parameters(model),
    )
    best = {metric: -math.inf for metric in SELECTION_METRICS}
    event_log.log_event("run_started", {"config_hash": record.config_hash, "train": len(train), "val": len(val)})
    started = time.perf_counter()
    order: List[int] = []
    model.train()
    for step in range(1, cfg.iterations + 1):
        while len(order) < cfg.batch_size:
            order.extend(int(i) for i in rng.permutation(len(train)))
        batch = [train[i] for i in order[: cfg.batch_size]]
        del order[: cfg.batch_size]
        x, doy = sample_tensors(batch, dtype, device)
        target = torch.from_numpy(np.stack([s.target for s in batch])).to(device=device, dtype=dtype)
        valid = torch.from_numpy(np.stack([s.valid for s in batch])).to(device)
        loss = loss_fn(model(x, doy), target, valid)
        if not torch.isfinite(loss):
            error = TrainingDivergedError(step, _parameter_norm(model), float(loss))
            event_log.log_event("run_diverged", {"config_hash": record.config_hash, **error.diagnostic()})
            raise error
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if step % cfg.eval_every == 0 or step == cfg.iterations:
            metrics = evaluate(model, val, cfg.threshold, cfg.eval_batch_size)
            entry = {"step": step, "loss": float(loss), "ap": metrics["ap"], "f1": metrics["f1"]}
            record.evaluations.append(entry)
            event_log.log_event("evaluation", {"config_hash": record.config_hash, **entry})
            for metric, key in (("AP", "ap"), ("F1", "f1")):
                value = -math.inf if math.isnan(metrics[key]) else metrics[key]
                if value > best[metric] or metric not in record.best_states:
                    best[metric] = value
                    record.best_step[metric] = step
                    record.best_value[metric] = metrics[key]
                    record.best_states[metric] = copy.deepcopy(model.state_dict())
    record.seconds = time.perf_counter() - started
    if checkpoint_dir is not None:
        for metric, state in record.best_states.items():
            model.load_state_dict(state)
            path = save_checkpoint(model, Path(checkpoint_dir) / f"best_{metric.lower()}.pt")
            record.checkpoint_paths[metric] = str(path)
        model.load_state_dict(record.best_states[cfg.selection_metric])
    event_log.log_event("run_finished", {"config_hash": record.config_hash, "best_step": record.best_step})
    return record


def select_checkpoint(record: RunRecord, metric: str = "AP") -> Tuple[int, Dict[str, torch.Tensor]]:
    """(step, state_dict) of the evaluation maximizing the named validation metric."""
    if metric not in SELECTION_METRICS:
        raise ConfigError(f"metric must be one of {SELECTION_METRICS}")
    if not record.evaluations:
        raise ConfigError("run has no logged evaluations")
    trace = [e[metric.lower()] for e in record.evaluations]
    step = record.evaluations[argmax_earliest(trace)]["step"]
    return step, record.best_states.get(metric, {})


def model_from_state(model_config: ModelConfig, state: Dict[str, torch.Tensor]) -> FireSpreadNet:
    """Fresh model of `model_config` holding a recorded state dict."""
    model = FireSpreadNet(dataclasses.replace(model_config, checkpoint_path=None))
    model.load_state_dict(state)
    return model.eval()


# =============================
# Fold execution
# =============================

def prepare_fold(
    samples: Sequence[WindowSample], plan: FoldPlan, shared_validation: Optional[Sequence[str]] = None
) -> Tuple[List[WindowSample], List[WindowSample], List[WindowSample]]:
    """Split under a plan and normalize every split with training-only statistics."""
    train, val, test = split_samples(samples, plan, shared_validation)
    if not train or not val or not test:
        raise ProtocolError(
            f"fold {plan.fold_id}: empty split (train={len(train)}, val={len(val)}, test={len(test)})"
        )
    stats = compute_stats(train)
    return normalize(train, stats), normalize(val, stats), normalize(test, stats)


@dataclass
class FoldResult:
    fold_id: int
    test_years: List[int]
    ap: float = float("nan")
    ap_f1_selected: float = float("nan")
    macro_ap: float = float("nan")
    f1: float = float("nan")
    baseline_ap: float = float("nan")
    params: int = 0
    seconds: float = 0.0
    per_year: Dict[str, float] = field(default_factory=dict)
    per_event: List[Dict[str, Any]] = field(default_factory=list)
    run: Optional[Dict[str, Any]] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _grouped_ap(scores: List[np.ndarray], samples: Sequence[WindowSample], key) -> Dict[Any, Tuple[float, int]]:
    groups: Dict[Any, List[int]] = {}
    for idx, sample in enumerate(samples):
        groups.setdefault(key(sample), []).append(idx)
    return {
        k: (
            pooled_average_precision([scores[i] for i in idx], [samples[i] for i in idx]),
            sum(fire_size(samples[i]) for i in idx),
        )
        for k, idx in groups.items()
    }


def run_fold(
    model_config: ModelConfig,
    plan: FoldPlan,
    samples: Sequence[WindowSample],
    cfg: TrainConfig,
    shared_validation: Optional[Sequence[str]] = None,
    out_dir: Optional[Path] = None,
) -> FoldResult:
    """
    Train, select and test one fold. With `out_dir` the best checkpoints go to
    out_dir/checkpoints/fold_XX and the run records them relative to out_dir.
    """
    train, val, test = prepare_fold(samples, plan, shared_validation)
    checkpoint_dir = Path(out_dir) / "checkpoints" / f"fold_{plan.fold_id:02d}" if out_dir is not None else None
    record = train_run(model_config, train, val, cfg, checkpoint_dir=checkpoint_dir)
    if out_dir is not None:
        record.checkpoint_paths = _relative_paths(record.checkpoint_paths, Path(out_dir))
    result = FoldResult(
        plan.fold_id,
        sorted({s.year for s in test}),
        params=record.parameter_count,
        seconds=record.seconds,
    )
    f1_model = model_from_state(model_config, record.best_states["F1"])
    result.ap_f1_selected = evaluate(f1_model, test, cfg.threshold, cfg.eval_batch_size)["ap"]
    model = model_from_state(model_config, record.best_states[cfg.selection_metric])
    scores = predict_scores(model, test, cfg.eval_batch_size)
    metrics = score_metrics(scores, test, cfg.threshold)
    result.ap, result.macro_ap, result.f1 = metrics["ap"], metrics["macro_ap"], metrics["f1"]
    result.baseline_ap = pooled_average_precision([persistence_scores(s) for s in test], test)
    result.per_year = {str(year): ap for year, (ap, _) in sorted(_grouped_ap(scores, test, lambda s: s.year).items())}
    result.per_event = [
        {"event_id": event_id, "year": year, "ap": ap, "size": size}
        for (event_id, year), (ap, size) in sorted(_grouped_ap(scores, test, lambda s: (s.event_id, s.year)).items())
    ]
    record.test_metrics = {"ap": result.ap, "ap_f1_selected": result.ap_f1_selected, "f1": result.f1}
    result.run = record.to_dict(include_timing=False)
    return result


def _relative_paths(paths: Dict[str, str], root: Path) -> Dict[str, str]:
    return {metric: Path(p).relative_to(root).as_posix() for metric, p in paths.items()}


def _run_fold_job(model_config, plan, samples, cfg, shared_validation=None, out_dir=None) -> FoldResult:
    try:
        return run_fold(model_config, plan, samples, cfg, shared_validation, out_dir)
    except Exception as exc:
        event_log.log_error(exc, fold_id=plan.fold_id)
        event_log.log_event("fold_failed", {"fold_id": plan.fold_id, "error": str(exc)})
        return FoldResult(plan.fold_id, list(plan.test_years), error=f"{type(exc).__name__}: {exc}")


# =============================
# Benchmark report
# =============================

def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    values = [v for v in values if not math.isnan(v)]
    if not values:
        return float("nan"), float("nan")
    if len(values) == 1:
        return float(values[0]), 0.0
    return float(np.mean(values)), float(np.std(values, ddof=1))


@dataclass
class EvalReport:
    folds: List[FoldResult]
    model_config: Dict[str, Any] = field(default_factory=dict)
    train_config: Dict[str, Any] = field(default_factory=dict)

    @property
    def completed(self) -> List[FoldResult]:
        return [f for f in self.folds if f.ok]

    @property
    def missing_folds(self) -> List[int]:
        return [f.fold_id for f in self.folds if not f.ok]

    def summary(self) -> Dict[str, Any]:
        done = self.completed
        mean_ap, std_ap = _mean_std([f.ap for f in done])
        mean_f1_sel, std_f1_sel = _mean_std([f.ap_f1_selected for f in done])
        mean_base, std_base = _mean_std([f.baseline_ap for f in done])
        years: Dict[str, List[float]] = {}
        for fold in done:
            for year, ap in fold.per_year.items():
                years.setdefault(year, []).append(ap)
        return {
            "n_folds": len(done),
            "single_fold": len(done) == 1,
            "partial": bool(self.missing_folds),
            "missing_folds": self.missing_folds,
            "mean_ap": mean_ap,
            "std_ap": std_ap,
            "mean_ap_f1_selected": mean_f1_sel,
            "std_ap_f1_selected": std_f1_sel,
            "mean_baseline_ap": mean_base,
            "std_baseline_ap": std_base,
            "parameter_count": done[0].params if done else 0,
            "per_year": {year: _mean_std(values)[0] for year, values in sorted(years.items())},
        }

    def to_dict(self) -> Dict[str, Any]:
        """Metric document; holds no wall-clock values."""
        return {
            "summary": self.summary(),
            "model_config": self.model_config,
            "train_config": self.train_config,
            "folds": [
                {
                    "fold_id": f.fold_id,
                    "test_years": f.test_years,
                    "ap": f.ap,
                    "ap_f1_selected": f.ap_f1_selected,
                    "macro_ap": f.macro_ap,
                    "f1": f.f1,
                    "baseline_ap": f.baseline_ap,
                    "params": f.params,
                    "per_year": f.per_year,
                    "per_event": f.per_event,
                    "run": f.run,
                    "error": f.error,
                }
                for f in self.folds
            ],
        }

    def timing(self) -> Dict[str, Any]:
        return {"folds": {str(f.fold_id): f.seconds for f in self.folds}, "total_seconds": sum(f.seconds for f in self.folds)}

    def fold_table(self) -> pd.DataFrame:
        rows = [
            {
                "fold_id": f.fold_id,
                "test_years": ";".join(str(y) for y in f.test_years),
                "ap": f.ap,
                "f1": f.f1,
                "baseline_ap": f.baseline_ap,
                "params": f.params,
                "seconds": f.seconds,
            }
            for f in self.folds
        ]
        return pd.DataFrame(rows, columns=["fold_id", "test_years", "ap", "f1", "baseline_ap", "params", "seconds"])

    def event_table(self) -> pd.DataFrame:
        rows = [dict(entry, fold_id=f.fold_id) for f in self.completed for entry in f.per_event]
        return pd.DataFrame(rows, columns=["fold_id", "event_id", "year", "ap", "size"])

    def write(self, out_dir: Path) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": config_store.save_document(self.to_dict(), out_dir / "report.json"),
            "timing": config_store.save_document(self.timing(), out_dir / "timing.json"),
            "folds": out_dir / "folds.csv",
            "events": out_dir / "events.csv",
        }
        self.fold_table().to_csv(paths["folds"], index=False)
        self.event_table().to_csv(paths["events"], index=False)
        return paths


def run_benchmark(
    model_config: ModelConfig,
    plans: Sequence[FoldPlan],
    samples: Sequence[WindowSample],
    cfg: TrainConfig,
    *,
    parallel: int = 1,
    out_dir: Optional[Path] = None,
) -> EvalReport:
    """Train and test every fold; a failed fold is reported, the rest continue."""
    if not plans:
        raise ProtocolError("no fold plans given")
    jobs = [(plan.fold_id, _run_fold_job, (model_config, plan, list(samples), cfg, None, out_dir)) for plan in plans]
    results = run_jobs(jobs, parallel=parallel)
    folds = []
    for plan in plans:
        res = results[plan.fold_id]
        if res.ok:
            folds.append(res.value)
        else:
            folds.append(FoldResult(plan.fold_id, list(plan.test_years), error=str(res.error)))
    report = EvalReport(sorted(folds, key=lambda f: f.fold_id), model_config.to_dict(), cfg.to_dict())
    for fold in report.completed:
        event_log.echo(f"fold {fold.fold_id} test {fold.test_years}: AP {fold.ap:.4f} (baseline {fold.baseline_ap:.4f})")
    for fold_id in report.missing_folds:
        event_log.echo(f"fold {fold_id} failed", ok=False)
    return report


# =============================
# Grid search
# =============================

@dataclass
class GridSpec:
    learning_rates: List[float] = field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4, 1e-5])
    losses: List[str] = field(default_factory=lambda: list(LOSSES))
    pretraining: List[bool] = field(default_factory=lambda: [False, True])

    def points(self) -> List[Tuple[float, str, bool]]:
        return [(lr, loss, pre) for pre in self.pretraining for loss in self.losses for lr in self.learning_rates]


def _grid_point(model_config, train, val, cfg, lr, loss, pretrained, checkpoint, out_dir=None, idx=0) -> Dict[str, Any]:
    point = {"learning_rate": lr, "loss": loss, "pretrained": pretrained}
    try:
        mc = dataclasses.replace(model_config, checkpoint_path=checkpoint if pretrained else None)
        checkpoint_dir = Path(out_dir) / "checkpoints" / f"point_{idx:02d}" if out_dir is not None else None
        record = train_run(
            mc, train, val, dataclasses.replace(cfg, learning_rate=lr, loss=loss), checkpoint_dir=checkpoint_dir
        )
        trace = [e["ap"] for e in record.evaluations]
        best = trace[argmax_earliest(trace)]
        row = dict(point, val_ap=best, best_step=record.best_step.get("AP"), error=None)
        if out_dir is not None:
            row["checkpoint"] = _relative_paths(record.checkpoint_paths, Path(out_dir)).get("AP")
        return row
    except Exception as exc:
        event_log.log_event("grid_point_failed", dict(point, error=str(exc)))
        return dict(point, val_ap=float("nan"), best_step=None, error=f"{type(exc).__name__}: {exc}")


def grid_search(
    model_config: ModelConfig,
    grid: GridSpec,
    plan: FoldPlan,
    samples: Sequence[WindowSample],
    cfg: TrainConfig,
    *,
    pretrained_checkpoint: Optional[str] = None,
    parallel: int = 1,
    out_dir: Optional[Path] = None,
) -> List[Dict[str, Any]]:
    """
    One run per grid point on a single fold, ranked by best validation AP.
    With `out_dir` each point keeps its AP-best checkpoint under
    out_dir/checkpoints/point_XX.
    """
    points = grid.points()
    if not points:
        raise ConfigError("grid is empty")
    if any(pre for _, _, pre in points) and not pretrained_checkpoint:
        raise ConfigError("pretraining=true in the grid needs a pretrained checkpoint")
    train, val, _ = prepare_fold(samples, plan)
    jobs = [
        (idx, _grid_point, (model_config, train, val, cfg, lr, loss, pre, pretrained_checkpoint, out_dir, idx))
        for idx, (lr, loss, pre) in enumerate(points)
    ]
    results = run_jobs(jobs, parallel=parallel)
    rows: List[Dict[str, Any]] = []
    for idx, (lr, loss, pre) in enumerate(points):
        res = results[idx]
        if res.ok:
            rows.append(res.value)
        else:
            rows.append(
                {"learning_rate": lr, "loss": loss, "pretrained": pre, "val_ap": float("nan"), "best_step": None, "error": str(res.error)}
            )
    order = sorted(range(len(rows)), key=lambda i: (math.isnan(rows[i]["val_ap"]), -np.nan_to_num(rows[i]["val_ap"]), i))
    return [dict(rows[i], rank=rank + 1) for rank, i in enumerate(order)]


# =============================
# Ablation and comparison
# =============================

def run_ablation(
    model_config: ModelConfig,
    plans: Sequence[FoldPlan],
    samples: Sequence[WindowSample],
    cfg: TrainConfig,
    pretrained_checkpoint: Optional[str] = None,
    *,
    parallel: int = 1,
    out_dir: Optional[Path] = None,
) -> List[Dict[str, Any]]:
    """
    Progressive removal from the full recipe (pretraining, focal loss, AP
    selection). The F1-selection row reuses the F1-selected checkpoints of
    the previous row's runs. With `out_dir` each variant keeps its fold
    checkpoints under out_dir/<variant>.
    """
    full = dataclasses.replace(cfg, loss="focal", selection_metric="AP")
    steps: List[Tuple[str, ModelConfig, TrainConfig]] = []
    if pretrained_checkpoint:
        steps.append(("full", dataclasses.replace(model_config, checkpoint_path=pretrained_checkpoint), full))
        steps.append(("no_pretraining", dataclasses.replace(model_config, checkpoint_path=None), full))
    else:
        steps.append(("full", dataclasses.replace(model_config, checkpoint_path=None), full))
    steps.append(("no_focal_loss", dataclasses.replace(model_config, checkpoint_path=None), dataclasses.replace(full, loss="bce")))
    rows: List[Dict[str, Any]] = []
    last: Optional[EvalReport] = None
    for name, mc, tc in steps:
        variant_dir = Path(out_dir) / name if out_dir is not None else None
        last = run_benchmark(mc, plans, samples, tc, parallel=parallel, out_dir=variant_dir)
        summary = last.summary()
        rows.append({"variant": name, "mean_ap": summary["mean_ap"], "std_ap": summary["std_ap"]})
    summary = last.summary()
    rows.append(
        {"variant": "no_ap_selection", "mean_ap": summary["mean_ap_f1_selected"], "std_ap": summary["std_ap_f1_selected"]}
    )
    reference = rows[0]["mean_ap"]
    for row in rows:
        row["percent_decrease"] = (
            100.0 * (reference - row["mean_ap"]) / reference if reference and not math.isnan(reference) else float("nan")
        )
    return rows


def _fold_aps(report: Any) -> Dict[int, float]:
    if isinstance(report, EvalReport):
        report = report.to_dict()
    return {
        int(f["fold_id"]): config_store.nan_or(f["ap"])
        for f in report["folds"]
        if not f.get("error") and f.get("ap") is not None
    }


def compare_reports(report_a: Any, report_b: Any) -> Dict[str, Any]:
    """Paired Wilcoxon signed-rank test over the folds both reports completed."""
    a, b = _fold_aps(report_a), _fold_aps(report_b)
    shared = sorted(set(a) & set(b))
    if not shared:
        raise ProtocolError("reports share no completed fold")
    w, p = wilcoxon_signed_rank([a[k] for k in shared], [b[k] for k in shared])
    return {
        "fold_ids": shared,
        "n": len(shared),
        "mean_ap_a": float(np.mean([a[k] for k in shared])),
        "mean_ap_b": float(np.mean([b[k] for k in shared])),
        "W": w,
        "p": p,
    }
