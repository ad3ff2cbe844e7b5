import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from helpers import cube_samples, desk_samples, make_cube, tiny_model_config, tiny_train_config
from src.firespread.core_data import compute_stats, normalize
from src.firespread.errors import ConfigError, ProtocolError, TrainingDivergedError
from src.firespread.folds import FoldPlan, loyo_folds, split_samples
from src.firespread.models import FireSpreadNet, ModelConfig, load_checkpoint
from src.firespread.objectives import prevalence, wilcoxon_signed_rank
from src.firespread.training import (
    EvalReport,
    GridSpec,
    TrainConfig,
    argmax_earliest,
    compare_reports,
    grid_search,
    make_optimizer,
    model_from_state,
    prepare_fold,
    run_ablation,
    run_benchmark,
    run_fold,
    score_metrics,
    select_checkpoint,
    train_run,
)

YEARS = (2018, 2019, 2020)


@pytest.fixture(scope="module")
def samples():
    out = []
    for year in YEARS:
        for idx in range(2):
            out.extend(cube_samples(make_cube(f"{year}_{idx}", year=year, days=4, seed=idx)))
    return out


@pytest.fixture(scope="module")
def fold(samples):
    return prepare_fold(samples, loyo_folds(list(YEARS))[0])


# -- configuration and optimizer -----------------------------------------------

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(iterations=0)
    with pytest.raises(ConfigError):
        TrainConfig(loss="hinge")
    with pytest.raises(ConfigError):
        TrainConfig(selection_metric="loss")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"iteration": 5})
    cfg = tiny_train_config(loss="dice")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_adamw_first_step_closed_form():
    theta = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64, requires_grad=True)
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01)
    optimizer = make_optimizer([theta], cfg)
    loss = 0.5 * (theta ** 2).sum()
    loss.backward()
    grad = theta.detach().clone()
    expected = grad * (1 - 0.1 * 0.01) - 0.1 * grad / (grad.abs() + 1e-8)
    optimizer.step()
    torch.testing.assert_close(theta.detach(), expected, atol=1e-12, rtol=0)


@pytest.mark.parametrize(
    "trace, expected",
    [([0.2, 0.5, 0.4], 1), ([0.5, 0.5, 0.1], 0), ([float("nan"), 0.1], 1), ([float("nan")] * 3, 0)],
)
def test_argmax_earliest(trace, expected):
    assert argmax_earliest(trace) == expected


def test_score_metrics_on_empty_split():
    metrics = score_metrics([], [])
    assert math.isnan(metrics["ap"]) and metrics["skipped"] == 0


# -- single runs ---------------------------------------------------------------

@pytest.mark.parametrize("iterations, eval_every, steps", [(4, 2, [2, 4]), (5, 2, [2, 4, 5]), (1, 2, [1])])
def test_evaluation_schedule(fold, iterations, eval_every, steps):
    train, val, _ = fold
    record = train_run(tiny_model_config(), train, val, tiny_train_config(iterations=iterations, eval_every=eval_every))
    assert [e["step"] for e in record.evaluations] == steps


def test_best_values_follow_the_trace(fold):
    train, val, _ = fold
    record = train_run(tiny_model_config(), train, val, tiny_train_config(iterations=6, eval_every=1))
    for metric in ("AP", "F1"):
        trace = [e[metric.lower()] for e in record.evaluations]
        idx = argmax_earliest(trace)
        assert record.best_step[metric] == record.evaluations[idx]["step"]
        assert record.best_value[metric] == trace[idx]
        step, state = select_checkpoint(record, metric)
        assert step == record.best_step[metric]
        assert set(state) == set(FireSpreadNet(tiny_model_config()).state_dict())
    with pytest.raises(ConfigError):
        select_checkpoint(record, "loss")


def test_checkpoints_hold_the_selected_states(fold, tmp_path: Path):
    train, val, test = fold
    record = train_run(tiny_model_config(), train, val, tiny_train_config(), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["best_ap.pt", "best_f1.pt"]
    assert record.best_checkpoint == str(tmp_path / "best_ap.pt")
    restored = load_checkpoint(tmp_path / "best_f1.pt")
    for name, value in record.best_states["F1"].items():
        assert torch.equal(restored.state_dict()[name], value)
    reloaded = model_from_state(tiny_model_config(), record.best_states["AP"])
    assert not reloaded.training


def test_training_is_deterministic(fold):
    train, val, _ = fold
    cfg = tiny_train_config(seed=11)
    first = train_run(tiny_model_config(), train, val, cfg)
    second = train_run(tiny_model_config(), train, val, cfg)
    assert first.to_dict(include_timing=False) == second.to_dict(include_timing=False)
    for name, value in first.best_states["AP"].items():
        assert torch.equal(second.best_states["AP"][name], value)


def test_non_finite_loss_stops_the_run(fold):
    train, val, _ = fold
    model = FireSpreadNet(tiny_model_config())
    with torch.no_grad():
        model.decoder.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as info:
        train_run(tiny_model_config(), train, val, tiny_train_config(), model=model)
    assert info.value.step == 1
    assert info.value.diagnostic()["step"] == 1


def test_empty_splits_are_rejected(fold):
    train, val, _ = fold
    with pytest.raises(ProtocolError):
        train_run(tiny_model_config(), [], val, tiny_train_config())
    with pytest.raises(ProtocolError):
        prepare_fold(train, FoldPlan(0, "loyo", train_years=(2018,), val_years=(2019,), test_years=(2025,)))


def test_prepare_fold_uses_training_statistics(samples):
    plan = loyo_folds(list(YEARS))[2]
    train, val, test = prepare_fold(samples, plan)
    raw_train, raw_val, _ = split_samples(samples, plan)
    expected = normalize(raw_val, compute_stats(raw_train))
    for got, want in zip(val, expected):
        np.testing.assert_array_equal(got.inputs, want.inputs)
    assert len(test) == 6


# -- benchmark -----------------------------------------------------------------

def test_benchmark_report(samples, tmp_path: Path):
    plans = loyo_folds(list(YEARS))
    report = run_benchmark(tiny_model_config(), plans, samples, tiny_train_config())
    summary = report.summary()
    assert summary["n_folds"] == 6 and not summary["partial"]
    aps = [f.ap for f in report.folds]
    assert summary["mean_ap"] == pytest.approx(np.mean(aps))
    assert summary["std_ap"] == pytest.approx(np.std(aps, ddof=1))
    assert set(summary["per_year"]) == {str(y) for y in YEARS}
    for result in report.folds:
        assert result.test_years == list(plans[result.fold_id].test_years)
        assert {e["event_id"] for e in result.per_event} == {f"{result.test_years[0]}_0", f"{result.test_years[0]}_1"}
        assert 0.0 <= result.baseline_ap <= 1.0
    paths = report.write(tmp_path)
    document = json.loads(paths["report"].read_text())
    assert "seconds" not in json.dumps(document)
    assert set(json.loads(paths["timing"].read_text())["folds"]) == {str(i) for i in range(6)}
    assert len(paths["folds"].read_text().splitlines()) == 7


def test_single_fold_reports_zero_spread(samples):
    report = run_benchmark(tiny_model_config(), loyo_folds(list(YEARS))[:1], samples, tiny_train_config())
    summary = report.summary()
    assert summary["single_fold"]
    assert summary["std_ap"] == 0.0


def test_failed_fold_makes_a_partial_report(samples):
    plans = loyo_folds(list(YEARS))[:1] + [
        FoldPlan(1, "loyo", train_years=(2018,), val_years=(2019,), test_years=(2025,))
    ]
    report = run_benchmark(tiny_model_config(), plans, samples, tiny_train_config())
    assert report.missing_folds == [1]
    assert "ProtocolError" in report.folds[1].error
    summary = report.summary()
    assert summary["partial"] and summary["n_folds"] == 1
    with pytest.raises(ProtocolError):
        run_benchmark(tiny_model_config(), [], samples, tiny_train_config())


# -- grid search, ablation, comparison ----------------------------------------

def test_grid_of_one_point(samples):
    plan = loyo_folds(list(YEARS))[0]
    rows = grid_search(tiny_model_config(), GridSpec([1e-3], ["bce"], [False]), plan, samples, tiny_train_config())
    assert len(rows) == 1
    assert rows[0]["rank"] == 1 and rows[0]["error"] is None
    assert rows[0]["learning_rate"] == 1e-3 and rows[0]["loss"] == "bce"


def test_grid_ranking_and_pretraining_guard(samples):
    plan = loyo_folds(list(YEARS))[0]
    rows = grid_search(tiny_model_config(), GridSpec([1e-2, 1e-3], ["bce", "focal"], [False]), plan, samples, tiny_train_config())
    assert [r["rank"] for r in rows] == [1, 2, 3, 4]
    values = [r["val_ap"] for r in rows]
    assert values == sorted(values, reverse=True)
    with pytest.raises(ConfigError):
        grid_search(tiny_model_config(), GridSpec([1e-3], ["bce"], [True]), plan, samples, tiny_train_config())
    with pytest.raises(ConfigError):
        grid_search(tiny_model_config(), GridSpec([], ["bce"], [False]), plan, samples, tiny_train_config())


def test_ablation_rows(samples):
    plans = loyo_folds(list(YEARS))[:2]
    rows = run_ablation(tiny_model_config(), plans, samples, tiny_train_config())
    assert [r["variant"] for r in rows] == ["full", "no_focal_loss", "no_ap_selection"]
    assert rows[0]["percent_decrease"] == pytest.approx(0.0)


def _report(aps):
    return {"folds": [{"fold_id": i, "ap": ap, "error": None} for i, ap in enumerate(aps)]}


def test_compare_reports_pairs_by_fold():
    a = _report([0.3, 0.4, 0.5, 0.6, 0.2])
    b = _report([0.25, 0.42, 0.41, 0.5, 0.1, 0.9])
    b["folds"][2]["error"] = "ProtocolError: boom"
    result = compare_reports(a, b)
    assert result["fold_ids"] == [0, 1, 3, 4]
    w, p = wilcoxon_signed_rank([0.3, 0.4, 0.6, 0.2], [0.25, 0.42, 0.5, 0.1])
    assert (result["W"], result["p"]) == (w, p)
    assert result["mean_ap_a"] == pytest.approx(0.375)
    with pytest.raises(ProtocolError):
        compare_reports(_report([0.1]), {"folds": []})


def test_compare_accepts_eval_reports(samples):
    report = run_benchmark(tiny_model_config(), loyo_folds(list(YEARS))[:2], samples, tiny_train_config())
    result = compare_reports(report, EvalReport(report.folds))
    assert result["n"] == 2
    assert result["p"] == 1.0


def test_run_fold_keeps_checkpoints_under_out_dir(samples, tmp_path: Path):
    result = run_fold(tiny_model_config(), loyo_folds(list(YEARS))[0], samples, tiny_train_config(), out_dir=tmp_path)
    assert result.run["checkpoint_paths"]["AP"] == "checkpoints/fold_00/best_ap.pt"
    assert load_checkpoint(tmp_path / result.run["checkpoint_paths"]["F1"]).config == tiny_model_config()


# -- longer runs ---------------------------------------------------------------

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def desk_runs():
    """Fold 0 of LOYO at full size, default model and recipe, one run per seed."""
    plan = loyo_folds(list(YEARS))[0]
    runs = []
    for seed in SEEDS:
        samples = desk_samples(seed, YEARS)
        result = run_fold(ModelConfig(), plan, samples, TrainConfig(seed=seed))
        runs.append((result, prevalence(split_samples(samples, plan)[2])))
    return runs


@pytest.mark.slow
def test_training_beats_prevalence_and_persistence(desk_runs):
    runs = desk_runs[:3]
    assert all(result.error is None for result, _ in runs)
    assert np.median([result.ap / rate for result, rate in runs]) >= 2.0
    assert np.median([result.ap / result.baseline_ap for result, _ in runs]) >= 0.9


@pytest.mark.slow
def test_ap_selection_is_not_worse_than_f1_selection(desk_runs):
    assert np.median([result.ap for result, _ in desk_runs]) >= np.median([result.ap_f1_selected for result, _ in desk_runs])
