"""
firespread command-line entry point.

Usage:
    python -m src.cli synth --config synth.json --out data/
    python -m src.cli folds --protocol loyo --years 2018,2019,2020,2021 --out plans/
    python -m src.cli benchmark --plan plans/ --model model.json --data data/ --out results/

Experiment definitions are JSON documents; flags only pick files, seeds and
parallelism. Every command writes resolved_config.json next to its outputs,
and `--config <resolved_config.json>` replays a recorded run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence, Type

from pydantic import BaseModel

from src.config import settings
from src.firespread import config_store, event_log
from src.firespread.analysis import ap_vs_size, cross_year_run, dataset_diff, domain_report, embedding_export, growth_curves
from src.firespread.command_handler import EXIT_OK, EXIT_RUNTIME, add_subparsers, command, dispatch
from src.firespread.core_data import build_samples, compute_stats, load_dataset, normalize, scan_dataset
from src.firespread.errors import ConfigError, ProtocolError
from src.firespread.folds import (
    PROTOCOLS,
    cross_year_protocol,
    index_samples,
    load_cross_year,
    load_plans,
    loyo_folds,
    random_event_folds,
    save_cross_year,
    save_plans,
    wsts_plus_folds,
)
from src.firespread.models import ModelConfig, load_checkpoint, predict_scores, profile_model
from src.firespread.provenance import version_banner, write_resolved_config
from src.firespread.schemas import GridDoc, ModelDoc, SynthDoc, TrainDoc, to_plain
from src.firespread.synthetic import SynthConfig, generate
from src.firespread.training import (
    GridSpec,
    TrainConfig,
    compare_reports,
    grid_search,
    model_from_state,
    prepare_fold,
    run_ablation,
    run_benchmark,
    score_metrics,
    train_run,
)
from src.firespread.utils_misc import parse_years


# =============================
# Shared helpers
# =============================

def _out(args: argparse.Namespace) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args: argparse.Namespace) -> int:
    return settings.seed if args.seed is None else int(args.seed)


def _parallel(args: argparse.Namespace) -> int:
    return settings.parallel if args.parallel is None else max(1, int(args.parallel))


def _document(args: argparse.Namespace, key: str, model: Type[BaseModel], path: Optional[str]) -> BaseModel:
    """Validated document: replayed inline copy, file at `path`, or defaults."""
    inline = getattr(args, "documents", {}).get(key)
    if inline is not None:
        return model.model_validate(inline)
    if path is None:
        return model()
    return model.model_validate(config_store.load_document(Path(path)))


def _model_config(args: argparse.Namespace) -> ModelConfig:
    doc = _document(args, "model", ModelDoc, args.model)
    args.resolved["model"] = doc.model_dump(by_alias=True)
    return ModelConfig.from_dict(to_plain(doc))


def _train_config(args: argparse.Namespace) -> TrainConfig:
    doc = _document(args, "train", TrainDoc, getattr(args, "train_config", None))
    data = to_plain(doc)
    if args.seed is not None:
        data["seed"] = int(args.seed)
    args.resolved["train"] = dict(doc.model_dump(by_alias=True), seed=data["seed"])
    return TrainConfig.from_dict(data)


def _data_root(args: argparse.Namespace) -> Path:
    return Path(args.data) if args.data else settings.data_dir


def _samples(args: argparse.Namespace, model_config: ModelConfig):
    root = _data_root(args)
    samples = build_samples(load_dataset(root), model_config.T, args.features or "All")
    if not samples:
        raise ProtocolError(f"{root}: no samples for T={model_config.T}")
    channels = samples[0].inputs.shape[1]
    if channels != model_config.in_channels:
        raise ConfigError(
            f"model in_channels={model_config.in_channels} but feature set {args.features or 'All'!r} has {channels} channels"
        )
    return samples


FAILURE_EVENTS = ("fold_failed", "grid_point_failed", "cell_failed")


def _report_failures(out: Path) -> None:
    """Collect this command's failed units from the event log into failures.json."""
    failures = [e for e in event_log.audit_log_lookup(None, since_last_command=True) if e["type"] in FAILURE_EVENTS]
    config_store.save_document({"failures": failures}, out / "failures.json")
    for entry in failures:
        event_log.echo(f"{entry['type']}: {entry['data'].get('error')}", ok=False)


def _finish(args: argparse.Namespace, out: Path, message: str, code: int = EXIT_OK) -> int:
    arguments = {k: v for k, v in vars(args).items() if k not in ("documents", "resolved")}
    write_resolved_config(out, args.command, arguments, args.resolved)
    event_log.echo(message, ok=code == EXIT_OK)
    if code != EXIT_OK:
        _report_failures(out)
    return code


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", help="model document (JSON)")
    parser.add_argument("--train-config", dest="train_config", help="training document (JSON)")
    parser.add_argument("--data", help="dataset root (default FIRESPREAD_DATA_DIR)")
    parser.add_argument("--features", help="Veg, Multi, All or a comma-separated channel list (default All)")


# =============================
# Commands
# =============================

def _configure_synth(parser: argparse.ArgumentParser) -> None:
    pass


@command("synth", _configure_synth, help="generate a synthetic multi-year fire dataset")
def cmd_synth(args: argparse.Namespace) -> int:
    out = _out(args)
    if "synth" not in args.documents and not args.config:
        raise ConfigError("--config <synth document> is required")
    doc = _document(args, "synth", SynthDoc, args.config)
    data = to_plain(doc)
    if args.seed is not None:
        data["seed"] = int(args.seed)
    args.resolved["synth"] = dict(doc.model_dump(by_alias=True), seed=data["seed"])
    config = SynthConfig.from_dict(data)
    generate(config, out, parallel=_parallel(args))
    return _finish(args, out, f"wrote {len(config.years)} years x {config.events_per_year} events to {out}")


def _configure_folds(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--protocol", choices=PROTOCOLS, help="cross-validation protocol")
    parser.add_argument("--years", help="'2018,2019,2020' or '2016-2023' (default: years found under --data)")
    parser.add_argument("--data", help="dataset root (needed for random_event and cross_year)")
    parser.add_argument("--k", type=int, help="number of folds for random_event (default 4)")
    parser.add_argument("--val-quota", dest="val_quota", type=int, help="cross_year samples per year (default 10)")
    parser.add_argument("--train-cap", dest="train_cap", type=int, help="cross_year training cap (default 2000)")
    parser.add_argument("--T", dest="T", type=int, help="window length for cross_year sample keys (default 1)")


@command("folds", _configure_folds, help="build cross-validation fold plans")
def cmd_folds(args: argparse.Namespace) -> int:
    out = _out(args)
    if not args.protocol:
        raise ConfigError("--protocol is required")
    if args.years:
        try:
            years = parse_years(args.years)
        except ValueError as exc:
            raise ConfigError(f"--years {args.years!r}: {exc}") from exc
    elif args.data:
        years = sorted(scan_dataset(Path(args.data)))
    else:
        raise ConfigError("--years or --data is required")
    if args.protocol == "loyo":
        plans = loyo_folds(years)
    elif args.protocol == "wsts_plus":
        plans = wsts_plus_folds(years)
    elif args.protocol == "random_event":
        if not args.data:
            raise ConfigError("random_event needs --data")
        events = [p.name for year, paths in scan_dataset(Path(args.data)).items() if year in years for p in paths]
        plans = random_event_folds(events, args.k or 4, _seed(args))
    else:
        if not args.data:
            raise ConfigError("cross_year needs --data")
        samples = build_samples(load_dataset(Path(args.data), years), args.T or 1, "All")
        protocol = cross_year_protocol(index_samples(samples), args.val_quota or 10, args.train_cap or 2000, _seed(args))
        save_cross_year(protocol, out / "cross_year.json")
        return _finish(args, out, f"cross_year protocol for {len(protocol.plans)} years, shared validation {len(protocol.shared_validation)}")
    save_plans(plans, out)
    return _finish(args, out, f"wrote {len(plans)} {args.protocol} fold plans to {out}")


def _configure_train(parser: argparse.ArgumentParser) -> None:
    _common(parser)
    parser.add_argument("--plan", help="fold plan file or directory")
    parser.add_argument("--fold", type=int, default=None, help="fold id when --plan is a directory (default 0)")


def _pick_plan(args: argparse.Namespace, fold: Optional[int]):
    if not args.plan:
        raise ConfigError("--plan is required")
    plans = load_plans(Path(args.plan))
    wanted = fold if fold is not None else plans[0].fold_id
    for plan in plans:
        if plan.fold_id == wanted:
            return plan
    raise ProtocolError(f"no fold {wanted} in {args.plan}")


@command("train", _configure_train, help="train one model on one fold")
def cmd_train(args: argparse.Namespace) -> int:
    out = _out(args)
    model_config = _model_config(args)
    cfg = _train_config(args)
    plan = _pick_plan(args, args.fold)
    train, val, test = prepare_fold(_samples(args, model_config), plan)
    record = train_run(model_config, train, val, cfg, checkpoint_dir=out)
    model = model_from_state(model_config, record.best_states[cfg.selection_metric])
    record.test_metrics = score_metrics(predict_scores(model, test, cfg.eval_batch_size), test, cfg.threshold)
    config_store.save_document(record.to_dict(include_timing=False), out / "run.json")
    config_store.save_document({"seconds": record.seconds}, out / "timing.json")
    return _finish(args, out, f"fold {plan.fold_id}: test AP {record.test_metrics['ap']:.4f}")


def _configure_grid(parser: argparse.ArgumentParser) -> None:
    _configure_train(parser)
    parser.add_argument("--grid", help="grid document (JSON)")


@command("gridsearch", _configure_grid, help="rank learning rate x loss x pretraining on one fold")
def cmd_gridsearch(args: argparse.Namespace) -> int:
    out = _out(args)
    model_config = _model_config(args)
    cfg = _train_config(args)
    grid_doc = _document(args, "grid", GridDoc, args.grid)
    args.resolved["grid"] = grid_doc.model_dump(by_alias=True)
    plan = _pick_plan(args, args.fold if args.fold is not None else grid_doc.fold)
    grid = GridSpec(list(grid_doc.learning_rates), list(grid_doc.losses), list(grid_doc.pretraining))
    ranking = grid_search(
        model_config,
        grid,
        plan,
        _samples(args, model_config),
        cfg,
        pretrained_checkpoint=grid_doc.pretrained_checkpoint,
        parallel=_parallel(args),
        out_dir=out,
    )
    config_store.save_document({"fold_id": plan.fold_id, "ranking": ranking}, out / "ranking.json")
    failed = [row for row in ranking if row["error"]]
    best = ranking[0]
    code = EXIT_RUNTIME if failed else EXIT_OK
    return _finish(args, out, f"best: lr={best['learning_rate']} loss={best['loss']} val AP {best['val_ap']:.4f}", code)


def _configure_benchmark(parser: argparse.ArgumentParser) -> None:
    _common(parser)
    parser.add_argument("--plan", help="fold plan file or directory")


@command("benchmark", _configure_benchmark, help="train and test every fold of a plan set")
def cmd_benchmark(args: argparse.Namespace) -> int:
    out = _out(args)
    model_config = _model_config(args)
    cfg = _train_config(args)
    if not args.plan:
        raise ConfigError("--plan is required")
    plans = load_plans(Path(args.plan))
    report = run_benchmark(model_config, plans, _samples(args, model_config), cfg, parallel=_parallel(args), out_dir=out)
    report.write(out)
    summary = report.summary()
    code = EXIT_RUNTIME if summary["partial"] else EXIT_OK
    return _finish(args, out, f"mean test AP {summary['mean_ap']:.4f} +- {summary['std_ap']:.4f} over {summary['n_folds']} folds", code)


def _configure_crossyear(parser: argparse.ArgumentParser) -> None:
    _common(parser)
    parser.add_argument("--protocol", help="cross_year.json written by `folds --protocol cross_year`")


@command("crossyear", _configure_crossyear, help="train per year, test on every year")
def cmd_crossyear(args: argparse.Namespace) -> int:
    out = _out(args)
    model_config = _model_config(args)
    cfg = _train_config(args)
    if not args.protocol:
        raise ConfigError("--protocol is required")
    protocol = load_cross_year(Path(args.protocol))
    matrix = cross_year_run(_samples(args, model_config), protocol, model_config, cfg, parallel=_parallel(args))
    config_store.save_document(matrix.to_dict(), out / "matrix.json")
    matrix.to_frame().to_csv(out / "matrix.csv")
    code = EXIT_RUNTIME if matrix.failed else EXIT_OK
    return _finish(args, out, f"diagonal {matrix.diagonal_mean:.4f} vs off-diagonal {matrix.off_diagonal_mean:.4f}", code)


def _configure_analyze(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="dataset root")
    parser.add_argument("--horizon", type=int, help="growth-curve horizon in days (default 35)")
    parser.add_argument("--report", help="benchmark report.json for the AP-vs-size analysis")


@command("analyze", _configure_analyze, help="domain-shift and fire-size diagnostics")
def cmd_analyze(args: argparse.Namespace) -> int:
    out = _out(args)
    cubes = load_dataset(_data_root(args))
    config_store.save_document(domain_report(cubes, _seed(args)).to_dict(), out / "domain_report.json")
    config_store.save_document(growth_curves(cubes, args.horizon or 35), out / "growth_curves.json")
    if args.report:
        report = config_store.load_document(Path(args.report))
        per_event = [dict(e, fold_id=f["fold_id"]) for f in report["folds"] if not f.get("error") for e in f["per_event"]]
        result = ap_vs_size(per_event)
        result.pop("table").to_csv(out / "ap_vs_size.csv", index=False)
        config_store.save_document(result, out / "ap_vs_size.json")
    return _finish(args, out, f"analyzed {len(cubes)} events")


def _configure_diff(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--a", required=False, help="first dataset root")
    parser.add_argument("--b", required=False, help="second dataset root")
    parser.add_argument("--tolerance", type=float, help="relative difference that flags a band")


@command("diff", _configure_diff, help="compare per-band statistics of two dataset copies")
def cmd_diff(args: argparse.Namespace) -> int:
    out = _out(args)
    if not args.a or not args.b:
        raise ConfigError("--a and --b are required")
    result = dataset_diff(Path(args.a), Path(args.b), args.tolerance)
    config_store.save_document(result, out / "diff.json")
    return _finish(args, out, f"max relative difference {result['max_relative_difference_percent']:.3g}%")


def _configure_export(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", help="model checkpoint (.pt)")
    parser.add_argument("--data", help="dataset root")
    parser.add_argument("--features", help="feature set used to train the checkpoint (default All)")


@command("export-embeddings", _configure_export, help="write pooled deepest-layer features as CSV")
def cmd_export_embeddings(args: argparse.Namespace) -> int:
    out = _out(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model = load_checkpoint(Path(args.checkpoint))
    samples = _samples(args, model.config)
    samples = normalize(samples, compute_stats(samples))
    frame = embedding_export(model, samples, out / "embeddings.csv", settings.get("eval_batch_size", 32))
    return _finish(args, out, f"exported {len(frame)} embeddings")



def _configure_profile(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", help="model document (JSON)")
    parser.add_argument("--height", type=int, default=64, help="input rows (default 64)")
    parser.add_argument("--width", type=int, default=64, help="input columns (default 64)")
    parser.add_argument("--repeats", type=int, default=5, help="timed forward passes (default 5)")


@command("profile", _configure_profile, help="parameter count, size and forward time of a model")
def cmd_profile(args: argparse.Namespace) -> int:
    out = _out(args)
    model_config = _model_config(args)
    if args.height < 1 or args.width < 1:
        raise ConfigError("--height and --width must be positive")
    profile = profile_model(model_config, args.height, args.width, args.repeats)
    config_store.save_document(dict(profile, height=args.height, width=args.width), out / "profile.json")
    return _finish(
        args, out, f"{profile['parameters']} parameters, {profile['size_mb']:.2f} MB, {profile['forward_seconds'] * 1000:.1f} ms per forward"
    )


def _configure_ablation(parser: argparse.ArgumentParser) -> None:
    _configure_benchmark(parser)
    parser.add_argument("--pretrained", help="encoder checkpoint for the full recipe")


@command("ablation", _configure_ablation, help="progressive removal of recipe components")
def cmd_ablation(args: argparse.Namespace) -> int:
    out = _out(args)
    model_config = _model_config(args)
    cfg = _train_config(args)
    if not args.plan:
        raise ConfigError("--plan is required")
    rows = run_ablation(
        model_config,
        load_plans(Path(args.plan)),
        _samples(args, model_config),
        cfg,
        args.pretrained,
        parallel=_parallel(args),
        out_dir=out,
    )
    config_store.save_document({"rows": rows}, out / "ablation.json")
    return _finish(args, out, "; ".join(f"{r['variant']}: {r['mean_ap']:.4f}" for r in rows))


def _configure_compare(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--a", help="first benchmark report.json")
    parser.add_argument("--b", help="second benchmark report.json")


@command("compare", _configure_compare, help="paired Wilcoxon test between two benchmark reports")
def cmd_compare(args: argparse.Namespace) -> int:
    out = _out(args)
    if not args.a or not args.b:
        raise ConfigError("--a and --b are required")
    result = compare_reports(config_store.load_document(Path(args.a)), config_store.load_document(Path(args.b)))
    config_store.save_document(result, out / "comparison.json")
    return _finish(args, out, f"W={result['W']:.1f}, p={result['p']:.4g} over {result['n']} folds")


# =============================
# Entry point
# =============================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (default FIRESPREAD_SEED)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="command document, or a resolved_config.json to replay")
    common.add_argument("--quiet", action="store_true", default=None, help="suppress progress lines")
    common.add_argument("--parallel", type=int, default=None, help="independent jobs to run at once")
    parser = argparse.ArgumentParser(prog="firespread", description="Next-day wildfire spread experiments.")
    parser.add_argument("--version", action="version", version=version_banner())
    add_subparsers(parser, parents=[common])
    return parser


def _apply_replay(args: argparse.Namespace) -> None:
    """Fill unset arguments and documents from a recorded resolved_config.json."""
    args.documents = {}
    if not args.config:
        return
    doc = config_store.load_document(Path(args.config))
    if doc.get("tool") != "firespread" or "arguments" not in doc:
        return
    if doc.get("command") != args.command:
        raise ConfigError(f"{args.config} records command {doc.get('command')!r}, not {args.command!r}")
    for key, value in doc["arguments"].items():
        if key in ("out", "config", "command"):
            continue
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    args.documents = dict(doc.get("documents", {}))
    args.config = None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_OK
    args.resolved = {}
    try:
        _apply_replay(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        event_log.echo(f"{args.command}: {exc}", ok=False)
        return 1
    quiet = bool(args.quiet) if args.quiet is not None else settings.quiet
    event_log.configure(Path(args.out) / "events.log" if args.out else settings.event_log, quiet=quiet)
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
