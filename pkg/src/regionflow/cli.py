"""Command-line entry point: ingest, synth, train, embed, evaluate, experiment.

Commands never mutate their inputs; all artifacts land under the output
directory together with a resolved copy of the configuration, whose hash is
embedded in every artifact. Exit codes: 0 success, 2 schema/config errors,
1 anything else (with a structured error record on stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, experiments
from .config import ConfigError, RunConfig, load_run_config
from .ingest import (
    IngestError,
    MobilitySeries,
    SchemaError,
    bin_trips,
    load_series,
    read_regions,
    read_trips_csv,
    save_series,
    write_series_csv,
    zscore,
)
from .model import load_checkpoint
from .probe import (
    EvalError,
    evaluate,
    read_targets_csv,
    write_report_json,
    write_report_matrix_csv,
)
from .train import (
    TrainingDivergedError,
    embed_regions,
    load_embeddings,
    save_embeddings,
    train,
    write_embeddings_csv,
    write_loss_log,
)


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _error_record(exc: Exception) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        cfg_root = load_run_config(None).output_dir
        path = Path(cfg_root) / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> RunConfig:
    return load_run_config(
        path=getattr(args, "config", None),
        overrides=getattr(args, "set", None) or [],
        seed=getattr(args, "seed", None),
        output_dir=getattr(args, "out", None),
    )


def _load_normalized(path: str, normalize: bool = True):
    series = load_series(path)
    if isinstance(series, MobilitySeries):
        if not normalize:
            raise ConfigError(
                f"{path} holds raw counts; the model consumes normalized series "
                "(set dataset.normalize true)"
            )
        return zscore(series)
    return series


def _load_targets(target_paths: dict[str, str]):
    if not target_paths:
        raise ConfigError("no targets configured (dataset.targets or --target)")
    return [read_targets_csv(path, name=name) for name, path in target_paths.items()]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    out_dir = _out_dir(args, "ingest")
    regions = read_regions(args.regions, id_property=args.id_property)
    trips = read_trips_csv(args.trips, delimiter=args.delimiter)
    if not trips:
        _warn(f"{args.trips}: no trip rows; emitting an all-zero series")
    series, diag = bin_trips(trips, regions, args.window_start, args.window_end)
    save_series(out_dir / "series.npz", series)
    if args.csv:
        write_series_csv(out_dir / "series.csv", series)
    summary = {
        "series": str(out_dir / "series.npz"),
        "n_regions": series.n_regions,
        "n_bins": series.n_bins,
        "per_region_totals": {
            rid: int(series.counts[i].sum()) for i, rid in enumerate(series.region_ids)
        },
        **diag.as_dict(),
    }
    (out_dir / "ingest_diagnostics.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    print(json.dumps({k: v for k, v in summary.items() if k != "per_region_totals"},
                     sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    from .testkit.synth import export_city, gen_city

    cfg = _load_config(args)
    out_dir = _out_dir(args, "synth")
    run_hash = cfg.write_resolved(out_dir)
    city = gen_city(
        n_regions=cfg.synth.n_regions,
        horizon=cfg.synth.horizon,
        noise_level=cfg.synth.noise_level,
        seed=cfg.synth_seed,
        name=cfg.synth.name,
    )
    paths = export_city(city, out_dir, config_hash=run_hash)
    print(json.dumps({"config_hash": run_hash, **paths}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.dataset.series is None:
        raise ConfigError("dataset.series is required for train")
    out_dir = _out_dir(args, "train")
    run_hash = cfg.write_resolved(out_dir)
    dataset = _load_normalized(cfg.dataset.series, cfg.dataset.normalize)
    pretrain_idx = experiments.pretrain_indices(dataset, cfg.probe, cfg.dataset.pretrain)
    subset = dataset.subset(pretrain_idx)
    state = train(subset, cfg.train,
                  checkpoint_path=out_dir / "checkpoint.pt", config_hash=run_hash)
    write_loss_log(out_dir / "loss_log.jsonl", state.history,
                   meta={"config_hash": run_hash, "n_regions": subset.n_regions,
                         "steps": state.step})
    print(json.dumps({
        "config_hash": run_hash,
        "checkpoint": str(out_dir / "checkpoint.pt"),
        "loss_log": str(out_dir / "loss_log.jsonl"),
        "steps": state.step,
        "final_loss": state.history[-1]["loss_total"] if state.history else None,
    }, sort_keys=True))
    return 0


def cmd_embed(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_dir(args, "embed")
    run_hash = cfg.write_resolved(out_dir)
    model, extra = load_checkpoint(args.checkpoint)
    series_path = args.series or cfg.dataset.series
    if series_path is None:
        raise ConfigError("provide --series or dataset.series")
    dataset = _load_normalized(series_path, cfg.dataset.normalize)
    embeddings = embed_regions(dataset, model, mode=args.mode,
                               source=extra.get("config_hash", ""))
    save_embeddings(out_dir / "embeddings.npz", embeddings, config_hash=run_hash)
    write_embeddings_csv(out_dir / "embeddings.csv", embeddings)
    print(json.dumps({
        "config_hash": run_hash,
        "embeddings": str(out_dir / "embeddings.npz"),
        "shape": list(embeddings.matrix.shape),
    }, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_dir(args, "evaluate")
    run_hash = cfg.write_resolved(out_dir)
    embeddings = load_embeddings(args.embeddings)
    target_paths = dict(cfg.dataset.targets)
    for pair in args.target or []:
        if "=" not in pair:
            raise ConfigError(f"--target {pair!r} is not of the form name=path")
        name, path = pair.split("=", 1)
        target_paths[name] = path
    tables = _load_targets(target_paths)
    report = evaluate(embeddings, tables, cfg.probe,
                      metadata={"config_hash": run_hash, "source": embeddings.source})
    write_report_json(out_dir / "report.json", report)
    write_report_matrix_csv(out_dir / "report_matrix.csv", {"embeddings": report})
    print(json.dumps({
        "config_hash": run_hash,
        "report": str(out_dir / "report.json"),
        "r2": {name: res.r2_mean for name, res in report.targets.items()},
    }, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    if cfg.experiment is None:
        raise ConfigError("config has no experiment section")
    out_dir = _out_dir(args, f"experiment_{cfg.experiment.kind}")
    run_hash = cfg.write_resolved(out_dir)
    kind = cfg.experiment.kind

    if kind == "transfer":
        transfer = cfg.experiment.transfer
        source = _load_normalized(transfer.source_series, cfg.dataset.normalize)
        target = _load_normalized(transfer.target_series, cfg.dataset.normalize)
        tables = _load_targets(transfer.target_targets or cfg.dataset.targets)
        r2, report, _ = experiments.run_transfer(
            source, target, tables, cfg.train, cfg.probe,
            pretrain_mode=cfg.dataset.pretrain,
        )
        write_report_json(out_dir / "transfer_report.json", report)
        print(json.dumps({"config_hash": run_hash, "r2": r2,
                          "report": str(out_dir / "transfer_report.json")}, sort_keys=True))
        return 0

    if cfg.dataset.series is None:
        raise ConfigError("dataset.series is required for this experiment")
    dataset = _load_normalized(cfg.dataset.series, cfg.dataset.normalize)
    tables = _load_targets(cfg.dataset.targets)
    plan = experiments.ExperimentPlan(
        kind=kind,
        train=cfg.train,
        probe=cfg.probe,
        seeds=cfg.experiment.seeds,
        batch_sizes=cfg.experiment.batch_sizes,
        embed_dims=cfg.experiment.embed_dims,
        pretrain_mode=cfg.dataset.pretrain,
    )
    runner = {
        "aug_grid": experiments.run_aug_grid,
        "ablation": experiments.run_ablation,
        "sensitivity": experiments.run_sensitivity,
    }[kind]
    matrix = runner(dataset, tables, plan, workers=args.workers)
    csv_path = out_dir / f"{kind}.csv"
    matrix.write_csv(csv_path)
    matrix.write_cells_json(out_dir / f"{kind}_cells.json")
    if args.plots:
        experiments.plot_matrix_csv(csv_path, out_dir / f"{kind}.png")
    failed = [f"{r}|{c}" for (r, c), cell in matrix.cells.items() if cell.error]
    print(json.dumps({"config_hash": run_hash, "matrix": str(csv_path),
                      "failed_cells": failed}, sort_keys=True))
    return 0 if not failed else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        sub.add_argument("--config", help="run-config JSON file")
        sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config field (dotted path)")
        sub.add_argument("--seed", type=int, help="override the global seed")
    sub.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionflow",
        description="Urban region embeddings from hourly mobility flow series.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("ingest", help="bin trip records into a flow series")
    p.add_argument("--trips", required=True)
    p.add_argument("--regions", required=True)
    p.add_argument("--window-start", required=True)
    p.add_argument("--window-end", required=True)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--id-property", default="id")
    p.add_argument("--csv", action="store_true", help="also write the delimited export")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_ingest)

    p = subparsers.add_parser("synth", help="generate a synthetic city")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = subparsers.add_parser("train", help="train the encoder trio")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser("embed", help="extract frozen region embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--series", help="series file (defaults to dataset.series)")
    p.add_argument("--mode", default="joint",
                   choices=("joint", "inbound", "outbound", "mean_in_out"))
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = subparsers.add_parser("evaluate", help="ridge-probe an embeddings file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--target", action="append", metavar="NAME=PATH")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = subparsers.add_parser("experiment", help="run a configured sweep")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plots", action="store_true", help="render heatmaps from the CSVs")
    _add_common(p)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, ConfigError) as exc:
        _error_record(exc)
        return 2
    except (IngestError, EvalError, TrainingDivergedError, ValueError,
            RuntimeError, OSError) as exc:
        _error_record(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
