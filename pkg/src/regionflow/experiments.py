"""Scripted sweeps: augmentation grid, loss ablation, sensitivity, transfer.

Every sweep shares one base configuration; cells differ only in the swept
fields and are individually reproducible from their recorded config hash and
seeds. A failing cell is recorded with its error and the matrix is still
emitted in full.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import AugmentationPipeline, AugmentationSpec
from .hashing import config_hash
from .ingest import NormalizedSeries
from .probe import EvalReport, ProbeConfig, TargetTable, evaluate, split_indices
from .train import TrainConfig, embed_regions, train

AUG_KINDS = ("scale", "jitter", "shift", "dropout")
ABLATION_ROWS = ("outbound_only", "inbound_only", "no_align", "full")
EXPERIMENT_KINDS = ("aug_grid", "ablation", "sensitivity", "transfer")

# loss flags (use_inbound, use_outbound, use_align) and the encoder whose
# pooled representation is actually trained under those flags
_ABLATION_SETTINGS = {
    "outbound_only": ((False, True, False), "outbound"),
    "inbound_only": ((True, False, False), "inbound"),
    "no_align": ((True, True, False), "mean_in_out"),
    "full": ((True, True, True), "joint"),
}


@dataclass(frozen=True)
class ExperimentPlan:
    kind: str
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seeds: tuple[int, ...] = (0, 1, 2)                   # ablation repeats
    batch_sizes: tuple[int, ...] = (4, 8, 12)            # sensitivity rows
    embed_dims: tuple[int, ...] = (64, 128, 256)         # sensitivity columns
    pretrain_mode: str = "split"                         # split | all

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.pretrain_mode not in ("split", "all"):
            raise ValueError("pretrain_mode must be 'split' or 'all'")
        if self.kind == "ablation" and not self.seeds:
            raise ValueError("ablation needs at least one seed")


@dataclass
class CellResult:
    value: float
    config_hash: str
    seeds: dict
    alphas: tuple[float, ...] = ()
    info: dict = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "value": self.value if np.isfinite(self.value) else None,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "alphas": list(self.alphas),
            "info": self.info,
            "error": self.error,
        }


@dataclass
class ResultMatrix:
    kind: str
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    values: np.ndarray
    cells: dict[tuple[str, str], CellResult]

    def cell(self, row: str, col: str) -> CellResult:
        return self.cells[(row, col)]

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.kind] + list(self.col_labels))
            for i, row_label in enumerate(self.row_labels):
                writer.writerow([row_label] + [repr(float(v)) for v in self.values[i]])

    def write_cells_json(self, path: str | Path) -> None:
        payload = {
            "kind": self.kind,
            "rows": list(self.row_labels),
            "cols": list(self.col_labels),
            "cells": {f"{r}|{c}": cell.to_json() for (r, c), cell in self.cells.items()},
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _run_jobs(jobs: dict, workers: int) -> dict:
    """Execute {key: thunk}; results keyed identically regardless of order."""
    if workers <= 1:
        return {key: thunk() for key, thunk in jobs.items()}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {key: pool.submit(thunk) for key, thunk in jobs.items()}
        return {key: fut.result() for key, fut in futures.items()}


# ---------------------------------------------------------------------------
# Single train + probe pipeline
# ---------------------------------------------------------------------------

def pretrain_indices(dataset: NormalizedSeries, probe_cfg: ProbeConfig,
                     mode: str) -> np.ndarray:
    """Regions the encoder trains on: all, or the first split seed's train side."""
    n = dataset.n_regions
    if mode == "all":
        return np.arange(n)
    train_idx, _ = split_indices(n, probe_cfg.train_fraction, probe_cfg.split_seeds[0])
    return np.sort(train_idx)


def run_pipeline(
    dataset: NormalizedSeries,
    targets: list[TargetTable] | TargetTable,
    train_cfg: TrainConfig,
    probe_cfg: ProbeConfig,
    pretrain_mode: str = "split",
    embed_mode: str = "joint",
):
    """Train, embed every region with the frozen encoder, and probe.

    Returns (EvalReport, TrainState, RegionEmbeddings).
    """
    cell_hash = config_hash({"train": train_cfg.to_json(), "probe": probe_cfg.to_json(),
                             "pretrain_mode": pretrain_mode, "embed_mode": embed_mode})
    subset = dataset.subset(pretrain_indices(dataset, probe_cfg, pretrain_mode))
    state = train(subset, train_cfg)
    embeddings = embed_regions(dataset, state.model, mode=embed_mode,
                               source=f"pipeline:{cell_hash}")
    report = evaluate(embeddings, targets, probe_cfg,
                      metadata={"config_hash": cell_hash, "embed_mode": embed_mode,
                                "pretrain_mode": pretrain_mode})
    return report, state, embeddings


def _first_target(report: EvalReport):
    return next(iter(report.targets.values()))


# ---------------------------------------------------------------------------
# Augmentation grid
# ---------------------------------------------------------------------------

def grid_pipeline(row: str, col: str) -> AugmentationPipeline:
    """Diagonal cells run the single transform; off-diagonal run row then column."""
    if row == col:
        return AugmentationPipeline(steps=(AugmentationSpec(row),))
    return AugmentationPipeline(steps=(AugmentationSpec(row), AugmentationSpec(col)))


def run_aug_grid(dataset: NormalizedSeries, targets, plan: ExperimentPlan,
                 workers: int = 1) -> ResultMatrix:
    def make_job(row: str, col: str):
        cfg = replace(plan.train, pipeline=grid_pipeline(row, col))
        cell_hash = config_hash(cfg.to_json())

        def job() -> CellResult:
            try:
                report, _, _ = run_pipeline(dataset, targets, cfg, plan.probe,
                                            plan.pretrain_mode)
                result = _first_target(report)
                return CellResult(
                    value=result.r2_mean,
                    config_hash=cell_hash,
                    seeds={"train_seed": cfg.seed, "split_seeds": list(plan.probe.split_seeds)},
                    alphas=result.alphas_chosen,
                )
            except Exception as exc:           # record the failure, keep the grid
                return CellResult(
                    value=float("nan"), config_hash=cell_hash,
                    seeds={"train_seed": cfg.seed}, error=f"{type(exc).__name__}: {exc}",
                )
        return job

    jobs = {(r, c): make_job(r, c) for r in AUG_KINDS for c in AUG_KINDS}
    cells = _run_jobs(jobs, workers)
    values = np.array([[cells[(r, c)].value for c in AUG_KINDS] for r in AUG_KINDS])
    return ResultMatrix("aug_grid", AUG_KINDS, AUG_KINDS, values, cells)


# ---------------------------------------------------------------------------
# Loss ablation
# ---------------------------------------------------------------------------

def run_ablation(dataset: NormalizedSeries, targets, plan: ExperimentPlan,
                 workers: int = 1) -> ResultMatrix:
    """Four loss configurations, each averaged over the plan's seeds.

    Each row is evaluated on the pooled representation of the encoder(s) that
    actually received gradients under its flags.
    """
    if isinstance(targets, TargetTable):
        targets = [targets]
    target_names = tuple(t.name for t in targets)

    def make_job(row: str):
        (use_in, use_out, use_align), embed_mode = _ABLATION_SETTINGS[row]

        def job() -> dict[str, CellResult]:
            base = replace(plan.train, use_inbound=use_in, use_outbound=use_out,
                           use_align=use_align)
            per_target: dict[str, list[float]] = {name: [] for name in target_names}
            alphas: dict[str, list] = {name: [] for name in target_names}
            try:
                for seed in plan.seeds:
                    cfg = replace(base, seed=seed)
                    report, _, _ = run_pipeline(dataset, targets, cfg, plan.probe,
                                                plan.pretrain_mode, embed_mode=embed_mode)
                    for name, result in report.targets.items():
                        per_target[name].append(result.r2_mean)
                        alphas[name].extend(result.alphas_chosen)
                row_hash = config_hash({"train": base.to_json(), "seeds": list(plan.seeds)})
                return {
                    name: CellResult(
                        value=float(np.mean(per_target[name])),
                        config_hash=row_hash,
                        seeds={"train_seeds": list(plan.seeds),
                               "split_seeds": list(plan.probe.split_seeds)},
                        alphas=tuple(alphas[name]),
                        info={"per_seed": per_target[name], "embed_mode": embed_mode},
                    )
                    for name in target_names
                }
            except Exception as exc:
                failed = CellResult(
                    value=float("nan"),
                    config_hash=config_hash({"train": base.to_json()}),
                    seeds={"train_seeds": list(plan.seeds)},
                    error=f"{type(exc).__name__}: {exc}",
                )
                return {name: failed for name in target_names}
        return job

    rows = _run_jobs({row: make_job(row) for row in ABLATION_ROWS}, workers)
    cells = {(row, name): rows[row][name] for row in ABLATION_ROWS for name in target_names}
    values = np.array([[cells[(r, c)].value for c in target_names] for r in ABLATION_ROWS])
    return ResultMatrix("ablation", ABLATION_ROWS, target_names, values, cells)


# ---------------------------------------------------------------------------
# Batch-size / embedding-size sensitivity
# ---------------------------------------------------------------------------

def run_sensitivity(dataset: NormalizedSeries, targets, plan: ExperimentPlan,
                    workers: int = 1) -> ResultMatrix:
    """Full cross of batch size and embedding size (projection dim kept equal)."""
    def make_job(batch_size: int, dim: int):
        cfg = replace(
            plan.train,
            batch_size=batch_size,
            model=replace(plan.train.model, repr_dim=dim, proj_dim=dim),
        )
        cell_hash = config_hash(cfg.to_json())

        def job() -> CellResult:
            try:
                report, _, _ = run_pipeline(dataset, targets, cfg, plan.probe,
                                            plan.pretrain_mode)
                result = _first_target(report)
                return CellResult(
                    value=result.r2_mean,
                    config_hash=cell_hash,
                    seeds={"train_seed": cfg.seed, "split_seeds": list(plan.probe.split_seeds)},
                    alphas=result.alphas_chosen,
                )
            except Exception as exc:
                return CellResult(value=float("nan"), config_hash=cell_hash,
                                  seeds={"train_seed": cfg.seed},
                                  error=f"{type(exc).__name__}: {exc}")
        return job

    row_labels = tuple(str(b) for b in plan.batch_sizes)
    col_labels = tuple(str(d) for d in plan.embed_dims)
    jobs = {
        (str(b), str(d)): make_job(b, d)
        for b in plan.batch_sizes for d in plan.embed_dims
    }
    cells = _run_jobs(jobs, workers)
    values = np.array([[cells[(r, c)].value for c in col_labels] for r in row_labels])
    return ResultMatrix("sensitivity", row_labels, col_labels, values, cells)


# ---------------------------------------------------------------------------
# Cross-city transfer
# ---------------------------------------------------------------------------

def run_transfer(
    source: NormalizedSeries,
    target: NormalizedSeries,
    target_tables,
    train_cfg: TrainConfig,
    probe_cfg: ProbeConfig,
    pretrain_mode: str = "split",
):
    """Train on the source city, freeze the encoder, probe on the target city.

    With source is target this degenerates to the ordinary in-city pipeline.
    Returns (r2_mean of the first target, EvalReport, RegionEmbeddings).
    """
    if source.n_bins != target.n_bins or source.values.shape[2] != target.values.shape[2]:
        raise ValueError("source and target series must share horizon and channels")
    subset = source.subset(pretrain_indices(source, probe_cfg, pretrain_mode))
    state = train(subset, train_cfg)
    cell_hash = config_hash({"train": train_cfg.to_json(), "probe": probe_cfg.to_json(),
                             "pretrain_mode": pretrain_mode})
    embeddings = embed_regions(target, state.model, mode="joint",
                               source=f"transfer:{cell_hash}")
    report = evaluate(embeddings, target_tables, probe_cfg,
                      metadata={"config_hash": cell_hash, "transfer": True})
    return _first_target(report).r2_mean, report, embeddings


def run_transfer_matrix(
    cities: list[tuple[str, NormalizedSeries, TargetTable]],
    train_cfg: TrainConfig,
    probe_cfg: ProbeConfig,
    pretrain_mode: str = "split",
    workers: int = 1,
) -> ResultMatrix:
    """All source -> target pairs; rows are sources, columns targets."""
    names = tuple(name for name, _, _ in cities)
    by_name = {name: (series, table) for name, series, table in cities}

    def make_job(src: str, dst: str):
        def job() -> CellResult:
            src_series, _ = by_name[src]
            dst_series, dst_table = by_name[dst]
            cell_hash = config_hash({"train": train_cfg.to_json(), "source": src,
                                     "target": dst})
            try:
                r2, report, _ = run_transfer(src_series, dst_series, dst_table,
                                             train_cfg, probe_cfg, pretrain_mode)
                result = _first_target(report)
                return CellResult(
                    value=r2, config_hash=cell_hash,
                    seeds={"train_seed": train_cfg.seed,
                           "split_seeds": list(probe_cfg.split_seeds)},
                    alphas=result.alphas_chosen,
                )
            except Exception as exc:
                return CellResult(value=float("nan"), config_hash=cell_hash,
                                  seeds={"train_seed": train_cfg.seed},
                                  error=f"{type(exc).__name__}: {exc}")
        return job

    jobs = {(s, d): make_job(s, d) for s in names for d in names}
    cells = _run_jobs(jobs, workers)
    values = np.array([[cells[(s, d)].value for d in names] for s in names])
    return ResultMatrix("transfer", names, names, values, cells)


# ---------------------------------------------------------------------------
# Optional heatmap rendering (from the delimited output, never recomputed)
# ---------------------------------------------------------------------------

def plot_matrix_csv(csv_path: str | Path, out_path: str | Path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("heatmaps need matplotlib (install the 'plots' extra)") from exc

    with Path(csv_path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    title, col_labels = rows[0][0], rows[0][1:]
    row_labels = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])

    fig, ax = plt.subplots(figsize=(1.2 * len(col_labels) + 2, 1.0 * len(row_labels) + 2))
    im = ax.imshow(values, cmap="viridis")
    ax.set_xticks(range(len(col_labels)), col_labels, rotation=45, ha="right")
    ax.set_yticks(range(len(row_labels)), row_labels)
    ax.set_title(title)
    for i in range(len(row_labels)):
        for j in range(len(col_labels)):
            ax.text(j, i, f"{values[i, j]:.3f}", ha="center", va="center",
                    color="white", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
