"""Minibatch training over regions and frozen-encoder embedding extraction.

Each epoch shuffles the region order with a seed-derived stream, partitions
it into batches (a trailing batch of one is dropped, since the contrastive
denominator needs an in-batch negative), draws fresh augmentation views per
region, and takes one optimizer step per batch. Every random stream is
derived from (seed, epoch, region, view), so results are independent of
scheduling and fully reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationPipeline, trio_views
from .ingest import NormalizedSeries
from .losses import BatchProjections, Temperatures, total_loss
from .model import FLOWS, FlowTrioModel, ModelConfig, init_model, save_checkpoint

EMBEDDINGS_FORMAT_VERSION = 1

_OPTIMIZERS = ("adam", "sgd")
EMBED_MODES = ("joint", "inbound", "outbound", "mean_in_out")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, region_ids: tuple[str, ...], breakdown: dict):
        self.epoch = epoch
        self.step = step
        self.region_ids = region_ids
        self.breakdown = breakdown
        super().__init__(
            f"non-finite loss at epoch {epoch}, step {step} "
            f"(batch {list(region_ids)}): {breakdown}"
        )


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-4
    epochs: int = 30
    seed: int = 0
    pipeline: AugmentationPipeline = field(default_factory=AugmentationPipeline.default)
    optimizer: str = "adam"                  # adam | sgd (plain gradient)
    use_inbound: bool = True
    use_outbound: bool = True
    use_align: bool = True
    symmetric_loss: bool = False
    temperatures: Temperatures = field(default_factory=Temperatures)
    model: ModelConfig = field(default_factory=ModelConfig)
    # Fresh augmentation draws every epoch; False reuses the epoch-0 draws
    # (debugging aid for determinism-sensitive comparisons).
    resample_views: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "pipeline": self.pipeline.to_json(),
            "optimizer": self.optimizer,
            "use_inbound": self.use_inbound,
            "use_outbound": self.use_outbound,
            "use_align": self.use_align,
            "symmetric_loss": self.symmetric_loss,
            "temperatures": {"tau": self.temperatures.tau, "tau_a": self.temperatures.tau_a},
            "model": self.model.to_json(),
            "resample_views": self.resample_views,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "pipeline" in obj:
            obj["pipeline"] = AugmentationPipeline.from_json(obj["pipeline"])
        if "temperatures" in obj:
            obj["temperatures"] = Temperatures(**obj["temperatures"])
        if "model" in obj:
            obj["model"] = ModelConfig.from_json(obj["model"])
        return cls(**obj)


@dataclass
class TrainState:
    model: FlowTrioModel
    optimizer: torch.optim.Optimizer
    epoch: int
    step: int
    history: list[dict]


def _make_optimizer(model: FlowTrioModel, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate)


def _view_rng(seed: int, epoch: int, region_index: int, view: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, region_index, view]))


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def build_batch_views(
    dataset: NormalizedSeries,
    region_indices: np.ndarray,
    pipeline: AugmentationPipeline,
    seed: int,
    epoch: int,
    dtype: torch.dtype,
) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    """Augment each region of the batch into stacked (B, T, C) view tensors."""
    per_flow: dict[str, tuple[list, list]] = {flow: ([], []) for flow in FLOWS}
    for idx in region_indices:
        trio = trio_views(
            dataset.values[idx],
            pipeline,
            _view_rng(seed, epoch, int(idx), 0),
            _view_rng(seed, epoch, int(idx), 1),
        )
        for flow in FLOWS:
            view_a, view_b = getattr(trio, flow)
            per_flow[flow][0].append(view_a)
            per_flow[flow][1].append(view_b)
    return {
        flow: (
            torch.as_tensor(np.stack(stacks[0]), dtype=dtype),
            torch.as_tensor(np.stack(stacks[1]), dtype=dtype),
        )
        for flow, stacks in per_flow.items()
    }


def train(
    dataset: NormalizedSeries,
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
    config_hash: str = "",
) -> TrainState:
    """Optimize the trio on the given regions; optionally write a checkpoint."""
    n = dataset.n_regions
    if n < 2:
        raise ValueError("training needs at least 2 regions")
    model = init_model(config.model, config.seed)
    optimizer = _make_optimizer(model, config)
    dtype = config.model.torch_dtype()
    history: list[dict] = []
    step = 0

    for epoch in range(config.epochs):
        order = _shuffle_rng(config.seed, epoch).permutation(n)
        view_epoch = epoch if config.resample_views else 0
        for start in range(0, n, config.batch_size):
            batch_indices = order[start:start + config.batch_size]
            if batch_indices.size < 2:
                continue
            views = build_batch_views(
                dataset, batch_indices, config.pipeline, config.seed, view_epoch, dtype
            )
            projections, _ = model.forward_views(views)
            breakdown = total_loss(
                BatchProjections.from_views_output(projections),
                config.temperatures,
                use_inbound=config.use_inbound,
                use_outbound=config.use_outbound,
                use_align=config.use_align,
                symmetric=config.symmetric_loss,
            )
            record = breakdown.to_floats()
            if not all(np.isfinite(v) for v in record.values()):
                raise TrainingDivergedError(
                    epoch, step,
                    tuple(dataset.region_ids[i] for i in batch_indices),
                    record,
                )
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            optimizer.step()
            history.append({"epoch": epoch, "step": step, **record})
            step += 1

    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise TrainingDivergedError(config.epochs - 1, step - 1, (),
                                        {"non_finite_parameter": name})

    state = TrainState(model=model, optimizer=optimizer, epoch=config.epochs,
                       step=step, history=history)
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, model,
            extra={"train_config": config.to_json(), "config_hash": config_hash,
                   "steps": step, "region_ids": list(dataset.region_ids)},
        )
    return state


def steps_per_epoch(n_regions: int, batch_size: int) -> int:
    """Batches taken per epoch after dropping a trailing singleton."""
    full, rest = divmod(n_regions, batch_size)
    return full + (1 if rest >= 2 else 0)


# ---------------------------------------------------------------------------
# Loss log I/O
# ---------------------------------------------------------------------------

def write_loss_log(path: str | Path, history: list[dict], meta: dict | None = None) -> None:
    """One JSON record per line; an optional leading run_meta record."""
    with Path(path).open("w") as fh:
        if meta is not None:
            fh.write(json.dumps({"record": "run_meta", **meta}, sort_keys=True) + "\n")
        for entry in history:
            fh.write(json.dumps({"record": "step", **entry}, sort_keys=True) + "\n")


def read_loss_log(path: str | Path) -> tuple[dict | None, list[dict]]:
    meta = None
    records = []
    with Path(path).open() as fh:
        for line in fh:
            obj = json.loads(line)
            if obj.get("record") == "run_meta":
                meta = obj
            else:
                records.append(obj)
    return meta, records


# ---------------------------------------------------------------------------
# Frozen-encoder region embeddings
# ---------------------------------------------------------------------------

@dataclass
class RegionEmbeddings:
    matrix: np.ndarray                  # (N, D)
    region_ids: tuple[str, ...]
    source: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.region_ids):
            raise ValueError("matrix must be (N, D) aligned with region_ids")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embeddings contain non-finite values")


def embed_regions(
    dataset: NormalizedSeries,
    model: FlowTrioModel,
    mode: str = "joint",
    source: str = "",
    chunk_size: int = 128,
) -> RegionEmbeddings:
    """Temporal-mean-pooled encoder representations of unaugmented series.

    The default uses the joint encoder only; the other modes exist for
    ablation rows where a different encoder (or the mean of the two
    single-flow encoders) is the one that actually received gradients.
    """
    if mode not in EMBED_MODES:
        raise ValueError(f"unknown embed mode {mode!r}; expected one of {EMBED_MODES}")
    dtype = model.config.torch_dtype()
    chunks = []
    with torch.no_grad():
        for start in range(0, dataset.n_regions, chunk_size):
            block = torch.as_tensor(dataset.values[start:start + chunk_size], dtype=dtype)
            if mode == "joint":
                pooled = model.encoders["joint"](block).mean(dim=1)
            elif mode == "inbound":
                pooled = model.encoders["inbound"](block[:, :, 0:1]).mean(dim=1)
            elif mode == "outbound":
                pooled = model.encoders["outbound"](block[:, :, 1:2]).mean(dim=1)
            else:
                pooled_in = model.encoders["inbound"](block[:, :, 0:1]).mean(dim=1)
                pooled_out = model.encoders["outbound"](block[:, :, 1:2]).mean(dim=1)
                pooled = 0.5 * (pooled_in + pooled_out)
            chunks.append(pooled.cpu().numpy().astype(np.float64))
    return RegionEmbeddings(
        matrix=np.concatenate(chunks, axis=0),
        region_ids=dataset.region_ids,
        source=source,
    )


def save_embeddings(path: str | Path, embeddings: RegionEmbeddings,
                    config_hash: str = "") -> None:
    np.savez(
        path,
        format_version=np.int64(EMBEDDINGS_FORMAT_VERSION),
        matrix=embeddings.matrix,
        region_ids=np.array(embeddings.region_ids, dtype=np.str_),
        source=np.str_(embeddings.source),
        config_hash=np.str_(config_hash),
    )


def load_embeddings(path: str | Path) -> RegionEmbeddings:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != EMBEDDINGS_FORMAT_VERSION:
            raise ValueError(f"unsupported embeddings format version {version}")
        return RegionEmbeddings(
            matrix=data["matrix"],
            region_ids=tuple(str(r) for r in data["region_ids"]),
            source=str(data["source"]),
        )


def write_embeddings_csv(path: str | Path, embeddings: RegionEmbeddings) -> None:
    dim = embeddings.matrix.shape[1]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id"] + [f"dim_{j}" for j in range(dim)])
        for rid, row in zip(embeddings.region_ids, embeddings.matrix):
            writer.writerow([rid] + [repr(float(v)) for v in row])
