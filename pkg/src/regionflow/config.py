"""Run configuration: one JSON file (plus overrides) drives every command.

The schema is documented in the README. Validation happens before any work
starts: unknown keys are rejected section by section, and semantic checks
live in the underlying config dataclasses. Every command persists a resolved
copy (all defaults filled) next to its outputs, and the hash of that resolved
copy is embedded in every artifact.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .hashing import config_hash
from .probe import ProbeConfig
from .train import TrainConfig

OUTPUT_ROOT_ENV = "REGIONFLOW_OUT"

TOP_LEVEL_KEYS = ("seed", "output_dir", "dataset", "train", "probe", "experiment", "synth")


class ConfigError(ValueError):
    """Configuration file or override rejected by schema validation."""


@dataclass(frozen=True)
class DatasetSection:
    series: str | None = None
    targets: dict[str, str] = field(default_factory=dict)
    normalize: bool = True
    pretrain: str = "split"      # split | all

    def __post_init__(self):
        if self.pretrain not in ("split", "all"):
            raise ValueError("dataset.pretrain must be 'split' or 'all'")

    def to_json(self) -> dict:
        return {"series": self.series, "targets": dict(self.targets),
                "normalize": self.normalize, "pretrain": self.pretrain}


@dataclass(frozen=True)
class SynthSection:
    n_regions: int = 60
    horizon: int = 336
    noise_level: float = 1.0
    seed: int | None = None      # resolved to the global seed
    name: str = "synth"

    def to_json(self) -> dict:
        return {"n_regions": self.n_regions, "horizon": self.horizon,
                "noise_level": self.noise_level, "seed": self.seed, "name": self.name}


@dataclass(frozen=True)
class TransferSection:
    source_series: str
    target_series: str
    target_targets: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"source_series": self.source_series, "target_series": self.target_series,
                "target_targets": dict(self.target_targets)}


@dataclass(frozen=True)
class ExperimentSection:
    kind: str
    seeds: tuple[int, ...] = (0, 1, 2)
    batch_sizes: tuple[int, ...] = (4, 8, 12)
    embed_dims: tuple[int, ...] = (64, 128, 256)
    transfer: TransferSection | None = None

    def __post_init__(self):
        if self.kind not in ("aug_grid", "ablation", "sensitivity", "transfer"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.kind == "transfer" and self.transfer is None:
            raise ValueError("experiment.transfer section required for kind 'transfer'")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "seeds": list(self.seeds),
            "batch_sizes": list(self.batch_sizes),
            "embed_dims": list(self.embed_dims),
            "transfer": self.transfer.to_json() if self.transfer else None,
        }


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    experiment: ExperimentSection | None = None
    synth: SynthSection = field(default_factory=SynthSection)

    def resolved(self) -> dict:
        synth = self.synth.to_json()
        if synth["seed"] is None:
            synth["seed"] = self.seed
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": self.dataset.to_json(),
            "train": self.train.to_json(),
            "probe": self.probe.to_json(),
            "experiment": self.experiment.to_json() if self.experiment else None,
            "synth": synth,
        }

    @property
    def hash(self) -> str:
        # The hash identifies the computation, not where its outputs land:
        # rerunning the same config into another directory must produce
        # byte-identical artifacts, so output_dir stays out of the digest.
        payload = self.resolved()
        del payload["output_dir"]
        return config_hash(payload)

    def write_resolved(self, out_dir: str | Path) -> str:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = self.resolved()
        payload["config_hash"] = self.hash
        (out_dir / "resolved_config.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )
        return self.hash

    @property
    def synth_seed(self) -> int:
        return self.seed if self.synth.seed is None else self.synth.seed


def _check_keys(section: str, obj: dict, cls) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {unknown}")


def _build_section(section: str, obj, cls, from_json=None):
    if not isinstance(obj, dict):
        raise ConfigError(f"'{section}' must be an object")
    _check_keys(section, obj, cls)
    try:
        return from_json(obj) if from_json else cls(**obj)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid '{section}': {exc}") from None


def parse_overrides(pairs: list[str]) -> list[tuple[list[str], object]]:
    parsed = []
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parsed.append((key.split("."), value))
    return parsed


def _apply_override(raw: dict, path: list[str], value) -> None:
    node = raw
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override through non-object {'.'.join(path)!r}")
    node[path[-1]] = value


def load_run_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    output_dir: str | None = None,
) -> RunConfig:
    """Read, override, validate, and resolve a run configuration.

    Precedence for the output directory: explicit argument, config file,
    REGIONFLOW_OUT environment variable, then ./runs.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key_path, value in parse_overrides(overrides or []):
        _apply_override(raw, key_path, value)

    unknown = sorted(set(raw) - set(TOP_LEVEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")

    global_seed = seed if seed is not None else raw.get("seed", 0)
    if not isinstance(global_seed, int) or global_seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    train_raw = dict(raw.get("train", {}))
    train_raw.setdefault("seed", global_seed)
    dataset = _build_section("dataset", raw.get("dataset", {}), DatasetSection)
    train = _build_section("train", train_raw, TrainConfig, TrainConfig.from_json)
    probe = _build_section("probe", raw.get("probe", {}), ProbeConfig, ProbeConfig.from_json)
    synth = _build_section("synth", raw.get("synth", {}), SynthSection)

    experiment = None
    if raw.get("experiment") is not None:
        exp_raw = dict(raw["experiment"])
        transfer = None
        if exp_raw.get("transfer") is not None:
            transfer = _build_section("experiment.transfer", exp_raw["transfer"],
                                      TransferSection)
        exp_raw["transfer"] = transfer
        for key in ("seeds", "batch_sizes", "embed_dims"):
            if key in exp_raw:
                exp_raw[key] = tuple(exp_raw[key])
        experiment = _build_section("experiment", exp_raw, ExperimentSection)

    resolved_out = (
        output_dir
        or raw.get("output_dir")
        or os.environ.get(OUTPUT_ROOT_ENV)
        or "runs"
    )
    return RunConfig(
        seed=global_seed,
        output_dir=str(resolved_out),
        dataset=dataset,
        train=train,
        probe=probe,
        experiment=experiment,
        synth=synth,
    )
