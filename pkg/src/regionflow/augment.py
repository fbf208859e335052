"""Stochastic series transforms and two-view generation for contrastive training.

Every transform is split into a sampling wrapper (consumes an rng stream) and
a deterministic core that takes the sampled draw explicitly, so any augmented
view can be replayed bit-for-bit from its recorded draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

KINDS = ("jitter", "shift", "scale", "dropout")

DEFAULT_SIGMA = 0.2
DEFAULT_DROP_PROB = 0.1

Draw = np.ndarray


@dataclass(frozen=True)
class AugmentationSpec:
    """One transform step: kind plus exactly the parameters that kind uses."""

    kind: str
    sigma: float | None = None          # jitter / shift / scale
    drop_prob: float | None = None      # dropout
    jitter_mode: str | None = None      # jitter: additive | multiplicative
    scale_mode: str | None = None       # scale: literal | mean_one

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.kind in ("jitter", "shift", "scale"):
            if self.drop_prob is not None:
                raise ValueError(f"{self.kind} does not take drop_prob")
            sigma = DEFAULT_SIGMA if self.sigma is None else self.sigma
            if sigma <= 0:
                raise ValueError("sigma must be > 0")
            object.__setattr__(self, "sigma", float(sigma))
        if self.kind == "jitter":
            mode = self.jitter_mode or "additive"
            if mode not in ("additive", "multiplicative"):
                raise ValueError(f"bad jitter_mode {mode!r}")
            object.__setattr__(self, "jitter_mode", mode)
        elif self.jitter_mode is not None:
            raise ValueError(f"{self.kind} does not take jitter_mode")
        if self.kind == "scale":
            mode = self.scale_mode or "literal"
            if mode not in ("literal", "mean_one"):
                raise ValueError(f"bad scale_mode {mode!r}")
            object.__setattr__(self, "scale_mode", mode)
        elif self.scale_mode is not None:
            raise ValueError(f"{self.kind} does not take scale_mode")
        if self.kind == "dropout":
            if self.sigma is not None:
                raise ValueError("dropout does not take sigma")
            p = DEFAULT_DROP_PROB if self.drop_prob is None else float(self.drop_prob)
            if not 0.0 <= p <= 1.0:
                raise ValueError("drop_prob must be in [0, 1]")
            object.__setattr__(self, "drop_prob", p)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        for key in ("sigma", "drop_prob", "jitter_mode", "scale_mode"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "AugmentationSpec":
        return cls(**obj)


# --- deterministic cores ----------------------------------------------------

def jitter_with_noise(x: np.ndarray, eps: np.ndarray, mode: str = "additive") -> np.ndarray:
    """Per-entry noise: additive x + eps, or the literal multiplicative eps * x."""
    if mode == "additive":
        return x + eps
    return eps * x


def shift_by(x: np.ndarray, eps: float) -> np.ndarray:
    """Add one scalar to every timestep and channel."""
    return x + float(eps)


def scale_by(x: np.ndarray, eps: float, mode: str = "literal") -> np.ndarray:
    """Multiply by one scalar: literal eps * x, or mean-one (1 + eps) * x."""
    factor = float(eps) if mode == "literal" else 1.0 + float(eps)
    return factor * x


def dropout_with_uniforms(x: np.ndarray, uniforms: np.ndarray, drop_prob: float) -> np.ndarray:
    """Zero each entry whose uniform draw falls below drop_prob; no rescaling."""
    return np.where(uniforms < drop_prob, 0.0, x)


# --- sampling wrappers ------------------------------------------------------

def apply_jitter(x: np.ndarray, sigma: float, rng: np.random.Generator,
                 mode: str = "additive") -> np.ndarray:
    eps = rng.normal(0.0, sigma, size=x.shape)
    return jitter_with_noise(x, eps, mode)


def apply_shift(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return shift_by(x, rng.normal(0.0, sigma))


def apply_scale(x: np.ndarray, sigma: float, rng: np.random.Generator,
                mode: str = "literal") -> np.ndarray:
    return scale_by(x, rng.normal(0.0, sigma), mode)


def apply_dropout(x: np.ndarray, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    return dropout_with_uniforms(x, rng.random(size=x.shape), drop_prob)


def _sample_draw(spec: AugmentationSpec, shape: tuple[int, ...],
                 rng: np.random.Generator) -> Draw:
    if spec.kind == "jitter":
        return rng.normal(0.0, spec.sigma, size=shape)
    if spec.kind in ("shift", "scale"):
        return np.asarray(rng.normal(0.0, spec.sigma))
    return rng.random(size=shape)       # dropout uniforms


def _apply_with_draw(spec: AugmentationSpec, x: np.ndarray, draw: Draw) -> np.ndarray:
    if spec.kind == "jitter":
        return jitter_with_noise(x, draw, spec.jitter_mode)
    if spec.kind == "shift":
        return shift_by(x, float(draw))
    if spec.kind == "scale":
        return scale_by(x, float(draw), spec.scale_mode)
    return dropout_with_uniforms(x, draw, spec.drop_prob)


@dataclass(frozen=True)
class AugmentationPipeline:
    """Ordered composition of transforms; the empty pipeline is the identity."""

    steps: tuple[AugmentationSpec, ...] = ()

    @classmethod
    def default(cls) -> "AugmentationPipeline":
        return cls(steps=(AugmentationSpec("jitter"), AugmentationSpec("shift")))

    @classmethod
    def of(cls, *kinds: str) -> "AugmentationPipeline":
        return cls(steps=tuple(AugmentationSpec(k) for k in kinds))

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, tuple[Draw, ...]]:
        """Run all steps left to right, returning the output and recorded draws."""
        out = np.asarray(x, dtype=np.float64)
        draws: list[Draw] = []
        for spec in self.steps:
            draw = _sample_draw(spec, out.shape, rng)
            draws.append(draw)
            out = _apply_with_draw(spec, out, draw)
        return out, tuple(draws)

    def replay(self, x: np.ndarray, draws: Iterable[Draw]) -> np.ndarray:
        """Re-run the pipeline with previously recorded draws (pure function)."""
        out = np.asarray(x, dtype=np.float64)
        draws = tuple(draws)
        if len(draws) != len(self.steps):
            raise ValueError("draw count does not match pipeline length")
        for spec, draw in zip(self.steps, draws):
            out = _apply_with_draw(spec, out, draw)
        return out

    def to_json(self) -> list[dict]:
        return [s.to_json() for s in self.steps]

    @classmethod
    def from_json(cls, obj: list[dict]) -> "AugmentationPipeline":
        return cls(steps=tuple(AugmentationSpec.from_json(s) for s in obj))


@dataclass
class ViewPair:
    """Two independently augmented views of one series, with their draws."""

    view_a: np.ndarray
    view_b: np.ndarray
    draws_a: tuple[Draw, ...]
    draws_b: tuple[Draw, ...]


def two_views(x: np.ndarray, pipeline: AugmentationPipeline,
              rng: np.random.Generator) -> ViewPair:
    view_a, draws_a = pipeline.apply(x, rng)
    view_b, draws_b = pipeline.apply(x, rng)
    return ViewPair(view_a=view_a, view_b=view_b, draws_a=draws_a, draws_b=draws_b)


@dataclass
class TrioViews:
    """Consistent two-view augmentations for the inbound/outbound/joint trio.

    Each channel of the joint view reuses the draws of the corresponding
    single-flow view, so all three encoders see the same augmented data.
    """

    inbound: tuple[np.ndarray, np.ndarray]      # (T, 1) views a, b
    outbound: tuple[np.ndarray, np.ndarray]     # (T, 1)
    joint: tuple[np.ndarray, np.ndarray]        # (T, 2)


def trio_views(x_joint: np.ndarray, pipeline: AugmentationPipeline,
               rng_a: np.random.Generator, rng_b: np.random.Generator) -> TrioViews:
    """Build both augmented views of (x_in, x_out, x_joint) from a (T, 2) series."""
    x_joint = np.asarray(x_joint, dtype=np.float64)
    if x_joint.ndim != 2 or x_joint.shape[1] != 2:
        raise ValueError(f"expected a (T, 2) series, got {x_joint.shape}")
    views = {}
    for label, rng in (("a", rng_a), ("b", rng_b)):
        aug_in, _ = pipeline.apply(x_joint[:, 0:1], rng)
        aug_out, _ = pipeline.apply(x_joint[:, 1:2], rng)
        views[label] = (aug_in, aug_out, np.concatenate([aug_in, aug_out], axis=1))
    return TrioViews(
        inbound=(views["a"][0], views["b"][0]),
        outbound=(views["a"][1], views["b"][1]),
        joint=(views["a"][2], views["b"][2]),
    )
