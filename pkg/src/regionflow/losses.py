"""Contrastive objectives over paired augmented views.

Two families of terms share one similarity kernel (cosine, temperature
scaled):

* a per-timestep normalized temperature-scaled cross entropy over the batch,
  applied separately to the inbound and outbound projections, where the
  positive is the other view of the same region at the same timestep, in-view
  negatives exclude the anchor itself, and the cross-view sum includes the
  positive;
* a pooled alignment regularizer that pulls the temporally averaged joint
  projection toward the matching inbound (and outbound) pooled projection,
  with the other regions' joint and flow projections as negatives, evaluated
  on both views.

All reductions are stabilized with per-anchor max-logit subtraction (via
logsumexp), which leaves the values mathematically unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

COSINE_NORM_GUARD = 1e-8


@dataclass(frozen=True)
class Temperatures:
    tau: float = 1.0
    tau_a: float = 0.1

    def __post_init__(self):
        if self.tau <= 0 or self.tau_a <= 0:
            raise ValueError("temperatures must be strictly positive")


@dataclass
class ProjectionPair:
    """Projections of the two augmented views of one flow."""

    z: torch.Tensor
    z_aug: torch.Tensor


@dataclass
class BatchProjections:
    """(B, T, F) projection pairs for the inbound/outbound/joint flows."""

    inbound: ProjectionPair
    outbound: ProjectionPair
    joint: ProjectionPair

    @property
    def batch_size(self) -> int:
        return self.inbound.z.shape[0]

    def pooled(self) -> "PooledProjections":
        return PooledProjections(
            inbound=ProjectionPair(temporal_mean_pool(self.inbound.z),
                                   temporal_mean_pool(self.inbound.z_aug)),
            outbound=ProjectionPair(temporal_mean_pool(self.outbound.z),
                                    temporal_mean_pool(self.outbound.z_aug)),
            joint=ProjectionPair(temporal_mean_pool(self.joint.z),
                                 temporal_mean_pool(self.joint.z_aug)),
        )

    @classmethod
    def from_views_output(cls, projections: dict) -> "BatchProjections":
        return cls(
            inbound=ProjectionPair(*projections["inbound"]),
            outbound=ProjectionPair(*projections["outbound"]),
            joint=ProjectionPair(*projections["joint"]),
        )


@dataclass
class PooledProjections:
    """(B, F) temporally averaged projection pairs per flow."""

    inbound: ProjectionPair
    outbound: ProjectionPair
    joint: ProjectionPair


@dataclass
class LossBreakdown:
    """Scalar loss terms; total is exactly their sum."""

    inbound: torch.Tensor
    outbound: torch.Tensor
    align: torch.Tensor
    total: torch.Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            "loss_inbound": float(self.inbound.detach()),
            "loss_outbound": float(self.outbound.detach()),
            "loss_align": float(self.align.detach()),
            "loss_total": float(self.total.detach()),
        }


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors, guarded against zero norms, in [-1, 1]."""
    na = torch.linalg.vector_norm(a).clamp_min(COSINE_NORM_GUARD)
    nb = torch.linalg.vector_norm(b).clamp_min(COSINE_NORM_GUARD)
    return (torch.dot(a, b) / (na * nb)).clamp(-1.0, 1.0)


def _normalize(x: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True).clamp_min(COSINE_NORM_GUARD)
    return x / norm


def temporal_mean_pool(z: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean over the time axis: (..., T, F) -> (..., F)."""
    if z.shape[-2] < 1:
        raise ValueError("cannot pool an empty time axis")
    return z.mean(dim=-2)


def ntxent_timestep(z: torch.Tensor, z_aug: torch.Tensor,
                    tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-timestep contrastive loss across the batch.

    Returns the (B, T) per-anchor loss matrix and its scalar mean. Anchors
    come from the first view; the denominator excludes the anchor among
    in-view negatives and includes the positive in the cross-view sum.
    """
    if z.shape != z_aug.shape or z.ndim != 3:
        raise ValueError("expected two (B, T, F) tensors of equal shape")
    B = z.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    zn = _normalize(z)
    zan = _normalize(z_aug)
    within = torch.einsum("ntf,mtf->nmt", zn, zn).clamp(-1.0, 1.0) / tau
    cross = torch.einsum("ntf,mtf->nmt", zn, zan).clamp(-1.0, 1.0) / tau
    positive = torch.diagonal(cross, dim1=0, dim2=1).transpose(0, 1)     # (B, T)
    self_mask = torch.eye(B, dtype=torch.bool, device=z.device).unsqueeze(-1)
    within = within.masked_fill(self_mask, float("-inf"))
    denom = torch.logsumexp(torch.cat([within, cross], dim=1), dim=1)    # (B, T)
    loss_matrix = denom - positive
    return loss_matrix, loss_matrix.mean()


def aux_pair_loss(anchor: torch.Tensor, positives: torch.Tensor,
                  in_modal: torch.Tensor, tau_a: float) -> torch.Tensor:
    """Pooled alignment loss per anchor: (B,) vector.

    For each anchor, the positive is the matching row of `positives`; the
    negatives are the other rows of `in_modal` (the anchor's own modality)
    plus all rows of `positives`.
    """
    if anchor.ndim != 2 or anchor.shape != positives.shape or anchor.shape != in_modal.shape:
        raise ValueError("expected three (B, F) tensors of equal shape")
    B = anchor.shape[0]
    if B < 2:
        raise ValueError("alignment loss needs a batch of at least 2")
    an = _normalize(anchor)
    pn = _normalize(positives)
    mn = _normalize(in_modal)
    cross = (an @ pn.T).clamp(-1.0, 1.0) / tau_a
    within = (an @ mn.T).clamp(-1.0, 1.0) / tau_a
    self_mask = torch.eye(B, dtype=torch.bool, device=anchor.device)
    within = within.masked_fill(self_mask, float("-inf"))
    denom = torch.logsumexp(torch.cat([within, cross], dim=1), dim=1)
    return denom - cross.diagonal()


def aux_regularizer(pooled: PooledProjections, tau_a: float) -> torch.Tensor:
    """Batch-mean alignment regularizer over both flows and both views."""
    joint = pooled.joint
    term_in = (
        aux_pair_loss(joint.z, pooled.inbound.z, joint.z, tau_a).mean()
        + aux_pair_loss(joint.z_aug, pooled.inbound.z_aug, joint.z_aug, tau_a).mean()
    )
    term_out = (
        aux_pair_loss(joint.z, pooled.outbound.z, joint.z, tau_a).mean()
        + aux_pair_loss(joint.z_aug, pooled.outbound.z_aug, joint.z_aug, tau_a).mean()
    )
    return term_in + term_out


def total_loss(
    batch: BatchProjections,
    temps: Temperatures = Temperatures(),
    *,
    use_inbound: bool = True,
    use_outbound: bool = True,
    use_align: bool = True,
    symmetric: bool = False,
) -> LossBreakdown:
    """Combine the enabled loss terms; disabled terms contribute exact zeros.

    `symmetric` additionally averages the per-timestep loss with anchors
    taken from the augmented view (off by default; the written objective is
    one-directional).
    """
    if batch.batch_size < 2:
        raise ValueError("total_loss needs a batch of at least 2")
    ref = batch.joint.z
    zero = torch.zeros((), dtype=ref.dtype, device=ref.device)

    def instance_term(pair: ProjectionPair) -> torch.Tensor:
        _, mean = ntxent_timestep(pair.z, pair.z_aug, temps.tau)
        if symmetric:
            _, reverse = ntxent_timestep(pair.z_aug, pair.z, temps.tau)
            mean = 0.5 * (mean + reverse)
        return mean

    loss_in = instance_term(batch.inbound) if use_inbound else zero
    loss_out = instance_term(batch.outbound) if use_outbound else zero
    loss_align = aux_regularizer(batch.pooled(), temps.tau_a) if use_align else zero
    return LossBreakdown(
        inbound=loss_in,
        outbound=loss_out,
        align=loss_align,
        total=loss_in + loss_out + loss_align,
    )
