"""Literal, loop-based transcription of the training objective.

Everything here is written as plain nested loops over batch members and
timesteps in double precision, with no vectorization and no masking tricks,
so it can serve as an independent check of the vectorized implementation.
The exponentials are evaluated directly; with cosine similarities bounded by
1 and temperatures no smaller than 0.1 the arguments stay within +-10, far
inside double range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_NORM_GUARD = 1e-8


def _as_f64(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def oracle_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = max(float(np.linalg.norm(a)), _NORM_GUARD)
    nb = max(float(np.linalg.norm(b)), _NORM_GUARD)
    return float(np.dot(a, b)) / (na * nb)


def oracle_instance_loss(z, z_aug, tau: float) -> tuple[np.ndarray, float]:
    """Per-timestep contrastive loss, computed pair by pair.

    Returns the (B, T) matrix of per-anchor losses and their mean.
    """
    z = _as_f64(z)
    z_aug = _as_f64(z_aug)
    B, T, _ = z.shape
    matrix = np.zeros((B, T))
    for n in range(B):
        for t in range(T):
            numerator = math.exp(oracle_cosine(z[n, t], z_aug[n, t]) / tau)
            denominator = 0.0
            for m in range(B):
                if m != n:
                    denominator += math.exp(oracle_cosine(z[n, t], z[m, t]) / tau)
            for m in range(B):
                denominator += math.exp(oracle_cosine(z[n, t], z_aug[m, t]) / tau)
            matrix[n, t] = -math.log(numerator / denominator)
    return matrix, float(matrix.mean())


def oracle_pool(z) -> np.ndarray:
    """Temporal mean of a (B, T, F) array -> (B, F)."""
    return _as_f64(z).mean(axis=1)


def oracle_align_pair(anchor, positives, in_modal, tau_a: float) -> np.ndarray:
    """Per-anchor pooled alignment loss, computed pair by pair. Returns (B,)."""
    anchor = _as_f64(anchor)
    positives = _as_f64(positives)
    in_modal = _as_f64(in_modal)
    B = anchor.shape[0]
    losses = np.zeros(B)
    for n in range(B):
        numerator = math.exp(oracle_cosine(anchor[n], positives[n]) / tau_a)
        denominator = 0.0
        for m in range(B):
            if m != n:
                denominator += math.exp(oracle_cosine(anchor[n], in_modal[m]) / tau_a)
        for m in range(B):
            denominator += math.exp(oracle_cosine(anchor[n], positives[m]) / tau_a)
        losses[n] = -math.log(numerator / denominator)
    return losses


def oracle_align_regularizer(pooled: dict[str, tuple[np.ndarray, np.ndarray]],
                             tau_a: float) -> float:
    """Four-term pooled regularizer from {flow: (pooled_z, pooled_z_aug)}."""
    joint, joint_aug = pooled["joint"]
    total = 0.0
    for flow in ("inbound", "outbound"):
        flow_z, flow_aug = pooled[flow]
        total += float(oracle_align_pair(joint, flow_z, joint, tau_a).mean())
        total += float(oracle_align_pair(joint_aug, flow_aug, joint_aug, tau_a).mean())
    return total


def oracle_total_loss(batch, temps) -> dict[str, float]:
    """Full objective from a BatchProjections-like object.

    `batch` needs .inbound/.outbound/.joint attributes with .z/.z_aug arrays
    (torch tensors or numpy). Returns {"inbound", "outbound", "align", "total"}.
    """
    pairs = {
        flow: (_as_f64(getattr(batch, flow).z), _as_f64(getattr(batch, flow).z_aug))
        for flow in ("inbound", "outbound", "joint")
    }
    _, loss_in = oracle_instance_loss(*pairs["inbound"], tau=temps.tau)
    _, loss_out = oracle_instance_loss(*pairs["outbound"], tau=temps.tau)
    pooled = {flow: (oracle_pool(z), oracle_pool(za)) for flow, (z, za) in pairs.items()}
    loss_align = oracle_align_regularizer(pooled, temps.tau_a)
    return {
        "inbound": loss_in,
        "outbound": loss_out,
        "align": loss_align,
        "total": loss_in + loss_out + loss_align,
    }


@dataclass
class OracleReport:
    """Outcome of an oracle/gradient verification pass."""

    term_discrepancies: dict[str, float] = field(default_factory=dict)
    grad_max_rel_error: float | None = None
    loss_tolerance: float = 1e-5
    grad_tolerance: float = 1e-4

    def passed(self) -> bool:
        if any(d > self.loss_tolerance for d in self.term_discrepancies.values()):
            return False
        if self.grad_max_rel_error is not None and self.grad_max_rel_error > self.grad_tolerance:
            return False
        return True


def compare_with_production(batch, temps, production: dict[str, float]) -> dict[str, float]:
    """Absolute discrepancies between the oracle and a production breakdown.

    `production` maps the keys inbound/outbound/align/total to floats.
    """
    reference = oracle_total_loss(batch, temps)
    return {key: abs(reference[key] - production[key]) for key in reference}
