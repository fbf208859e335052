"""Central finite-difference gradient checking for scalar torch losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

REL_ERROR_FLOOR = 1e-8


def finite_diff_grad(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences of loss_fn with respect to every scalar in params.

    loss_fn must be a pure function of the current parameter values. Each
    scalar is perturbed in place by +-step and restored afterwards.
    """
    grads: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for name, param in params.items():
            flat = param.view(-1)
            estimate = np.zeros(flat.numel(), dtype=np.float64)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                f_plus = float(loss_fn())
                flat[i] = original - step
                f_minus = float(loss_fn())
                flat[i] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise FloatingPointError(
                        f"non-finite loss while perturbing {name}[{i}]"
                    )
                estimate[i] = (f_plus - f_minus) / (2.0 * step)
            grads[name] = estimate.reshape(tuple(param.shape))
    return grads


def analytic_grad(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
) -> dict[str, np.ndarray]:
    """Autograd gradients for the same parameters; unused parameters get zeros."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, param), grad in zip(params.items(), grads):
        if grad is None:
            out[name] = np.zeros(tuple(param.shape), dtype=np.float64)
        else:
            out[name] = grad.detach().cpu().numpy().astype(np.float64)
    return out


def max_relative_error(
    a: dict[str, np.ndarray],
    b: dict[str, np.ndarray],
    floor: float = REL_ERROR_FLOOR,
) -> tuple[float, str]:
    """Max over all scalars of |a-b| / max(|a|, |b|, floor), with its location."""
    worst = 0.0
    worst_name = ""
    for name in a:
        denom = np.maximum(np.maximum(np.abs(a[name]), np.abs(b[name])), floor)
        rel = np.abs(a[name] - b[name]) / denom
        local = float(rel.max()) if rel.size else 0.0
        if local >= worst:
            worst = local
            worst_name = name
    return worst, worst_name


@dataclass
class GradientCheckReport:
    max_rel_error: float
    worst_param: str
    n_scalars: int
    step: float


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    step: float = 1e-5,
) -> GradientCheckReport:
    """Compare autograd against central finite differences."""
    analytic = analytic_grad(loss_fn, params)
    numeric = finite_diff_grad(loss_fn, params, step=step)
    worst, worst_name = max_relative_error(analytic, numeric)
    n_scalars = sum(p.numel() for p in params.values())
    return GradientCheckReport(
        max_rel_error=worst, worst_param=worst_name, n_scalars=n_scalars, step=step
    )
