"""Central finite-difference verification of analytic gradients.

The harness always works in float64: it perturbs a copy of the input one
coordinate at a time with a symmetric step and compares the resulting
difference quotients against autograd.
"""

from __future__ import annotations

from typing import Callable

import torch

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-3


def central_difference_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = DEFAULT_STEP,
) -> torch.Tensor:
    """Gradient of scalar fn at x by central differences, coordinate by coordinate."""
    if x.dtype != torch.float64:
        raise TypeError("finite differences require a float64 input")
    base = x.detach().clone()
    grad = torch.zeros_like(base)
    flat = base.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(base))
        flat[i] = orig - step
        lo = float(fn(base))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def analytic_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Autograd gradient of scalar fn at x."""
    leaf = x.detach().clone().requires_grad_(True)
    out = fn(leaf)
    (grad,) = torch.autograd.grad(out, leaf)
    return grad


def relative_gradient_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """|g_a - g_fd| / max(|g_a|, |g_fd|) in the Euclidean norm."""
    diff = (analytic - numeric).norm().item()
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return diff / scale


def check_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = DEFAULT_STEP,
    rtol: float = DEFAULT_RTOL,
) -> float:
    """Compare autograd vs central differences; return the relative error.

    Raises AssertionError when the error exceeds rtol.
    """
    err = relative_gradient_error(
        analytic_gradient(fn, x), central_difference_gradient(fn, x, step)
    )
    if err > rtol:
        raise AssertionError(f"gradient mismatch: relative error {err:.3e} > {rtol:.0e}")
    return err
