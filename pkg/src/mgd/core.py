"""Shared tensor value types and their validation.

All arrays are torch tensors. Types accept either a per-sample layout or the
same layout with a leading batch dimension; helper properties report which
one is in use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

# Sentinel class id for void pixels (VOC annotation convention). Pixels with
# this value are skipped by every supervised reduction and by the metrics.
IGNORE = 255

# Per-pixel probability vectors must sum to 1 within this tolerance.
PROB_SUM_TOL = 1e-5

# Tolerance for self-correlation symmetry / range / unit-diagonal checks.
CORR_TOL = 1e-6


class ShapeError(ValueError):
    """Array has the wrong rank or incompatible dimensions."""


class NormalizationError(ValueError):
    """Probability tensor violates the per-pixel sum-to-one contract."""


@dataclass(frozen=True)
class ImageBatch:
    """Normalized images, shape B x 3 x H x W, with per-sample ids."""

    pixels: torch.Tensor
    ids: tuple[str, ...]

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ShapeError(f"expected B x 3 x H x W pixels, got {tuple(self.pixels.shape)}")
        b, _, h, w = self.pixels.shape
        if b < 1 or h < 1 or w < 1:
            raise ShapeError(f"empty batch or degenerate spatial size {tuple(self.pixels.shape)}")
        if len(self.ids) != b:
            raise ShapeError(f"{len(self.ids)} ids for batch of {b}")

    def __len__(self):
        return self.pixels.shape[0]


@dataclass(frozen=True)
class LabelMask:
    """Integer class ids, shape (B x) H x W, values in {0..N-1} or IGNORE."""

    classes: torch.Tensor

    def __post_init__(self):
        if self.classes.ndim not in (2, 3):
            raise ShapeError(f"expected (B x) H x W labels, got {tuple(self.classes.shape)}")
        if self.classes.is_floating_point():
            raise ShapeError("labels must be an integer tensor")

    @property
    def batched(self) -> bool:
        return self.classes.ndim == 3

    def check_classes(self, n_classes: int) -> "LabelMask":
        valid = self.classes[self.classes != IGNORE]
        if valid.numel() and (valid.min() < 0 or valid.max() >= n_classes):
            raise ValueError(
                f"label ids outside [0, {n_classes}) (min {int(valid.min())}, max {int(valid.max())})"
            )
        return self


@dataclass(frozen=True)
class PredictionMap:
    """Per-pixel class probabilities, shape (B x) N x H x W."""

    probs: torch.Tensor

    def __post_init__(self):
        if self.probs.ndim not in (3, 4):
            raise ShapeError(f"expected (B x) N x H x W probabilities, got {tuple(self.probs.shape)}")

    @property
    def batched(self) -> bool:
        return self.probs.ndim == 4

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-3]


@dataclass(frozen=True)
class GlobalSemanticVector:
    """Image-wide class distribution, shape (B x) N."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim not in (1, 2):
            raise ShapeError(f"expected (B x) N vector, got {tuple(self.values.shape)}")

    @property
    def n_classes(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class RegionalContentVectors:
    """Region-pooled decoder features, shape (B x) C x Hv x Wv."""

    values: torch.Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        if self.values.ndim not in (3, 4):
            raise ShapeError(f"expected (B x) C x Hv x Wv values, got {tuple(self.values.shape)}")
        hv, wv = self.grid
        if tuple(self.values.shape[-2:]) != (hv, wv):
            raise ShapeError(f"grid {self.grid} does not match values {tuple(self.values.shape)}")


@dataclass(frozen=True)
class SelfCorrelationMatrix:
    """Pairwise cosine similarities of regional vectors, shape (B x) K x K."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim not in (2, 3) or self.values.shape[-1] != self.values.shape[-2]:
            raise ShapeError(f"expected square (B x) K x K matrix, got {tuple(self.values.shape)}")


@dataclass(frozen=True)
class LossWeights:
    """Trade-off coefficients for the image-level and region-level terms."""

    lambda1: float = 0.002
    lambda2: float = 100.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def validate_prediction_map(p: PredictionMap) -> PredictionMap:
    """Check range and per-pixel normalization; return the input unchanged.

    Raises NormalizationError naming the worst-offending pixel.
    """
    probs = p.probs.detach()
    if probs.numel() == 0:
        raise ShapeError("empty prediction map")
    lo, hi = float(probs.min()), float(probs.max())
    if lo < -PROB_SUM_TOL or hi > 1.0 + PROB_SUM_TOL:
        raise NormalizationError(f"probabilities outside [0, 1]: min {lo:.6g}, max {hi:.6g}")
    sums = probs.sum(dim=-3)
    err = (sums - 1.0).abs()
    worst = err.max()
    if worst > PROB_SUM_TOL:
        idx = tuple(int(i) for i in (err == worst).nonzero()[0])
        raise NormalizationError(
            f"per-pixel channel sum {float(sums[idx]):.6g} at pixel {idx} (|sum-1| = {float(worst):.3g})"
        )
    return p


def validate_self_correlation(m: SelfCorrelationMatrix, tol: float = CORR_TOL) -> SelfCorrelationMatrix:
    """Check symmetry and the [-1, 1] range; return the input unchanged."""
    v = m.values.detach()
    asym = (v - v.transpose(-1, -2)).abs().max()
    if float(asym) > tol:
        raise ValueError(f"self-correlation not symmetric (max asymmetry {float(asym):.3g})")
    if float(v.abs().max()) > 1.0 + tol:
        raise ValueError(f"self-correlation entries outside [-1, 1] (max |m| {float(v.abs().max()):.6g})")
    return m
