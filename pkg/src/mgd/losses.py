"""Distillation losses over probability maps and decoder features.

Every loss is differentiable with respect to the student inputs; teacher
inputs are treated as constants (detached internally). Reductions are
arithmetic means over valid pixels / entries, so all losses are nonnegative
scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import (
    IGNORE,
    GlobalSemanticVector,
    LabelMask,
    LossWeights,
    PredictionMap,
    RegionalContentVectors,
    SelfCorrelationMatrix,
    ShapeError,
)

# Guard against zero-norm regional vectors; a dead channel block gets
# similarity 0 against everything, including itself.
COSINE_EPS = 1e-8


class EmptySupervisionError(ValueError):
    """Every pixel in the batch is IGNORE."""


class NonFiniteLossError(FloatingPointError):
    """A loss component evaluated to NaN or infinity."""


@dataclass(frozen=True)
class LossReport:
    """Scalar loss components of one step and their weighted total."""

    sup: float
    pixel_labeled: float
    pixel_unlabeled: float
    image_level: float
    region_level: float
    total: float
    lambda1: float
    lambda2: float

    def __post_init__(self):
        recombined = (
            self.sup
            + self.pixel_labeled
            + self.pixel_unlabeled
            + self.lambda1 * self.image_level
            + self.lambda2 * self.region_level
        )
        if abs(self.total - recombined) > 1e-6 * max(abs(recombined), 1e-12):
            raise ValueError(f"total {self.total} does not decompose (expected {recombined})")

    def astuple(self) -> tuple[float, ...]:
        return (self.sup, self.pixel_labeled, self.pixel_unlabeled,
                self.image_level, self.region_level, self.total)


def _gather_log_probs(probs: torch.Tensor, classes: torch.Tensor) -> torch.Tensor:
    """log prob at the given class per pixel; probs (B x) N x H x W, classes (B x) H x W."""
    channel = probs.ndim - 3
    picked = probs.gather(channel, classes.unsqueeze(channel)).squeeze(channel)
    return torch.log(picked)


def supervised_ce(student: PredictionMap, labels: LabelMask) -> torch.Tensor:
    """Mean over non-IGNORE pixels of -log(student prob at the true class)."""
    if student.probs.shape[:-3] + student.probs.shape[-2:] != labels.classes.shape:
        raise ShapeError(
            f"probs {tuple(student.probs.shape)} do not match labels {tuple(labels.classes.shape)}"
        )
    labels.check_classes(student.n_classes)
    valid = labels.classes != IGNORE
    if not bool(valid.any()):
        raise EmptySupervisionError("empty supervision: all pixels IGNORE")
    safe = labels.classes.clamp(0, student.n_classes - 1)
    logp = _gather_log_probs(student.probs, safe)
    return -(logp[valid]).mean()


def pseudo_label(teacher: PredictionMap) -> LabelMask:
    """Per-pixel argmax class; ties break to the lowest class index."""
    channel = teacher.probs.ndim - 3
    return LabelMask(torch.argmax(teacher.probs.detach(), dim=channel))


def _consistency_ce(student: PredictionMap, teacher: PredictionMap, soft: bool) -> torch.Tensor:
    if student.probs.shape != teacher.probs.shape:
        raise ShapeError(
            f"student {tuple(student.probs.shape)} vs teacher {tuple(teacher.probs.shape)}"
        )
    if soft:
        t = teacher.probs.detach()
        channel = t.ndim - 3
        return -(t * torch.log(student.probs)).sum(dim=channel).mean()
    target = pseudo_label(teacher)
    return -_gather_log_probs(student.probs, target.classes).mean()


def pixel_consistency(
    student: PredictionMap,
    t_d: PredictionMap,
    t_w: PredictionMap,
    soft: bool = False,
) -> torch.Tensor:
    """Sum of the two per-teacher cross-entropies against pseudo-labels.

    Each term is the mean over all pixels of -log(student prob at that
    teacher's argmax class). With soft=True the full teacher distribution is
    used as the target instead of its argmax one-hot.
    """
    return _consistency_ce(student, t_d, soft) + _consistency_ce(student, t_w, soft)


def global_semantic_vector(p: PredictionMap) -> GlobalSemanticVector:
    """Global average pooling of a prediction map: per-class spatial mean."""
    return GlobalSemanticVector(p.probs.mean(dim=(-2, -1)))


def image_semantic_loss(k_s: GlobalSemanticVector, k_td: GlobalSemanticVector) -> torch.Tensor:
    """Mean absolute difference of two global semantic vectors."""
    if k_s.values.shape != k_td.values.shape:
        raise ShapeError(f"{tuple(k_s.values.shape)} vs {tuple(k_td.values.shape)}")
    return (k_s.values - k_td.values.detach()).abs().mean()


def regional_content_vectors(f: torch.Tensor, grid: tuple[int, int]) -> RegionalContentVectors:
    """Adaptive average pooling of a feature map onto an Hv x Wv region grid.

    Region (i, j) averages input rows [floor(i*H/Hv), ceil((i+1)*H/Hv)) and
    the analogous column span, per channel.
    """
    if f.ndim not in (3, 4):
        raise ShapeError(f"expected (B x) C x H x W features, got {tuple(f.shape)}")
    hv, wv = grid
    h, w = f.shape[-2:]
    if not (1 <= hv <= h and 1 <= wv <= w):
        raise ShapeError(f"grid {grid} exceeds feature extent {h}x{w}")
    pooled = F.adaptive_avg_pool2d(f if f.ndim == 4 else f.unsqueeze(0), (hv, wv))
    return RegionalContentVectors(pooled if f.ndim == 4 else pooled.squeeze(0), (hv, wv))


def self_correlation(v: RegionalContentVectors) -> SelfCorrelationMatrix:
    """Pairwise cosine similarity of the flattened regional vectors."""
    vals = v.values
    batched = vals.ndim == 4
    flat = vals.reshape(*vals.shape[:-2], -1)  # (B x) C x K
    if not batched:
        flat = flat.unsqueeze(0)
    norms = flat.norm(dim=-2, keepdim=True).clamp_min(COSINE_EPS)
    unit = flat / norms
    m = unit.transpose(-1, -2) @ unit
    return SelfCorrelationMatrix(m if batched else m.squeeze(0))


def region_content_loss(m_s: SelfCorrelationMatrix, m_tw: SelfCorrelationMatrix) -> torch.Tensor:
    """Mean squared difference between two self-correlation matrices."""
    if m_s.values.shape != m_tw.values.shape:
        raise ShapeError(f"{tuple(m_s.values.shape)} vs {tuple(m_tw.values.shape)}")
    return (m_s.values - m_tw.values.detach()).pow(2).mean()


def total_loss(
    sup: float,
    pixel_labeled: float,
    pixel_unlabeled: float,
    image_level: float,
    region_level: float,
    w: LossWeights,
) -> LossReport:
    """Combine the component scalars into the weighted training objective."""
    parts = {
        "sup": float(sup),
        "pixel_labeled": float(pixel_labeled),
        "pixel_unlabeled": float(pixel_unlabeled),
        "image_level": float(image_level),
        "region_level": float(region_level),
    }
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss component {name} = {value}")
    total = (
        parts["sup"]
        + parts["pixel_labeled"]
        + parts["pixel_unlabeled"]
        + w.lambda1 * parts["image_level"]
        + w.lambda2 * parts["region_level"]
    )
    return LossReport(total=total, lambda1=w.lambda1, lambda2=w.lambda2, **parts)
