"""Analytic-vs-finite-difference checks for every loss, in float64.

Each case perturbs the student-side inputs (logits or decoder features) with
a central step of 1e-5 and requires relative agreement within 1e-3 against
autograd, over randomized small instances (N <= 5, spatial <= 8x8).
"""

import time

import pytest
import torch

from mgd.core import IGNORE, LabelMask, PredictionMap
from mgd.gradcheck import check_gradient
from mgd.losses import (
    global_semantic_vector,
    image_semantic_loss,
    pixel_consistency,
    region_content_loss,
    regional_content_vectors,
    self_correlation,
    supervised_ce,
)

N_INSTANCES = 20


def random_case(seed):
    gen = torch.Generator().manual_seed(seed)
    n = int(torch.randint(2, 6, (1,), generator=gen))
    h = int(torch.randint(1, 9, (1,), generator=gen))
    w = int(torch.randint(1, 9, (1,), generator=gen))
    return gen, n, h, w


def student_probs(logits: torch.Tensor) -> PredictionMap:
    return PredictionMap(torch.softmax(logits, dim=0))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_supervised_ce_gradient(seed):
    gen, n, h, w = random_case(seed)
    logits = torch.randn(n, h, w, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, n, (h, w), generator=gen)
    if h * w > 1:  # sprinkle an IGNORE pixel to exercise the masked reduction
        labels.view(-1)[0] = IGNORE
    mask = LabelMask(labels)
    check_gradient(lambda z: supervised_ce(student_probs(z), mask), logits)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_pixel_consistency_gradient(seed):
    gen, n, h, w = random_case(seed)
    logits = torch.randn(n, h, w, generator=gen, dtype=torch.float64)
    t_d = PredictionMap(torch.softmax(torch.randn(n, h, w, generator=gen, dtype=torch.float64), dim=0))
    t_w = PredictionMap(torch.softmax(torch.randn(n, h, w, generator=gen, dtype=torch.float64), dim=0))
    check_gradient(lambda z: pixel_consistency(student_probs(z), t_d, t_w), logits)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_image_semantic_loss_gradient(seed):
    gen, n, h, w = random_case(seed)
    logits = torch.randn(n, h, w, generator=gen, dtype=torch.float64)
    teacher = global_semantic_vector(
        PredictionMap(torch.softmax(torch.randn(n, h, w, generator=gen, dtype=torch.float64), dim=0))
    )

    def loss(z):
        return image_semantic_loss(global_semantic_vector(student_probs(z)), teacher)

    check_gradient(loss, logits)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_region_content_loss_gradient(seed):
    # composed through regional pooling and self-correlation
    gen, n, h, w = random_case(seed)
    feats = torch.randn(n, h, w, generator=gen, dtype=torch.float64)
    grid = (min(3, h), min(3, w))
    teacher_feats = torch.randn(n, h, w, generator=gen, dtype=torch.float64)
    m_tw = self_correlation(regional_content_vectors(teacher_feats, grid))

    def loss(f):
        return region_content_loss(self_correlation(regional_content_vectors(f, grid)), m_tw)

    check_gradient(loss, feats)


def test_gradient_suite_runtime_budget():
    """The four loss families x 20 instances must verify in under a minute."""
    started = time.perf_counter()
    for seed in range(N_INSTANCES):
        gen, n, h, w = random_case(seed + 1000)
        logits = torch.randn(n, h, w, generator=gen, dtype=torch.float64)
        labels = LabelMask(torch.randint(0, n, (h, w), generator=gen))
        check_gradient(lambda z: supervised_ce(student_probs(z), labels), logits)
    assert time.perf_counter() - started < 60.0
