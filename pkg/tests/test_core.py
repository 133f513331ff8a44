import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mgd.core import (
    IGNORE,
    ImageBatch,
    LabelMask,
    LossWeights,
    NormalizationError,
    PredictionMap,
    ShapeError,
    validate_prediction_map,
)


def test_uniform_map_accepted():
    n = 4
    p = PredictionMap(torch.full((n, 3, 3), 1.0 / n))
    assert validate_prediction_map(p) is p


def test_bad_channel_sum_rejected():
    probs = torch.full((2, 2, 2), 0.5)
    probs[0, 1, 1] = 0.7  # that pixel now sums to 1.2
    with pytest.raises(NormalizationError, match=r"\(1, 1\)"):
        validate_prediction_map(PredictionMap(probs))


def test_one_hot_map_accepted():
    probs = torch.zeros(3, 2, 2)
    probs[0] = 1.0
    validate_prediction_map(PredictionMap(probs))


def test_out_of_range_rejected():
    probs = torch.zeros(2, 1, 1)
    probs[0, 0, 0] = 1.5
    probs[1, 0, 0] = -0.5
    with pytest.raises(NormalizationError, match="outside"):
        validate_prediction_map(PredictionMap(probs))


def test_batched_maps_supported():
    validate_prediction_map(PredictionMap(torch.full((2, 4, 3, 3), 0.25)))


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 5),
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    seed=st.integers(0, 2**31 - 1),
    scale=st.floats(0.01, 100.0),
)
def test_softmax_always_validates(n, h, w, seed, scale):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(n, h, w, generator=gen) * scale
    validate_prediction_map(PredictionMap(torch.softmax(logits, dim=0)))


def test_cropping_preserves_invariants():
    gen = torch.Generator().manual_seed(7)
    probs = torch.softmax(torch.randn(5, 8, 8, generator=gen), dim=0)
    validate_prediction_map(PredictionMap(probs[:, 2:6, 1:5]))


def test_image_batch_shape_checks():
    with pytest.raises(ShapeError):
        ImageBatch(torch.zeros(2, 1, 4, 4), ("a", "b"))
    with pytest.raises(ShapeError):
        ImageBatch(torch.zeros(2, 3, 4, 4), ("only-one",))
    batch = ImageBatch(torch.zeros(2, 3, 4, 4), ("a", "b"))
    assert len(batch) == 2


def test_label_mask_class_check():
    mask = LabelMask(torch.tensor([[0, 1], [IGNORE, 2]]))
    mask.check_classes(3)
    with pytest.raises(ValueError, match="label ids"):
        mask.check_classes(2)
    with pytest.raises(ShapeError):
        LabelMask(torch.zeros(2, 2))  # float tensor


def test_loss_weights_validation():
    w = LossWeights()
    assert w.lambda1 == 0.002 and w.lambda2 == 100.0
    with pytest.raises(ValueError):
        LossWeights(lambda1=-0.1)
    with pytest.raises(ValueError):
        LossWeights(lambda2=float("nan"))
