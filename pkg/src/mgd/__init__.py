"""Multi-granularity distillation for lightweight semi-supervised segmentation.

A lightweight student segmentation network is trained against two frozen,
structurally complementary teachers over cooperating labeled and unlabeled
data streams, with image-level, region-level, and pixel-level losses.
"""

from .core import (
    IGNORE,
    GlobalSemanticVector,
    ImageBatch,
    LabelMask,
    LossWeights,
    PredictionMap,
    RegionalContentVectors,
    SelfCorrelationMatrix,
    validate_prediction_map,
)
from .losses import (
    LossReport,
    global_semantic_vector,
    image_semantic_loss,
    pixel_consistency,
    pseudo_label,
    region_content_loss,
    regional_content_vectors,
    self_correlation,
    supervised_ce,
    total_loss,
)
from .models import (
    DEEP,
    WIDE,
    ModelCost,
    TeacherEnsemble,
    build_toy_student,
    build_toy_teacher,
    freeze,
    load_checkpoint,
    model_cost,
    parameter_hash,
    save_checkpoint,
)

__version__ = "0.1.0"
