"""Cooperative distillation training loop.

Each step consumes one labeled and one unlabeled batch: the student is
supervised on ground truth, pulled toward both frozen teachers' pseudo-labels
on every pixel, toward the deep teacher's global semantic vector, and toward
the wide teacher's regional self-correlation structure. One SGD-with-momentum
update per step, polynomial learning-rate decay.
"""

from __future__ import annotations

import copy
import csv
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .core import ImageBatch, LabelMask, LossWeights, PredictionMap
from .data import Augmenter, BatchLoader, PairedBatchSampler, PartitionProtocol
from .losses import (
    LossReport,
    global_semantic_vector,
    image_semantic_loss,
    pixel_consistency,
    region_content_loss,
    regional_content_vectors,
    self_correlation,
    supervised_ce,
    total_loss,
)
from .metrics import ConfusionMatrix, accumulate, miou
from .models import SegmentationNetwork, TeacherEnsemble, optimizer_parameters


@dataclass(frozen=True)
class LossSwitches:
    """Which distillation branches are active.

    The default is the strongest assignment: image-level knowledge from the
    deep teacher only, region-level from the wide teacher only.
    """

    pixel_labeled: bool = True
    pixel_unlabeled: bool = True
    image_deep: bool = True
    image_wide: bool = False
    region_deep: bool = False
    region_wide: bool = True

    @property
    def needs_unlabeled(self) -> bool:
        return any(
            (self.pixel_unlabeled, self.image_deep, self.image_wide, self.region_deep, self.region_wide)
        )


def standard_switch_rows() -> list[tuple[str, LossSwitches]]:
    """The six ablation configurations, from supervised-only to all branches."""
    off = LossSwitches(False, False, False, False, False, False)
    return [
        ("sup_only", off),
        ("pixel", replace(off, pixel_labeled=True, pixel_unlabeled=True)),
        ("pixel+image_deep", LossSwitches(True, True, True, False, False, False)),
        ("pixel+region_wide", LossSwitches(True, True, False, False, False, True)),
        ("pixel+image_deep+region_wide", LossSwitches(True, True, True, False, False, True)),
        ("all_branches", LossSwitches(True, True, True, True, True, True)),
    ]


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    total_steps: int
    momentum: float = 0.9
    weight_decay: float = 0.0005
    weights: LossWeights = field(default_factory=LossWeights)
    grid: tuple[int, int] = (7, 7)
    seed: int = 0
    switches: LossSwitches = field(default_factory=LossSwitches)
    batch_size: int = 8
    crop_size: tuple[int, int] | None = None
    augment: bool = True
    val_every: int | None = None  # default: total_steps // 10
    lr_power: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")

    @property
    def validation_interval(self) -> int:
        return self.val_every or max(1, self.total_steps // 10)


@dataclass(frozen=True)
class StepRecord:
    step: int
    report: LossReport
    lr: float
    wall_time: float


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - step / total_steps) ** power


def compute_losses(
    student: SegmentationNetwork,
    teachers: TeacherEnsemble,
    labeled: tuple[ImageBatch, LabelMask],
    unlabeled: ImageBatch | None,
    cfg: TrainConfig,
) -> dict[str, torch.Tensor]:
    """Forward all branches and return the unweighted loss components.

    Teacher passes run without gradients; a disabled branch contributes an
    exact zero.
    """
    sw = cfg.switches
    images, labels = labeled
    zero = torch.zeros(())

    logits_l, _ = student(images.pixels)
    probs_l = PredictionMap(torch.softmax(logits_l, dim=1))
    parts = {
        "sup": supervised_ce(probs_l, labels),
        "pixel_labeled": zero,
        "pixel_unlabeled": zero,
        "image_level": zero,
        "region_level": zero,
    }

    if sw.pixel_labeled:
        teacher_l = teachers.predict(images.pixels)
        parts["pixel_labeled"] = pixel_consistency(
            probs_l, PredictionMap(teacher_l["probs_d"]), PredictionMap(teacher_l["probs_w"])
        )

    if unlabeled is None or not sw.needs_unlabeled:
        return parts

    logits_u, feats_u = student(unlabeled.pixels)
    probs_u = PredictionMap(torch.softmax(logits_u, dim=1))
    teacher_u = teachers.predict(unlabeled.pixels)
    probs_d = PredictionMap(teacher_u["probs_d"])
    probs_w = PredictionMap(teacher_u["probs_w"])

    if sw.pixel_unlabeled:
        parts["pixel_unlabeled"] = pixel_consistency(probs_u, probs_d, probs_w)

    if sw.image_deep or sw.image_wide:
        k_s = global_semantic_vector(probs_u)
        image_term = zero
        if sw.image_deep:
            image_term = image_term + image_semantic_loss(k_s, global_semantic_vector(probs_d))
        if sw.image_wide:
            image_term = image_term + image_semantic_loss(k_s, global_semantic_vector(probs_w))
        parts["image_level"] = image_term

    if sw.region_deep or sw.region_wide:
        m_s = self_correlation(regional_content_vectors(feats_u, cfg.grid))
        region_term = zero
        if sw.region_deep:
            m_td = self_correlation(regional_content_vectors(teacher_u["feats_d"], cfg.grid))
            region_term = region_term + region_content_loss(m_s, m_td)
        if sw.region_wide:
            m_tw = self_correlation(regional_content_vectors(teacher_u["feats_w"], cfg.grid))
            region_term = region_term + region_content_loss(m_s, m_tw)
        parts["region_level"] = region_term

    return parts


def distill_step(
    student: SegmentationNetwork,
    teachers: TeacherEnsemble,
    labeled: tuple[ImageBatch, LabelMask],
    unlabeled: ImageBatch,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    step: int = 0,
) -> StepRecord:
    """One cooperative distillation step: loss assembly and one SGD update."""
    started = time.perf_counter()
    parts = compute_losses(student, teachers, labeled, unlabeled, cfg)
    report = total_loss(
        sup=parts["sup"].item(),
        pixel_labeled=parts["pixel_labeled"].item(),
        pixel_unlabeled=parts["pixel_unlabeled"].item(),
        image_level=parts["image_level"].item(),
        region_level=parts["region_level"].item(),
        w=cfg.weights,
    )
    objective = (
        parts["sup"]
        + parts["pixel_labeled"]
        + parts["pixel_unlabeled"]
        + cfg.weights.lambda1 * parts["image_level"]
        + cfg.weights.lambda2 * parts["region_level"]
    )
    optimizer.zero_grad()
    objective.backward()
    optimizer.step()
    lr = optimizer.param_groups[0]["lr"]
    return StepRecord(step=step, report=report, lr=lr, wall_time=time.perf_counter() - started)


@torch.no_grad()
def evaluate_miou(
    net: SegmentationNetwork, dataset, n_classes: int, batch_size: int = 8
) -> float:
    """mIoU of a network over a dataset at native resolution, no augmentation."""
    was_training = net.training
    net.eval()
    loader = BatchLoader(dataset, augmenter=None)
    cm = ConfusionMatrix(n_classes)
    ids = list(dataset.ids)
    try:
        for start in range(0, len(ids), batch_size):
            images, masks = loader.load(ids[start : start + batch_size])
            logits, _ = net(images.pixels)
            pred = LabelMask(logits.argmax(dim=1))
            accumulate(cm, pred, masks)
    finally:
        loader.close()
        net.train(was_training)
    return miou(cm)


@dataclass
class RunResult:
    student: SegmentationNetwork
    records: list[StepRecord]
    val_history: list[tuple[int, float]]
    best_miou: float
    best_step: int


@dataclass(frozen=True)
class DataBundle:
    """Training data plus its labeled/unlabeled split and a validation set."""

    train: object
    val: object
    protocol: PartitionProtocol
    n_classes: int


def _make_augmenter(cfg: TrainConfig, dataset) -> Augmenter | None:
    if not cfg.augment:
        return None
    crop = cfg.crop_size or tuple(dataset[0].image.shape[-2:])
    return Augmenter(crop_size=crop)


def run_distillation(
    cfg: TrainConfig,
    data: DataBundle,
    teachers: TeacherEnsemble,
    student: SegmentationNetwork,
) -> RunResult:
    """Run total_steps distillation steps; retain the best-validation student."""
    torch.manual_seed(cfg.seed)
    before_hashes = teachers.hashes()
    optimizer = torch.optim.SGD(
        optimizer_parameters(student),
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    sampler = PairedBatchSampler(
        data.protocol.labeled_ids, data.protocol.unlabeled_ids, cfg.batch_size, cfg.seed
    )
    loader = BatchLoader(data.train, augmenter=_make_augmenter(cfg, data.train))
    aug_rng = random.Random(f"{cfg.seed}:augment")

    records: list[StepRecord] = []
    val_history: list[tuple[int, float]] = []
    best_miou, best_step = float("-inf"), -1
    best_state: dict | None = None
    student.train()
    try:
        batches = iter(sampler)
        for step in range(cfg.total_steps):
            lr = poly_lr(cfg.lr, step, cfg.total_steps, cfg.lr_power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            labeled_ids, unlabeled_ids = next(batches)
            labeled = loader.load(labeled_ids, aug_rng)
            unlabeled_images, _ = loader.load(unlabeled_ids, aug_rng)
            records.append(
                distill_step(student, teachers, labeled, unlabeled_images, cfg, optimizer, step)
            )
            if (step + 1) % cfg.validation_interval == 0 or step + 1 == cfg.total_steps:
                score = evaluate_miou(student, data.val, data.n_classes, cfg.batch_size)
                val_history.append((step + 1, score))
                student.train()
                if score > best_miou:
                    best_miou, best_step = score, step + 1
                    best_state = copy.deepcopy(student.state_dict())
    finally:
        loader.close()
    if best_state is not None:
        student.load_state_dict(best_state)
    student.eval()
    after_hashes = teachers.hashes()
    if after_hashes != before_hashes:
        raise RuntimeError("teacher parameters changed during distillation")
    return RunResult(
        student=student,
        records=records,
        val_history=val_history,
        best_miou=best_miou,
        best_step=best_step,
    )


def _single_stream_batches(ids, batch_size: int, seed: int):
    rng = random.Random(f"{seed}:supervised")
    while True:
        order = list(ids)
        rng.shuffle(order)
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield order[start : start + batch_size]
        if len(order) < batch_size:
            yield [rng.choice(order) for _ in range(batch_size)]


def train_supervised(
    net: SegmentationNetwork,
    dataset,
    val_dataset,
    n_classes: int,
    cfg: TrainConfig,
) -> RunResult:
    """Plain supervised training on every available label of `dataset`."""
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.SGD(
        optimizer_parameters(net), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    loader = BatchLoader(dataset, augmenter=_make_augmenter(cfg, dataset))
    aug_rng = random.Random(f"{cfg.seed}:augment")
    batches = _single_stream_batches(list(dataset.ids), cfg.batch_size, cfg.seed)
    records: list[StepRecord] = []
    val_history: list[tuple[int, float]] = []
    best_miou, best_step = float("-inf"), -1
    best_state: dict | None = None
    net.train()
    try:
        for step in range(cfg.total_steps):
            lr = poly_lr(cfg.lr, step, cfg.total_steps, cfg.lr_power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            started = time.perf_counter()
            images, masks = loader.load(next(batches), aug_rng)
            logits, _ = net(images.pixels)
            sup = supervised_ce(PredictionMap(torch.softmax(logits, dim=1)), masks)
            report = total_loss(sup.item(), 0.0, 0.0, 0.0, 0.0, cfg.weights)
            optimizer.zero_grad()
            sup.backward()
            optimizer.step()
            records.append(StepRecord(step, report, lr, time.perf_counter() - started))
            if (step + 1) % cfg.validation_interval == 0 or step + 1 == cfg.total_steps:
                score = evaluate_miou(net, val_dataset, n_classes, cfg.batch_size)
                val_history.append((step + 1, score))
                net.train()
                if score > best_miou:
                    best_miou, best_step = score, step + 1
                    best_state = copy.deepcopy(net.state_dict())
    finally:
        loader.close()
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return RunResult(net, records, val_history, best_miou, best_step)


def pretrain_teacher(
    kind: str,
    dataset,
    val_dataset,
    n_classes: int,
    cfg: TrainConfig,
) -> tuple[SegmentationNetwork, RunResult]:
    """Supervised stand-in for teacher pretraining on the full labeled set.

    Returns the trained network frozen, ready for the ensemble.
    """
    from .models import build_toy_teacher, freeze

    net = build_toy_teacher(kind, n_classes, seed=cfg.seed)
    result = train_supervised(net, dataset, val_dataset, n_classes, cfg)
    freeze(net)
    return net, result


# ---------------------------------------------------------------------------
# Step-record log files
# ---------------------------------------------------------------------------

RECORD_FIELDS = (
    "step", "sup", "pixel_labeled", "pixel_unlabeled",
    "image_level", "region_level", "total", "lr", "wall_time",
)


def write_step_records(records: list[StepRecord], path: Path) -> Path:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for rec in records:
            writer.writerow(
                [
                    rec.step,
                    *[f"{v:.8g}" for v in rec.report.astuple()],
                    f"{rec.lr:.8g}",
                    f"{rec.wall_time:.4f}",
                ]
            )
    return Path(path)
