"""Segmentation quality metrics and comparison-table reporting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import IGNORE, LabelMask
from .models import ModelCost


class MetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """N x N pixel counts; rows index ground truth, columns prediction."""

    n_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.n_classes, self.n_classes):
            raise MetricError(f"counts shape {self.counts.shape} != ({self.n_classes}, {self.n_classes})")
        if (self.counts < 0).any():
            raise MetricError("negative confusion counts")

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: LabelMask, gt: LabelMask) -> ConfusionMatrix:
    """Add one prediction/ground-truth pair; IGNORE ground truth is skipped."""
    if pred.classes.shape != gt.classes.shape:
        raise MetricError(f"pred {tuple(pred.classes.shape)} vs gt {tuple(gt.classes.shape)}")
    n = cm.n_classes
    gt_np = gt.classes.reshape(-1).cpu().numpy()
    pred_np = pred.classes.reshape(-1).cpu().numpy()
    keep = gt_np != IGNORE
    gt_np, pred_np = gt_np[keep], pred_np[keep]
    if gt_np.size == 0:
        return cm
    if gt_np.min() < 0 or gt_np.max() >= n:
        raise MetricError(f"ground-truth class id outside [0, {n})")
    if pred_np.min() < 0 or pred_np.max() >= n:
        raise MetricError(f"prediction class id outside [0, {n}): max {int(pred_np.max())}")
    flat = n * gt_np.astype(np.int64) + pred_np.astype(np.int64)
    cm.counts += np.bincount(flat, minlength=n * n).reshape(n, n)
    return cm


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class union is empty."""
    counts = cm.counts.astype(np.float64)
    inter = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def miou(cm: ConfusionMatrix, empty_classes: str = "exclude") -> float:
    """Mean IoU over classes.

    empty_classes='exclude' drops classes absent from both prediction and
    ground truth (the benchmark convention); 'zero' counts them as 0.
    """
    if cm.total() == 0:
        raise MetricError("empty confusion matrix")
    ious = per_class_iou(cm)
    if empty_classes == "exclude":
        return float(np.nanmean(ious))
    if empty_classes == "zero":
        return float(np.nan_to_num(ious, nan=0.0).mean())
    raise ValueError(f"empty_classes must be 'exclude' or 'zero', got {empty_classes!r}")


# ---------------------------------------------------------------------------
# Comparison tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSummary:
    """One table row: run name, model cost, mIoU per partition tag."""

    name: str
    cost: ModelCost
    mious: dict[str, float]


CSV_HEADER = ("run", "partition", "miou", "params", "flops")


def _format_count(value: int) -> str:
    if value >= 1_000_000:
        return f"{value / 1_000_000:.2f}M"
    if value >= 1_000:
        return f"{value / 1_000:.2f}K"
    return str(value)


def report_table(
    runs: Sequence[RunSummary],
    teacher_costs: dict[str, ModelCost] | None = None,
) -> str:
    """Aligned text table of per-partition mIoU plus cost columns.

    teacher_costs adds compression-ratio rows (e.g. params '3.81x w.r.t.
    deep teacher') under each run.
    """
    if not runs:
        raise MetricError("no runs to report")
    partitions = list(runs[0].mious.keys())
    for run in runs:
        if list(run.mious.keys()) != partitions:
            raise MetricError(
                f"run {run.name!r} has partitions {list(run.mious)} != {partitions}"
            )
    header = ["run", "params", "flops", *partitions]
    rows = [header]
    for run in runs:
        rows.append(
            [
                run.name,
                _format_count(run.cost.params),
                _format_count(run.cost.flops),
                *[f"{run.mious[p]:.2f}" for p in partitions],
            ]
        )
        for teacher_name, teacher_cost in (teacher_costs or {}).items():
            ratio_p = teacher_cost.params / run.cost.params
            ratio_f = teacher_cost.flops / run.cost.flops
            rows.append(
                [
                    f"  vs {teacher_name}",
                    f"{ratio_p:.2f}x",
                    f"{ratio_f:.2f}x",
                    *["" for _ in partitions],
                ]
            )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * width for width in widths))
    return "\n".join(lines) + "\n"


def runs_to_csv(runs: Sequence[RunSummary]) -> str:
    """Serialize run summaries to the `run,partition,miou,params,flops` schema."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for run in runs:
        for partition_tag, value in run.mious.items():
            writer.writerow([run.name, partition_tag, f"{value:.4f}", run.cost.params, run.cost.flops])
    return buffer.getvalue()


def write_csv(runs: Sequence[RunSummary], path: Path) -> Path:
    Path(path).write_text(runs_to_csv(runs))
    return Path(path)


def read_csv(path: Path) -> list[RunSummary]:
    """Inverse of write_csv; rows regroup into one RunSummary per run name."""
    grouped: dict[str, RunSummary] = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_HEADER:
            raise MetricError(f"unexpected CSV header in {path}: {reader.fieldnames}")
        for row in reader:
            name = row["run"]
            cost = ModelCost(params=int(row["params"]), flops=int(row["flops"]))
            if name not in grouped:
                grouped[name] = RunSummary(name=name, cost=cost, mious={})
            if grouped[name].cost != cost:
                raise MetricError(f"inconsistent cost for run {name!r} in {path}")
            grouped[name].mious[row["partition"]] = float(row["miou"])
    return list(grouped.values())
