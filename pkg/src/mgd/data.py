"""Datasets, labeled/unlabeled partitions, augmentation, and batch streams.

The synthetic scene generator is the desk-scale training corpus: colored
geometric shapes (one shape kind per class) over a textured background, with
exact masks. It exports to the same on-disk layout the VOC-style loader
reads, so the two paths round-trip.
"""

from __future__ import annotations

import math
import os
import random
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import IGNORE, ImageBatch, LabelMask

# Per-channel normalization applied to [0, 1] pixel values.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

class DataError(ValueError):
    """Dataset files or shapes violate the expected layout."""


def parse_fraction(text: str) -> Fraction:
    """Parse '1/8'-style fraction strings."""
    frac = Fraction(text)
    if not 0 < frac < 1:
        raise ValueError(f"fraction must be in (0, 1), got {text!r}")
    return frac


@dataclass(frozen=True)
class PartitionProtocol:
    """Deterministic labeled/unlabeled split of a training index."""

    fraction: Fraction | None
    count: int
    seed: int
    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise ValueError(f"labeled and unlabeled ids overlap: {sorted(overlap)[:3]}")
        if len(self.labeled_ids) != self.count:
            raise ValueError(f"{len(self.labeled_ids)} labeled ids but count {self.count}")

    @property
    def fraction_token(self) -> str:
        """Filename-safe tag: '1_8' for fraction 1/8, 'n25' for an explicit count."""
        if self.fraction is None:
            return f"n{self.count}"
        return f"{self.fraction.numerator}_{self.fraction.denominator}"


def partition(
    ids: Sequence[str],
    fraction: Fraction | float | str | None = None,
    seed: int = 0,
    count: int | None = None,
) -> PartitionProtocol:
    """Split ids into a labeled fraction and the unlabeled remainder.

    Ids are canonically sorted before the seeded shuffle, so any permutation
    of the input yields the same split. The labeled set is a shuffle prefix:
    for a fixed seed, smaller fractions are nested inside larger ones. The
    labeled count is ceil(fraction * total), matching the public benchmark
    partitions (1/16 of 10582 -> 662).
    """
    pool = sorted(set(ids))
    if not pool:
        raise ValueError("cannot partition an empty id list")
    if len(pool) != len(ids):
        raise ValueError("duplicate ids in training index")
    frac: Fraction | None = None
    if count is not None:
        if fraction is not None:
            raise ValueError("pass either fraction or count, not both")
        n_labeled = int(count)
    else:
        if fraction is None:
            raise ValueError("either fraction or count is required")
        frac = parse_fraction(fraction) if isinstance(fraction, str) else Fraction(fraction)
        if not 0 < frac < 1:
            raise ValueError(f"fraction must be in (0, 1), got {fraction}")
        n_labeled = math.ceil(frac * len(pool))
    if n_labeled < 1:
        raise ValueError(f"partition yields zero labeled samples ({fraction} of {len(pool)})")
    if n_labeled >= len(pool):
        raise ValueError(f"labeled count {n_labeled} leaves no unlabeled samples")
    shuffled = list(pool)
    random.Random(seed).shuffle(shuffled)
    return PartitionProtocol(
        fraction=frac,
        count=n_labeled,
        seed=seed,
        labeled_ids=tuple(sorted(shuffled[:n_labeled])),
        unlabeled_ids=tuple(sorted(shuffled[n_labeled:])),
    )


def write_split_files(protocol: PartitionProtocol, splits_dir: Path) -> tuple[Path, Path]:
    """Write labeled_{frac}_{seed}.txt and the matching unlabeled list."""
    splits_dir = Path(splits_dir)
    splits_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{protocol.fraction_token}_{protocol.seed}"
    labeled = splits_dir / f"labeled_{tag}.txt"
    unlabeled = splits_dir / f"unlabeled_{tag}.txt"
    labeled.write_text("\n".join(protocol.labeled_ids) + "\n")
    unlabeled.write_text("\n".join(protocol.unlabeled_ids) + "\n")
    return labeled, unlabeled


def read_id_list(path: Path) -> list[str]:
    lines = [line.strip() for line in Path(path).read_text().splitlines()]
    return [line for line in lines if line]


class Sample(NamedTuple):
    id: str
    image: torch.Tensor  # 3 x H x W, normalized float32
    mask: torch.Tensor  # H x W, int64 class ids (IGNORE allowed)


def normalize_pixels(rgb_uint8: np.ndarray) -> torch.Tensor:
    """uint8 H x W x 3 -> normalized float32 3 x H x W."""
    scaled = rgb_uint8.astype(np.float32) / 255.0
    return torch.from_numpy((scaled - PIXEL_MEAN) / PIXEL_STD).permute(2, 0, 1).contiguous()


def collate(samples: Sequence[Sample]) -> tuple[ImageBatch, LabelMask]:
    images = torch.stack([s.image for s in samples])
    masks = torch.stack([s.mask for s in samples])
    return ImageBatch(images, tuple(s.id for s in samples)), LabelMask(masks)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Procedural scene parameters. Class 0 is background; classes 1..N-1 map
    to shape kinds, each rendered in a jittered class color.

    The default jitter/noise make class colors overlap enough that small
    labeled subsets underdetermine the task, which is what gives unlabeled
    distillation room to help."""

    n_classes: int = 4
    image_size: tuple[int, int] = (64, 64)
    shapes_per_image: tuple[int, int] = (2, 5)
    seed: int = 0
    color_jitter: float = 0.35
    pixel_noise: float = 0.08

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least background plus one shape class")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad shapes_per_image range {self.shapes_per_image}")


_SHAPE_KINDS = ("circle", "rectangle", "triangle", "diamond", "ring")

# Evenly spread base colors (RGB in [0, 1]); reused cyclically for many classes.
_BASE_COLORS = np.array(
    [
        (0.85, 0.25, 0.25),
        (0.25, 0.60, 0.85),
        (0.35, 0.75, 0.30),
        (0.85, 0.75, 0.25),
        (0.65, 0.35, 0.80),
    ]
)


def shape_kind_for_class(class_id: int) -> str:
    return _SHAPE_KINDS[(class_id - 1) % len(_SHAPE_KINDS)]


def _shape_pixels(kind: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "rectangle":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= r)
    if kind == "triangle":
        inside_rows = (dy >= -r) & (dy <= r)
        return inside_rows & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        dist2 = dy * dy + dx * dx
        return (dist2 <= r * r) & (dist2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape kind {kind!r}")


def _textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-frequency color noise upsampled to full resolution."""
    coarse = rng.uniform(0.25, 0.75, size=(3, 6, 6)).astype(np.float32)
    fine = F.interpolate(
        torch.from_numpy(coarse).unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
    )[0].numpy()
    return np.moveaxis(fine, 0, -1)


class SyntheticDataset:
    """In-memory procedural dataset of (image, exact mask) pairs.

    Generation with the same spec and count is bit-identical; raw uint8
    images are kept so the on-disk export round-trips exactly.
    """

    def __init__(self, spec: SyntheticSceneSpec, n_images: int):
        if n_images < 1:
            raise ValueError("n_images must be >= 1")
        self.spec = spec
        h, w = spec.image_size
        rng = np.random.default_rng(spec.seed)
        images = np.empty((n_images, h, w, 3), dtype=np.uint8)
        masks = np.empty((n_images, h, w), dtype=np.uint8)
        for i in range(n_images):
            images[i], masks[i] = self._render_scene(rng)
        self.images = images
        self.masks = masks
        self.ids = [f"synth{spec.seed:03d}_{i:05d}" for i in range(n_images)]
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    def _render_scene(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        h, w = spec.image_size
        canvas = _textured_background(rng, h, w)
        mask = np.zeros((h, w), dtype=np.uint8)
        lo, hi = spec.shapes_per_image
        for _ in range(int(rng.integers(lo, hi + 1))):
            class_id = int(rng.integers(1, spec.n_classes))
            kind = shape_kind_for_class(class_id)
            r = float(rng.uniform(0.1, 0.22) * min(h, w))
            cy = float(rng.uniform(r, h - r))
            cx = float(rng.uniform(r, w - r))
            inside = _shape_pixels(kind, h, w, cy, cx, r)
            color = _BASE_COLORS[(class_id - 1) % len(_BASE_COLORS)]
            color = color + rng.normal(0.0, spec.color_jitter, size=3)
            canvas[inside] = np.clip(color, 0.0, 1.0)
            mask[inside] = class_id
        canvas = canvas + rng.normal(0.0, spec.pixel_noise, size=canvas.shape)
        image = np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)
        return image, mask

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> Sample:
        return Sample(
            self.ids[index],
            normalize_pixels(self.images[index]),
            torch.from_numpy(self.masks[index].astype(np.int64)),
        )

    def by_id(self, sample_id: str) -> Sample:
        return self[self._index[sample_id]]

    def export_voc_style(self, root: Path, list_name: str = "all") -> Path:
        """Write images/, masks/ and splits/<list_name>.txt under root."""
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        (root / "splits").mkdir(parents=True, exist_ok=True)
        for i, sid in enumerate(self.ids):
            Image.fromarray(self.images[i], mode="RGB").save(root / "images" / f"{sid}.png")
            Image.fromarray(self.masks[i], mode="L").save(root / "masks" / f"{sid}.png")
        list_file = root / "splits" / f"{list_name}.txt"
        list_file.write_text("\n".join(self.ids) + "\n")
        return list_file


def generate_synthetic(spec: SyntheticSceneSpec, n_images: int) -> SyntheticDataset:
    return SyntheticDataset(spec, n_images)


# ---------------------------------------------------------------------------
# VOC-style on-disk datasets
# ---------------------------------------------------------------------------

_IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class VocStyleDataset:
    """Lazily decoded images/*.png|jpg plus masks/*.png named by a list file."""

    def __init__(self, root: Path, list_file: Path):
        self.root = Path(root)
        stems = read_id_list(list_file)
        if not stems:
            raise DataError(f"empty list file {list_file}")
        self.ids = stems
        self._index = {sid: i for i, sid in enumerate(stems)}
        self._image_paths = []
        self._mask_paths = []
        for stem in stems:
            image_path = self._find_image(stem)
            mask_path = self.root / "masks" / f"{stem}.png"
            if image_path is None:
                raise DataError(f"missing image for {stem!r} under {self.root / 'images'}")
            if not mask_path.is_file():
                raise DataError(f"missing mask file {mask_path}")
            self._image_paths.append(image_path)
            self._mask_paths.append(mask_path)

    def _find_image(self, stem: str) -> Path | None:
        for ext in _IMAGE_EXTENSIONS:
            candidate = self.root / "images" / f"{stem}{ext}"
            if candidate.is_file():
                return candidate
        return None

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> Sample:
        rgb = np.asarray(Image.open(self._image_paths[index]).convert("RGB"))
        mask = np.asarray(Image.open(self._mask_paths[index]))
        if mask.ndim != 2:
            raise DataError(f"mask {self._mask_paths[index]} is not single-channel")
        if mask.shape != rgb.shape[:2]:
            raise DataError(
                f"mask/image size mismatch for {self.ids[index]!r}: {mask.shape} vs {rgb.shape[:2]}"
            )
        return Sample(
            self.ids[index],
            normalize_pixels(rgb),
            torch.from_numpy(mask.astype(np.int64)),
        )

    def by_id(self, sample_id: str) -> Sample:
        return self[self._index[sample_id]]


def load_voc_style(root: Path, list_file: Path) -> VocStyleDataset:
    return VocStyleDataset(root, list_file)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def hflip_pair(image: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Horizontal flip applied identically to image and mask."""
    return image.flip(-1), mask.flip(-1)


def random_scaled_crop(
    image: torch.Tensor,
    mask: torch.Tensor,
    size: tuple[int, int],
    rng: random.Random,
    scale_range: tuple[float, float] = (0.75, 1.25),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Rescale by a random factor, then crop (padding if short) to size.

    Image padding is 0 (the normalized mean); mask padding is IGNORE.
    """
    scale = rng.uniform(*scale_range)
    h, w = image.shape[-2:]
    new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
    image = F.interpolate(image.unsqueeze(0), size=(new_h, new_w), mode="bilinear", align_corners=False)[0]
    mask = (
        F.interpolate(mask.unsqueeze(0).unsqueeze(0).float(), size=(new_h, new_w), mode="nearest")
        .long()
        .squeeze(0)
        .squeeze(0)
    )
    out_h, out_w = size
    pad_h, pad_w = max(0, out_h - new_h), max(0, out_w - new_w)
    if pad_h or pad_w:
        image = F.pad(image, (0, pad_w, 0, pad_h), value=0.0)
        mask = F.pad(mask, (0, pad_w, 0, pad_h), value=IGNORE)
        new_h, new_w = max(new_h, out_h), max(new_w, out_w)
    top = rng.randint(0, new_h - out_h)
    left = rng.randint(0, new_w - out_w)
    return (
        image[:, top : top + out_h, left : left + out_w],
        mask[top : top + out_h, left : left + out_w],
    )


@dataclass(frozen=True)
class Augmenter:
    """Weak augmentation: random horizontal flip plus random scaled crop."""

    crop_size: tuple[int, int]
    scale_range: tuple[float, float] = (0.75, 1.25)
    hflip_prob: float = 0.5

    def __call__(
        self, image: torch.Tensor, mask: torch.Tensor, rng: random.Random
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if rng.random() < self.hflip_prob:
            image, mask = hflip_pair(image, mask)
        return random_scaled_crop(image, mask, self.crop_size, rng, self.scale_range)


# ---------------------------------------------------------------------------
# Batch streams
# ---------------------------------------------------------------------------

class PairedBatchSampler:
    """Endless stream of (labeled ids, unlabeled ids) batch pairs.

    Each stream shuffles independently and reshuffles whenever exhausted, so
    the smaller set simply cycles more often. A batch size larger than a set
    falls back to sampling with replacement (warned once).
    """

    def __init__(
        self,
        labeled_ids: Sequence[str],
        unlabeled_ids: Sequence[str],
        batch_size: int,
        seed: int = 0,
    ):
        if not labeled_ids or not unlabeled_ids:
            raise ValueError("both id sets must be nonempty")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.labeled_ids = list(labeled_ids)
        self.unlabeled_ids = list(unlabeled_ids)
        self.batch_size = batch_size
        self.seed = seed
        for name, pool in (("labeled", self.labeled_ids), ("unlabeled", self.unlabeled_ids)):
            if batch_size > len(pool):
                warnings.warn(
                    f"batch_size {batch_size} exceeds {name} set size {len(pool)}; cycling with replacement",
                    stacklevel=2,
                )

    def _stream(self, pool: list[str], rng: random.Random) -> Iterator[str]:
        if self.batch_size > len(pool):
            while True:
                yield rng.choice(pool)
        while True:
            order = list(pool)
            rng.shuffle(order)
            yield from order

    def __iter__(self) -> Iterator[tuple[list[str], list[str]]]:
        labeled = self._stream(self.labeled_ids, random.Random(f"{self.seed}:labeled"))
        unlabeled = self._stream(self.unlabeled_ids, random.Random(f"{self.seed}:unlabeled"))
        while True:
            yield (
                [next(labeled) for _ in range(self.batch_size)],
                [next(unlabeled) for _ in range(self.batch_size)],
            )


def resolve_num_workers() -> int:
    """Worker count for item decoding, from the MGD_NUM_WORKERS env var."""
    raw = os.environ.get("MGD_NUM_WORKERS", "").strip()
    if not raw:
        return 0
    workers = int(raw)
    if workers < 0:
        raise ValueError(f"MGD_NUM_WORKERS must be >= 0, got {raw!r}")
    return workers


class BatchLoader:
    """Assemble id lists into batches, optionally decoding items on threads.

    Workers only parallelize item fetch; results keep id order and
    augmentation runs sequentially on the caller's rng, so the delivered
    batches are identical for any worker count.
    """

    def __init__(self, dataset, augmenter: Augmenter | None = None, num_workers: int | None = None):
        self.dataset = dataset
        self.augmenter = augmenter
        workers = resolve_num_workers() if num_workers is None else num_workers
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None

    def load(self, ids: Sequence[str], rng: random.Random | None = None) -> tuple[ImageBatch, LabelMask]:
        if self._pool is not None:
            samples = list(self._pool.map(self.dataset.by_id, ids))
        else:
            samples = [self.dataset.by_id(sid) for sid in ids]
        if self.augmenter is not None:
            if rng is None:
                raise ValueError("augmentation requires an rng")
            samples = [
                Sample(s.id, *self.augmenter(s.image, s.mask, rng)) for s in samples
            ]
        return collate(samples)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
