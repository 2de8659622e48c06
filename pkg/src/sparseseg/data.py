"""Task and sample data model: dataset loading, fold splits, task sampling.

Masks use the convention 0 = unknown (sparse masks only), 1..K = classes.
Binary tasks are encoded K=2 with 1 = background and 2 = foreground.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

UNKNOWN = 0
BACKGROUND = 1
FOREGROUND = 2

SHOT_WARN_THRESHOLD = 20


class DatasetError(ValueError):
    """Raised when a dataset directory or manifest is malformed."""


@dataclass
class SparseMask:
    """Per-pixel label grid where 0 means unknown and 1..K are classes."""

    labels: np.ndarray
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.min() < 0:
            raise ValueError("sparse mask labels must be >= 0")

    @property
    def labeled_count(self) -> int:
        return int((self.labels != UNKNOWN).sum())

    def class_count(self, k: int) -> int:
        return int((self.labels == k).sum())


@dataclass
class Sample:
    """One image with its dense label mask and an optional sparse mask."""

    image: np.ndarray  # H x W x B, float32
    dense_mask: np.ndarray  # H x W, int, values in 1..K
    id: str
    sparse_mask: SparseMask | None = None

    def __post_init__(self):
        self.image = np.atleast_3d(np.asarray(self.image, dtype=np.float32))
        self.dense_mask = np.asarray(self.dense_mask)
        if self.image.shape[:2] != self.dense_mask.shape:
            raise ValueError(
                f"image {self.image.shape[:2]} and mask {self.dense_mask.shape} "
                f"disagree for sample {self.id!r}"
            )
        if (self.dense_mask == UNKNOWN).any():
            raise ValueError(f"dense mask of {self.id!r} contains unknown (0) pixels")


@dataclass
class SegTask:
    """A named (dataset, class) segmentation task with disjoint support/query."""

    support: list[Sample]
    query: list[Sample]
    target_class: int
    name: str

    def __post_init__(self):
        sup_ids = {s.id for s in self.support}
        qry_ids = {s.id for s in self.query}
        overlap = sup_ids & qry_ids
        if overlap:
            raise ValueError(f"support/query overlap in task {self.name!r}: {sorted(overlap)}")


@dataclass
class FewShotTask(SegTask):
    """k-shot task: sparse support labels; query dense masks are metric-only."""

    k: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.k != len(self.support):
            raise ValueError("k must equal the support size")
        for s in self.support:
            if s.sparse_mask is None:
                raise ValueError(f"few-shot support sample {s.id!r} lacks a sparse mask")
        if self.k > SHOT_WARN_THRESHOLD:
            warnings.warn(f"{self.k}-shot support is unusually large for a few-shot task")


@dataclass
class TaskDistribution:
    """Meta-training tasks; must exclude the held-out (dataset, class) pair."""

    tasks: list[SegTask]
    sampler_seed: int = 0


def _read_manifest(manifest) -> dict:
    if isinstance(manifest, dict):
        cfg = manifest
    else:
        with open(manifest) as fh:
            cfg = yaml.safe_load(fh)
    for key in ("classes", "resize"):
        if key not in cfg:
            raise DatasetError(f"manifest missing required key {key!r}")
    return cfg


def _resize_image(arr: np.ndarray, size: int) -> np.ndarray:
    bands = [
        np.asarray(
            Image.fromarray(arr[..., b].astype(np.float32), mode="F").resize(
                (size, size), Image.BILINEAR
            )
        )
        for b in range(arr.shape[2])
    ]
    return np.stack(bands, axis=-1).astype(np.float32)


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(mask.astype(np.int32), mode="I")
    return np.asarray(img.resize((size, size), Image.NEAREST))


def load_dataset(root, manifest) -> list[Sample]:
    """Load image/mask pairs from ``<root>/images`` and ``<root>/masks``.

    The manifest declares the raw-value -> class-id remapping, the band
    count and the target resize. Masks are resized nearest-neighbor,
    images bilinear.
    """
    root = Path(root)
    cfg = _read_manifest(manifest)
    size = int(cfg["resize"])
    value_to_id = {int(c["value"]): int(c["id"]) for c in cfg["classes"]}
    if any(cid < 1 for cid in value_to_id.values()):
        raise DatasetError("class ids must be >= 1 (0 is reserved for unknown)")

    images_dir, masks_dir = root / "images", root / "masks"
    if not images_dir.is_dir():
        raise DatasetError(f"missing images directory: {images_dir}")
    samples = []
    for img_path in sorted(images_dir.iterdir()):
        mask_path = masks_dir / (img_path.stem + ".png")
        if not mask_path.exists():
            raise DatasetError(f"missing mask for image {img_path.name}")
        image = np.atleast_3d(np.asarray(Image.open(img_path), dtype=np.float32))
        raw_mask = np.asarray(Image.open(mask_path))
        if raw_mask.ndim != 2:
            raise DatasetError(f"mask {mask_path.name} is not single-channel")
        if image.shape[:2] != raw_mask.shape:
            raise DatasetError(f"image/mask size mismatch for {img_path.name}")
        unknown_values = set(np.unique(raw_mask)) - set(value_to_id)
        if unknown_values:
            raise DatasetError(
                f"unknown class id {sorted(unknown_values)} in mask {mask_path.name}"
            )
        remapped = np.zeros_like(raw_mask, dtype=np.int64)
        for value, cid in value_to_id.items():
            remapped[raw_mask == value] = cid
        samples.append(
            Sample(
                image=_resize_image(image, size),
                dense_mask=_resize_mask(remapped, size),
                id=str(img_path.relative_to(root)),
            )
        )
    return samples


def split_folds(samples: list[Sample], n_folds: int = 5, seed: int = 0):
    """Deterministic k-fold partitions: list of (train, validation) pairs."""
    if len(samples) < n_folds:
        raise ValueError(f"need at least {n_folds} samples, got {len(samples)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    chunks = np.array_split(order, n_folds)
    folds = []
    for i, chunk in enumerate(chunks):
        val_idx = set(chunk.tolist())
        train = [samples[j] for j in order if j not in val_idx]
        val = [samples[j] for j in chunk]
        folds.append((train, val))
    return folds


def sample_task_batch(dist: TaskDistribution, batch: int, rng: np.random.Generator):
    """Uniformly sample ``batch`` distinct tasks from the distribution."""
    if batch > len(dist.tasks):
        raise ValueError(f"batch {batch} exceeds task count {len(dist.tasks)}")
    if batch == 0:
        return []
    idx = rng.choice(len(dist.tasks), size=batch, replace=False)
    return [dist.tasks[i] for i in idx]


def make_support(task: SegTask, k: int, rng: np.random.Generator, sparsifier=None) -> FewShotTask:
    """Draw a k-shot sparse support from the task's training partition.

    ``sparsifier`` maps a Sample to a SparseMask; if omitted every chosen
    sample must already carry one. The query is the full validation
    partition, untouched.
    """
    if k > len(task.support):
        raise ValueError(f"k={k} exceeds training partition size {len(task.support)}")
    idx = rng.choice(len(task.support), size=k, replace=False)
    chosen = []
    for i in idx:
        s = task.support[i]
        if sparsifier is not None:
            s = dataclasses.replace(s, sparse_mask=sparsifier(s))
        elif s.sparse_mask is None:
            raise ValueError(f"sample {s.id!r} has no sparse mask and no sparsifier given")
        chosen.append(s)
    return FewShotTask(
        support=chosen,
        query=list(task.query),
        target_class=task.target_class,
        name=task.name,
        k=k,
    )
