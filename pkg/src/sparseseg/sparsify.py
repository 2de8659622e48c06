"""Sparse-annotation simulators: points, grid, contours, skeletons, regions.

All simulators are pure given (dense mask, parameters, rng) and only ever
copy labels from the dense mask, so every labeled pixel agrees with the
ground truth. Masks that end up with a class entirely unlabeled are
flagged degenerate rather than silently passed on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from skimage import data as skdata
from skimage import measure, morphology, segmentation

from .data import BACKGROUND, FOREGROUND, UNKNOWN, SparseMask

STYLES = ("points", "grid", "contours", "skeletons", "regions")


class DegenerateMaskError(ValueError):
    """A class required by the sparsifier is entirely absent from the mask."""


@dataclass
class SparsifyConfig:
    style: str
    n: int = 20  # points per class (points)
    s: int = 8  # grid spacing in pixels (grid)
    d: float = 1.0  # density fraction (contours, skeletons, regions)
    erosion_radius: int = 2  # contours
    dilation_radius: int = 2  # contours
    thickness: int = 0  # skeletons
    slic_segments: int = 100  # regions
    slic_compactness: float = 10.0  # regions
    seed: int = 0

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"unknown sparsify style {self.style!r}; expected one of {STYLES}")
        if not 0.0 <= self.d <= 1.0:
            raise ValueError("density d must lie in [0, 1]")
        if self.n < 1:
            raise ValueError("point count n must be >= 1")
        if self.s < 2:
            raise ValueError("grid spacing s must be >= 2")


def _binary_split(dense: np.ndarray):
    values = set(np.unique(dense))
    if not values <= {BACKGROUND, FOREGROUND}:
        raise ValueError(f"expected a binary mask with values {{1, 2}}, got {sorted(values)}")
    return dense == FOREGROUND, dense == BACKGROUND


def _empty_like(dense: np.ndarray) -> np.ndarray:
    return np.full(dense.shape, UNKNOWN, dtype=np.int64)


def _finish(labels: np.ndarray, meta: dict | None = None) -> SparseMask:
    degenerate = not ((labels == FOREGROUND).any() and (labels == BACKGROUND).any())
    return SparseMask(labels=labels, degenerate=degenerate, meta=meta or {})


def sparsify_points(dense: np.ndarray, n: int, rng: np.random.Generator) -> SparseMask:
    """Label n random foreground and n random background pixels.

    n is clamped to each class's pixel availability.
    """
    fg, bg = _binary_split(dense)
    if not fg.any() or not bg.any():
        raise DegenerateMaskError("points annotation needs both classes present")
    labels = _empty_like(dense)
    for class_mask, class_id in ((fg, FOREGROUND), (bg, BACKGROUND)):
        coords = np.flatnonzero(class_mask)
        take = min(n, coords.size)
        picked = rng.choice(coords, size=take, replace=False)
        labels.flat[picked] = class_id
    return _finish(labels, {"n": n})


def sparsify_grid(dense: np.ndarray, s: int, rng: np.random.Generator) -> SparseMask:
    """Copy true labels at a regular grid with spacing s and a random origin."""
    h, w = dense.shape
    if s >= min(h, w):
        raise ValueError(f"grid spacing {s} must be smaller than the image side {min(h, w)}")
    p0_y, p0_x = int(rng.integers(0, s)), int(rng.integers(0, s))
    labels = _empty_like(dense)
    rows = np.arange(p0_y, h, s)
    cols = np.arange(p0_x, w, s)
    grid = np.ix_(rows, cols)
    labels[grid] = dense[grid]
    return _finish(labels, {"s": s, "origin": (p0_y, p0_x)})


def _contour_pixels(binary: np.ndarray) -> np.ndarray:
    """Marching-squares contours of a binary mask, rounded to pixel coords."""
    pts = []
    for contour in measure.find_contours(binary.astype(float), 0.5):
        pts.append(np.rint(contour).astype(int))
    if not pts:
        return np.empty((0, 2), dtype=int)
    coords = np.unique(np.concatenate(pts), axis=0)
    h, w = binary.shape
    keep = (coords[:, 0] >= 0) & (coords[:, 0] < h) & (coords[:, 1] >= 0) & (coords[:, 1] < w)
    return coords[keep]


def _subsample(coords: np.ndarray, d: float, rng: np.random.Generator) -> np.ndarray:
    take = int(round(d * len(coords)))
    if take == 0:
        return coords[:0]
    idx = rng.choice(len(coords), size=take, replace=False)
    return coords[np.sort(idx)]


def sparsify_contours(
    dense: np.ndarray,
    d: float,
    erosion_radius: int = 2,
    dilation_radius: int = 2,
    rng: np.random.Generator | None = None,
) -> SparseMask:
    """Inner contour of the eroded foreground (labeled fg) plus outer contour
    of the dilated foreground (labeled bg), keeping a fraction d of each."""
    rng = rng if rng is not None else np.random.default_rng(0)
    fg, _ = _binary_split(dense)
    labels = _empty_like(dense)

    eroded = morphology.binary_erosion(fg, morphology.disk(erosion_radius))
    if eroded.any():
        inner = _contour_pixels(eroded)
        # contour rounding can land off the object; keep only true fg pixels
        inner = inner[fg[inner[:, 0], inner[:, 1]]]
        for y, x in _subsample(inner, d, rng):
            labels[y, x] = FOREGROUND
    else:
        warnings.warn("erosion emptied the foreground; inner contour omitted")

    dilated = morphology.binary_dilation(fg, morphology.disk(dilation_radius))
    outer = _contour_pixels(dilated)
    outer = outer[~fg[outer[:, 0], outer[:, 1]]]
    for y, x in _subsample(outer, d, rng):
        labels[y, x] = BACKGROUND
    return _finish(labels, {"d": d})


def _blob_field(shape, d: float, rng: np.random.Generator) -> np.ndarray:
    if d >= 1.0:
        return np.ones(shape, dtype=bool)
    if d <= 0.0:
        return np.zeros(shape, dtype=bool)
    side = max(shape)
    blobs = skdata.binary_blobs(length=side, volume_fraction=d, rng=rng)
    return blobs[: shape[0], : shape[1]]


def sparsify_skeletons(
    dense: np.ndarray,
    d: float,
    thickness: int = 0,
    rng: np.random.Generator | None = None,
) -> SparseMask:
    """Morphological skeletons of foreground and background, optionally
    thickened, then masked by a random blob field covering fraction d."""
    rng = rng if rng is not None else np.random.default_rng(0)
    fg, bg = _binary_split(dense)
    if not fg.any() or not bg.any():
        raise DegenerateMaskError("skeleton annotation needs both classes present")

    fg_skel = morphology.skeletonize(fg)
    bg_skel = morphology.skeletonize(bg)
    if thickness > 0:
        selem = morphology.disk(thickness)
        fg_skel = morphology.binary_dilation(fg_skel, selem)
        bg_skel = morphology.binary_dilation(bg_skel, selem)
    # thickening may cross the class boundary; clip to the true class
    fg_skel &= fg
    bg_skel &= bg

    blobs = _blob_field(dense.shape, d, rng)
    labels = _empty_like(dense)
    labels[fg_skel & blobs] = FOREGROUND
    labels[bg_skel & blobs] = BACKGROUND
    return _finish(labels, {"d": d, "thickness": thickness})


def compute_superpixels(
    image: np.ndarray, n_segments: int = 100, compactness: float = 10.0
) -> np.ndarray:
    """SLIC superpixel label map for an H x W x B image."""
    image = np.atleast_3d(image)
    return segmentation.slic(
        image.astype(np.float64),
        n_segments=n_segments,
        compactness=compactness,
        channel_axis=-1,
        start_label=0,
        enforce_connectivity=True,
    )


def sparsify_regions(
    dense: np.ndarray,
    d: float,
    rng: np.random.Generator | None = None,
    image: np.ndarray | None = None,
    segments: np.ndarray | None = None,
    n_segments: int = 100,
    compactness: float = 10.0,
) -> SparseMask:
    """Fully label a fraction d of the pure-foreground and pure-background
    superpixels; impure superpixels stay unknown."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if segments is None:
        if image is None:
            raise ValueError("regions sparsifier needs either an image or a segment map")
        segments = compute_superpixels(image, n_segments, compactness)
    if segments.shape != dense.shape:
        raise ValueError("segment map shape must match the mask")
    _binary_split(dense)

    pure = {FOREGROUND: [], BACKGROUND: []}
    for seg_id in np.unique(segments):
        values = np.unique(dense[segments == seg_id])
        if values.size == 1:
            pure[int(values[0])].append(seg_id)

    labels = _empty_like(dense)
    selected = 0
    for class_id, seg_ids in pure.items():
        take = int(round(d * len(seg_ids)))
        if not seg_ids or take == 0:
            continue
        picked = rng.choice(len(seg_ids), size=take, replace=False)
        selected += take
        for i in picked:
            labels[segments == seg_ids[i]] = class_id
    return _finish(labels, {"d": d, "regions_selected": selected})


def apply_config(
    dense: np.ndarray,
    config: SparsifyConfig,
    rng: np.random.Generator | None = None,
    image: np.ndarray | None = None,
    segments: np.ndarray | None = None,
) -> SparseMask:
    """Dispatch to the simulator named by config.style."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if config.style == "points":
        return sparsify_points(dense, config.n, rng)
    if config.style == "grid":
        return sparsify_grid(dense, config.s, rng)
    if config.style == "contours":
        return sparsify_contours(dense, config.d, config.erosion_radius, config.dilation_radius, rng)
    if config.style == "skeletons":
        return sparsify_skeletons(dense, config.d, config.thickness, rng)
    return sparsify_regions(
        dense,
        config.d,
        rng,
        image=image,
        segments=segments,
        n_segments=config.slic_segments,
        compactness=config.slic_compactness,
    )


def count_user_inputs(masks: list[SparseMask], style: str, n: int | None = None) -> int:
    """Annotator-input count for a k-shot support set.

    points: 2n per image; grid: positive labeled grid pixels; regions:
    number of selected regions of either class. Contours and skeletons
    do not map to a countable input.
    """
    if style == "points":
        if n is None:
            raise ValueError("points counting needs the per-class point count n")
        return 2 * n * len(masks)
    if style == "grid":
        return sum(int((m.labels == FOREGROUND).sum()) for m in masks)
    if style == "regions":
        return sum(int(m.meta.get("regions_selected", 0)) for m in masks)
    raise ValueError(f"user inputs are not countable for style {style!r}")
