"""Source/target mask policies, attention-driven refinement, and resampling.

Masks live at full image resolution as float arrays in [0, 1] and are
binarized at 0.5 wherever a hard decision is needed. Per-task policies decide
the per-step target mask; geometric helpers (disk dilation, convex hull,
area-average resampling) are shared by the policies and the pipeline.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DegenerateMapError, DimensionError, MaskPolicyError

REFERENCE_GRID = (64, 64)


@dataclass(frozen=True)
class SpatialMask:
    """Full-resolution mask with values in [0, 1]; hard view thresholds at 0.5."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise DimensionError("mask values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape

    def binary(self) -> np.ndarray:
        return self.values >= 0.5

    def fraction_on(self) -> float:
        return float(self.binary().mean())

    @classmethod
    def from_binary(cls, bits) -> "SpatialMask":
        return cls(np.asarray(bits, dtype=bool).astype(np.float64))

    @classmethod
    def zeros(cls, resolution: tuple[int, int]) -> "SpatialMask":
        return cls(np.zeros(resolution))

    @classmethod
    def ones(cls, resolution: tuple[int, int]) -> "SpatialMask":
        return cls(np.ones(resolution))

    @classmethod
    def from_png(cls, path) -> "SpatialMask":
        arr = np.asarray(Image.open(path).convert("L"))
        return cls.from_binary(arr != 0)

    def to_png(self, path) -> None:
        arr = (self.binary().astype(np.uint8)) * 255
        Image.fromarray(arr, mode="L").save(path, format="PNG")


class TaskKind(enum.Enum):
    REPLACE_OBJECT = "replace"
    CHANGE_POSE_VIEW = "pose"
    ALTER_BACKGROUND = "background"
    REMOVE_OBJECT = "remove"
    MODIFY_REGION = "region"

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise MaskPolicyError(f"unknown task {name!r}; choose one of: {choices}") from None


class Refinement(enum.Enum):
    NONE = "none"
    FROM_CROSS_ATTENTION = "cross-attention"
    HULL_EXTENSION = "hull"


class BinarizeRule(enum.Enum):
    MEAN_PLUS_STD = "mean+std"
    FIXED_THRESHOLD = "fixed"


@dataclass(frozen=True)
class MaskPolicyConfig:
    hull_dilation_px: int = 8
    expand_px: int = 0
    refinement: Refinement = Refinement.HULL_EXTENSION
    binarize_rule: BinarizeRule = BinarizeRule.MEAN_PLUS_STD
    fixed_threshold: float = 0.5

    def __post_init__(self):
        if self.hull_dilation_px < 0 or self.expand_px < 0:
            raise MaskPolicyError("dilation radii must be >= 0")
        if self.binarize_rule is BinarizeRule.FIXED_THRESHOLD and not (0.0 < self.fixed_threshold < 1.0):
            raise MaskPolicyError("fixed threshold must lie in (0, 1)")


def dilate(mask: SpatialMask, radius_px: int) -> SpatialMask:
    """Morphological dilation of the hard mask by a disk; radius 0 is identity."""
    if radius_px < 0:
        raise MaskPolicyError("dilation radius must be >= 0")
    if radius_px == 0:
        return mask
    bits = mask.binary()
    if not bits.any():
        return SpatialMask.from_binary(bits)
    dist = ndimage.distance_transform_edt(~bits)
    return SpatialMask.from_binary(dist <= radius_px)


def convex_hull(mask: SpatialMask) -> SpatialMask:
    """Pixels whose centers lie in the convex hull of the on-pixel centers.

    Integer cross products throughout, so boundary pixels are decided exactly.
    """
    bits = mask.binary()
    points = np.argwhere(bits)
    if len(points) == 0:
        return SpatialMask.from_binary(bits)
    hull = _monotone_chain(points.astype(np.int64))
    rr, cc = np.meshgrid(
        np.arange(bits.shape[0], dtype=np.int64),
        np.arange(bits.shape[1], dtype=np.int64),
        indexing="ij",
    )
    if len(hull) == 1:
        inside = (rr == hull[0][0]) & (cc == hull[0][1])
        return SpatialMask.from_binary(inside)
    if len(hull) == 2:
        inside = _on_segment(rr, cc, hull[0], hull[1])
        return SpatialMask.from_binary(inside)
    inside = np.ones_like(bits)
    for a, b in zip(hull, hull[1:] + hull[:1]):
        cross = (b[0] - a[0]) * (cc - a[1]) - (b[1] - a[1]) * (rr - a[0])
        inside &= cross >= 0
    return SpatialMask.from_binary(inside)


def _monotone_chain(points: np.ndarray) -> list[tuple[int, int]]:
    # Andrew's monotone chain; returns CCW hull in (row, col) coordinates
    # where "CCW" is with respect to the (row, col) right-handed convention
    # used by the cross products in convex_hull.
    pts = sorted({(int(p[0]), int(p[1])) for p in points})
    if len(pts) <= 2:
        return pts

    def turn(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple[int, int]] = []
    for p in pts:
        while len(lower) >= 2 and turn(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and turn(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _on_segment(rr, cc, a, b) -> np.ndarray:
    cross = (b[0] - a[0]) * (cc - a[1]) - (b[1] - a[1]) * (rr - a[0])
    dot = (rr - a[0]) * (b[0] - a[0]) + (cc - a[1]) * (b[1] - a[1])
    length2 = (b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2
    return (cross == 0) & (dot >= 0) & (dot <= length2)


def nearest_resample(arr: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample of a 2-D array onto ``out_shape``."""
    arr = np.asarray(arr)
    h, w = arr.shape
    out_h, out_w = out_shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return arr[np.ix_(rows, cols)]


def area_average_resample(arr: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Exact area-weighted mean over each output cell.

    Treats every input pixel as constant over its unit square, so the cell
    mean is an integral of a piecewise-constant field: evaluated exactly via
    a padded cumulative sum interpolated at fractional cell boundaries.
    """
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    out_h, out_w = out_shape
    cum = np.zeros((h + 1, w + 1))
    cum[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)

    def integral_at(ys, xs):
        yi = np.clip(np.floor(ys).astype(int), 0, h - 1)
        xi = np.clip(np.floor(xs).astype(int), 0, w - 1)
        dy = (ys - yi)[:, None]
        dx = (xs - xi)[None, :]
        p00 = cum[np.ix_(yi, xi)]
        p10 = cum[np.ix_(yi + 1, xi)]
        p01 = cum[np.ix_(yi, xi + 1)]
        p11 = cum[np.ix_(yi + 1, xi + 1)]
        return (
            p00
            + dy * (p10 - p00)
            + dx * (p01 - p00)
            + dy * dx * (p11 - p10 - p01 + p00)
        )

    y_edges = np.linspace(0.0, float(h), out_h + 1)
    x_edges = np.linspace(0.0, float(w), out_w + 1)
    s = integral_at(y_edges, x_edges)
    block = s[1:, 1:] - s[:-1, 1:] - s[1:, :-1] + s[:-1, :-1]
    cell_area = (h / out_h) * (w / out_w)
    return block / cell_area


def resample_mask(mask: SpatialMask, grid: tuple[int, int]) -> np.ndarray:
    """Per-site key mask: area-average to the token grid, binarize, flatten row-major."""
    h, w = grid
    if h <= 0 or w <= 0:
        raise DimensionError("token grid must be positive")
    coverage = area_average_resample(mask.values, (h, w))
    return (coverage >= 0.5).astype(np.int8).reshape(-1)


def refine_mask_from_attention(aggregate, cfg: MaskPolicyConfig, resolution: tuple[int, int]) -> SpatialMask:
    """Binarized mean attention map, upsampled from the reference grid.

    The aggregate's per-token maps are summed, averaged over samples,
    min-max normalized, then thresholded by the configured rule.
    """
    if aggregate is None or aggregate.sample_count < 1:
        raise DegenerateMapError("aggregate holds no recordings")
    mean_map = aggregate.maps.sum(axis=0) / aggregate.sample_count
    lo, hi = float(mean_map.min()), float(mean_map.max())
    if hi - lo <= 0.0:
        raise DegenerateMapError("aggregated map is constant; nothing to threshold")
    norm = (mean_map - lo) / (hi - lo)
    if cfg.binarize_rule is BinarizeRule.MEAN_PLUS_STD:
        threshold = float(norm.mean() + 0.5 * norm.std())
    else:
        threshold = cfg.fixed_threshold
    bits = norm >= threshold
    return SpatialMask.from_binary(nearest_resample(bits, resolution))


def target_mask_policy(
    task: TaskKind,
    source_mask: SpatialMask,
    aggregate,
    cfg: MaskPolicyConfig,
    step_index: int,
    mask_switch_step: int,
) -> SpatialMask:
    """Per-step target mask for the given editing task.

    Removal zeroes the mask so composition keeps background content only;
    background alteration and region edits reuse the source mask; replacement
    and pose changes follow the source mask for the warm-up steps, then switch
    to the refined or hull-extended mask.
    """
    if task is TaskKind.REMOVE_OBJECT:
        return SpatialMask.zeros(source_mask.resolution)
    if task is TaskKind.ALTER_BACKGROUND:
        return source_mask
    if task is TaskKind.MODIFY_REGION:
        return dilate(source_mask, cfg.expand_px)
    # replace / pose-view: warm up under the source mask, then track the edit
    if step_index < mask_switch_step or cfg.refinement is Refinement.NONE:
        return source_mask
    if cfg.refinement is Refinement.FROM_CROSS_ATTENTION:
        if aggregate is None:
            raise MaskPolicyError("cross-attention refinement requires an aggregate")
        try:
            return refine_mask_from_attention(aggregate, cfg, source_mask.resolution)
        except DegenerateMapError:
            pass  # fall back to the hull extension below
    return dilate(convex_hull(source_mask), cfg.hull_dilation_px)
