"""BEV pseudo-image encoding and multi-agent attention fusion.

Point clouds are summarized into a bird's-eye-view grid of pillar
descriptors, ground-truth boxes become binary foreground masks, and the
per-agent maps are fused by per-cell scaled-dot-product attention over
agents at multiple scales.  A seeded random linear projection stands in
for a learned detection head: the downstream loss kernels only need
well-defined deterministic tensors, not trained accuracy.

Grid conventions: columns index x, rows index y, map data is laid out
H x W x C.  A point belongs to the grid iff x_min <= x < x_max and
y_min <= y < y_max (half-open upper edges).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator

from .rng import derive_rng
from .scene import BBox3D, PointCloud
from .validation import check_array, check_positive

__all__ = [
    "GridSpec",
    "FeatureMap",
    "ForegroundMask",
    "PILLAR_CHANNELS",
    "pillarize",
    "foreground_mask",
    "downsample",
    "upsample",
    "attention_weights",
    "fuse_single",
    "fuse_attention",
    "detect_head",
    "DetectionHead",
    "PillarEncoder",
]

# Pillar descriptor layout, one vector per occupied cell.
PILLAR_CHANNELS = (
    "log1p_count",
    "mean_x_offset",
    "mean_y_offset",
    "mean_z",
    "max_z",
    "mean_reflectance",
    "max_reflectance",
    "mean_semantic",
)

_RATIO_TOL = 1e-9


def _integral_bins(extent: float, voxel: float, name: str) -> int:
    ratio = extent / voxel
    bins = int(round(ratio))
    if bins < 1 or abs(ratio - bins) > _RATIO_TOL:
        raise ValueError(
            f"{name} extent {extent} must be a positive integer multiple of "
            f"voxel_size {voxel} (ratio {ratio})"
        )
    return bins


@dataclass(frozen=True)
class GridSpec:
    """BEV grid geometry: x/y ranges in meters plus square cell size."""

    x_range: Tuple[float, float] = (-40.0, 40.0)
    y_range: Tuple[float, float] = (-40.0, 40.0)
    voxel_size: float = 0.4

    def __post_init__(self):
        check_positive(self.voxel_size, "voxel_size")
        x_range = (float(self.x_range[0]), float(self.x_range[1]))
        y_range = (float(self.y_range[0]), float(self.y_range[1]))
        if not x_range[1] > x_range[0] or not y_range[1] > y_range[0]:
            raise ValueError("range max must exceed min")
        object.__setattr__(self, "x_range", x_range)
        object.__setattr__(self, "y_range", y_range)
        # Triggers the integral-multiple check at construction time.
        _ = self.shape

    @property
    def width(self) -> int:
        return _integral_bins(self.x_range[1] - self.x_range[0], self.voxel_size, "x")

    @property
    def height(self) -> int:
        return _integral_bins(self.y_range[1] - self.y_range[0], self.voxel_size, "y")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) array of cell center (x, y) coordinates."""
        cols = self.x_range[0] + (np.arange(self.width) + 0.5) * self.voxel_size
        rows = self.y_range[0] + (np.arange(self.height) + 0.5) * self.voxel_size
        cx, cy = np.meshgrid(cols, rows)
        return np.stack([cx, cy], axis=-1)

    def cell_center(self, row: int, col: int) -> Tuple[float, float]:
        return (
            self.x_range[0] + (col + 0.5) * self.voxel_size,
            self.y_range[0] + (row + 0.5) * self.voxel_size,
        )

    def scaled(self, factor: int) -> "GridSpec":
        """Same extents with the voxel size multiplied by ``factor``."""
        return GridSpec(self.x_range, self.y_range, self.voxel_size * factor)


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x C map tied to a grid; all values finite."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = check_array(self.data, "data", shape=(None, None, None))
        if data.shape[:2] != self.grid.shape:
            raise ValueError(
                f"data shape {data.shape[:2]} does not match grid {self.grid.shape}"
            )
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @staticmethod
    def zeros(grid: GridSpec, channels: int) -> "FeatureMap":
        return FeatureMap(grid, np.zeros((*grid.shape, channels)))


@dataclass(frozen=True)
class ForegroundMask:
    """Binary H x W cell mask tied to a grid."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.grid.shape:
            raise ValueError(
                f"mask shape {data.shape} does not match grid {self.grid.shape}"
            )
        if not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        data = data.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


def pillarize(cloud: PointCloud, grid: GridSpec) -> FeatureMap:
    """Summarize a cloud into an 8-channel BEV pillar map.

    Channels per occupied cell (see ``PILLAR_CHANNELS``): log1p point
    count, mean x/y offset from the cell center, mean and max z, mean and
    max reflectance, mean semantic label (0 when unpainted).  Empty cells
    are all-zero.  Points outside the grid are dropped.

    The reduction runs over a canonically sorted copy of the points, so
    the result is bit-identical under any permutation of the input.
    """
    height, width = grid.shape
    data = np.zeros((height, width, len(PILLAR_CHANNELS)))
    if len(cloud) == 0:
        return FeatureMap(grid, data)
    voxel = grid.voxel_size
    col = np.floor((cloud.xyz[:, 0] - grid.x_range[0]) / voxel).astype(np.int64)
    row = np.floor((cloud.xyz[:, 1] - grid.y_range[0]) / voxel).astype(np.int64)
    inside = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    if not inside.any():
        return FeatureMap(grid, data)
    xyz = cloud.xyz[inside]
    refl = cloud.reflectance[inside]
    sem = (
        cloud.semantic[inside].astype(np.float64)
        if cloud.semantic is not None
        else np.zeros(len(xyz))
    )
    flat = row[inside] * width + col[inside]
    order = np.lexsort((sem, refl, xyz[:, 2], xyz[:, 1], xyz[:, 0], flat))
    flat = flat[order]
    values = np.column_stack([xyz[order], refl[order], sem[order]])
    starts = np.flatnonzero(np.r_[True, np.diff(flat) > 0])
    cells = flat[starts]
    counts = np.diff(np.r_[starts, flat.size]).astype(np.float64)
    sums = np.add.reduceat(values, starts, axis=0)
    maxes = np.maximum.reduceat(values, starts, axis=0)
    means = sums / counts[:, None]
    rows, cols = np.divmod(cells, width)
    center_x = grid.x_range[0] + (cols + 0.5) * voxel
    center_y = grid.y_range[0] + (rows + 0.5) * voxel
    data[rows, cols, 0] = np.log1p(counts)
    data[rows, cols, 1] = means[:, 0] - center_x
    data[rows, cols, 2] = means[:, 1] - center_y
    data[rows, cols, 3] = means[:, 2]
    data[rows, cols, 4] = maxes[:, 2]
    data[rows, cols, 5] = means[:, 3]
    data[rows, cols, 6] = maxes[:, 3]
    data[rows, cols, 7] = means[:, 4]
    return FeatureMap(grid, data)


def foreground_mask(boxes: Sequence[BBox3D], grid: GridSpec) -> ForegroundMask:
    """Mark cells whose center lies inside any box's BEV footprint.

    Footprint containment uses closed boundaries, matching the point
    containment convention.
    """
    centers = grid.cell_centers()
    mask = np.zeros(grid.shape, dtype=bool)
    for box in boxes:
        dx = centers[..., 0] - box.center[0]
        dy = centers[..., 1] - box.center[1]
        c = math.cos(box.yaw)
        s = math.sin(box.yaw)
        local_x = c * dx + s * dy
        local_y = -s * dx + c * dy
        half_w, half_l = box.size[0] / 2.0, box.size[1] / 2.0
        mask |= (np.abs(local_x) <= half_w) & (np.abs(local_y) <= half_l)
    return ForegroundMask(grid, mask.astype(np.uint8))


def downsample(f: FeatureMap) -> FeatureMap:
    """Halve resolution by 2x2 average pooling; H and W must be even."""
    height, width = f.grid.shape
    if height % 2 or width % 2:
        raise ValueError(f"grid shape {f.grid.shape} must be even to downsample")
    pooled = f.data.reshape(height // 2, 2, width // 2, 2, f.channels).mean(axis=(1, 3))
    return FeatureMap(f.grid.scaled(2), pooled)


def upsample(f: FeatureMap, factor: int) -> FeatureMap:
    """Scale resolution up by nearest-neighbor repetition."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return f
    data = np.repeat(np.repeat(f.data, factor, axis=0), factor, axis=1)
    voxel = f.grid.voxel_size / factor
    return FeatureMap(GridSpec(f.grid.x_range, f.grid.y_range, voxel), data)


def _check_aligned(maps: Sequence[FeatureMap]) -> None:
    first = maps[0]
    for m in maps[1:]:
        if m.grid != first.grid or m.channels != first.channels:
            raise ValueError("all feature maps must share grid and channel count")


def attention_weights(ego: FeatureMap, maps: Sequence[FeatureMap]) -> np.ndarray:
    """Per-cell agent attention weights, shape (n_agents, H, W).

    Weight of agent j at cell (h, w) is the softmax over agents of
    ``<ego[h,w,:], maps[j][h,w,:]> / sqrt(C)``.  Rows are nonnegative and
    sum to 1 over agents at every cell.
    """
    if len(maps) == 0:
        raise ValueError("need at least one feature map")
    _check_aligned([ego, *maps])
    stack = np.stack([m.data for m in maps])
    logits = np.einsum("hwc,jhwc->jhw", ego.data, stack) / math.sqrt(ego.channels)
    return softmax(logits, axis=0)


def fuse_single(ego: FeatureMap, others: Sequence[FeatureMap]) -> FeatureMap:
    """One-scale attention fusion at the input resolution.

    The ego map always participates: weights run over ego + others, and
    the fused cell is the weight-convex combination of agent features.
    """
    maps = [ego, *others]
    weights = attention_weights(ego, maps)
    stack = np.stack([m.data for m in maps])
    fused = np.einsum("jhw,jhwc->hwc", weights, stack)
    return FeatureMap(ego.grid, fused)


def fuse_attention(
    ego: FeatureMap, others: Sequence[FeatureMap], scales: int = 3
) -> FeatureMap:
    """Multi-scale attention fusion.

    Scale 1 fuses at full resolution; each further scale halves the maps
    by average pooling, fuses, and upsamples back.  The per-scale outputs
    are concatenated along channels, giving ``scales * C`` channels.
    H and W must be divisible by ``2**(scales - 1)``.
    """
    if scales < 1:
        raise ValueError(f"scales must be >= 1, got {scales}")
    _check_aligned([ego, *others])
    level_ego, level_others = ego, list(others)
    outputs: List[np.ndarray] = []
    for level in range(scales):
        if level > 0:
            level_ego = downsample(level_ego)
            level_others = [downsample(m) for m in level_others]
        fused = fuse_single(level_ego, level_others)
        outputs.append(upsample(fused, 2**level).data)
    return FeatureMap(ego.grid, np.concatenate(outputs, axis=2))


def _head_weights(channels: int, out_dim: int, seed: int, label: str) -> np.ndarray:
    rng = derive_rng(seed, "head", label)
    return rng.normal(0.0, 1.0 / math.sqrt(channels), size=(channels, out_dim))


def detect_head(
    fused: FeatureMap, anchors: int = 2, seed: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """Project a fused map to classification logits and box regressions.

    Returns (H x W x A logits, H x W x A x 7 regressions) from a fixed
    seeded linear projection with zero bias.  A zero input map therefore
    yields zero outputs, and equal seeds yield bit-identical heads.
    """
    if anchors < 1:
        raise ValueError(f"anchors must be >= 1, got {anchors}")
    height, width = fused.grid.shape
    w_cls = _head_weights(fused.channels, anchors, seed, "cls")
    w_reg = _head_weights(fused.channels, anchors * 7, seed, "reg")
    cls_map = fused.data @ w_cls
    reg_map = (fused.data @ w_reg).reshape(height, width, anchors, 7)
    return cls_map, reg_map


class DetectionHead(BaseEstimator):
    """Estimator wrapper around :func:`detect_head`."""

    def __init__(self, anchors: int = 2, seed: int = 0):
        self.anchors = anchors
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def predict(self, fused: FeatureMap) -> Tuple[np.ndarray, np.ndarray]:
        return detect_head(fused, self.anchors, self.seed)


class PillarEncoder(BaseEstimator):
    """Estimator wrapper around :func:`pillarize` with a fixed grid."""

    def __init__(
        self,
        x_range: Tuple[float, float] = (-40.0, 40.0),
        y_range: Tuple[float, float] = (-40.0, 40.0),
        voxel_size: float = 0.4,
    ):
        self.x_range = x_range
        self.y_range = y_range
        self.voxel_size = voxel_size

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.x_range, self.y_range, self.voxel_size)

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: PointCloud) -> FeatureMap:
        return pillarize(X, self.grid)
