"""Feature-to-point-cloud reconstruction: targets, decoding, losses.

A BEV grid doubles as a voxel grid (one voxel per cell, z collapsed to a
fixed reference height).  Reconstruction predicts a soft occupancy mask
``V_m`` and per-voxel 3D offsets ``O_p`` from the voxel centers ``V_c``;
decoding emits one point per sufficiently confident voxel at
``V_c + O_p`` with the occupancy as its confidence.  Coordinates are not
scaled by the occupancy: doing so would have no geometric meaning and
would break the target/decode round trip.

The occupancy loss is class-balanced binary cross-entropy with a global
``N_b / N_f`` factor; the offset loss is an L1 mean over foreground
voxels of the predicted offset against the in-voxel point mean (occupancy
does not enter the offset residual).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .distill import LossValue
from .encode import FeatureMap, GridSpec
from .rng import derive_rng
from .scene import PointCloud
from .validation import check_array

__all__ = [
    "VoxelGrid",
    "ReconTarget",
    "build_recon_target",
    "decode_points",
    "recon_head",
    "loss_occupancy",
    "loss_offsets",
    "loss_recon",
    "BCE_CLAMP",
]

# BCE probability clamp keeping log terms finite.
BCE_CLAMP = 1e-7


def _voxel_centers(grid: GridSpec, z_ref: float) -> np.ndarray:
    centers_xy = grid.cell_centers()
    z = np.full((*grid.shape, 1), float(z_ref))
    return np.concatenate([centers_xy, z], axis=-1)


@dataclass(frozen=True)
class VoxelGrid:
    """Soft occupancy and offsets over a BEV voxel grid.

    ``v_m`` holds per-voxel occupancy probabilities in [0, 1], ``o_p`` the
    3D offsets in meters from the voxel centers, which sit at the cell
    centers at height ``z_ref``.
    """

    grid: GridSpec
    v_m: np.ndarray
    o_p: np.ndarray
    z_ref: float = 0.0

    def __post_init__(self):
        v_m = check_array(self.v_m, "v_m", shape=self.grid.shape)
        if v_m.min() < 0.0 or v_m.max() > 1.0:
            raise ValueError("v_m values must lie in [0, 1]")
        o_p = check_array(self.o_p, "o_p", shape=(*self.grid.shape, 3))
        v_m = v_m.copy()
        o_p = o_p.copy()
        v_m.setflags(write=False)
        o_p.setflags(write=False)
        object.__setattr__(self, "v_m", v_m)
        object.__setattr__(self, "o_p", o_p)

    @property
    def v_c(self) -> np.ndarray:
        """(H, W, 3) voxel centers, consistent with the grid by construction."""
        return _voxel_centers(self.grid, self.z_ref)


@dataclass(frozen=True)
class ReconTarget:
    """Ground-truth occupancy and offsets built from a point cloud."""

    grid: GridSpec
    occupancy_gt: np.ndarray
    offsets_gt: np.ndarray
    z_ref: float = 0.0

    def __post_init__(self):
        occ = np.asarray(self.occupancy_gt)
        if occ.shape != self.grid.shape:
            raise ValueError(
                f"occupancy shape {occ.shape} does not match grid {self.grid.shape}"
            )
        if not np.isin(occ, (0, 1)).all():
            raise ValueError("occupancy_gt values must be 0 or 1")
        occ = occ.astype(np.uint8)
        offsets = check_array(self.offsets_gt, "offsets_gt", shape=(*self.grid.shape, 3))
        occ.setflags(write=False)
        offsets = offsets.copy()
        offsets.setflags(write=False)
        object.__setattr__(self, "occupancy_gt", occ)
        object.__setattr__(self, "offsets_gt", offsets)

    @property
    def n_f(self) -> int:
        return int(self.occupancy_gt.sum())

    @property
    def n_b(self) -> int:
        return int(self.occupancy_gt.size - self.occupancy_gt.sum())

    @property
    def v_c(self) -> np.ndarray:
        return _voxel_centers(self.grid, self.z_ref)


def build_recon_target(
    cloud: PointCloud, grid: GridSpec, z_ref: float = 0.0
) -> ReconTarget:
    """Bin a cloud into the grid: occupancy plus mean-point offsets.

    A voxel is foreground iff at least one point falls in its cell
    (half-open edges, matching the pillar binning).  Its offset target is
    the in-voxel point mean minus the voxel center; background offsets are
    zero.  The reduction order is canonical, so the result is
    bit-identical under input permutation.
    """
    height, width = grid.shape
    occupancy = np.zeros((height, width), dtype=np.uint8)
    offsets = np.zeros((height, width, 3))
    if len(cloud) == 0:
        return ReconTarget(grid, occupancy, offsets, z_ref)
    voxel = grid.voxel_size
    col = np.floor((cloud.xyz[:, 0] - grid.x_range[0]) / voxel).astype(np.int64)
    row = np.floor((cloud.xyz[:, 1] - grid.y_range[0]) / voxel).astype(np.int64)
    inside = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    if not inside.any():
        return ReconTarget(grid, occupancy, offsets, z_ref)
    xyz = cloud.xyz[inside]
    flat = row[inside] * width + col[inside]
    order = np.lexsort((xyz[:, 2], xyz[:, 1], xyz[:, 0], flat))
    flat = flat[order]
    xyz = xyz[order]
    starts = np.flatnonzero(np.r_[True, np.diff(flat) > 0])
    counts = np.diff(np.r_[starts, flat.size]).astype(np.float64)
    means = np.add.reduceat(xyz, starts, axis=0) / counts[:, None]
    rows, cols = np.divmod(flat[starts], width)
    occupancy[rows, cols] = 1
    centers = _voxel_centers(grid, z_ref)
    offsets[rows, cols] = means - centers[rows, cols]
    return ReconTarget(grid, occupancy, offsets, z_ref)


def decode_points(v: VoxelGrid, mask_threshold: float = 0.5) -> PointCloud:
    """Emit one point per voxel with occupancy >= threshold.

    Points sit at voxel center + offset and carry the occupancy value as
    confidence in the reflectance slot, scanned in row-major order.
    """
    keep = v.v_m >= mask_threshold
    if not keep.any():
        return PointCloud.empty()
    positions = (v.v_c + v.o_p)[keep]
    confidence = v.v_m[keep]
    return PointCloud(positions, confidence)


def recon_head(fused: FeatureMap, seed: int = 0, z_ref: float = 0.0) -> VoxelGrid:
    """Fixed seeded linear projection from fused features to a VoxelGrid.

    Occupancy comes through a logistic squash, offsets are a plain linear
    map.  Like the detection head, this is a deterministic stand-in for a
    learned decoder: it produces well-defined tensors for the loss
    kernels, nothing more.
    """
    rng = derive_rng(seed, "head", "recon")
    scale = 1.0 / np.sqrt(fused.channels)
    w_occ = rng.normal(0.0, scale, size=(fused.channels,))
    w_off = rng.normal(0.0, scale, size=(fused.channels, 3))
    v_m = expit(fused.data @ w_occ)
    o_p = fused.data @ w_off
    return VoxelGrid(fused.grid, v_m, o_p, z_ref)


def loss_occupancy(v_m_pred: np.ndarray, target: ReconTarget) -> LossValue:
    """Class-balanced BCE between predicted and target occupancy.

    ``L_m = -(N_b / N_f) * sum_j [y_j log p_j + (1 - y_j) log(1 - p_j)]``
    with probabilities clamped to [1e-7, 1 - 1e-7].  The gradient w.r.t.
    the predictions is zero wherever the clamp is active.  A target with
    no foreground voxels is degenerate and rejected.
    """
    pred = check_array(v_m_pred, "v_m_pred", shape=target.grid.shape)
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise ValueError("v_m_pred values must lie in [0, 1]")
    if target.n_f == 0:
        raise ValueError("degenerate target: no foreground voxels")
    weight = target.n_b / target.n_f
    y = target.occupancy_gt.astype(np.float64)
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = -weight * float((y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum())
    grad = -weight * (y / p - (1.0 - y) / (1.0 - p))
    grad[(pred < BCE_CLAMP) | (pred > 1.0 - BCE_CLAMP)] = 0.0
    return LossValue(value, (grad,))


def loss_offsets(
    o_p_pred: np.ndarray,
    v_m_pred: Optional[np.ndarray],
    target: ReconTarget,
) -> LossValue:
    """Mean L1 offset error over foreground voxels.

    The residual is predicted offset minus target offset; the occupancy
    prediction is accepted for interface parity but does not enter the
    residual (a probability has no place in a metric offset).  Gradients
    are returned for both arguments; the occupancy gradient is zero.
    """
    pred = check_array(o_p_pred, "o_p_pred", shape=(*target.grid.shape, 3))
    if target.n_f == 0:
        raise ValueError("degenerate target: no foreground voxels")
    fg = target.occupancy_gt.astype(bool)
    diff = pred - target.offsets_gt
    value = float(np.abs(diff[fg]).sum()) / target.n_f
    grad = np.zeros_like(pred)
    grad[fg] = np.sign(diff[fg]) / target.n_f
    grads = [grad]
    if v_m_pred is not None:
        grads.append(np.zeros_like(np.asarray(v_m_pred, dtype=np.float64)))
    return LossValue(value, tuple(grads))


def loss_recon(l_m: LossValue, l_o: LossValue) -> LossValue:
    """Total reconstruction loss: occupancy + offsets, gradients intact."""
    return LossValue(l_m.value + l_o.value, (l_m.grads, l_o.grads))
