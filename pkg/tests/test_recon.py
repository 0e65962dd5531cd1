"""Reconstruction tests: targets, decoding, round trips, loss kernels."""

import math

import numpy as np
import pytest

from lidarbench.distill import finite_diff_check
from lidarbench.encode import FeatureMap, GridSpec
from lidarbench.recon import (
    BCE_CLAMP,
    ReconTarget,
    VoxelGrid,
    build_recon_target,
    decode_points,
    loss_occupancy,
    loss_offsets,
    loss_recon,
    recon_head,
)
from lidarbench.scene import PointCloud

SEED = 3311


def unit_grid(h, w):
    return GridSpec((0.0, float(w)), (0.0, float(h)), 1.0)


def random_cloud(rng, n, hi=8.0):
    return PointCloud(
        np.column_stack(
            [
                rng.uniform(0.0, hi, size=n),
                rng.uniform(0.0, hi, size=n),
                rng.uniform(-2.0, 2.0, size=n),
            ]
        ),
        rng.uniform(0, 1, size=n),
    )


# ---------------------------------------------------------------------------
# voxel grid types


def test_voxel_grid_validation_and_centers():
    grid = unit_grid(1, 2)
    v = VoxelGrid(grid, np.array([[0.2, 0.9]]), np.zeros((1, 2, 3)), z_ref=1.5)
    assert v.v_c.shape == (1, 2, 3)
    assert v.v_c[0, 0] == pytest.approx([0.5, 0.5, 1.5])
    assert v.v_c[0, 1] == pytest.approx([1.5, 0.5, 1.5])
    with pytest.raises(ValueError):
        VoxelGrid(grid, np.array([[0.2, 1.2]]), np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        VoxelGrid(grid, np.array([[0.2]]), np.zeros((1, 2, 3)))


def test_recon_target_counts():
    grid = unit_grid(2, 2)
    occ = np.array([[1, 0], [0, 1]])
    target = ReconTarget(grid, occ, np.zeros((2, 2, 3)))
    assert target.n_f == 2 and target.n_b == 2
    with pytest.raises(ValueError):
        ReconTarget(grid, np.array([[1, 2], [0, 0]]), np.zeros((2, 2, 3)))


# ---------------------------------------------------------------------------
# target construction


def test_build_recon_target_single_point():
    grid = unit_grid(2, 2)
    cloud = PointCloud(np.array([[1.5, 0.5, 0.75]]), np.array([0.5]))
    target = build_recon_target(cloud, grid, z_ref=0.25)
    assert target.occupancy_gt.tolist() == [[0, 1], [0, 0]]
    # Offset from the voxel center (1.5, 0.5, 0.25).
    assert target.offsets_gt[0, 1] == pytest.approx([0.0, 0.0, 0.5], abs=1e-12)
    assert not target.offsets_gt[0, 0].any()


def test_build_recon_target_in_voxel_mean():
    grid = unit_grid(1, 1)
    cloud = PointCloud(
        np.array([[0.25, 0.5, 1.0], [0.75, 0.5, 3.0]]), np.array([0.5, 0.5])
    )
    target = build_recon_target(cloud, grid)
    assert target.offsets_gt[0, 0] == pytest.approx([0.0, 0.0, 2.0], abs=1e-12)


def test_build_recon_target_permutation_bit_exact():
    rng = np.random.default_rng(SEED)
    grid = unit_grid(8, 8)
    cloud = random_cloud(rng, 600)
    perm = rng.permutation(len(cloud))
    a = build_recon_target(cloud, grid)
    b = build_recon_target(cloud.take(perm), grid)
    assert np.array_equal(a.occupancy_gt, b.occupancy_gt)
    assert np.array_equal(a.offsets_gt, b.offsets_gt)


def test_build_recon_target_empty_and_outside():
    grid = unit_grid(2, 2)
    assert build_recon_target(PointCloud.empty(), grid).n_f == 0
    outside = PointCloud(np.array([[5.0, 5.0, 0.0]]), np.array([0.5]))
    assert build_recon_target(outside, grid).n_f == 0


# ---------------------------------------------------------------------------
# decoding


def test_decode_points_thresholds_and_positions():
    grid = unit_grid(1, 2)
    v = VoxelGrid(
        grid,
        np.array([[0.9, 0.4]]),
        np.array([[[0.1, -0.2, 0.3], [0.0, 0.0, 0.0]]]),
        z_ref=1.0,
    )
    out = decode_points(v, mask_threshold=0.5)
    assert len(out) == 1
    assert out.xyz[0] == pytest.approx([0.6, 0.3, 1.3], abs=1e-12)
    assert out.reflectance[0] == pytest.approx(0.9)
    # Inclusive threshold keeps a voxel at exactly the cut.
    assert len(decode_points(v, mask_threshold=0.4)) == 2
    assert len(decode_points(v, mask_threshold=0.95)) == 0


def test_decode_points_row_major_order():
    grid = unit_grid(2, 2)
    v = VoxelGrid(grid, np.ones((2, 2)), np.zeros((2, 2, 3)))
    out = decode_points(v)
    assert out.xyz[:, :2].tolist() == [
        [0.5, 0.5],
        [1.5, 0.5],
        [0.5, 1.5],
        [1.5, 1.5],
    ]


def test_target_decode_round_trip():
    """Decoding a ground-truth grid reproduces per-voxel point means."""
    rng = np.random.default_rng(SEED + 1)
    grid = unit_grid(6, 6)
    cloud = random_cloud(rng, 400, hi=6.0)
    target = build_recon_target(cloud, grid, z_ref=0.5)
    v = VoxelGrid(
        grid, target.occupancy_gt.astype(np.float64), target.offsets_gt, z_ref=0.5
    )
    decoded = decode_points(v, mask_threshold=0.5)
    assert len(decoded) == target.n_f

    col = np.floor(cloud.xyz[:, 0]).astype(int)
    row = np.floor(cloud.xyz[:, 1]).astype(int)
    for point in decoded.xyz:
        r, c = int(point[1]), int(point[0])
        members = (row == r) & (col == c)
        assert members.any()
        assert np.max(np.abs(point - cloud.xyz[members].mean(axis=0))) < 1e-9


# ---------------------------------------------------------------------------
# occupancy loss


def test_loss_occupancy_hand_value():
    """One foreground voxel at p = 0.5 with unit class balance: ln 2."""
    grid = unit_grid(1, 2)
    target = ReconTarget(grid, np.array([[1, 0]]), np.zeros((1, 2, 3)))
    pred = np.array([[0.5, 1e-9]])
    out = loss_occupancy(pred, target)
    # The background term is clamped to 1e-7, leaving a ~1e-7 residual.
    assert out.value == pytest.approx(math.log(2.0), abs=2e-7)


def test_loss_occupancy_perfect_is_within_clamp_bound():
    grid = unit_grid(2, 3)
    occ = np.array([[1, 0, 0], [0, 1, 0]])
    target = ReconTarget(grid, occ, np.zeros((2, 3, 3)))
    out = loss_occupancy(occ.astype(np.float64), target)
    weight = target.n_b / target.n_f
    assert 0.0 < out.value <= 6.0 * weight * 1.7e-6
    # Saturated predictions sit inside the clamp: zero gradient there.
    assert not out.grads[0].any()


def test_loss_occupancy_improves_toward_target():
    grid = unit_grid(1, 2)
    target = ReconTarget(grid, np.array([[1, 0]]), np.zeros((1, 2, 3)))
    worse = loss_occupancy(np.array([[0.3, 0.4]]), target).value
    better = loss_occupancy(np.array([[0.8, 0.1]]), target).value
    assert better < worse


def test_loss_occupancy_validation():
    grid = unit_grid(1, 2)
    target = ReconTarget(grid, np.array([[1, 0]]), np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        loss_occupancy(np.array([[1.5, 0.0]]), target)
    empty = ReconTarget(grid, np.zeros((1, 2)), np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        loss_occupancy(np.array([[0.5, 0.5]]), empty)


def test_loss_occupancy_gradient_check():
    rng = np.random.default_rng(SEED + 2)
    grid = unit_grid(3, 3)
    occ = rng.integers(0, 2, size=(3, 3))
    occ[0, 0] = 1
    target = ReconTarget(grid, occ, np.zeros((3, 3, 3)))
    pred = rng.uniform(0.2, 0.8, size=(3, 3))

    def wrapped(p):
        return loss_occupancy(p, target)

    assert finite_diff_check(wrapped, [pred]) < 1e-6


# ---------------------------------------------------------------------------
# offset loss


def test_loss_offsets_hand_values():
    grid = unit_grid(1, 2)
    offsets_gt = np.zeros((1, 2, 3))
    target = ReconTarget(grid, np.array([[1, 1]]), offsets_gt)
    pred = np.zeros((1, 2, 3))
    pred[0, 0, 0] = 0.3
    pred[0, 1, 0] = 0.1
    out = loss_offsets(pred, None, target)
    assert out.value == pytest.approx(0.2, rel=1e-12)
    single = ReconTarget(grid, np.array([[1, 0]]), offsets_gt)
    assert loss_offsets(pred, None, single).value == pytest.approx(0.3, rel=1e-12)


def test_loss_offsets_zero_at_target_and_ignores_background():
    rng = np.random.default_rng(SEED + 3)
    grid = unit_grid(2, 2)
    occ = np.array([[1, 0], [1, 1]])
    offsets_gt = rng.uniform(-0.4, 0.4, size=(2, 2, 3))
    target = ReconTarget(grid, occ, offsets_gt)
    pred = offsets_gt.copy()
    pred[0, 1] += 5.0  # background voxel: must not contribute
    out = loss_offsets(pred, None, target)
    assert out.value == 0.0


def test_loss_offsets_occupancy_argument_gets_zero_gradient():
    grid = unit_grid(1, 1)
    target = ReconTarget(grid, np.array([[1]]), np.zeros((1, 1, 3)))
    pred = np.full((1, 1, 3), 0.2)
    v_m = np.array([[0.7]])
    out = loss_offsets(pred, v_m, target)
    assert len(out.grads) == 2
    assert not out.grads[1].any()
    with pytest.raises(ValueError):
        loss_offsets(pred, v_m, ReconTarget(grid, np.array([[0]]), np.zeros((1, 1, 3))))


def test_loss_offsets_gradient_check():
    rng = np.random.default_rng(SEED + 4)
    grid = unit_grid(3, 3)
    occ = rng.integers(0, 2, size=(3, 3))
    occ[1, 1] = 1
    offsets_gt = rng.uniform(-0.4, 0.4, size=(3, 3, 3))
    target = ReconTarget(grid, occ, offsets_gt)
    # Keep residuals away from the L1 kink at zero.
    pred = offsets_gt + rng.uniform(0.05, 0.3, size=(3, 3, 3)) * rng.choice(
        [-1.0, 1.0], size=(3, 3, 3)
    )

    def wrapped(p):
        return loss_offsets(p, None, target)

    assert finite_diff_check(wrapped, [pred]) < 1e-6


# ---------------------------------------------------------------------------
# combination and head


def test_loss_recon_sums_components():
    grid = unit_grid(1, 2)
    target = ReconTarget(grid, np.array([[1, 0]]), np.zeros((1, 2, 3)))
    l_m = loss_occupancy(np.array([[0.5, 1e-9]]), target)
    l_o = loss_offsets(np.full((1, 2, 3), 0.1), None, target)
    total = loss_recon(l_m, l_o)
    assert total.value == pytest.approx(l_m.value + l_o.value, rel=1e-15)
    assert len(total.grads) == 2


def test_recon_head_deterministic_and_valid():
    rng = np.random.default_rng(SEED + 5)
    grid = unit_grid(4, 4)
    fused = FeatureMap(grid, rng.normal(size=(4, 4, 6)))
    a = recon_head(fused, seed=2, z_ref=0.5)
    b = recon_head(fused, seed=2, z_ref=0.5)
    assert np.array_equal(a.v_m, b.v_m) and np.array_equal(a.o_p, b.o_p)
    assert a.v_m.min() >= 0.0 and a.v_m.max() <= 1.0
    assert a.z_ref == 0.5
    c = recon_head(fused, seed=3)
    assert not np.array_equal(a.v_m, c.v_m)


def test_bce_clamp_constant():
    assert BCE_CLAMP == 1e-7
