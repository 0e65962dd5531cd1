"""Distillation loss tests: hand fixtures, identities, gradient checks."""

import math

import numpy as np
import pytest

from lidarbench.distill import (
    LossValue,
    finite_diff_check,
    flatten_grads,
    loss_dae,
    loss_daf,
    loss_dap,
    loss_kd,
)
from lidarbench.encode import FeatureMap, ForegroundMask, GridSpec

SEED = 77


def unit_grid(h, w):
    return GridSpec((0.0, float(w)), (0.0, float(h)), 1.0)


def fmap(data):
    data = np.asarray(data, dtype=np.float64)
    return FeatureMap(unit_grid(*data.shape[:2]), data)


def fmask(data):
    data = np.asarray(data)
    return ForegroundMask(unit_grid(*data.shape), data)


def separated_pair(rng, shape, gap=0.3):
    """Teacher/student arrays whose difference stays away from the L2 kink."""
    teacher = rng.normal(size=shape)
    student = teacher + rng.uniform(gap, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return teacher, student


# ---------------------------------------------------------------------------
# LossValue


def test_loss_value_rejects_non_finite():
    with pytest.raises(ValueError):
        LossValue(float("nan"))
    with pytest.raises(ValueError):
        LossValue(float("inf"))
    assert LossValue(np.float64(2.0)).value == 2.0


def test_flatten_grads_handles_nesting():
    a, b = np.zeros(2), np.ones(3)
    assert flatten_grads(((a,), (b,), None)) == [a, b]
    assert flatten_grads(None) == []


# ---------------------------------------------------------------------------
# masked per-agent alignment


def test_loss_dae_zero_for_equal_maps():
    rng = np.random.default_rng(SEED)
    data = rng.normal(size=(3, 4, 5))
    mask = fmask(np.ones((3, 4), dtype=np.uint8))
    out = loss_dae([fmap(data)], [fmap(data)], [mask])
    assert out.value == 0.0
    assert not out.grads[0].any()


def test_loss_dae_hand_fixture_three_four_five():
    teacher = fmap(np.array([[[3.0, 4.0]]]))
    student = fmap(np.array([[[0.0, 0.0]]]))
    mask = fmask(np.array([[1]]))
    out = loss_dae([teacher], [student], [mask])
    assert out.value == 5.0
    # Gradient is minus the unit difference vector.
    assert out.grads[0][0, 0] == pytest.approx([-0.6, -0.8], abs=1e-15)


def test_loss_dae_mask_gates_cells():
    teacher = fmap(np.array([[[3.0, 4.0], [5.0, 12.0]]]))
    student = fmap(np.zeros((1, 2, 2)))
    assert loss_dae([teacher], [student], [fmask([[1, 1]])]).value == 18.0
    assert loss_dae([teacher], [student], [fmask([[0, 1]])]).value == 13.0
    out = loss_dae([teacher], [student], [fmask([[0, 0]])])
    assert out.value == 0.0
    assert not out.grads[0].any()


def test_loss_dae_sums_over_agents():
    rng = np.random.default_rng(SEED + 1)
    pairs = [separated_pair(rng, (2, 3, 4)) for _ in range(3)]
    masks = [fmask(rng.integers(0, 2, size=(2, 3))) for _ in range(3)]
    total = loss_dae(
        [fmap(t) for t, _ in pairs], [fmap(s) for _, s in pairs], masks
    )
    singles = [
        loss_dae([fmap(t)], [fmap(s)], [m]).value for (t, s), m in zip(pairs, masks)
    ]
    assert total.value == pytest.approx(sum(singles), rel=1e-15)
    assert len(total.grads) == 3


def test_loss_dae_mask_monotonicity():
    rng = np.random.default_rng(SEED + 2)
    teacher, student = separated_pair(rng, (4, 4, 3))
    base = rng.integers(0, 2, size=(4, 4))
    grown = base.copy()
    grown[0, 0] = 1
    grown[3, 3] = 1
    lo = loss_dae([fmap(teacher)], [fmap(student)], [fmask(base)]).value
    hi = loss_dae([fmap(teacher)], [fmap(student)], [fmask(grown)]).value
    assert hi >= lo


def test_loss_dae_shape_mismatches():
    a = fmap(np.zeros((2, 2, 3)))
    b = fmap(np.zeros((2, 2, 4)))
    mask = fmask(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        loss_dae([a], [b], [mask])
    with pytest.raises(ValueError):
        loss_dae([a], [a], [mask, mask])


def test_loss_dae_gradient_check():
    rng = np.random.default_rng(SEED + 3)
    teacher, student = separated_pair(rng, (3, 3, 4))
    mask = fmask(rng.integers(0, 2, size=(3, 3)))
    tm = fmap(teacher)

    def wrapped(s):
        return loss_dae([tm], [fmap(s)], [mask])

    assert finite_diff_check(wrapped, [student]) < 1e-6


# ---------------------------------------------------------------------------
# fused alignment


def test_loss_daf_zero_and_hand_values():
    rng = np.random.default_rng(SEED + 4)
    data = rng.normal(size=(2, 2, 3))
    assert loss_daf(fmap(data), fmap(data)).value == 0.0
    teacher = fmap(np.array([[[2.0]], [[1.0]]]))
    student = fmap(np.array([[[5.0]], [[1.0]]]))
    assert loss_daf(teacher, student).value == 3.0
    with pytest.raises(ValueError):
        loss_daf(fmap(np.zeros((1, 1, 2))), fmap(np.zeros((1, 1, 3))))


def test_loss_daf_gradient_check():
    rng = np.random.default_rng(SEED + 5)
    teacher, student = separated_pair(rng, (4, 2, 3))
    tm = fmap(teacher)

    def wrapped(s):
        return loss_daf(tm, fmap(s))

    assert finite_diff_check(wrapped, [student]) < 1e-6


# ---------------------------------------------------------------------------
# head-output KL


def test_loss_dap_zero_for_equal_logits():
    rng = np.random.default_rng(SEED + 6)
    cls = rng.normal(size=(3, 3, 2))
    reg = rng.normal(size=(3, 3, 2, 7))
    out = loss_dap(cls, cls, reg, reg)
    assert out.value == 0.0


def test_loss_dap_bernoulli_hand_value():
    """Teacher p=0.5 against student p=0.75 gives KL = ln(4/3) / 2."""
    cls_t = np.zeros((1, 1, 1))
    cls_s = np.full((1, 1, 1), math.log(3.0))
    reg = np.zeros((1, 1, 1, 7))
    out = loss_dap(cls_t, cls_s, reg, reg)
    assert out.value == pytest.approx(0.5 * math.log(4.0 / 3.0), abs=1e-12)


def test_loss_dap_is_nonnegative_and_asymmetric():
    rng = np.random.default_rng(SEED + 7)
    cls_t = rng.normal(size=(2, 2, 2))
    cls_s = rng.normal(size=(2, 2, 2))
    reg_t = rng.normal(size=(2, 2, 2, 7))
    reg_s = rng.normal(size=(2, 2, 2, 7))
    forward = loss_dap(cls_t, cls_s, reg_t, reg_s).value
    backward = loss_dap(cls_s, cls_t, reg_s, reg_t).value
    assert forward > 0.0 and backward > 0.0
    assert forward != backward


def test_loss_dap_averages_over_count():
    rng = np.random.default_rng(SEED + 8)
    cls_t = rng.normal(size=(1, 1, 1))
    cls_s = rng.normal(size=(1, 1, 1))
    reg_t = rng.normal(size=(1, 1, 1, 7))
    reg_s = rng.normal(size=(1, 1, 1, 7))
    single = loss_dap(cls_t, cls_s, reg_t, reg_s).value
    tiled = loss_dap(
        np.tile(cls_t, (2, 3, 1)),
        np.tile(cls_s, (2, 3, 1)),
        np.tile(reg_t, (2, 3, 1, 1)),
        np.tile(reg_s, (2, 3, 1, 1)),
    ).value
    assert tiled == pytest.approx(single, rel=1e-12)


def test_loss_dap_validation():
    reg = np.zeros((1, 1, 1, 7))
    with pytest.raises(ValueError):
        loss_dap(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)), reg, reg)
    with pytest.raises(ValueError):
        loss_dap(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1, 6)), np.zeros((1, 1, 1, 6)))
    with pytest.raises(ValueError):
        loss_dap(np.full((1, 1, 1), np.nan), np.zeros((1, 1, 1)), reg, reg)


def test_loss_dap_gradient_check():
    rng = np.random.default_rng(SEED + 9)
    cls_t = rng.normal(size=(2, 2, 2))
    cls_s = rng.normal(size=(2, 2, 2))
    reg_t = rng.normal(size=(2, 2, 2, 7))
    reg_s = rng.normal(size=(2, 2, 2, 7))

    def wrapped(cs, rs):
        return loss_dap(cls_t, cs, reg_t, rs)

    assert finite_diff_check(wrapped, [cls_s, reg_s]) < 1e-6


# ---------------------------------------------------------------------------
# weighted combination


def test_loss_kd_default_weights():
    out = loss_kd(LossValue(1.0), LossValue(2.0), LossValue(4.0))
    assert out.value == 5.0
    assert loss_kd(LossValue(0.0), LossValue(0.0), LossValue(0.0)).value == 0.0
    assert loss_kd(
        LossValue(0.3), LossValue(0.7), LossValue(1.0)
    ).value == pytest.approx(1.5, rel=1e-15)


def test_loss_kd_custom_weights_scale_gradients():
    g1, g2, g3 = np.ones(2), np.full(2, 2.0), np.full(2, 3.0)
    out = loss_kd(
        LossValue(1.0, (g1,)),
        LossValue(1.0, (g2,)),
        LossValue(1.0, (g3,)),
        alpha=2.0,
        beta=0.5,
        gamma=4.0,
    )
    assert out.value == pytest.approx(6.5)
    flat = flatten_grads(out.grads)
    assert np.array_equal(flat[0], 2.0 * g1)
    assert np.array_equal(flat[1], 0.5 * g2)
    assert np.array_equal(flat[2], 4.0 * g3)


def test_loss_kd_gradient_composition():
    """The combined gradient matches finite differences of the combined value."""
    rng = np.random.default_rng(SEED + 10)
    teacher, student = separated_pair(rng, (2, 2, 3))
    mask = fmask(np.ones((2, 2), dtype=np.uint8))
    cls_t = rng.normal(size=(2, 2, 1))
    reg_t = rng.normal(size=(2, 2, 1, 7))
    cls_s = rng.normal(size=(2, 2, 1))
    reg_s = rng.normal(size=(2, 2, 1, 7))
    tm = fmap(teacher)

    def combined(s, cs, rs):
        l1 = loss_dae([tm], [fmap(s)], [mask])
        l2 = loss_daf(tm, fmap(s))
        l3 = loss_dap(cls_t, cs, reg_t, rs)
        total = loss_kd(l1, l2, l3)
        # Merge the two alignment gradients on the shared input.
        flat = flatten_grads(total.grads)
        return LossValue(total.value, (flat[0] + flat[1], flat[2], flat[3]))

    assert finite_diff_check(combined, [student, cls_s, reg_s]) < 1e-6


# ---------------------------------------------------------------------------
# finite difference harness


def test_finite_diff_check_linear_loss_is_exact():
    def linear(x):
        return LossValue(3.0 * float(x.sum()), (np.full_like(x, 3.0),))

    rng = np.random.default_rng(SEED + 11)
    assert finite_diff_check(linear, [rng.normal(size=(4, 3))]) < 1e-9


def test_finite_diff_check_flags_wrong_gradient():
    def wrong(x):
        return LossValue(float((x**2).sum()), (3.0 * x,))  # should be 2x

    rng = np.random.default_rng(SEED + 12)
    x = rng.uniform(1.0, 2.0, size=(3,))
    assert finite_diff_check(wrong, [x]) > 0.1


def test_finite_diff_check_rejects_misaligned_grads():
    def off(x):
        return LossValue(float(x.sum()), (np.ones_like(x), np.ones_like(x)))

    with pytest.raises(ValueError):
        finite_diff_check(off, [np.zeros(3)])
