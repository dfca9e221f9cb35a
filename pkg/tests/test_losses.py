import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

import reference as ref
from utsrmorph import tensor as T
from utsrmorph.losses import (LossConfig, diffusion_loss, dice_seg_loss, lncc_loss, mi_loss, mutual_information,
                              total_loss)
from utsrmorph.tensor import ShapeError, Tensor

# brute-force LNCC of the seeded 21^3 pair below, computed once with the loop oracle
LNCC_21_FROZEN = -0.2878567528536944


def _pair21():
    rng = np.random.default_rng(21)
    f = ndimage.gaussian_filter(rng.standard_normal((21,) * 3), 2.0).astype(np.float32)
    w = (f + 0.5 * ndimage.gaussian_filter(rng.standard_normal((21,) * 3), 1.0)).astype(np.float32)
    return f, w


def test_lncc_self_is_minus_one(smooth_volume):
    f = smooth_volume((16, 16, 16))
    assert abs(lncc_loss(f, f).item() + 1) < 1e-3


def test_lncc_affine_invariant(smooth_volume):
    f = smooth_volume((16, 16, 16))
    assert abs(lncc_loss(f, 2.5 * f + 3.0).item() + 1) < 1e-3


def test_lncc_matches_bruteforce_21():
    f, w = _pair21()
    want = ref.lncc(f, w)
    assert abs(want - LNCC_21_FROZEN) < 1e-9
    assert abs(lncc_loss(f, w).item() - want) < 1e-4


def test_lncc_noise_pair_small(rng):
    a, b = rng.random((2, 21, 21, 21))
    got = lncc_loss(a, b).item()
    assert abs(got) < 0.1
    assert abs(got - ref.lncc(a.astype(np.float32), b.astype(np.float32))) < 1e-4


def test_lncc_validation():
    with pytest.raises(ShapeError):
        lncc_loss(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))
    with pytest.raises(ValueError):
        lncc_loss(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), cube=4)


def test_lncc_self_is_minimum(smooth_volume, rng):
    f = smooth_volume((12, 12, 12))
    base = lncc_loss(f, f).item()
    for _ in range(100):
        w = f + rng.uniform(0.05, 2.0) * rng.standard_normal(f.shape)
        assert base <= lncc_loss(f, w).item() + 1e-6


def test_mi_binary_self_pair_is_ln2():
    v = np.zeros((16, 16, 16), np.float32)
    v[:8] = 1
    assert abs(mutual_information(v, v).item() - math.log(2)) < 0.05


def test_mi_independent_noise_small(rng):
    a, b = rng.random((2, 32, 32, 32))
    assert abs(mutual_information(a, b).item()) < 0.05


def test_mi_symmetric(rng, smooth_volume):
    f = smooth_volume((12, 12, 12))
    w = f ** 2 + 0.1 * rng.standard_normal(f.shape)
    with T.precision(64):
        assert abs(mutual_information(f, w).item() - mutual_information(w, f).item()) < 1e-6


def test_mi_loss_is_negated_mi(rng):
    a, b = rng.random((2, 8, 8, 8))
    assert mi_loss(a, b).item() == pytest.approx(-mutual_information(a, b).item())


def test_mi_constant_input_is_finite():
    assert math.isfinite(mutual_information(np.ones((6, 6, 6)), np.ones((6, 6, 6))).item())


def test_diffusion_zero_and_linear():
    assert diffusion_loss(np.zeros((5, 5, 5, 3))).item() == 0.0
    u = np.zeros((6, 6, 6, 3))
    u[..., 0] = np.arange(6)[:, None, None]
    assert abs(diffusion_loss(u).item() - 1 / 9) < 1e-6


def test_diffusion_matches_oracle(rng):
    u = rng.standard_normal((7, 6, 5, 3))
    with T.precision(64):
        assert abs(diffusion_loss(u).item() - ref.diffusion(u)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-5, 5))
def test_diffusion_nonnegative_and_translation_invariant(seed, c):
    u = np.random.default_rng(seed).standard_normal((4, 4, 4, 3))
    with T.precision(64):
        a = diffusion_loss(u).item()
        b = diffusion_loss(u + c).item()
    assert a >= 0 and abs(a - b) < 1e-9


def test_diffusion_zero_iff_constant():
    assert diffusion_loss(np.full((4, 4, 4, 3), 2.0)).item() == 0.0
    u = np.zeros((4, 4, 4, 3))
    u[1, 2, 3, 1] = 1e-3
    assert diffusion_loss(u).item() > 0


def test_dice_loss_cases():
    a = np.zeros((4, 4, 4, 1), np.float32)
    a[0:2, 0:2, 0:2] = 1
    b = np.zeros_like(a)
    b[1:3, 0:2, 0:2] = 1
    assert dice_seg_loss(a, a).item() == pytest.approx(0.0, abs=1e-6)
    c = np.zeros_like(a)
    c[2:4, 2:4, 2:4] = 1
    assert dice_seg_loss(a, c).item() == pytest.approx(1.0, abs=1e-6)
    with T.precision(64):
        # 1 - 2*4/(8+8+1e-5)
        assert dice_seg_loss(a, b).item() == pytest.approx(1 - 8 / (16 + 1e-5), abs=1e-12)
        assert abs(dice_seg_loss(a, b).item() - 0.5) < 1e-6


def test_dice_loss_requires_classes():
    with pytest.raises(ValueError):
        dice_seg_loss(np.zeros((4, 4, 4, 0)), np.zeros((4, 4, 4, 0)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_dice_loss_range(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((2, 4, 4, 4, 2))
    v = dice_seg_loss(a, b).item()
    assert 0 <= v <= 1 + 1e-5


def test_total_loss_floor(smooth_volume):
    f = smooth_volume((12, 12, 12))
    total, parts = total_loss(f, f, np.zeros((12, 12, 12, 3)), LossConfig(lam=0.0, gamma=0.0))
    assert abs(total.item() + 1) < 1e-3
    assert set(parts) == {"sim", "smooth"}


def test_total_loss_rough_field_costs_more(smooth_volume, rng):
    f = smooth_volume((12, 12, 12))
    cfg = LossConfig(lam=1.0)
    zero = total_loss(f, f, np.zeros((12, 12, 12, 3)), cfg)[0].item()
    rough = total_loss(f, f, rng.standard_normal((12, 12, 12, 3)), cfg)[0].item()
    assert rough > zero


def test_total_loss_seg_requires_masks(smooth_volume):
    f = smooth_volume((8, 8, 8))
    with pytest.raises(ValueError):
        total_loss(f, f, np.zeros((8, 8, 8, 3)), LossConfig(use_seg=True))


def test_total_loss_with_seg_parts(smooth_volume):
    f = smooth_volume((8, 8, 8))
    oh = np.zeros((8, 8, 8, 2), np.float32)
    oh[:4, ..., 0] = 1
    oh[4:, ..., 1] = 1
    total, parts = total_loss(f, f, np.zeros((8, 8, 8, 3)), LossConfig(use_seg=True, gamma=0.5),
                              fixed_onehot=oh, moving_onehot=oh)
    assert parts["seg"].item() == pytest.approx(0.0, abs=1e-5)
    assert total.item() == pytest.approx(parts["sim"].item(), abs=1e-5)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(sim_kind="ssd")
    with pytest.raises(ValueError):
        LossConfig(lam=-1)


def test_field_gradient_flows_through_total_loss(smooth_volume, rng):
    f = smooth_volume((10, 10, 10))
    m = np.roll(f, 1, 0)
    u = Tensor(0.3 * rng.standard_normal((10, 10, 10, 3)), requires_grad=True)
    total, _ = total_loss(f, m, u, LossConfig())
    T.backward(total)
    assert u.grad is not None and np.isfinite(u.grad).all() and np.abs(u.grad).sum() > 0
