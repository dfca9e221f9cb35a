import inspect

import numpy as np
import pytest

from utsrmorph import gradcheck as G
from utsrmorph import tensor as T
from utsrmorph.tensor import Tensor, apply_op, grad_check

# engine plumbing that is not a differentiable op
NOT_OPS = {"apply_op", "as_tensor", "backward", "box_count", "get_dtype", "grad_check", "precision",
           "set_precision", "tensor"}


def test_registry_covers_every_public_op():
    public = {n for n, f in inspect.getmembers(T, inspect.isfunction)
              if not n.startswith("_") and f.__module__ == T.__name__}
    assert public - NOT_OPS - set(G.OP_CASES) == set()


def test_battery_names_include_required_targets():
    names = set(G.battery_names())
    for required in ("fab", "oab", "warp_trilinear_image", "warp_trilinear_field", "lncc_loss", "mi_loss",
                     "diffusion_loss", "dice_seg_loss", "total_loss", "network_end_to_end"):
        assert required in names


def test_grad_check_examples():
    assert grad_check(lambda t: T.reduce_sum(T.square(t)), np.array([3.0])) < 1e-4


def test_softmax_sum_gradient_vanishes():
    # the ratio in grad_check is undefined for a constant function (both sides are rounding noise),
    # so check the two sides directly: analytic ~0 and central differences within a few ulps of 1.0
    x = np.random.default_rng(0).standard_normal((3, 4))
    with T.precision(64):
        probe = Tensor(x, requires_grad=True)
        T.backward(T.reduce_sum(T.softmax(probe, -1)))
        assert np.abs(probe.grad).max() < 1e-12
        eps, flat = 1e-6, x.reshape(-1)
        for i in range(flat.size):
            hi, lo = flat.copy(), flat.copy()
            hi[i] += eps
            lo[i] -= eps
            c = (T.reduce_sum(T.softmax(Tensor(hi.reshape(3, 4)), -1)).item()
                 - T.reduce_sum(T.softmax(Tensor(lo.reshape(3, 4)), -1)).item()) / (2 * eps)
            assert abs(c) <= 8 * np.finfo(np.float64).eps / (2 * eps)


def _broken_square(x):
    # forward x^2, backward claims 2.2 x
    return apply_op(x.data ** 2, (x,), lambda g: (2.2 * x.data * g,))


@pytest.mark.parametrize("bits", [32, 64])
def test_subspace_check_detects_wrong_gradient(bits):
    rng = np.random.default_rng(1)
    base = rng.standard_normal((5, 5))
    with T.precision(bits):
        loss = lambda t: T.reduce_mean(_broken_square(t))
        f, a = G.subspace_function(loss, base, rng, guided=bits == 32)
        assert grad_check(f, a) > G.TOLERANCE[bits]


def test_subspace_check_detects_error_orthogonal_to_gradient():
    rng = np.random.default_rng(2)
    base = rng.standard_normal(16)
    bad = np.zeros(16)
    bad[3] = 0.5  # gradient error in one coordinate only

    def leaky(x):
        return apply_op(x.data ** 2, (x,), lambda g: ((2 * x.data + bad) * g,))

    f, a = G.subspace_function(lambda t: T.reduce_sum(leaky(t)), base, rng, guided=True)
    assert grad_check(f, a) > G.TOLERANCE[32]


def test_check_result_line():
    assert G.CheckResult("x", 32, 1e-3, 1e-2).line().startswith("PASS")
    assert G.CheckResult("x", 64, float("nan"), 1e-5).line().startswith("FAIL")


def test_battery_subset_runs():
    res = G.run_battery(64, include=["add", "fab", "lncc_loss"], network=False)
    assert [r.name for r in res] == ["add", "fab", "lncc_loss"]
    assert all(r.passed for r in res)
