import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from utsrmorph import tensor as T
from utsrmorph.tensor import ShapeError, Tensor, backward, grad_check


def test_grad_check_square_at_three():
    with T.precision(64):
        assert grad_check(lambda x: T.mul(x, x), np.array(3.0)) < 1e-9


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(T.mul(x, 2.0))


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_only_scalar_broadcasting_is_implicit():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    out = T.add(Tensor(np.ones((2, 3))), 2.0)
    assert np.all(out.data == 3.0)


def test_log_and_sqrt_domain_errors():
    with pytest.raises(ValueError):
        T.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(ValueError):
        T.sqrt(Tensor(np.array([-1.0])))


def test_softmax_then_sum_has_zero_gradient():
    # the degenerate case: every coordinate's true derivative is 0
    x = Tensor(np.random.default_rng(0).standard_normal((3, 5)), requires_grad=True)
    backward(T.reduce_sum(T.softmax(x)))
    assert np.abs(x.grad).max() < 1e-6
    with T.precision(64):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 5)), requires_grad=True)
        backward(T.reduce_sum(T.softmax(x)))
        assert np.abs(x.grad).max() < 1e-12


def test_gradients_accumulate_on_leaves_only():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    mid = T.mul(x, 3.0)
    backward(T.reduce_sum(mid))
    backward(T.reduce_sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [3 + 2, 3 + 4])
    assert mid.grad is None


def test_retain_grad_keeps_intermediate():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    mid = T.mul(x, 3.0).retain_grad()
    backward(T.reduce_sum(T.square(mid)))
    np.testing.assert_allclose(mid.grad, 2 * np.array([3.0, 6.0]))


def test_shared_subexpression_gradient():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = T.mul(x, x)
    backward(T.add(y, y))
    assert float(x.grad) == pytest.approx(8.0)


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = T.add(y, 0.0)
    backward(y)
    assert float(x.grad) == 1.0


def test_precision_switch():
    with T.precision(64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
    with pytest.raises(ValueError):
        T.set_precision(16)


def test_conv3d_matches_direct_loop(rng):
    x = rng.standard_normal((5, 4, 6, 2))
    w = rng.standard_normal((3, 3, 3, 2, 3))
    b = rng.standard_normal(3)
    with T.precision(64):
        out = T.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros(out.shape)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            for k in range(out.shape[2]):
                patch = xp[2 * i:2 * i + 3, 2 * j:2 * j + 3, 2 * k:2 * k + 3]
                ref[i, j, k] = np.einsum("abcd,abcde->e", patch, w) + b
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_box_sum_counts(rng):
    counts = T.box_count((5, 5, 5), 1)
    assert counts[0, 0, 0] == 8 and counts[2, 2, 2] == 27 and counts[0, 2, 2] == 18


def test_upsample_trilinear_preserves_constants():
    x = Tensor(np.full((2, 3, 2, 1), 4.0))
    assert np.allclose(T.upsample_trilinear2x(x).data, 4.0)


def test_reduce_max_routes_gradient_to_first_maximum():
    x = Tensor(np.array([1.0, 5.0, 5.0, 2.0]), requires_grad=True)
    backward(T.reduce_max(x))
    np.testing.assert_array_equal(x.grad, [0, 1, 0, 0])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(a):
    s = T.softmax(Tensor(a), axis=-1).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=2, max_size=4).flatmap(
    lambda shape: st.tuples(st.just(shape), st.permutations(range(len(shape))))))
def test_permute_and_reshape_roundtrip_exact(args):
    shape, perm = args
    a = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
    t = Tensor(a)
    back = T.permute(T.permute(t, perm), np.argsort(perm))
    assert np.array_equal(back.data, a)
    flat = T.reshape(T.reshape(t, (-1,)), shape)
    assert np.array_equal(flat.data, a)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_additivity_over_independent_subgraphs(seed):
    r = np.random.default_rng(seed)
    a0, b0 = r.standard_normal(4), r.standard_normal(3)

    def graph(a, b):
        return T.add(T.reduce_sum(T.exp(T.mul(a, 0.3))), T.reduce_sum(T.square(b)))

    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    backward(graph(a, b))
    a2 = Tensor(a0, requires_grad=True)
    backward(T.reduce_sum(T.exp(T.mul(a2, 0.3))))
    b2 = Tensor(b0, requires_grad=True)
    backward(T.reduce_sum(T.square(b2)))
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), np.concatenate([a2.grad, b2.grad]), rtol=1e-6)
