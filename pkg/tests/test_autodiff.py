import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphsde import autodiff as ad


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def test_matmul_identity():
    out = ad.matmul(ad.Tensor([[1.0, 2.0], [3.0, 4.0]]), ad.Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_add_negation_is_zero():
    x = ad.Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(ad.add(x, -x).data, np.zeros((2, 3)))


def test_row_softmax_uniform():
    np.testing.assert_allclose(ad.row_softmax(ad.Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_sum_of_squares_gradient():
    _, (g,) = ad.grad(lambda x: ad.sum(ad.mul(x, x)), [np.array([1.0, 2.0, 3.0])])
    np.testing.assert_allclose(g, [2.0, 4.0, 6.0])


def test_mean_of_matvec_matches_finite_differences():
    rng = np.random.default_rng(0)
    W, x = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    _, (gW, gx) = ad.grad(lambda W, x: ad.mean(ad.matmul(W, x)), [W, x])
    nW, nx = ad.numerical_grad(lambda W, x: float(np.mean(W @ x)), [W, x])
    assert _rel_err(gW, nW) < 1e-5
    assert _rel_err(gx, nx) < 1e-5


def test_constant_loss_gives_zero_gradients():
    _, (g,) = ad.grad(lambda x: ad.add(ad.sum(ad.mul(x, 0.0)), 5.0), [np.ones(3)])
    np.testing.assert_array_equal(g, np.zeros(3))


def test_unreached_leaf_gets_zero_gradient():
    with ad.Tape() as tape:
        a = tape.watch(ad.Tensor(np.ones(2)))
        b = tape.watch(ad.Tensor(np.ones((3, 3))))
        loss = ad.sum(ad.mul(a, a))
    g = ad.backward(tape, loss)
    np.testing.assert_array_equal(g[b.node_id], np.zeros((3, 3)))


def test_backward_rejects_vector_loss():
    with ad.Tape() as tape:
        x = tape.watch(ad.Tensor(np.ones(3)))
        y = ad.mul(x, 2.0)
    with pytest.raises(ad.NotScalar):
        ad.backward(tape, y)


def test_backward_rejects_detached_loss():
    with ad.Tape() as tape:
        tape.watch(ad.Tensor(np.ones(3)))
    with pytest.raises(ad.DetachedTensor):
        ad.backward(tape, ad.Tensor(1.0))


def test_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))))
    with pytest.raises(ad.ShapeMismatch):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_debug_mode_flags_non_finite():
    with ad.debug_mode():
        with pytest.raises(ad.NonFiniteValue):
            ad.mul(ad.Tensor([1.0]), np.inf)


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x, W = rng.standard_normal((5, 4)), rng.standard_normal((4, 4))

    def f(x, W):
        return ad.sum(ad.tanh(ad.matmul(ad.row_softmax(x), W)))

    g1 = ad.grad(f, [x, W])[1]
    g2 = ad.grad(f, [x, W])[1]
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(a, b)


# name -> (op on tensors, reference on arrays)
_UNARY = {
    "tanh": (ad.tanh, np.tanh),
    "elu": (ad.elu, lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0)))),
    "relu": (ad.relu, lambda x: np.maximum(x, 0)),
    "row_softmax": (ad.row_softmax, lambda x: np.exp(x) / np.exp(x).sum(-1, keepdims=True)),
    "square": (lambda x: ad.power(x, 2.0), lambda x: x ** 2),
    "transpose": (ad.transpose, lambda x: np.swapaxes(x, -1, -2) if x.ndim == 2 else x.T),
    "sum_axis": (lambda x: ad.sum(x, axis=-1), lambda x: x.sum(-1)),
    "mean_axis": (lambda x: ad.mean(x, axis=0), lambda x: x.mean(0)),
    "reshape": (lambda x: ad.reshape(x, (-1,)), lambda x: x.reshape(-1)),
    "clip_min": (lambda x: ad.clip_min(x, 0.1), lambda x: np.maximum(x, 0.1)),
}
_BINARY = {
    "add": (ad.add, np.add),
    "sub": (ad.sub, np.subtract),
    "mul": (ad.mul, np.multiply),
}


def _weights(shape, rng):
    return rng.standard_normal(shape)


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_ops_gradient_check(name):
    f_ad, f_np = _UNARY[name]
    rng = np.random.default_rng(sorted(_UNARY).index(name))
    for _ in range(20):
        shape = tuple(rng.integers(1, 5, size=2))
        x = rng.standard_normal(shape)
        # stay away from kinks
        x = np.where(np.abs(x - 0.1) < 0.05, x + 0.2, x)
        x = np.where(np.abs(x) < 0.05, x + 0.2, x)
        w = _weights(f_np(x).shape, rng)
        _, (g,) = ad.grad(lambda x: ad.sum(ad.mul(f_ad(x), w)), [x])
        (n,) = ad.numerical_grad(lambda x: float(np.sum(f_np(x) * w)), [x])
        assert _rel_err(g, n) < 1e-4


@pytest.mark.parametrize("name", sorted(_BINARY))
def test_binary_ops_gradient_check_with_broadcast(name):
    f_ad, f_np = _BINARY[name]
    rng = np.random.default_rng(len(name))
    for _ in range(20):
        a_shape = tuple(rng.integers(1, 5, size=2))
        b_shape = (1, a_shape[1]) if rng.random() < 0.5 else a_shape
        a, b = rng.standard_normal(a_shape), rng.standard_normal(b_shape)
        w = _weights(a_shape, rng)
        _, grads = ad.grad(lambda a, b: ad.sum(ad.mul(f_ad(a, b), w)), [a, b])
        nums = ad.numerical_grad(lambda a, b: float(np.sum(f_np(a, b) * w)), [a, b])
        for g, n in zip(grads, nums):
            assert g.shape == n.shape
            assert _rel_err(g, n) < 1e-4


def test_matmul_and_concat_gradient_check():
    rng = np.random.default_rng(11)
    for _ in range(20):
        b, n, k, m = rng.integers(1, 4, size=4)
        A, B = rng.standard_normal((b, n, k)), rng.standard_normal((k, m))
        C = rng.standard_normal((b, n, 2))
        w = rng.standard_normal((b, n, m + 2))

        def f(A, B, C):
            return ad.sum(ad.mul(ad.concat_last_dim([ad.matmul(A, B), C]), w))

        grads = ad.grad(f, [A, B, C])[1]
        nums = ad.numerical_grad(lambda A, B, C: float(np.sum(np.concatenate([A @ B, C], -1) * w)), [A, B, C])
        for g, num in zip(grads, nums):
            assert _rel_err(g, num) < 1e-4


def test_masked_fill_blocks_gradient():
    mask = np.array([[True, False], [False, True]])
    _, (g,) = ad.grad(lambda x: ad.sum(ad.masked_fill(x, mask, 0.0)), [np.ones((2, 2))])
    np.testing.assert_array_equal(g, (~mask).astype(float))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_tanh_chain_gradient_property(x):
    _, (g,) = ad.grad(lambda x: ad.sum(ad.tanh(ad.mul(x, x))), [x])
    np.testing.assert_allclose(g, 2 * x * (1 - np.tanh(x * x) ** 2), atol=1e-12)


@pytest.mark.parametrize("scale", [1.0, 2.0])
def test_jacobian_norm_of_scaled_identity(scale):
    n = 6
    est = ad.jacobian_frobenius_sq(lambda x: ad.mul(x, scale), [np.zeros(n)], 1000, np.random.default_rng(0))
    assert abs(est - scale ** 2 * n) < 0.1 * scale ** 2 * n


def test_jacobian_norm_of_linear_map():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((5, 4))
    est = ad.jacobian_frobenius_sq(lambda x: ad.matmul(ad.Tensor(W), x), [np.zeros((4, 1))], 1000, rng)
    target = np.sum(W ** 2)
    assert abs(est - target) < 0.1 * target


def test_jacobian_norm_needs_a_probe():
    with pytest.raises(ValueError):
        ad.jacobian_frobenius_sq(lambda x: x, [np.zeros(2)], 0, np.random.default_rng(0))
