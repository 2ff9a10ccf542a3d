import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate

from topdown_iqa import numerics as nx
from topdown_iqa.exceptions import ArgumentError, NumericError
from topdown_iqa.numerics import Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# -- forward oracles ------------------------------------------------------------------

def test_softmax_examples(double):
    assert np.array_equal(nx.softmax(Tensor([1.0, 1.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_shift_invariance(double, rng):
    x = rng.standard_normal((4, 7))
    np.testing.assert_allclose(nx.softmax(Tensor(x)).data, nx.softmax(Tensor(x + 13.5)).data, atol=1e-15)


def test_softmax_rejects_bad_axis():
    with pytest.raises(ArgumentError):
        nx.softmax(Tensor(np.ones((2, 3))), axis=2)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = nx.softmax(Tensor(x, dtype=np.float32)).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-6)
    assert np.all(out >= 0)


def test_window_avg_pool_examples(double):
    assert np.array_equal(nx.window_avg_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2).data, [[[2.5]]])
    ramp = Tensor(np.arange(16.0).reshape(1, 4, 4))
    assert np.array_equal(nx.window_avg_pool(ramp, 2).data, [[[2.5, 4.5], [10.5, 12.5]]])
    const = Tensor(np.full((2, 8, 8), 0.375))
    assert np.array_equal(nx.window_avg_pool(const, 4).data, np.full((2, 2, 2), 0.375))


def test_window_avg_pool_rejects_non_divisible():
    with pytest.raises(ArgumentError):
        nx.window_avg_pool(Tensor(np.zeros((1, 6, 6))), 4)


def test_pooling_twice_equals_once(double, rng):
    """Pool, broadcast back up, pool again: the second pool changes nothing."""
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    once = nx.window_avg_pool(x, 4).data
    up = np.repeat(np.repeat(once, 4, axis=-2), 4, axis=-1)
    np.testing.assert_allclose(nx.window_avg_pool(Tensor(up), 4).data, once, atol=1e-15)


def test_bilinear_resize_examples(double):
    row = Tensor([[[0.0, 1.0]]])
    assert np.array_equal(nx.bilinear_resize(row, 1, 3).data, [[[0.0, 0.5, 1.0]]])
    x = Tensor(np.arange(12.0).reshape(1, 3, 4))
    assert nx.bilinear_resize(x, 3, 4) is x or np.array_equal(nx.bilinear_resize(x, 3, 4).data, x.data)
    const = Tensor(np.full((2, 3, 5), 0.7))
    np.testing.assert_allclose(nx.bilinear_resize(const, 7, 2).data, 0.7, atol=1e-15)


def test_bilinear_resize_matches_scipy_corner_aligned(double, rng):
    from scipy.interpolate import RegularGridInterpolator

    x = rng.standard_normal((4, 5))
    out = nx.bilinear_resize(Tensor(x[None]), 7, 9).data[0]
    interp = RegularGridInterpolator((np.arange(4), np.arange(5)), x)
    yy, xx = np.meshgrid(np.linspace(0, 3, 7), np.linspace(0, 4, 9), indexing="ij")
    np.testing.assert_allclose(out, interp(np.stack([yy, xx], -1)), atol=1e-12)


def test_bilinear_resize_rejects_zero_extent():
    with pytest.raises(ArgumentError):
        nx.bilinear_resize(Tensor(np.zeros((1, 2, 2))), 0, 3)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_scipy(double, rng, stride, padding):
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    for n in range(2):
        for o in range(4):
            full = sum(correlate(xp[n, c], w[o, c], mode="valid") for c in range(3)) + b[o]
            np.testing.assert_allclose(out[n, o], full[::stride, ::stride], atol=1e-12)


def test_gelu_tanh_form(double):
    x = np.linspace(-4, 4, 33)
    want = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(nx.gelu(Tensor(x)).data, want, atol=1e-15)


def test_sigmoid_complement_exact(double, rng):
    x = rng.standard_normal(1000) * 20
    s = nx.sigmoid(Tensor(x), complement_exact=True).data
    s_neg = nx.sigmoid(Tensor(-x), complement_exact=True).data
    assert np.all(s + s_neg == 1.0)


def test_operations_are_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    a = nx.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = nx.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# -- autodiff ---------------------------------------------------------------------------

def test_grad_check_closed_form(double):
    x = Tensor([1.0, 2.0], requires_grad=True)
    rep = nx.grad_check(lambda: (x * x).sum(), [x], tol=1e-6)
    assert rep.passed
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_grad_check_constant_function(double):
    x = Tensor([1.0, -3.0], requires_grad=True)
    rep = nx.grad_check(lambda: Tensor(5.0) + x.sum() * 0.0, [x])
    assert rep.passed and np.array_equal(x.grad, [0.0, 0.0])


def test_grad_check_detects_wrong_gradient(double):
    x = Tensor([0.3, 0.7], requires_grad=True)

    def broken():
        out = nx.square(x)
        backward = out._backward
        out._backward = lambda g: tuple(2.0 * v for v in backward(g))
        return out.sum()

    assert not nx.grad_check(broken, [x]).passed


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_non_finite(double):
    x = Tensor([0.0], requires_grad=True)
    with pytest.raises(NumericError):
        nx.grad_check(lambda: (x / x).sum(), [x])


def test_grad_check_branch_signature_excludes_kinks(double):
    x = Tensor([1e-5, 0.5], requires_grad=True)
    rep = nx.grad_check(lambda: nx.absolute(x).sum(), {"x": x}, branch_signature=lambda: np.sign(x.data))
    assert rep.skipped == 1 and rep.checked == 1 and rep.passed


PRIMITIVES = {
    "add": lambda r: (lambda a, b: nx.add(a, b), [leaf(r, 3, 4), leaf(r, 4)]),
    "sub": lambda r: (lambda a, b: nx.sub(a, b), [leaf(r, 2, 3), leaf(r, 2, 1)]),
    "mul": lambda r: (lambda a, b: nx.mul(a, b), [leaf(r, 3, 4), leaf(r, 1, 4)]),
    "div": lambda r: (lambda a, b: nx.div(a, b), [leaf(r, 3), Tensor(np.array([1.5, -2.0, 3.0]), requires_grad=True)]),
    "abs": lambda r: (lambda a: nx.absolute(a), [Tensor(np.array([0.5, -1.3, 2.0]), requires_grad=True)]),
    "sqrt": lambda r: (lambda a: nx.sqrt(a), [Tensor(np.array([0.5, 1.3, 2.0]), requires_grad=True)]),
    "relu": lambda r: (lambda a: nx.relu(a), [Tensor(np.array([0.5, -1.3, 2.0, -0.2]), requires_grad=True)]),
    "sigmoid": lambda r: (lambda a: nx.sigmoid(a), [leaf(r, 5)]),
    "gelu": lambda r: (lambda a: nx.gelu(a), [leaf(r, 6)]),
    "softmax": lambda r: (lambda a: nx.softmax(a, axis=-1) * Tensor(np.arange(12.0).reshape(3, 4)), [leaf(r, 3, 4)]),
    "matmul": lambda r: (lambda a, b: nx.matmul(a, b), [leaf(r, 2, 3, 4), leaf(r, 2, 4, 5)]),
    "linear": lambda r: (lambda x, w, b: nx.linear(x, w, b), [leaf(r, 2, 5, 3), leaf(r, 4, 3), leaf(r, 4)]),
    "conv": lambda r: (lambda x, w, b: nx.conv2d(x, w, b, stride=2, padding=1), [leaf(r, 2, 2, 6, 6), leaf(r, 3, 2, 3, 3), leaf(r, 3)]),
    "conv1x1": lambda r: (lambda x, w, b: nx.conv2d(x, w, b), [leaf(r, 1, 3, 4, 4), leaf(r, 2, 3, 1, 1), leaf(r, 2)]),
    "pool": lambda r: (lambda x: nx.window_avg_pool(x, 2), [leaf(r, 2, 4, 6)]),
    "resize": lambda r: (lambda x: nx.bilinear_resize(x, 5, 3), [leaf(r, 2, 3, 4)]),
    "concat": lambda r: (lambda a, b: nx.concat([a, b, a], axis=1), [leaf(r, 2, 3), leaf(r, 2, 2)]),
    "stack": lambda r: (lambda a, b: nx.stack([a, b], axis=0), [leaf(r, 3), leaf(r, 3)]),
    "sum": lambda r: (lambda a: nx.reduce_sum(a, axis=1, keepdims=True), [leaf(r, 3, 4)]),
    "mean": lambda r: (lambda a: nx.reduce_mean(a, axis=0), [leaf(r, 3, 4)]),
    "cumsum": lambda r: (lambda a: nx.cumsum(a, axis=-1), [leaf(r, 2, 5)]),
    "reshape_permute": lambda r: (lambda a: nx.permute(nx.reshape(a, (3, 2, 2)), (2, 0, 1)), [leaf(r, 12)]),
    "getitem": lambda r: (lambda a: a[1:, ::2], [leaf(r, 3, 4)]),
    "square": lambda r: (lambda a: nx.square(a), [leaf(r, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(double, name):
    r = np.random.default_rng(zlib.crc32(name.encode()))
    op, inputs = PRIMITIVES[name](r)
    weights = Tensor(r.standard_normal(op(*inputs).shape))
    rep = nx.grad_check(lambda: (op(*inputs) * weights).sum(), inputs, eps=1e-5, tol=1e-4)
    assert rep.passed, rep.max_rel_error


def test_leaf_accumulates_over_reuse(double):
    x = Tensor([2.0], requires_grad=True)
    (x * x + x * 3.0).sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_sqrt_zero_subgradient(double):
    x = Tensor([0.0, 4.0], requires_grad=True)
    nx.sqrt(x).sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.25])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert nx.is_grad_enabled()


def test_precision_switch():
    assert nx.default_dtype() == np.float32
    with nx.precision("double"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ArgumentError):
        with nx.precision("half"):
            pass


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 16))
def test_broadcast_gradient_shapes(rows, cols, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.standard_normal((rows, cols)), requires_grad=True)
    b = Tensor(r.standard_normal((1, cols)), requires_grad=True)
    ((a + b) * (a - b)).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, -2 * b.data * rows, rtol=1e-5)
