"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives the quality model needs are provided: affine maps,
2-D convolution, sigmoid / GELU / ReLU, softmax, window pooling, bilinear
resize, concatenation, elementwise arithmetic and reductions.  Every op
records a closure that maps the upstream gradient to gradients of its
inputs; ``Tensor.backward`` walks the graph in reverse topological order
and accumulates into leaf ``.grad`` slots.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ArgumentError, NumericError

_PRECISIONS = {"single": np.float32, "double": np.float64}
_state = {"dtype": np.float32, "grad_enabled": True}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode):
    """Temporarily switch the dtype used for newly created tensors."""
    if mode not in _PRECISIONS:
        raise ArgumentError(f"unknown precision {mode!r}, expected 'single' or 'double'")
    previous = _state["dtype"]
    _state["dtype"] = _PRECISIONS[mode]
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference only)."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled():
    return _state["grad_enabled"]


class Tensor:
    """An n-d float array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.array(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff --------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ArgumentError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ArgumentError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            return
        pending = {id(self): grad}
        for node in reversed(_toposort(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _bad_item(t):
    raise ArgumentError(f"item() needs a single-element tensor, got shape {t.shape}")


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else default_dtype()), dtype=dtype)


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# -- elementwise ----------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def absolute(a):
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a):
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        # zero subgradient at the origin instead of inf * 0
        return (np.divide(g, 2.0 * out, out=np.zeros_like(g), where=out > 0),)

    return _result(out, (a,), backward)


def relu(a):
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_complement_np(x):
    # sigma(x) + sigma(-x) == 1 exactly: the lower half is 1 - upper half,
    # which is an exact subtraction for values in [0.5, 1].
    upper = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, upper, 1.0 - upper).astype(x.dtype, copy=False)


def sigmoid(a, complement_exact=False):
    """Logistic function.

    With ``complement_exact`` the result satisfies ``s(x) + s(-x) == 1``
    bitwise, at the cost of absolute precision for large negative inputs.
    """
    x = a.data
    out = _sigmoid_complement_np(x) if complement_exact else _sigmoid_np(x)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a):
    """GELU, tanh approximation (its derivative is used in backward)."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), backward)


def _check_axis(axis, ndim):
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise ArgumentError(f"axis {axis!r} invalid for a {ndim}-d tensor")
    return int(axis) % ndim


def softmax(a, axis=-1):
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


# -- reductions and shape ops ---------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def cumsum(a, axis=-1):
    axis = _check_axis(axis, a.ndim)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.cumsum(a.data, axis=axis), (a,), backward)


def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes):
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a, index):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ArgumentError("concat needs at least one tensor")
    axis = _check_axis(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [t if t.ndim else reshape(t, (1,)) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ArgumentError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ArgumentError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ArgumentError(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, backward)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation on an (N, C, H, W) batch with zero padding."""
    if x.ndim != 4:
        raise ArgumentError(f"conv2d expects an (N, C, H, W) input, got {x.shape}")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if c != in_c:
        raise ArgumentError(f"conv2d weight expects {in_c} channels, input has {c}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ArgumentError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{w}")
    w2 = weight.data.reshape(out_c, -1)
    pointwise = kh == kw == 1 and stride == 1 and padding == 0

    if pointwise:
        cols = None
        out = np.matmul(w2, x.data.reshape(n, c, h * w)).reshape(n, out_c, h, w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        out = (cols @ w2.T).reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if pointwise:
            g3 = g.reshape(n, out_c, h * w)
            gw = None
            if weight.requires_grad:
                gw = np.einsum("nop,ncp->oc", g3, x.data.reshape(n, c, h * w)).reshape(weight.shape)
            gx = np.matmul(w2.T, g3).reshape(x.shape) if x.requires_grad else None
        else:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_c)
            gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
            gx = None
            if x.requires_grad:
                gcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return _result(out, parents, backward)


# -- spatial resampling -----------------------------------------------------

def window_avg_pool(x, window):
    """Non-overlapping mean over ``window x window`` blocks of the last two axes."""
    window = int(window)
    if window < 1:
        raise ArgumentError(f"pooling window must be positive, got {window}")
    h, w = x.shape[-2:]
    if h % window or w % window:
        raise ArgumentError(f"window {window} does not divide spatial extent {h}x{w}")
    if window == 1:
        return x
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (h // window, window, w // window, window))
    out = blocks.mean(axis=(-3, -1))
    scale = 1.0 / (window * window)

    def backward(g):
        up = np.repeat(np.repeat(g, window, axis=-2), window, axis=-1)
        return (up * scale,)

    return _result(out, (x,), backward)


def _interp_matrix(n_in, n_out, dtype):
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(int)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x, out_h, out_w):
    """Corner-aligned bilinear resampling of the last two axes."""
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"resize target must be positive, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ArgumentError("bilinear_resize needs at least 2 dims")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = _interp_matrix(h, out_h, x.dtype)
    rx = _interp_matrix(w, out_w, x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return _result(out, (x,), backward)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    checked: int = 0
    nonsmooth: dict = field(default_factory=dict)

    @property
    def skipped(self):
        """Number of probes excluded because they straddled a kink."""
        return sum(self.nonsmooth.values())

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self):
        return self.worst <= self.tolerance

    def __bool__(self):
        return self.passed


def _as_named(params):
    if isinstance(params, dict):
        return list(params.items())
    return [(f"param{i}", p) for i, p in enumerate(params)]


def grad_check(f, params, eps=1e-4, tol=1e-4, max_entries=None, seed=0, branch_signature=None):
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` is a list or a name -> Tensor dict of leaves that ``f`` reads.
    ``max_entries`` limits the finite-difference probes to a seeded random
    subset of entries per parameter; ``None`` checks every entry.
    Relative error uses the denominator ``max(|a|, |b|, 1e-8)``.

    Central differences are meaningless across a kink (``abs``, ``relu``).
    ``branch_signature``, if given, is called after each perturbed
    evaluation and returns an array identifying the active branches; probes
    whose signature differs between ``+eps`` and ``-eps`` are counted in
    ``report.nonsmooth`` instead of being compared.
    """
    named = _as_named(params)
    for _, p in named:
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: objective is not finite")
    out.backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tol)
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        with no_grad():
            for idx in indices:
                original = flat[idx]
                flat[idx] = original + eps
                f_plus = f().item()
                sig_plus = None if branch_signature is None else np.asarray(branch_signature())
                flat[idx] = original - eps
                f_minus = f().item()
                sig_minus = None if branch_signature is None else np.asarray(branch_signature())
                flat[idx] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"grad_check: non-finite objective while probing {name}[{idx}]")
                if sig_plus is not None and not np.array_equal(sig_plus, sig_minus):
                    report.nonsmooth[name] = report.nonsmooth.get(name, 0) + 1
                    continue
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(analytic.reshape(-1)[idx])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.checked += len(indices) - report.nonsmooth.get(name, 0)
    return report
