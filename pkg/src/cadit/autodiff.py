"""Reverse-mode automatic differentiation over dense float64 tensors.

Operations record themselves on the active :class:`Tape` whenever an input
requires a gradient. ``backward`` walks the tape in exact reverse recording
order; gradients accumulate additively into the ``grad`` buffers of leaf
tensors.

Conventions:

* No broadcasting, except a 0-d tensor (or Python number) combined with a
  tensor of any shape. Anything else needs an explicit :func:`reshape`.
* relu / leaky_relu take the negative-side slope at exactly 0; abs takes 0;
  sqrt takes a zero derivative at 0 (the subgradient of a norm at the origin).
* Convolutions use padding ``(k - 1) // 2``: "same" output for stride 1 and
  ``(size + 2p - k) // stride + 1`` otherwise. A transposed convolution
  returns ``size * stride`` so it is exactly the adjoint of the matching
  stride-``s`` convolution on that size.
* Any forward result containing NaN or Inf raises :class:`NonFiniteError`.
"""
import contextlib
import threading

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _tls():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.default = Tape()
        _state.grad_enabled = True
        _state.kink_log = None
    return _state


class Tensor:
    """A float64 array, optionally participating in gradient recording.

    Leaves created with ``requires_grad=True`` carry a ``grad`` buffer of the
    same shape. Intermediate results record their producing tape instead.
    """

    __slots__ = ("data", "_requires_grad", "grad", "_tape", "_gen", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self._tape = None
        self._gen = -1
        self.name = name
        self.grad = None
        self._requires_grad = False
        self.requires_grad = requires_grad

    @classmethod
    def _node(cls, data, requires_grad):
        t = object.__new__(cls)
        t.data = data
        t._requires_grad = requires_grad
        t.grad = None
        t._tape = None
        t._gen = -1
        t.name = None
        return t

    @property
    def requires_grad(self):
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag):
        flag = bool(flag)
        if self._tape is not None and not flag:
            raise TapeError("cannot detach a recorded intermediate in place; use .detach()")
        self._requires_grad = flag
        if self._tape is None:
            if flag and self.grad is None:
                self.grad = np.zeros_like(self.data)
            elif not flag:
                self.grad = None

    @property
    def is_leaf(self):
        return self._tape is None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._node(self.data, False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self._requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive operations.

    ``with Tape() as tape:`` makes ``tape`` the recording target for the
    current thread; outside any ``with`` block a per-thread default tape is
    used. A new forward op after ``backward`` starts a fresh recording.
    """

    def __init__(self):
        self.entries = []
        self.generation = 0
        self.done = False

    def __enter__(self):
        _tls().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tls().tapes.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def reset(self):
        self.entries = []
        self.generation += 1
        self.done = False

    def record(self, out, inputs, fn):
        if self.done:
            self.reset()
        out._tape = self
        out._gen = self.generation
        self.entries.append((out, inputs, fn))

    def backward(self, loss):
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("backward: loss was not recorded on this tape")
        if self.done or loss._gen != self.generation:
            raise TapeError("backward called twice without reset (or on a stale loss)")
        if not self.entries:
            raise TapeError("backward: tape is empty")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp._requires_grad:
                    continue
                if inp._tape is None:
                    inp.grad += gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.done = True
        self.entries = []


def current_tape():
    s = _tls()
    return s.tapes[-1] if s.tapes else s.default


def backward(loss):
    """Populate ``grad`` of every requires_grad leaf with d(loss)/d(leaf)."""
    if loss._tape is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        raise TapeError("backward: loss was not produced by any recorded operation")
    loss._tape.backward(loss)


@contextlib.contextmanager
def no_grad():
    s = _tls()
    prev = s.grad_enabled
    s.grad_enabled = False
    try:
        yield
    finally:
        s.grad_enabled = prev


def set_requires_grad(tensors, flag):
    for t in tensors:
        t.requires_grad = flag


# ------------------------------------------------------------------ helpers

def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor._node(np.array(float(x)), False)
    return Tensor(x)


def _finish(op, data, inputs, fn):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite value in output")
    s = _tls()
    if s.grad_enabled and any(t._requires_grad for t in inputs):
        out = Tensor._node(data, True)
        current_tape().record(out, inputs, fn)
        return out
    return Tensor._node(data, False)


def _kink(values):
    """Log inputs of non-smooth ops while a gradient check is sampling."""
    log = _tls().kink_log
    if log is not None:
        log.append(np.array(values, dtype=np.float64))


def _same_or_scalar(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, t):
    return np.asarray(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


# --------------------------------------------------------------- primitives

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_or_scalar("add", a, b)
    with np.errstate(all="ignore"):
        out = a.data + b.data
    return _finish("add", out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_or_scalar("sub", a, b)
    with np.errstate(all="ignore"):
        out = a.data - b.data
    return _finish("sub", out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_or_scalar("mul", a, b)
    ad, bd = a.data, b.data
    with np.errstate(all="ignore"):
        out = ad * bd
    return _finish("mul", out, (a, b),
                   lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def scalar_mul(a, c):
    c = float(c)
    with np.errstate(all="ignore"):
        out = a.data * c
    return _finish("scalar_mul", out, (a,), lambda g: (g * c,))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _finish("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bias_add(x, b):
    """Add a per-channel bias ``b`` of shape (C,) along axis 1 of ``x``."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: incompatible shapes {x.shape} and {b.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _finish("bias_add", x.data + b.data.reshape(view), (x, b),
                   lambda g: (g, g.sum(axis=axes)))


def _conv_checks(op, x, w, stride):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{op}: expected 4-d input and weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"{op}: kernel must be square, got {w.shape}")
    if stride < 1:
        raise ValueError(f"{op}: stride must be >= 1")


def conv2d(x, w, stride=1):
    """Cross-correlation of ``x`` (n, c_in, h, w) with ``w`` (c_out, c_in, k, k)."""
    _conv_checks("conv2d", x, w, stride)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    k = w.shape[2]
    pad = (k - 1) // 2
    h, wd = x.shape[2], x.shape[3]
    if _kernels.conv_out_size(h, k, stride, pad) < 1 or _kernels.conv_out_size(wd, k, stride, pad) < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    wdat = w.data
    out, cols = _kernels.conv2d(x.data, wdat, stride, pad)

    def fn(g):
        gx = _kernels.conv2d_grad_input(g, wdat, stride, pad, h, wd) if x._requires_grad else None
        gw = _kernels.conv2d_grad_weight(cols, g, x.shape[1], k) if w._requires_grad else None
        return gx, gw

    return _finish("conv2d", out, (x, w), fn)


def conv2d_transpose(y, w, stride=1):
    """Adjoint of :func:`conv2d`: ``w`` is (c_in_of_y, c_out, k, k) and the
    output spatial size is ``size * stride``."""
    _conv_checks("conv2d_transpose", y, w, stride)
    if y.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d_transpose: input channels {y.shape} do not match weight {w.shape}")
    k = w.shape[2]
    pad = (k - 1) // 2
    h, wd = y.shape[2] * stride, y.shape[3] * stride
    if _kernels.conv_out_size(h, k, stride, pad) != y.shape[2]:
        raise ShapeError(f"conv2d_transpose: kernel {w.shape} with stride {stride} "
                         f"cannot invert to size {h}")
    yd, wdat = y.data, w.data
    out = _kernels.conv2d_grad_input(yd, wdat, stride, pad, h, wd)

    def fn(g):
        gcols = None
        gy = None
        if y._requires_grad or w._requires_grad:
            gy, gcols = _kernels.conv2d(g, wdat, stride, pad)
        if not y._requires_grad:
            gy = None
        # d<conv(g, w), y>/dw: columns of g against y
        gw = _kernels.conv2d_grad_weight(gcols, yd, g.shape[1], k) if w._requires_grad else None
        return gy, gw

    return _finish("conv2d_transpose", out, (y, w), fn)


def relu(x):
    _kink(x.data)
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    _kink(x.data)
    scale = np.where(x.data > 0, 1.0, slope)
    return _finish("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x):
    out = np.tanh(x.data)
    return _finish("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return _finish("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x):
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _finish("softmax", out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x):
    """Numerically stable log of :func:`softmax` over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _finish("log_softmax", out, (x,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def log(x):
    with np.errstate(all="ignore"):
        out = np.log(x.data)
    xd = x.data
    return _finish("log", out, (x,), lambda g: (g / xd,))


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _finish("exp", out, (x,), lambda g: (g * out,))


def abs(x):  # noqa: A001 - mirrors the op name
    _kink(x.data)
    sign = np.sign(x.data)
    return _finish("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x):
    xd = x.data
    return _finish("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x):
    if (x.data < 0).any():
        raise ValueError("sqrt: negative input")
    _kink(x.data)
    out = np.sqrt(x.data)
    safe = np.where(out > 0, out, 1.0)
    deriv = np.where(out > 0, 0.5 / safe, 0.0)
    return _finish("sqrt", out, (x,), lambda g: (g * deriv,))


def clamp_max(x, limit):
    """Elementwise ``min(x, limit)``; derivative 0 at the tie."""
    limit = float(limit)
    _kink(x.data - limit)
    mask = x.data < limit
    return _finish("clamp_max", np.where(mask, x.data, limit), (x,), lambda g: (g * mask,))


def reduce_sum(x, axis=None):
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _finish("reduce_sum", out, (x,), fn)


def reduce_mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError(f"reduce_mean: empty reduction over shape {x.shape}")
    return scalar_mul(reduce_sum(x, axis), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref))
                                     if i != axis % len(ref)):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _finish("concat", out, tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _finish("reshape", out, (x,), lambda g: (g.reshape(old),))


def pairwise_sq_dist(x):
    """(n, d) -> (n, n) matrix of squared Euclidean distances between rows."""
    if x.ndim != 2:
        raise ShapeError(f"pairwise_sq_dist: expected 2-d input, got {x.shape}")
    xd = x.data
    out = _kernels.pairwise_sq_dist(xd)

    def fn(g):
        s = g + g.T
        return (2.0 * (s.sum(axis=1)[:, None] * xd - s @ xd),)

    return _finish("pairwise_sq_dist", out, (x,), fn)


# --------------------------------------------------------------- grad check

def grad_check(function, point, step=1e-5, coords=None):
    """Max relative error between analytic and central-difference gradients.

    ``function(point)`` must return a scalar Tensor; ``point`` is perturbed in
    place. Error per coordinate is ``|a - n| / max(1, |a|, |n|)``. Coordinates
    whose perturbation moves the input of a kinked op (relu, leaky_relu, abs,
    sqrt, clamp_max) while it sits within ``10 * step`` of its kink are
    excluded. ``coords`` optionally restricts the check to flat indices.
    Returns 0.0 if every coordinate was excluded.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    s = _tls()
    was = point.requires_grad
    if point._tape is not None:
        raise TapeError("grad_check: point must be a leaf tensor")
    point.requires_grad = True
    point.zero_grad()
    with Tape() as tape:
        out = function(point)
        if out.data.size != 1:
            raise ShapeError(f"grad_check: function output must be scalar, got {out.shape}")
        tape.backward(out)
    analytic = point.grad.ravel().copy()
    point.requires_grad = was

    def evaluate():
        s.kink_log = []
        try:
            with no_grad():
                val = float(function(point).data)
            return val, s.kink_log
        finally:
            s.kink_log = None

    flat = point.data.reshape(-1)
    _, base_kinks = evaluate()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp, kp = evaluate()
        flat[i] = orig - step
        fm, km = evaluate()
        flat[i] = orig
        if _near_kink(base_kinks, kp, km, 10.0 * step):
            continue
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[i]
        err = np.abs(a - numeric) / max(1.0, np.abs(a), np.abs(numeric))
        worst = max(worst, err)
    return float(worst)


def _near_kink(base, plus, minus, radius):
    for b, p, m in zip(base, plus, minus):
        moved = (p != m) | (p != b)
        if not moved.any():
            continue
        lo = np.minimum(np.minimum(np.abs(b), np.abs(p)), np.abs(m))
        if (moved & (lo < radius)).any():
            return True
        if (np.sign(p) != np.sign(m))[moved].any():
            return True
    return False
