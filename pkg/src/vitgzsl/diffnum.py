"""Tape-based reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded when at least one input requires a gradient; outside a tape every
operation is a plain value computation.  Forward results are always computed in
float64 (or wider) regardless of the storage dtype of the inputs, so float32
parameters accumulate in 64-bit.
"""

import contextlib
import threading
import warnings

import numpy as np

from . import _kernels
from .errors import LabelOutOfRange, NonFiniteGradient, ShapeMismatch, TapeError

LN_EPS = 1e-5
LEAKY_SLOPE = 0.2

_local = threading.local()


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Run the enclosed code without recording, even inside an active tape."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class DegenerateRowWarning(RuntimeWarning):
    """A layer-norm row had exactly zero variance; its output is the bias."""


def _compute_dtype(dtype):
    return np.result_type(dtype, np.float64)


def _f(x):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.asarray(data, dtype=_compute_dtype(data.dtype))


class Tensor:
    """Dense array carrying an optional gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor with a persistent gradient buffer."""

    def __init__(self, value, name="", dtype=np.float32):
        super().__init__(np.array(value, dtype=dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros(self.data.shape, dtype=_compute_dtype(self.data.dtype))

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros(self.data.shape, dtype=_compute_dtype(self.data.dtype))

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self._records = []
        self._produced = set()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, backward):
        self._records.append((out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss, grad=None):
        """Propagate ``d loss`` to every leaf and clear the tape.

        Leaves receive their gradient in ``.grad`` (accumulated).  Calling
        backward again without recording a new forward pass raises
        :class:`TapeError`.
        """
        if not self._records:
            raise TapeError("backward called with no recorded forward pass")
        if grad is None:
            if loss.size != 1:
                raise ShapeMismatch("backward on a non-scalar needs an explicit seed gradient")
            grad = np.ones(loss.shape)
        grads = {id(loss): np.asarray(grad, dtype=np.float64)}
        produced = self._produced
        records, self._records, self._produced = self._records, [], set()
        for out, inputs, fn in reversed(records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=np.float64)
                else:
                    t.grad = t.grad + gi


def _emit(data, inputs, backward):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(_f(a) + _f(b), (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(_f(a) - _f(b), (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _f(a), _f(b)
    return _emit(x * y, (a, b), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _f(a), _f(b)
    return _emit(
        x / y,
        (a, b),
        lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
    )


def exp(a):
    a = as_tensor(a)
    y = np.exp(_f(a))
    return _emit(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    x = _f(a)
    return _emit(np.log(x), (a,), lambda g: (g / x,))


# -- linear algebra and shape ------------------------------------------------


def matmul(a, b):
    """Batched matrix product ``a @ b`` over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = _f(a), _f(b)

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return _emit(x @ y, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _emit(_f(a).reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(_f(a), axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index):
    a = as_tensor(a)
    src_shape = a.shape

    def backward(g):
        full = np.zeros(src_shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit(_f(a)[index], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    arrays = [_f(t) for t in tensors]
    axis = axis % arrays[0].ndim
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _emit(np.concatenate(arrays, axis=axis), tuple(tensors), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    x = _f(a)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(x.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- neural-network primitives ------------------------------------------------


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_rows(x):
    """Softmax along the last axis (each row sums to one)."""
    x = as_tensor(x)
    data = _f(x)
    y = _kernels.softmax_rows(_rows(data)).reshape(data.shape)
    return _emit(
        y,
        (x,),
        lambda g: (_kernels.softmax_rows_bwd(_rows(y), _rows(np.asarray(g, y.dtype))).reshape(y.shape),),
    )


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize each row over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    data = _f(x)
    if data.shape[-1] < 2:
        raise ShapeMismatch("layer_norm needs at least two features per row")
    if gain.shape != (data.shape[-1],) or bias.shape != (data.shape[-1],):
        raise ShapeMismatch(f"layer_norm gain/bias must have shape ({data.shape[-1]},)")
    gv, bv = np.ascontiguousarray(_f(gain)), np.ascontiguousarray(_f(bias))
    y, xhat, rstd, degenerate = _kernels.layer_norm(_rows(data), gv, bv, eps)
    if degenerate:
        warnings.warn(f"{degenerate} constant row(s) in layer_norm", DegenerateRowWarning, stacklevel=2)

    def backward(g):
        dx, dgain, dbias = _kernels.layer_norm_bwd(_rows(np.asarray(g, y.dtype)), xhat, rstd, gv)
        return dx.reshape(data.shape), dgain, dbias

    return _emit(y.reshape(data.shape), (x, gain, bias), backward)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    data = _f(x)
    rows = _rows(data)
    return _emit(
        _kernels.gelu(rows).reshape(data.shape),
        (x,),
        lambda g: (_kernels.gelu_bwd(rows, _rows(np.asarray(g, rows.dtype))).reshape(data.shape),),
    )


def leaky_relu(x, slope=LEAKY_SLOPE):
    x = as_tensor(x)
    data = _f(x)
    rows = _rows(data)
    return _emit(
        _kernels.leaky_relu(rows, slope).reshape(data.shape),
        (x,),
        lambda g: (_kernels.leaky_relu_bwd(rows, _rows(np.asarray(g, rows.dtype)), slope).reshape(data.shape),),
    )


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def linear(x, weight, bias=None):
    """``x @ weight + bias``; a 1-D ``x`` is treated as a single row."""
    x = as_tensor(x)
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, x.shape[0])), weight), (weight.shape[-1],))
    else:
        y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- losses ------------------------------------------------------------------


def mse_loss(pred, target, reduction="mean"):
    """Squared error, averaged over all elements (``"mean"``) or summed over the
    last axis and averaged over the rest (``"row_sum"``)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    sq = mul(diff, diff)
    if reduction == "row_sum":
        return mean(tsum(sq, axis=-1))
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return mean(sq)


def log_softmax_np(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects logits of shape (m, C), got {logits.shape}")
    labels = np.asarray(labels)
    m, c = logits.shape
    if labels.shape != (m,):
        raise ShapeMismatch(f"expected {m} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    z = _f(logits)
    logp = log_softmax_np(z)
    rows = np.arange(m)
    value = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / m),)

    return _emit(np.asarray(value), (logits,), backward)


# -- optimizer ---------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {getattr(p, 'name', 'parameter')}")
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


# -- verification ------------------------------------------------------------


def gradcheck(f, point, eps=1e-4):
    """Largest relative error between the taped gradient of scalar ``f`` at
    ``point`` and central differences.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    base = np.array(_f(as_tensor(point)), copy=True)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x)
        if y.size != 1:
            raise ShapeMismatch("gradcheck needs a scalar-valued function")
        if len(tape):
            tape.backward(y)
    analytic = np.zeros_like(base) if x.grad is None else np.asarray(x.grad, dtype=base.dtype)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteGradient("analytic gradient contains NaN or Inf")

    numeric = np.empty_like(base)
    flat = x.data.reshape(-1)
    out = numeric.reshape(-1)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    if not np.all(np.isfinite(numeric)):
        raise NonFiniteGradient("finite-difference gradient contains NaN or Inf")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0

