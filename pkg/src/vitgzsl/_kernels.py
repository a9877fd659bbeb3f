"""Row-wise numeric kernels with two interchangeable backends.

Every kernel exists as a pure numpy function (``*_np``) and, when numba is
importable, as an ``@njit`` loop (``*_nb``).  The dispatching functions at the
bottom pick one based on the ``VITGZSL_NUMBA`` environment variable read at
import time (``0``/``false``/``off`` disables numba); :func:`set_backend`
overrides it at runtime.

All kernels take and return C-contiguous 2-D float64 arrays, one row per
softmax / normalization group.
"""

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

_FALSY = {"0", "false", "no", "off"}

NUMBA_AVAILABLE = numba is not None
_use_numba = NUMBA_AVAILABLE and os.environ.get("VITGZSL_NUMBA", "1").strip().lower() not in _FALSY

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def backend():
    return "numba" if _use_numba else "numpy"


def set_backend(name):
    """Switch between ``"numba"`` and ``"numpy"``; returns the previous name."""
    global _use_numba
    previous = backend()
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


# -- numpy reference path ------------------------------------------------------


def softmax_rows_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_np(x, gain, bias, eps):
    # a constant row takes its first entry as the mean so it centres to exact zeros
    constant = (x == x[:, :1]).all(axis=1, keepdims=True)
    mean = np.where(constant, x[:, :1], x.mean(axis=1, keepdims=True))
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, xhat, rstd[:, 0], int(np.count_nonzero(var == 0.0))


def layer_norm_bwd_np(g, xhat, rstd, gain):
    dxhat = g * gain
    dx = rstd[:, None] * (
        dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_np(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu_bwd_np(x, g):
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def leaky_relu_np(x, slope):
    return np.where(x > 0.0, x, slope * x)


def leaky_relu_bwd_np(x, g, slope):
    return np.where(x > 0.0, g, slope * g)


# -- numba path ----------------------------------------------------------------

if NUMBA_AVAILABLE:

    @numba.njit(cache=True)
    def softmax_rows_nb(x):
        m, n = x.shape
        out = np.empty_like(x)
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(n):
                out[i, j] *= inv
        return out

    @numba.njit(cache=True)
    def softmax_rows_bwd_nb(y, g):
        m, n = y.shape
        out = np.empty_like(y)
        for i in range(m):
            dot = 0.0
            for j in range(n):
                dot += g[i, j] * y[i, j]
            for j in range(n):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @numba.njit(cache=True)
    def _layer_norm_nb(x, gain, bias, eps):
        m, n = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(m)
        degenerate = 0
        for i in range(m):
            mean = 0.0
            constant = True
            for j in range(n):
                mean += x[i, j]
                if x[i, j] != x[i, 0]:
                    constant = False
            mean = x[i, 0] if constant else mean / n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mean
                var += d * d
            var /= n
            if var == 0.0:
                degenerate += 1
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(n):
                h = (x[i, j] - mean) * r
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]
        return y, xhat, rstd, degenerate

    def layer_norm_nb(x, gain, bias, eps):
        y, xhat, rstd, degenerate = _layer_norm_nb(x, gain, bias, eps)
        return y, xhat, rstd, int(degenerate)

    @numba.njit(cache=True)
    def layer_norm_bwd_nb(g, xhat, rstd, gain):
        m, n = g.shape
        dx = np.empty_like(g)
        dgain = np.zeros(n)
        dbias = np.zeros(n)
        for i in range(m):
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                d = g[i, j] * gain[j]
                s1 += d
                s2 += d * xhat[i, j]
                dgain[j] += g[i, j] * xhat[i, j]
                dbias[j] += g[i, j]
            s1 /= n
            s2 /= n
            for j in range(n):
                dx[i, j] = rstd[i] * (g[i, j] * gain[j] - s1 - xhat[i, j] * s2)
        return dx, dgain, dbias

    @numba.njit(cache=True)
    def gelu_nb(x):
        out = np.empty_like(x)
        m, n = x.shape
        for i in range(m):
            for j in range(n):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.tanh(GELU_C * (v + GELU_A * v * v * v)))
        return out

    @numba.njit(cache=True)
    def gelu_bwd_nb(x, g):
        out = np.empty_like(x)
        m, n = x.shape
        for i in range(m):
            for j in range(n):
                v = x[i, j]
                t = math.tanh(GELU_C * (v + GELU_A * v * v * v))
                dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                out[i, j] = g[i, j] * (0.5 * (1.0 + t) + 0.5 * v * dt)
        return out

    @numba.njit(cache=True)
    def leaky_relu_nb(x, slope):
        out = np.empty_like(x)
        m, n = x.shape
        for i in range(m):
            for j in range(n):
                v = x[i, j]
                out[i, j] = v if v > 0.0 else slope * v
        return out

    @numba.njit(cache=True)
    def leaky_relu_bwd_nb(x, g, slope):
        out = np.empty_like(g)
        m, n = x.shape
        for i in range(m):
            for j in range(n):
                out[i, j] = g[i, j] if x[i, j] > 0.0 else slope * g[i, j]
        return out


# -- dispatch ------------------------------------------------------------------


def _jit_ok(*arrays):
    return _use_numba and all(a.dtype == np.float64 for a in arrays)


def softmax_rows(x):
    return softmax_rows_nb(x) if _jit_ok(x) else softmax_rows_np(x)


def softmax_rows_bwd(y, g):
    return softmax_rows_bwd_nb(y, g) if _jit_ok(y, g) else softmax_rows_bwd_np(y, g)


def layer_norm(x, gain, bias, eps):
    if _jit_ok(x, gain, bias):
        return layer_norm_nb(x, gain, bias, eps)
    return layer_norm_np(x, gain, bias, eps)


def layer_norm_bwd(g, xhat, rstd, gain):
    if _jit_ok(g, xhat, rstd, gain):
        return layer_norm_bwd_nb(g, xhat, rstd, gain)
    return layer_norm_bwd_np(g, xhat, rstd, gain)


def gelu(x):
    return gelu_nb(x) if _jit_ok(x) else gelu_np(x)


def gelu_bwd(x, g):
    return gelu_bwd_nb(x, g) if _jit_ok(x, g) else gelu_bwd_np(x, g)


def leaky_relu(x, slope):
    return leaky_relu_nb(x, slope) if _jit_ok(x) else leaky_relu_np(x, slope)


def leaky_relu_bwd(x, g, slope):
    return leaky_relu_bwd_nb(x, g, slope) if _jit_ok(x, g) else leaky_relu_bwd_np(x, g, slope)
