"""Row-wise numeric kernels with a numba path and a pure-numpy path.

Every kernel works on a C-contiguous 2-D float64 array whose last axis is
the reduction axis. The numba path is used when numba imports cleanly and
``MEMEPAIR_DISABLE_NUMBA`` is unset or ``0``; set it to ``1`` to force the
numpy path. Both paths are always importable under ``numpy_impl`` and
``numba_impl`` (the latter is ``None`` without numba) so they can be
benchmarked side by side.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def _np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def _np_layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layer_norm_bwd(dy, xhat, rstd, gamma):
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _np_gelu_bwd(x, dy):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def _np_pairwise_wins(pos, neg):
    # chunked so memory stays bounded for large sets
    total = 0.0
    step = max(1, 4_000_000 // max(1, neg.size))
    for i in range(0, pos.size, step):
        p = pos[i : i + step, None]
        total += float((p > neg[None, :]).sum()) + 0.5 * float((p == neg[None, :]).sum())
    return total


numpy_impl = SimpleNamespace(
    name="numpy",
    softmax_fwd=_np_softmax_fwd,
    softmax_bwd=_np_softmax_bwd,
    layer_norm_fwd=_np_layer_norm_fwd,
    layer_norm_bwd=_np_layer_norm_bwd,
    gelu_fwd=_np_gelu_fwd,
    gelu_bwd=_np_gelu_bwd,
    pairwise_wins=_np_pairwise_wins,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


def _build_numba():
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        return None

    jit = njit(cache=True, nogil=True, fastmath=False)

    @jit
    def softmax_fwd(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(m):
                out[i, j] /= s
        return out

    @jit
    def softmax_bwd(y, dy):
        n, m = y.shape
        out = np.empty_like(y)
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += dy[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (dy[i, j] - s)
        return out

    @jit
    def layer_norm_fwd(x, gamma, beta, eps):
        n, m = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                c = x[i, j] - mu
                var += c * c
            var /= m
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(m):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @jit
    def layer_norm_bwd(dy, xhat, rstd, gamma):
        n, m = dy.shape
        dx = np.empty_like(dy)
        dgamma = np.zeros(m)
        dbeta = np.zeros(m)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(m):
                g = dy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                dgamma[j] += dy[i, j] * xhat[i, j]
                dbeta[j] += dy[i, j]
            m1 /= m
            m2 /= m
            for j in range(m):
                dx[i, j] = rstd[i] * (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
        return dx, dgamma, dbeta

    @jit
    def gelu_fwd(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.erf(v / _SQRT2))
        return out

    @jit
    def gelu_bwd(x, dy):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                cdf = 0.5 * (1.0 + math.erf(v / _SQRT2))
                pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
                out[i, j] = dy[i, j] * (cdf + v * pdf)
        return out

    @jit
    def pairwise_wins(pos, neg):
        total = 0.0
        for i in range(pos.size):
            p = pos[i]
            for j in range(neg.size):
                q = neg[j]
                if p > q:
                    total += 1.0
                elif p == q:
                    total += 0.5
        return total

    return SimpleNamespace(
        name="numba",
        softmax_fwd=softmax_fwd,
        softmax_bwd=softmax_bwd,
        layer_norm_fwd=layer_norm_fwd,
        layer_norm_bwd=layer_norm_bwd,
        gelu_fwd=gelu_fwd,
        gelu_bwd=gelu_bwd,
        pairwise_wins=pairwise_wins,
    )


numba_impl = _build_numba()


def numba_disabled() -> bool:
    return os.environ.get("MEMEPAIR_DISABLE_NUMBA", "0").strip() not in ("", "0")


K = numpy_impl if (numba_impl is None or numba_disabled()) else numba_impl
BACKEND: str = K.name
