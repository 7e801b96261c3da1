"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``VBDA_BACKEND=numpy`` to
force the fallback; the default is ``numba`` when it can be imported.
Both namespaces are always importable from here so the benchmark and the
agreement tests can run them side by side.
"""

import os
import types

import numpy as np

PROB_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# numpy reference path


def _np_softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_rows_backward(y, g):
    inner = (g * y).sum(axis=1, keepdims=True)
    return y * (g - inner)


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _np_gaussian_kl_rows(mu, log_var):
    # grouped as (mu^2 + e^lv) - (lv + 1) so rounding can never go below zero
    return 0.5 * ((mu * mu + np.exp(log_var)) - (log_var + 1.0)).sum(axis=1)


def _np_nll_rows(probs, labels):
    picked = probs[np.arange(probs.shape[0]), labels]
    return -np.log(np.clip(picked, PROB_FLOOR, 1.0))


numpy_kernels = types.SimpleNamespace(
    name="numpy",
    softmax_rows=_np_softmax_rows,
    softmax_rows_backward=_np_softmax_rows_backward,
    sigmoid=_np_sigmoid,
    adam_update=_np_adam_update,
    gaussian_kl_rows=_np_gaussian_kl_rows,
    nll_rows=_np_nll_rows,
)


# ---------------------------------------------------------------------------
# numba path


def _build_numba_kernels():
    import numba

    njit = numba.njit(cache=True, nogil=True)

    @njit
    def softmax_rows(x):
        m, k = x.shape
        out = np.empty_like(x)
        for i in range(m):
            top = x[i, 0]
            for j in range(1, k):
                if x[i, j] > top:
                    top = x[i, j]
            total = 0.0
            for j in range(k):
                e = np.exp(x[i, j] - top)
                out[i, j] = e
                total += e
            for j in range(k):
                out[i, j] /= total
        return out

    @njit
    def softmax_rows_backward(y, g):
        m, k = y.shape
        out = np.empty_like(y)
        for i in range(m):
            inner = 0.0
            for j in range(k):
                inner += g[i, j] * y[i, j]
            for j in range(k):
                out[i, j] = y[i, j] * (g[i, j] - inner)
        return out

    @njit
    def _sigmoid_flat(x, out):
        for i in range(x.size):
            xi = x[i]
            if xi >= 0:
                out[i] = 1.0 / (1.0 + np.exp(-xi))
            else:
                ex = np.exp(xi)
                out[i] = ex / (1.0 + ex)

    def sigmoid(x):
        x = np.ascontiguousarray(x)
        out = np.empty_like(x)
        _sigmoid_flat(x.reshape(-1), out.reshape(-1))
        return out

    @njit
    def _adam_flat(p, g, m, v, lr, beta1, beta2, eps, t):
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for i in range(p.size):
            gi = g[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
            m_hat = m[i] / c1
            v_hat = v[i] / c2
            p[i] -= lr * m_hat / (np.sqrt(v_hat) + eps)

    def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
        # in place; every array must be C-contiguous so reshape(-1) is a view
        _adam_flat(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                   m.reshape(-1), v.reshape(-1),
                   float(lr), float(beta1), float(beta2), float(eps), float(t))

    @njit
    def gaussian_kl_rows(mu, log_var):
        n, d = mu.shape
        out = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += (mu[i, j] * mu[i, j] + np.exp(log_var[i, j])) - (log_var[i, j] + 1.0)
            out[i] = 0.5 * acc
        return out

    @njit
    def nll_rows(probs, labels):
        n = probs.shape[0]
        out = np.empty(n)
        for i in range(n):
            p = probs[i, labels[i]]
            if p < PROB_FLOOR:
                p = PROB_FLOOR
            elif p > 1.0:
                p = 1.0
            out[i] = -np.log(p)
        return out

    return types.SimpleNamespace(
        name="numba",
        softmax_rows=softmax_rows,
        softmax_rows_backward=softmax_rows_backward,
        sigmoid=sigmoid,
        adam_update=adam_update,
        gaussian_kl_rows=gaussian_kl_rows,
        nll_rows=nll_rows,
    )


try:
    numba_kernels = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is an optional extra
    numba_kernels = None

_requested = os.environ.get("VBDA_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"VBDA_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

kernels = numba_kernels if (_requested == "numba" and numba_kernels is not None) else numpy_kernels
BACKEND = kernels.name
