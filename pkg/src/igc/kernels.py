"""Hot numeric kernels, each in a numba loop form and a vectorised numpy form.

The public names at the bottom of the module are bound to one of the two
according to ``igc._accel.BACKEND``.  Both variants stay importable so the
benchmark and the tests can compare them directly.
"""
import numpy as np

from ._accel import BACKEND, njit

PLACEHOLDER = 10  # class index of the left-aligned "no digit" symbol


# ---------------------------------------------------------------------------
# embedding backward
# ---------------------------------------------------------------------------


def scatter_add_rows_numpy(out, ids, g):
    np.add.at(out, ids, g)
    return out


@njit
def scatter_add_rows_numba(out, ids, g):
    n, d = g.shape
    for i in range(n):
        r = ids[i]
        for j in range(d):
            out[r, j] += g[i, j]
    return out


# ---------------------------------------------------------------------------
# layer norm over the last axis of a 2-D view
# ---------------------------------------------------------------------------


def layer_norm_fwd_numpy(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gamma + beta, xhat, rstd


@njit
def layer_norm_fwd_numba(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n)
    for i in range(n):
        m = 0.0
        for j in range(d):
            m += x[i, j]
        m /= d
        v = 0.0
        for j in range(d):
            c = x[i, j] - m
            v += c * c
        r = 1.0 / np.sqrt(v / d + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - m) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


def layer_norm_bwd_numpy(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    d = xhat.shape[1]
    dx = rstd[:, None] * (gx - gx.mean(axis=1, keepdims=True)
                          - xhat * (gx * xhat).sum(axis=1, keepdims=True) / d)
    return dx, dgamma, dbeta


@njit
def layer_norm_bwd_numba(g, xhat, rstd, gamma):
    n, d = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gx = g[i, j] * gamma[j]
            s1 += gx
            s2 += gx * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        s1 /= d
        s2 /= d
        r = rstd[i]
        for j in range(d):
            dx[i, j] = r * (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# fused softmax cross-entropy: summed loss and d(sum)/d(logits)
# ---------------------------------------------------------------------------


def softmax_xent_numpy(logits, targets, mask):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(logits.shape[0])
    tgt = np.where(mask, targets, 0)
    loss = -(logp[rows, tgt] * mask).sum()
    grad = e / s
    grad[rows, tgt] -= 1.0
    grad *= mask[:, None]
    return loss, grad


@njit
def softmax_xent_numba(logits, targets, mask):
    n, c = logits.shape
    grad = np.zeros_like(logits)
    loss = 0.0
    for i in range(n):
        if not mask[i]:
            continue
        m = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(c):
            e = np.exp(logits[i, j] - m)
            grad[i, j] = e
            s += e
        for j in range(c):
            grad[i, j] /= s
        t = targets[i]
        loss -= logits[i, t] - m - np.log(s)
        grad[i, t] -= 1.0
    return loss, grad


# ---------------------------------------------------------------------------
# digit blocks: argmax-decode and one-hot encode, batched
# ---------------------------------------------------------------------------


def decode_left_numpy(probs):
    cls = probs.argmax(axis=2)
    n, w = cls.shape
    is_ph = cls == PLACEHOLDER
    first = np.where(is_ph.any(axis=1), is_ph.argmax(axis=1), w)
    digits = np.where(np.arange(w)[None, :] < first[:, None], cls, 0).astype(np.int64)
    pw = 10 ** np.arange(w - 1, -1, -1, dtype=np.int64)
    val = (digits * pw).sum(axis=1) // (10 ** (w - first)).astype(np.int64)
    return np.where(first == 0, -1, val)


@njit
def decode_left_numba(probs):
    n, w, c = probs.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        v = 0
        empty = False
        for s in range(w):
            best = 0
            for k in range(1, c):
                if probs[i, s, k] > probs[i, s, best]:
                    best = k
            if best == PLACEHOLDER:
                if s == 0:
                    empty = True
                break
            v = v * 10 + best
        out[i] = -1 if empty else v
    return out


def decode_right_numpy(probs):
    cls = probs.argmax(axis=2).astype(np.int64)
    w = cls.shape[1]
    pw = 10 ** np.arange(w - 1, -1, -1, dtype=np.int64)
    return (cls * pw).sum(axis=1)


@njit
def decode_right_numba(probs):
    n, w, c = probs.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        v = 0
        for s in range(w):
            best = 0
            for k in range(1, c):
                if probs[i, s, k] > probs[i, s, best]:
                    best = k
            v = v * 10 + best
        out[i] = v
    return out


def encode_left_numpy(values, width):
    """Class indices [n, width]; negative values encode as all-placeholder."""
    n = values.shape[0]
    out = np.full((n, width), PLACEHOLDER, dtype=np.int64)
    for i in range(n):
        v = int(values[i])
        if v < 0:
            continue
        s = str(v)
        out[i, :len(s)] = np.frombuffer(s.encode(), dtype=np.uint8) - 48
    return out


@njit
def encode_left_numba(values, width):
    n = values.shape[0]
    out = np.full((n, width), PLACEHOLDER, dtype=np.int64)
    buf = np.empty(width, dtype=np.int64)
    for i in range(n):
        v = values[i]
        if v < 0:
            continue
        k = 0
        if v == 0:
            buf[0] = 0
            k = 1
        while v > 0:
            buf[k] = v % 10
            v //= 10
            k += 1
        for s in range(k):
            out[i, s] = buf[k - 1 - s]
    return out


def encode_right_numpy(values, width):
    v = np.maximum(values, 0).astype(np.int64)
    pw = 10 ** np.arange(width - 1, -1, -1, dtype=np.int64)
    return (v[:, None] // pw[None, :]) % 10


@njit
def encode_right_numba(values, width):
    n = values.shape[0]
    out = np.zeros((n, width), dtype=np.int64)
    for i in range(n):
        v = max(values[i], 0)
        for s in range(width - 1, -1, -1):
            out[i, s] = v % 10
            v //= 10
    return out


_IMPLS = {
    "numpy": (scatter_add_rows_numpy, layer_norm_fwd_numpy, layer_norm_bwd_numpy,
              softmax_xent_numpy, decode_left_numpy, decode_right_numpy,
              encode_left_numpy, encode_right_numpy),
    "numba": (scatter_add_rows_numba, layer_norm_fwd_numba, layer_norm_bwd_numba,
              softmax_xent_numba, decode_left_numba, decode_right_numba,
              encode_left_numba, encode_right_numba),
}

(scatter_add_rows, layer_norm_fwd, layer_norm_bwd, softmax_xent,
 decode_left, decode_right, encode_left, encode_right) = _IMPLS[BACKEND]
