"""Dense float64 arrays with a dynamic reverse-mode tape.

Every primitive records its parents and a closure mapping the output
adjoint to one adjoint per parent.  ``backward`` walks the recorded graph in
reverse topological order.

Broadcasting rule: elementwise binary primitives require identical shapes
unless called with ``broadcast=True``.  With the flag, numpy broadcasting is
allowed as long as only one operand expands (the result shape equals one of
the operand shapes).  Python scalars always combine freely.
"""
from contextlib import contextmanager

import numpy as np

from .. import kernels

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextmanager
def no_grad():
    """Suspend tape recording (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DiffArray:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return DiffArray(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar; strict shapes apply
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_array(x):
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _node(data, parents, backward_fn, op):
    out = DiffArray(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any array with requires_grad")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    adj = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = adj.get(id(p))
            adj[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_binary(op, a, b, broadcast):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if not broadcast:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ "
                         "(pass broadcast=True for trailing-dimension expansion)")
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{op}: ambiguous broadcast of {a.shape} with {b.shape} (both operands expand)")


def _binary(op, a, b, broadcast):
    a, b = as_array(a), as_array(b)
    _check_binary(op, a, b, broadcast)
    return a, b


def add(a, b, broadcast=False):
    a, b = _binary("add", a, b, broadcast)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b, broadcast=False):
    a, b = _binary("sub", a, b, broadcast)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b, broadcast=False):
    a, b = _binary("mul", a, b, broadcast)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b, broadcast=False):
    a, b = _binary("div", a, b, broadcast)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None)
    return _node(a.data / b.data, (a, b), bw, "div")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------


def exp(a):
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a):
    m = a.data > 0
    return _node(a.data * m, (a,), lambda g: (g * m,), "relu")


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a):
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _node(y, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    src = a.shape
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(src)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _node(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(arrays, axis=-1):
    arrays = [as_array(x) for x in arrays]
    ref = arrays[0].shape
    ax = axis % len(ref)
    for x in arrays[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in arrays]} along axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))
    return _node(np.concatenate([x.data for x in arrays], axis=ax), tuple(arrays), bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """``a[..., n, k] @ b[k, m]`` or with identical leading batch dimensions."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions do not match for {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}")
    shared = b.ndim == 2

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb
    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b, broadcast=True)


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _node(y, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _node(y, (a,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last dim of {x.shape}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)
    shape = x.shape

    def bw(g):
        dx, dg, db = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gamma.data)
        return dx.reshape(shape), dg, db
    return _node(y.reshape(shape), (x, gamma, beta), bw, "layer_norm")


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    flat = ids.reshape(-1)
    d = table.shape[1]

    def bw(g):
        out = np.zeros(table.shape)
        kernels.scatter_add_rows(out, flat, np.ascontiguousarray(g.reshape(-1, d)))
        return (out,)
    return _node(table.data[ids], (table,), bw, "embedding")


def attention(q, k, v, causal=False, mask=None, return_weights=False):
    """Scaled dot-product attention over the last two axes.

    ``q[..., Tq, dh]``, ``k[..., Tk, dh]``, ``v[..., Tk, dv]``.  ``causal``
    lets query i see keys j <= i + (Tk - Tq).  ``mask`` is a boolean array
    broadcastable to ``[..., Tq, Tk]`` (True = visible).  Rows with no
    visible key produce zeros.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    tq, tk = q.shape[-2], k.shape[-2]
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    vis = np.ones((tq, tk), dtype=bool)
    if causal:
        vis = np.tril(vis, k=tk - tq)
    if mask is not None:
        vis = vis & np.asarray(mask, dtype=bool)
    vis = np.broadcast_to(vis, s.shape)
    s = np.where(vis, s, -np.inf)
    smax = s.max(axis=-1, keepdims=True)
    smax = np.where(np.isfinite(smax), smax, 0.0)
    e = np.exp(s - smax)
    den = e.sum(axis=-1, keepdims=True)
    p = e / np.where(den > 0, den, 1.0)
    out = p @ v.data

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g if v.requires_grad else None
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        gq = ds @ k.data if q.requires_grad else None
        gk = np.swapaxes(ds, -1, -2) @ q.data if k.requires_grad else None
        return gq, gk, gv
    node = _node(out, (q, k, v), bw, "attention")
    return (node, p) if return_weights else node


def cross_entropy(logits, targets, mask=None, reduction="mean"):
    """Softmax cross-entropy over the last axis with integer targets.

    ``reduction='mean'`` divides by the number of unmasked rows, ``'sum'``
    returns the plain sum.
    """
    c = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    m = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != targets.shape:
        raise ShapeError(f"cross_entropy: mask {m.shape} does not match targets {targets.shape}")
    t = targets.reshape(-1)
    mf = m.reshape(-1)
    if np.any((t[mf] < 0) | (t[mf] >= c)):
        raise ShapeError(f"cross_entropy: target class out of range for {c} classes")
    t = np.where(mf, t, 0)
    loss, grad = kernels.softmax_xent(np.ascontiguousarray(logits.data.reshape(-1, c)), t, mf)
    denom = max(int(mf.sum()), 1) if reduction == "mean" else 1
    shape = logits.shape

    def bw(g):
        return ((grad * (float(g) / denom)).reshape(shape),)
    return _node(np.asarray(loss / denom), (logits,), bw, "cross_entropy")
