"""Central finite differences, used as an independent oracle for backward."""
import numpy as np

from .array import DiffArray, no_grad


def _eval(fn):
    with no_grad():
        out = fn()
    return float(np.asarray(getattr(out, "data", out)))


def numerical_grad(fn, arrays, step=1e-5):
    """d fn() / d array for each array, perturbing ``array.data`` in place.

    ``fn`` must rebuild its output from the current data on every call and
    return a scalar DiffArray (or float).
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a.data)
        # index in place: reshape(-1) would copy a non-contiguous array
        for i in np.ndindex(a.data.shape):
            orig = a.data[i]
            a.data[i] = orig + step
            fp = _eval(fn)
            a.data[i] = orig - step
            fm = _eval(fn)
            a.data[i] = orig
            g[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / den).max()) if a.size else 0.0


def check_gradients(fn, arrays, step=1e-5, floor=1e-6):
    """Return the worst relative error between backward and finite differences.

    ``floor`` bounds the denominator; central differences carry roughly
    ``eps * |f| / step`` of round-off, so gradients far below that are noise.
    """
    for a in arrays:
        a.grad = None
    out = fn()
    out.backward()
    analytic = [a.grad if a.grad is not None else np.zeros_like(a.data) for a in arrays]
    numeric = numerical_grad(fn, arrays, step)
    return max(max_rel_error(x, y, floor) for x, y in zip(analytic, numeric))


def random_array(rng, shape, scale=1.0):
    return DiffArray(rng.normal(0.0, scale, size=shape), requires_grad=True)
