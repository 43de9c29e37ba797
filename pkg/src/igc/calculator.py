"""Non-differentiable calculator: discretize, compute all four operations, select.

Everything here works on plain numpy arrays and Python ints, so nothing
it produces can carry a gradient back to the Input Mapping.
"""
import json
from dataclasses import dataclass

import numpy as np

from . import codec
from .grammar import OPS

# result flags (bitmask)
INVALID = 1     # an operand decoded to EMPTY
UNDEFINED = 2   # division by zero
INEXACT = 4     # non-integral quotient under the exact division rule
OVERFLOW = 8    # magnitude needs more than `width` digits
FLAG_NAMES = {INVALID: "INVALID", UNDEFINED: "UNDEFINED", INEXACT: "INEXACT", OVERFLOW: "OVERFLOW"}

DIV_EXACT, DIV_TRUNC = "exact", "trunc"


def flag_names(flags):
    return [name for bit, name in FLAG_NAMES.items() if flags & bit]


@dataclass
class CalcRequest:
    a: np.ndarray   # [n, width, classes] distributions
    b: np.ndarray
    op: np.ndarray  # [n, 4]
    alignment: str = codec.LEFT

    def __post_init__(self):
        if self.a.shape != self.b.shape or self.a.ndim != 3:
            raise ValueError(f"operand blocks must share shape [n, width, classes], got {self.a.shape} / {self.b.shape}")
        if self.op.shape != (self.a.shape[0], len(OPS)):
            raise ValueError(f"operator distribution must be [n, 4], got {self.op.shape}")

    @property
    def width(self):
        return self.a.shape[1]

    def __len__(self):
        return self.a.shape[0]

    @classmethod
    def single(cls, a, b, op):
        """From two DigitBlocks and a length-4 operator distribution."""
        return cls(a.probs[None], b.probs[None], np.asarray(op, dtype=np.float64)[None], a.alignment)


@dataclass
class CalcResult:
    magnitude: np.ndarray   # [n, width, classes] one-hot
    sign: np.ndarray        # [n, 2] one-hot (+, -)
    op: np.ndarray          # [n] selected operator index
    a: np.ndarray           # [n] discretized operands, -1 for EMPTY
    b: np.ndarray
    values: list            # exact signed result or None when flagged
    flags: np.ndarray       # [n] bitmask
    alignment: str = codec.LEFT

    def __len__(self):
        return len(self.values)

    @property
    def valid(self):
        return self.flags == 0

    def features(self):
        """Flat float features for the Output Mapping: magnitude, sign, operator, valid."""
        n = len(self)
        return np.concatenate([
            self.magnitude.reshape(n, -1), self.sign,
            np.eye(len(OPS))[self.op], self.valid[:, None].astype(np.float64),
        ], axis=1)

    def log_records(self):
        for i in range(len(self)):
            yield {
                "a": None if self.a[i] < 0 else int(self.a[i]),
                "b": None if self.b[i] < 0 else int(self.b[i]),
                "op": OPS[self.op[i]],
                "result": self.values[i],
                "flags": flag_names(int(self.flags[i])),
            }


def feature_size(width, alignment):
    return width * codec.n_classes(alignment) + 2 + len(OPS) + 1


def discretize(req):
    """Most probable operands and operator.  EMPTY operands come back as -1."""
    a = codec.decode_batch(req.a, req.alignment)
    b = codec.decode_batch(req.b, req.alignment)
    op = np.asarray(req.op).argmax(axis=1)
    return a, b, op


def compute_all(a, b, width=10, division=DIV_EXACT):
    """All four exact results for each operand pair.

    Returns ``(values, flags)`` shaped ``[n][4]`` (Python ints or None) and
    ``[n, 4]``.  Arithmetic is done on Python ints, so nothing can overflow
    silently.
    """
    a = np.atleast_1d(a)
    b = np.atleast_1d(b)
    n = len(a)
    limit = 10 ** width
    values = []
    flags = np.zeros((n, 4), dtype=np.int64)
    for i in range(n):
        x, y = int(a[i]), int(b[i])
        if x < 0 or y < 0:
            values.append([None] * 4)
            flags[i, :] = INVALID
            continue
        row = [x + y, x - y, x * y, None]
        if y == 0:
            flags[i, 3] = UNDEFINED
        elif division == DIV_TRUNC or x % y == 0:
            row[3] = x // y
        else:
            flags[i, 3] = INEXACT
        for k in range(4):
            if row[k] is not None and abs(row[k]) >= limit:
                flags[i, k] |= OVERFLOW
                row[k] = None
        values.append(row)
    return values, flags


def select(values, flags, op_weights, width=10, alignment=codec.LEFT):
    """Weighted sum of the four one-hot encoded results.

    With one-hot weights this is plain selection; writing it as a weighted
    sum keeps a batch with mixed operators a single uniform computation.
    """
    op_weights = np.asarray(op_weights, dtype=np.float64)
    n = len(values)
    mags = np.empty((n, 4), dtype=np.int64)
    negs = np.zeros((n, 4))
    for i in range(n):
        for k in range(4):
            v = values[i][k]
            mags[i, k] = -1 if v is None else abs(v)
            negs[i, k] = 1.0 if (v is not None and v < 0) else 0.0
    cls = codec.encode_classes(mags.reshape(-1), width, alignment).reshape(n, 4, width)
    blocks = codec.one_hot(cls, alignment)                      # [n, 4, W, C]
    signs = np.stack([1.0 - negs, negs], axis=-1)               # [n, 4, 2]
    magnitude = np.einsum("nk,nkwc->nwc", op_weights, blocks)
    sign = np.einsum("nk,nkc->nc", op_weights, signs)
    op = op_weights.argmax(axis=1)
    sel_flags = np.asarray(flags)[np.arange(n), op]
    sel_values = [values[i][op[i]] for i in range(n)]
    return magnitude, sign, op, sel_values, sel_flags


class Calculator:
    """Stateless apart from an invocation counter and an optional JSON-lines log."""

    def __init__(self, width=10, alignment=codec.LEFT, division=DIV_EXACT, log=None):
        self.width = width
        self.alignment = alignment
        self.division = division
        self.log = log
        self.calls = 0

    def __call__(self, req):
        return run_calculator(req, self.division, log=self.log, _counter=self)


def run_calculator(req, division=DIV_EXACT, log=None, _counter=None):
    if _counter is not None:
        _counter.calls += 1
    a, b, op = discretize(req)
    values, flags = compute_all(a, b, req.width, division)
    weights = np.eye(len(OPS))[op]
    magnitude, sign, op_sel, sel_values, sel_flags = select(values, flags, weights, req.width, req.alignment)
    res = CalcResult(magnitude, sign, op_sel, a, b, sel_values, sel_flags, req.alignment)
    if log is not None:
        for rec in res.log_records():
            log.write(json.dumps(rec) + "\n")
    return res


def ground_truth_result(annotations, width=10, alignment=codec.LEFT):
    """CalcResult built from exact annotations (teacher substitution).

    ``annotations`` are ``(op_index, a, b, result)`` tuples; a None result
    marks a sample with no arithmetic (all-EMPTY, INVALID).
    """
    n = len(annotations)
    values = []
    flags = np.zeros(n, dtype=np.int64)
    op = np.zeros(n, dtype=np.int64)
    a = np.full(n, -1, dtype=np.int64)
    b = np.full(n, -1, dtype=np.int64)
    for i, (k, x, y, r) in enumerate(annotations):
        if r is None:
            values.append(None)
            flags[i] = INVALID
            continue
        op[i], a[i], b[i] = k, x, y
        values.append(int(r))
    mags = np.array([-1 if v is None else abs(v) for v in values], dtype=np.int64)
    cls = codec.encode_classes(mags, width, alignment)
    negs = np.array([1.0 if (v is not None and v < 0) else 0.0 for v in values])
    return CalcResult(codec.one_hot(cls, alignment), np.stack([1 - negs, negs], axis=1),
                      op, a, b, values, flags, alignment)
