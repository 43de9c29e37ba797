"""Fixed-width categorical digit blocks at the calculator boundary.

Left alignment (the default) puts the most significant digit in slot 0 and
pads the tail with PLACEHOLDER, giving 11 classes per slot.  Right
alignment zero-pads on the left and needs only the 10 digit classes.

Argmax ties go to the lowest class index (numpy's argmax rule).
"""
from dataclasses import dataclass

import numpy as np

from . import kernels

PLACEHOLDER = kernels.PLACEHOLDER
LEFT, RIGHT = "left", "right"
MAX_WIDTH = 18  # int64 headroom for batched decode


class _Empty:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "EMPTY"

    def __bool__(self):
        return False


EMPTY = _Empty()


class CodecError(ValueError):
    pass


def n_classes(alignment):
    return 11 if alignment == LEFT else 10


def _check(width, alignment):
    if alignment not in (LEFT, RIGHT):
        raise CodecError(f"unknown alignment {alignment!r}")
    if not 1 <= width <= MAX_WIDTH:
        raise CodecError(f"width must be in 1..{MAX_WIDTH}, got {width}")


@dataclass
class DigitBlock:
    probs: np.ndarray  # [width, classes]
    alignment: str = LEFT
    hard: bool = False

    @property
    def width(self):
        return self.probs.shape[0]

    def classes(self):
        return self.probs.argmax(axis=1)

    def is_normalized(self, tol=1e-9):
        return bool(np.all(np.abs(self.probs.sum(axis=1) - 1.0) <= tol))

    def __str__(self):
        return block_string(self)


def encode(n, width=10, alignment=LEFT):
    """One-hot block for the non-negative integer ``n``."""
    _check(width, alignment)
    n = int(n)
    if n < 0:
        raise CodecError(f"cannot encode negative {n}; use sign_extend for signed values")
    if len(str(n)) > width:
        raise CodecError(f"{n} has {len(str(n))} digits, wider than block width {width}")
    cls = encode_classes(np.array([n], dtype=np.int64), width, alignment)[0]
    return DigitBlock(np.eye(n_classes(alignment))[cls], alignment, hard=True)


def encode_classes(values, width, alignment):
    """Batched class indices ``[n, width]``; for left alignment -1 encodes EMPTY."""
    values = np.ascontiguousarray(values, dtype=np.int64)
    if alignment == LEFT:
        return kernels.encode_left(values, width)
    return kernels.encode_right(values, width)


def one_hot(classes, alignment):
    return np.eye(n_classes(alignment))[classes]


def decode(block):
    """Integer value of ``block`` after per-slot argmax, or EMPTY."""
    v = int(decode_batch(block.probs[None], block.alignment)[0])
    return EMPTY if v < 0 else v


def decode_batch(probs, alignment=LEFT):
    """``probs[n, width, classes]`` -> int64 values, -1 for EMPTY blocks."""
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    _check(probs.shape[1], alignment)
    if probs.shape[2] != n_classes(alignment):
        raise CodecError(f"{alignment} blocks need {n_classes(alignment)} classes, got {probs.shape[2]}")
    if alignment == LEFT:
        return kernels.decode_left(probs)
    return kernels.decode_right(probs)


def block_string(block):
    """Compact form such as ``12345678**``."""
    return "".join("*" if c == PLACEHOLDER else str(c) for c in block.classes())


def parse_block(text, alignment=LEFT):
    cls = [PLACEHOLDER if ch == "*" else int(ch) for ch in text]
    if alignment == RIGHT and PLACEHOLDER in cls:
        raise CodecError("right-aligned blocks carry digits only")
    return DigitBlock(np.eye(n_classes(alignment))[cls], alignment, hard=True)


def is_valid_hard_left(classes):
    """Matches d (d|*)* with no digit after the first placeholder."""
    classes = list(classes)
    if not classes or classes[0] == PLACEHOLDER:
        return False
    seen_ph = False
    for c in classes:
        if c == PLACEHOLDER:
            seen_ph = True
        elif seen_ph:
            return False
    return True


@dataclass
class SignedResult:
    magnitude: DigitBlock
    sign: np.ndarray  # one-hot over (+, -)

    @property
    def negative(self):
        return bool(self.sign.argmax() == 1)

    @property
    def value(self):
        m = decode(self.magnitude)
        if m is EMPTY:
            return EMPTY
        return -m if self.negative else m


def sign_extend(block, sign):
    """Attach an explicit sign class; a zero magnitude is always positive."""
    if sign not in ("+", "-"):
        raise CodecError(f"sign must be '+' or '-', got {sign!r}")
    neg = sign == "-" and decode(block) not in (0, EMPTY)
    return SignedResult(block, np.array([0.0, 1.0]) if neg else np.array([1.0, 0.0]))


def encode_signed(n, width=10, alignment=LEFT):
    n = int(n)
    return sign_extend(encode(abs(n), width, alignment), "-" if n < 0 else "+")
