from .array import (
    DiffArray,
    ShapeError,
    add,
    as_array,
    attention,
    backward,
    concat,
    cross_entropy,
    div,
    embedding,
    exp,
    getitem,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum_,
    swapaxes,
    tanh,
    transpose,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import SGD, Adam, MissingGradError, make_optimizer
