"""Numerical core: tensors with reverse-mode autodiff, seeded RNG streams, optimizers."""

from .nn import MLP, Linear
from .optim import SGD, Adam, Optimizer, clip_grad_norm, make_optimizer, opt_step
from .rng import Rng, rng_gaussian
from .tensor import (
    DomainError,
    NonFiniteError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp,
    concat,
    div,
    elementwise,
    exp,
    get_tape,
    getitem,
    log,
    log_softmax,
    matmul,
    mul,
    no_grad,
    power,
    reshape,
    square,
    sub,
    tanh,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "Adam",
    "DomainError",
    "Linear",
    "MLP",
    "NonFiniteError",
    "Optimizer",
    "Rng",
    "SGD",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "clamp",
    "clip_grad_norm",
    "concat",
    "div",
    "elementwise",
    "exp",
    "get_tape",
    "getitem",
    "log",
    "log_softmax",
    "make_optimizer",
    "matmul",
    "mul",
    "no_grad",
    "opt_step",
    "power",
    "reshape",
    "rng_gaussian",
    "square",
    "sub",
    "tanh",
    "tmean",
    "transpose",
    "tsum",
]
