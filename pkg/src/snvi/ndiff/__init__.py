"""Minimal reverse-mode autodiff core and stochastic-gradient optimizer."""

from .graph import (
    ContractError,
    DimensionError,
    Node,
    add,
    backward,
    clip,
    concat,
    constant,
    cumsum,
    div,
    exp,
    gather,
    is_node,
    log,
    logsumexp,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    square,
    stop_gradient,
    sub,
    sum,
    take,
    tanh,
    value_of,
    variable,
    where,
)
from .optim import ParamStore, Parameter, adam_step, grad_map

__all__ = [
    "ContractError",
    "DimensionError",
    "Node",
    "ParamStore",
    "Parameter",
    "adam_step",
    "add",
    "backward",
    "clip",
    "concat",
    "constant",
    "cumsum",
    "div",
    "exp",
    "gather",
    "grad_map",
    "is_node",
    "log",
    "logsumexp",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "mul",
    "neg",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "softplus",
    "sqrt",
    "square",
    "stop_gradient",
    "sub",
    "sum",
    "take",
    "tanh",
    "value_of",
    "variable",
    "where",
]
