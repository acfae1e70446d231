"""Minimal reverse-mode automatic differentiation on dense float64 arrays."""
from .optim import AdamW, AdamWState, adamw_step
from .tensor import (
    ShapeError, Tape, Tensor, add, concat, cos, dropout, grad_enabled, index_select, matmul, mean,
    mul, neg, no_grad, relu, reshape, scatter_add, sin, spmm, square, sub, sum, take, tensor,
)

__all__ = [
    "AdamW", "AdamWState", "adamw_step", "ShapeError", "Tape", "Tensor", "add", "concat", "cos",
    "dropout", "grad_enabled", "index_select", "matmul", "mean", "mul", "neg", "no_grad", "relu",
    "reshape", "scatter_add", "sin", "spmm", "square", "sub", "sum", "take", "tensor",
]
