"""Training losses and evaluation metrics.

Per-node squared norms are averaged over all nodes in the batch. The masked
loss divides by the number of unknown entries instead, so it reads as the mean
squared error per predicted quantity.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def mse(y, pred: Tensor) -> Tensor:
    diff = ad.sub(pred, y)
    return ad.mul(ad.sum(ad.square(diff)), 1.0 / pred.shape[0])


def masked_l2(y, pred: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=float)
    count = mask.sum()
    sq = ad.square(ad.mul(ad.sub(pred, y), mask))
    if count == 0:
        return ad.mul(ad.sum(sq), 0.0)
    return ad.mul(ad.sum(sq), 1.0 / count)


def branch_balance(vm, va, src, dst, r, x, n):
    """Per-node ``sum_j V_i conj((V_j - V_i)/z_ij)`` over directed lines ``j -> i``.

    ``vm``/``va`` are tensors of shape ``(n,)``; returns (real, imag) tensors.
    """
    denom = r * r + x * x
    g = r / denom
    b = -x / denom
    vi = ad.index_select(vm, dst)
    vj = ad.index_select(vm, src)
    delta = ad.sub(ad.index_select(va, dst), ad.index_select(va, src))
    vivj = ad.mul(vi, vj)
    cross_re = ad.sub(ad.mul(vivj, ad.cos(delta)), ad.square(vi))
    cross_im = ad.mul(vivj, ad.sin(delta))
    # conj(y) * (V_i conj(V_j) - |V_i|^2) with y = g + jb
    re = ad.add(ad.mul(cross_re, g), ad.mul(cross_im, b))
    im = ad.sub(ad.mul(cross_im, g), ad.mul(cross_re, b))
    return ad.scatter_add(re, dst, n), ad.scatter_add(im, dst, n)


def physical(pred_pu: Tensor, src, dst, edge_attr_pu) -> Tensor:
    """Mean over nodes of squared active plus reactive power imbalance.

    ``pred_pu`` holds per-unit (Vm, theta rad, P, Q) rows and ``edge_attr_pu``
    per-unit (r, x) rows aligned with the directed ``src -> dst`` lines.
    """
    n = pred_pu.shape[0]
    ea = np.asarray(edge_attr_pu, dtype=float)
    flat_shape = (n,)
    vm = ad.reshape(ad.take(pred_pu, (slice(None), 0)), flat_shape)
    va = ad.reshape(ad.take(pred_pu, (slice(None), 1)), flat_shape)
    p = ad.take(pred_pu, (slice(None), 2))
    q = ad.take(pred_pu, (slice(None), 3))
    re, im = branch_balance(vm, va, src, dst, ea[:, 0], ea[:, 1], n)
    dp = ad.sub(p, re)
    dq = ad.sub(q, im)
    return ad.mul(ad.add(ad.sum(ad.square(dp)), ad.sum(ad.square(dq))), 1.0 / n)


def mixed(y, pred: Tensor, physical_value: Tensor, w=0.5, tau=0.02) -> Tensor:
    """``w * MSE + tau * (1 - w) * physical``."""
    return ad.add(ad.mul(mse(y, pred), w), ad.mul(physical_value, tau * (1.0 - w)))


def denormalize_tensor(pred: Tensor, norm) -> Tensor:
    return ad.add(ad.mul(pred, norm.std), norm.mean)
