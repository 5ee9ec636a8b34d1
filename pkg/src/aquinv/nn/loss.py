"""
L1 training loss with optional extra weight near the contaminant source.

The data term is the L1 norm of each sample's error (summed over channels
and pixels) averaged over the samples in the batch. Every source-neighborhood
pixel counts ``1 + w_c`` times as much as any other pixel; the extra term is
averaged over samples too, so the balance does not depend on the batch size.
"""

from __future__ import annotations

import numpy as np


def neighborhood_mask(shape, cells, active) -> np.ndarray:
    """Boolean mask over ``shape = (N, C, H, W)`` marking 3x3 source neighborhoods.

    Parameters
    ----------
    cells : array (N, 2)
        Source ``(row, col)`` per sample.
    active : array (N, C)
        Which output channels of each sample get the neighborhood marked.

    Neighborhoods touching the domain edge are clipped.
    """
    N, C, H, W = shape
    cells = np.asarray(cells, dtype=int).reshape(N, 2)
    active = np.asarray(active, dtype=bool).reshape(N, C)
    mask = np.zeros(shape, dtype=bool)
    for n, (r, c) in enumerate(cells):
        r0, r1 = max(r - 1, 0), min(r + 2, H)
        c0, c1 = max(c - 1, 0), min(c + 2, W)
        mask[n, active[n], r0:r1, c0:c1] = True
    return mask


def weight_penalty(params, weight_decay: float) -> float:
    """``(weight_decay / 2) * theta^T theta``."""
    return 0.5 * weight_decay * float(sum(np.vdot(p, p) for p in params.values()))


def data_loss(pred, target, mask=None, w_c: float = 0.0):
    """Weighted per-sample L1 error, averaged over samples, and its gradient
    with respect to ``pred``.

    Returns ``(value, grad)``. The subgradient of ``|e|`` at zero is taken as 0.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    e = pred - target
    n = e.shape[0]
    weights = None
    if mask is not None and w_c != 0.0:
        weights = 1.0 + w_c * np.asarray(mask, dtype=e.dtype)
    a = np.abs(e)
    value = float((a if weights is None else weights * a).sum(dtype=np.float64)) / n
    grad = np.sign(e) / n
    if weights is not None:
        grad *= weights
    return value, grad.astype(pred.dtype, copy=False)


def loss_weighted_l1(pred, target, mask, w_c, weight_decay, params) -> float:
    """Full training objective: weighted L1 data term plus weight decay."""
    return data_loss(pred, target, mask, w_c)[0] + weight_penalty(params, weight_decay)
