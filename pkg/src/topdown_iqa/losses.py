"""Training objectives: MSE on normalised MOS, CDF-based EMD on score
distributions, and the Bradley-Terry preference loss for 2AFC triplets."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .exceptions import ArgumentError
from .numerics import Tensor


def _as_batch(x, like=None):
    t = x if isinstance(x, Tensor) else nx.as_tensor(np.asarray(x), like=like)
    if t.ndim == 0:
        t = t.reshape(1)
    return t


def mos_mse(pred, target):
    """Mean squared error between predicted scores and normalised MOS."""
    pred = _as_batch(pred)
    target = _as_batch(target, like=pred)
    if pred.size == 0:
        raise ArgumentError("mos_mse on an empty batch")
    if pred.shape != target.shape:
        raise ArgumentError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return nx.square(pred - target).mean()


def emd_loss(p_hat, p, r=2):
    """Earth mover's distance between ordered distributions, averaged over the batch.

    Per item: ``(mean_k |CDF_p_hat(k) - CDF_p(k)|^r) ** (1/r)``.
    Only ``r`` in {1, 2} is supported.
    """
    p_hat = _as_batch(p_hat)
    p = _as_batch(p, like=p_hat)
    if p_hat.shape != p.shape:
        raise ArgumentError(f"bin counts differ: {p_hat.shape} vs {p.shape}")
    if p_hat.ndim == 1:
        p_hat, p = p_hat.reshape(1, -1), p.reshape(1, -1)
    diff = nx.cumsum(p_hat, axis=-1) - nx.cumsum(p, axis=-1)
    if r == 2:
        per_item = nx.sqrt(nx.square(diff).mean(axis=-1))
    elif r == 1:
        per_item = nx.absolute(diff).mean(axis=-1)
    else:
        raise ArgumentError(f"EMD exponent r must be 1 or 2, got {r}")
    return per_item.mean()


def bt_probability(y_a, y_b):
    """Probability that A is preferred over B given error scores (lower is better).

    ``1 / (1 + exp(y_a - y_b))``; ``bt(a, b) + bt(b, a) == 1`` exactly.
    """
    y_a = _as_batch(y_a)
    y_b = _as_batch(y_b, like=y_a)
    return nx.sigmoid(y_b - y_a, complement_exact=True)


def loss_2afc(y_a, y_b, p_ab):
    """Mean over triplets of ``(bt_probability(y_a, y_b) - p_ab) ** 2``."""
    p_hat = bt_probability(y_a, y_b)
    if p_hat.size == 0:
        raise ArgumentError("loss_2afc on an empty batch")
    p_ab = _as_batch(p_ab, like=p_hat)
    if np.any((p_ab.data < 0) | (p_ab.data > 1)):
        raise ArgumentError("preference probabilities must lie in [0, 1]")
    return nx.square(p_hat - p_ab).mean()
