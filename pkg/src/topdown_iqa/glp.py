"""Gated local pooling: mask-gated feature selection, window pooling to the
coarsest grid, then a per-token linear reduction to ``D`` channels."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .exceptions import ArgumentError
from .layers import Conv2d, Linear, Module

MASK_WIDTH = 64


def pooling_window(level, n):
    """Window that maps level ``level`` (1-based) onto the level-``n`` grid."""
    if not 1 <= level <= n:
        raise ArgumentError(f"level {level} outside 1..{n}")
    return 2 ** (n - level)


class MaskBranch(Module):
    """Bottleneck producing a single-channel gating logit.

    1x1 (in -> width) -> GELU -> 3x3 (width -> width) -> GELU -> 1x1 (width -> 1).
    All biases start at zero so an all-zero input gates at exactly 0.5.
    """

    def __init__(self, in_channels, rng, width=MASK_WIDTH):
        super().__init__()
        self.reduce = Conv2d(in_channels, width, 1, rng, zero_bias=True)
        self.process = Conv2d(width, width, 3, rng, padding=1, zero_bias=True)
        self.project = Conv2d(width, 1, 1, rng, zero_bias=True)

    def forward(self, x):
        x = nx.gelu(self.reduce(x))
        x = nx.gelu(self.process(x))
        return self.project(x)


class GatedLocalPooling(Module):
    """One GLP block for pyramid level ``level`` of ``n``.

    In ``"FR"`` mode the gate is computed from ``|F_d - F_r|`` and applied to
    ``concat(F_d, F_r, |F_d - F_r|)``; in ``"NR"`` mode the gate is computed
    from ``F`` and applied to ``ReLU(W_f F)`` with ``W_f`` a 1x1 convolution.
    """

    def __init__(self, channels, dim, level, n, mode, rng, width=MASK_WIDTH):
        super().__init__()
        if mode not in ("FR", "NR"):
            raise ArgumentError(f"mode must be 'FR' or 'NR', got {mode!r}")
        self.mode = mode
        self.level = level
        self.window = pooling_window(level, n)
        self.mask = MaskBranch(channels, rng, width)
        if mode == "NR":
            self.feature = Conv2d(channels, channels, 1, rng)
            self.reducer = Linear(channels, dim, rng)
        else:
            self.reducer = Linear(3 * channels, dim, rng)

    def gate(self, fd, fr=None):
        """Sigmoid mask of shape ``(B, 1, H_i, W_i)``."""
        fd, fr = _tensors(fd, fr)
        if self.mode == "FR":
            _check_pair(fd, fr)
            return nx.sigmoid(self.mask(nx.absolute(fd - fr)))
        return nx.sigmoid(self.mask(fd))

    def forward(self, fd, fr=None, gated=True, trace=None):
        """Return tokens ``(B, H_n*W_n, D)``.

        ``gated=False`` forces the mask to 1 (bypass).  When a ``trace`` dict
        is given the mask and difference map are stored under this level.
        """
        fd, fr = _tensors(fd, fr)
        if self.mode == "FR":
            _check_pair(fd, fr)
            diff = nx.absolute(fd - fr)
            features = nx.concat([fd, fr, diff], axis=1)
            logits_in = diff
        else:
            diff = None
            features = nx.relu(self.feature(fd))
            logits_in = fd
        mask = nx.sigmoid(self.mask(logits_in)) if gated else None
        if trace is not None:
            trace.setdefault("glp_mask", {})[self.level] = mask
            if diff is not None:
                trace.setdefault("feature_diff", {})[self.level] = diff
        x = features * mask if gated else features
        x = nx.window_avg_pool(x, self.window)
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).permute(0, 2, 1)
        return self.reducer(tokens)


def _tensors(fd, fr):
    fd = nx.as_tensor(fd)
    return fd, None if fr is None else nx.as_tensor(fr, like=fd)


def _check_pair(fd, fr):
    if fr is None:
        raise ArgumentError("FR gated pooling needs a reference feature map")
    if fd.shape != fr.shape:
        raise ArgumentError(f"feature shapes differ: {fd.shape} vs {fr.shape}")


def glp_fr(f_dist, f_ref, block: GatedLocalPooling, gated=True):
    if block.mode != "FR":
        raise ArgumentError("glp_fr needs an FR-mode block")
    return block(f_dist, f_ref, gated=gated)


def glp_nr(f, block: GatedLocalPooling, gated=True):
    if block.mode != "NR":
        raise ArgumentError("glp_nr needs an NR-mode block")
    return block(f, gated=gated)


def export_glp_mask(block: GatedLocalPooling, fd, fr=None):
    """Gate values before multiplication, ``(1, H_i, W_i)`` per batch item."""
    with nx.no_grad():
        mask = block.gate(fd, fr)
    out = np.asarray(mask.data)
    return out[:, 0:1] if out.ndim == 4 else out
