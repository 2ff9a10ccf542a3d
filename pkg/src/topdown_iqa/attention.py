"""Scaled dot-product attention, self / cross-scale blocks, the shared
position encoding and the pooled score head."""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .exceptions import ArgumentError
from .layers import Linear, Module, Parameter


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).permute(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, d = x.shape
    return x.permute(0, 2, 1, 3).reshape(b, t, h * d)


def attn(q, k, v, heads=1, return_weights=False):
    """softmax(Q K^T / sqrt(d_k)) V over ``(B, N, d)`` or ``(N, d)`` inputs.

    With ``heads > 1`` the feature axis is split evenly and each head uses
    its own ``d_k = d / heads``.  Weights have shape ``(B, heads, N_q, N_v)``.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (t.reshape((1,) + t.shape) for t in (q, k, v))
    if q.shape[-1] != k.shape[-1]:
        raise ArgumentError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ArgumentError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if q.shape[-1] % heads or v.shape[-1] % heads:
        raise ArgumentError(f"{heads} heads do not divide widths {q.shape[-1]}, {v.shape[-1]}")
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    logits = nx.matmul(qh, kh.permute(0, 1, 3, 2)) * scale
    weights = nx.softmax(logits, axis=-1)
    out = _merge_heads(nx.matmul(weights, vh))
    if squeeze:
        out = out.reshape(out.shape[1:])
    return (out, weights) if return_weights else out


class _Projections(Module):
    def __init__(self, dim, rng):
        super().__init__()
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)

    def zero_value(self):
        """Zero the value projection; the block then reduces to its residual."""
        self.v.weight.data[...] = 0
        self.v.bias.data[...] = 0


class SelfAttention(_Projections):
    def __init__(self, dim, rng, heads=1):
        super().__init__(dim, rng)
        self.heads = heads

    def forward(self, g, return_weights=False):
        out, w = attn(self.q(g), self.k(g), self.v(g), self.heads, return_weights=True)
        out = out + g
        return (out, w) if return_weights else out


class CrossScaleAttention(_Projections):
    """Queries from the coarser level, keys/values from the finer one;
    the residual adds the coarser level."""

    def __init__(self, dim, rng, heads=1):
        super().__init__(dim, rng)
        self.heads = heads

    def forward(self, g_low, g_high, return_weights=False):
        if g_low.shape != g_high.shape:
            raise ArgumentError(f"token grids differ: {g_low.shape} vs {g_high.shape}")
        out, w = attn(self.q(g_high), self.k(g_low), self.v(g_low), self.heads, return_weights=True)
        out = out + g_high
        return (out, w) if return_weights else out


def sa_block(g, block: SelfAttention):
    return block(g)


def csa_block(g_low, g_high, block: CrossScaleAttention):
    return block(g_low, g_high)


def csa_chain(levels, blocks, trace=None):
    """Top-down fusion: ``G''_n = G'_n`` and ``G''_i = CSA_i(G'_i, G''_{i+1})``.

    ``blocks[i]`` fuses level ``i+1`` (1-based) with the running result from
    the level above.  Returns ``G''_1``.
    """
    levels = list(levels)
    if len(levels) < 2:
        raise ArgumentError(f"cross-scale chain needs at least 2 levels, got {len(levels)}")
    if len(blocks) != len(levels) - 1:
        raise ArgumentError(f"{len(blocks)} CSA blocks for {len(levels)} levels")
    g = levels[-1]
    for i in range(len(levels) - 2, -1, -1):
        if trace is None:
            g = blocks[i](levels[i], g)
        else:
            g, w = blocks[i](levels[i], g, return_weights=True)
            trace.setdefault("csa_weights", {})[i + 1] = w
    return g


class PositionEncoding(Module):
    """One learnable ``(T, D)`` offset shared by every pyramid level.

    Inputs on a different token grid than the one it was built for get a
    bilinearly resampled copy of the encoding.
    """

    def __init__(self, grid, dim, rng):
        super().__init__()
        self.grid = tuple(grid)
        tokens = self.grid[0] * self.grid[1]
        self.weight = Parameter(0.02 * rng.standard_normal((tokens, dim)).astype(np.float32), decay=False)

    def forward(self, g, grid=None):
        grid = self.grid if grid is None else tuple(grid)
        if g.shape[-2] != grid[0] * grid[1] or g.shape[-1] != self.weight.shape[1]:
            raise ArgumentError(f"tokens {g.shape} do not match grid {grid} and width {self.weight.shape[1]}")
        if grid == self.grid:
            return g + self.weight
        d = self.weight.shape[1]
        plane = self.weight.permute(1, 0).reshape(d, *self.grid)
        plane = nx.bilinear_resize(plane, *grid)
        return g + plane.reshape(d, grid[0] * grid[1]).permute(1, 0)


def add_position_encoding(levels, pe: PositionEncoding, grid=None):
    return [pe(g, grid) for g in levels]


class ScoreHead(Module):
    """SA block, mean over tokens, then a D -> D -> K perceptron.

    ``kind="distribution"`` returns a softmax over ``K`` bins; otherwise a
    scalar per batch item.
    """

    def __init__(self, dim, rng, kind="scalar", bins=10, heads=1):
        super().__init__()
        if kind not in ("scalar", "distribution"):
            raise ArgumentError(f"head kind must be 'scalar' or 'distribution', got {kind!r}")
        self.kind = kind
        self.out_dim = 1 if kind == "scalar" else int(bins)
        self.sa = SelfAttention(dim, rng, heads)
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, self.out_dim, rng, zero_bias=True)

    def forward(self, g):
        pooled = self.sa(g).mean(axis=1)
        y = self.fc2(nx.gelu(self.fc1(pooled)))
        if self.kind == "distribution":
            return nx.softmax(y, axis=-1)
        return y.reshape(y.shape[0])


def score_head(g, head: ScoreHead):
    return head(g)


def export_csa_weights(g_low, g_high, block: CrossScaleAttention):
    """Row-stochastic ``(T, T)`` attention matrix (heads averaged) per batch item."""
    with nx.no_grad():
        _, w = block(g_low, g_high, return_weights=True)
    return w.data.mean(axis=1)


def heatmaps(weights, grid):
    """Reshape ``(T, T)`` weights into one ``grid`` heat map per query: ``(T, h, w)``."""
    h, w = grid
    return np.asarray(weights).reshape(h * w, h, w)

