"""Small convolutional feature extractor with a dyadic pyramid schedule.

Stands in for a pretrained classification backbone: level ``i`` has spatial
extent ``H / 2**i``.  There are no normalisation layers; ``freeze`` stops
gradients into the backbone instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ArgumentError
from .layers import Conv2d, Module, ModuleList
from .numerics import Tensor

DEFAULT_CHANNELS = (16, 32, 64, 96, 128)


@dataclass(frozen=True)
class BackboneConfig:
    n: int = 5
    channels: tuple = DEFAULT_CHANNELS
    blocks: int = 1
    freeze: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.n < 2:
            raise ArgumentError(f"pyramid needs at least 2 levels, got n={self.n}")
        if len(self.channels) != self.n:
            raise ArgumentError(f"{len(self.channels)} channel widths given for n={self.n} levels")
        if any(c < 1 for c in self.channels) or self.blocks < 1:
            raise ArgumentError("channel widths and block count must be positive")


@dataclass
class FeaturePyramid:
    """Per-level feature maps ``F_1 .. F_n``, each ``(B, C_i, H/2^i, W/2^i)``."""

    levels: list

    @property
    def n(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    @property
    def shapes(self):
        return [tuple(f.shape[-3:]) for f in self.levels]


class _Stage(Module):
    def __init__(self, in_channels, out_channels, blocks, rng):
        super().__init__()
        self.down = Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1)
        self.res = ModuleList(Conv2d(out_channels, out_channels, 3, rng, padding=1) for _ in range(blocks))

    def forward(self, x):
        x = nx.gelu(self.down(x))
        for conv in self.res:
            x = x + nx.gelu(conv(x))
        return x


class ToyBackbone(Module):
    def __init__(self, cfg: BackboneConfig, rng):
        super().__init__()
        self.cfg = cfg
        widths = (3,) + cfg.channels
        self.stages = ModuleList(_Stage(widths[i], widths[i + 1], cfg.blocks, rng) for i in range(cfg.n))
        if cfg.freeze:
            self.freeze()

    @property
    def dtype(self):
        return self.stages[0].down.weight.dtype

    def forward(self, image):
        return extract_pyramid(image, self)


def as_batch(image, dtype=None):
    """Accept ``(3, H, W)`` or ``(B, 3, H, W)`` arrays/tensors; return a 4-d Tensor."""
    if isinstance(image, Tensor):
        t = image if dtype is None or image.dtype == dtype else Tensor(image.data, dtype=dtype)
    else:
        t = Tensor(np.asarray(image), dtype=dtype)
    if t.ndim == 3:
        t = t.reshape((1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != 3:
        raise ArgumentError(f"expected a 3-channel image, got shape {t.shape}")
    return t


def check_extent(h, w, n):
    step = 2 ** n
    if h % step or w % step:
        raise ArgumentError(f"image extent {h}x{w} is not divisible by 2^{n}={step}")


def extract_pyramid(image, backbone: ToyBackbone) -> FeaturePyramid:
    x = as_batch(image, backbone.dtype)
    check_extent(x.shape[2], x.shape[3], backbone.cfg.n)
    levels = []
    for stage in backbone.stages:
        x = stage(x)
        levels.append(x)
    return FeaturePyramid(levels)


def extract_pair(dist, ref, backbone: ToyBackbone):
    """Run both images through the same weights."""
    d, r = as_batch(dist, backbone.dtype), as_batch(ref, backbone.dtype)
    if d.shape != r.shape:
        raise ArgumentError(f"distorted {d.shape} and reference {r.shape} shapes differ")
    return extract_pyramid(d, backbone), extract_pyramid(r, backbone)
