"""Full-reference and no-reference coarse-to-fine attention networks, plus
checkpoint serialisation."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .attention import CrossScaleAttention, PositionEncoding, ScoreHead, SelfAttention, csa_chain
from .backbone import DEFAULT_CHANNELS, BackboneConfig, ToyBackbone, check_extent, extract_pair, extract_pyramid
from .exceptions import (
    ArgumentError,
    CheckpointError,
    ConfigMismatchError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnknownParameterError,
    VersionMismatchError,
)
from .glp import MASK_WIDTH, GatedLocalPooling
from .layers import Module, ModuleList


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``dim`` defaults to 256 for FR and 512 for NR.  ``image_size`` is the
    training input extent; it fixes the position-encoding grid.
    """

    mode: str = "FR"
    n: int = 5
    channels: tuple = DEFAULT_CHANNELS
    blocks: int = 1
    freeze: bool = False
    dim: int | None = None
    head: str = "scalar"
    bins: int = 10
    heads: int = 1
    glp_width: int = MASK_WIDTH
    image_size: tuple = (224, 224)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("FR", "NR"):
            raise ArgumentError(f"mode must be 'FR' or 'NR', got {self.mode!r}")
        if self.dim is None:
            object.__setattr__(self, "dim", 256 if self.mode == "FR" else 512)
        size = self.image_size
        if isinstance(size, int):
            size = (size, size)
        object.__setattr__(self, "image_size", tuple(int(s) for s in size))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.head not in ("scalar", "distribution"):
            raise ArgumentError(f"head must be 'scalar' or 'distribution', got {self.head!r}")
        if self.dim % self.heads:
            raise ArgumentError(f"{self.heads} attention heads do not divide D={self.dim}")
        self.backbone  # validates n / channels
        check_extent(*self.image_size, self.n)

    @property
    def backbone(self):
        return BackboneConfig(n=self.n, channels=self.channels, blocks=self.blocks, freeze=self.freeze)

    @property
    def grid(self):
        h, w = self.image_size
        return h // 2 ** self.n, w // 2 ** self.n

    @property
    def tokens(self):
        h, w = self.grid
        return h * w

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})


class CFANet(Module):
    """Backbone -> per-level GLP -> shared position encoding -> per-level SA
    -> top-down CSA chain -> SA-pool + MLP head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        n, dim = config.n, config.dim
        self.backbone = ToyBackbone(config.backbone, rng)
        self.glp = ModuleList(
            GatedLocalPooling(c, dim, i + 1, n, config.mode, rng, width=config.glp_width)
            for i, c in enumerate(config.channels)
        )
        self.pos = PositionEncoding(config.grid, dim, rng)
        self.sa = ModuleList(SelfAttention(dim, rng, config.heads) for _ in range(n))
        self.csa = ModuleList(CrossScaleAttention(dim, rng, config.heads) for _ in range(n - 1))
        self.head = ScoreHead(dim, rng, kind=config.head, bins=config.bins, heads=config.heads)

    @property
    def mode(self):
        return self.config.mode

    @property
    def dtype(self):
        return self.backbone.dtype

    def tokens(self, dist, ref=None, gated=True, trace=None):
        """Enhanced per-level token grids ``G'_1 .. G'_n``."""
        if self.mode == "FR":
            if ref is None:
                raise ArgumentError("FR model needs a reference image")
            pyr_d, pyr_r = extract_pair(dist, ref, self.backbone)
            pooled = [blk(fd, fr, gated=gated, trace=trace) for blk, fd, fr in zip(self.glp, pyr_d, pyr_r)]
            grid = pyr_d[-1].shape[2:]
        else:
            if ref is not None:
                raise ArgumentError("NR model takes no reference image")
            pyr = extract_pyramid(dist, self.backbone)
            pooled = [blk(f, gated=gated, trace=trace) for blk, f in zip(self.glp, pyr)]
            grid = pyr[-1].shape[2:]
        pooled = [self.pos(g, grid) for g in pooled]
        return [sa(g) for sa, g in zip(self.sa, pooled)]

    def forward(self, dist, ref=None, gated=True, trace=None):
        """Scores ``(B,)`` for a scalar head, distributions ``(B, K)`` otherwise."""
        enhanced = self.tokens(dist, ref, gated=gated, trace=trace)
        fused = csa_chain(enhanced, self.csa, trace=trace)
        return self.head(fused)

    def predict(self, dist, ref=None):
        """Scalar quality per batch item as a numpy array (no graph).

        Distribution heads are reduced to the expectation over bins ``1..K``.
        """
        with nx.no_grad():
            out = self.forward(dist, ref).data
        if self.config.head == "distribution":
            return distribution_mean(out)
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        unknown = sorted(set(state) - set(params))
        if unknown:
            raise UnknownParameterError(f"unknown parameter names: {', '.join(unknown[:5])}")
        missing = sorted(set(params) - set(state))
        if missing:
            raise CheckpointError(f"missing parameters: {', '.join(missing[:5])}")
        for name, value in state.items():
            p = params[name]
            if tuple(value.shape) != p.shape:
                raise ShapeMismatchError(f"{name}: checkpoint shape {tuple(value.shape)} != model shape {p.shape}")
            p.data = np.array(value, dtype=p.dtype)
            p.grad = None


def distribution_mean(p):
    p = np.asarray(p)
    bins = np.arange(1, p.shape[-1] + 1, dtype=p.dtype)
    return p @ bins


def forward_fr(model: CFANet, dist, ref, trace=None):
    if model.mode != "FR":
        raise ArgumentError("forward_fr needs an FR model")
    return model(dist, ref, trace=trace)


def forward_nr(model: CFANet, img, trace=None):
    if model.mode != "NR":
        raise ArgumentError("forward_nr needs an NR model")
    return model(img, trace=trace)


# -- checkpoints -------------------------------------------------------------

MAGIC = "TDIQA-CHECKPOINT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Named parameter map plus config and free-form metadata (MOS statistics)."""

    params: dict
    config: ModelConfig
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: CFANet, meta=None):
        return cls({k: np.array(v, dtype=np.float32) for k, v in model.state_dict().items()}, model.config, dict(meta or {}))

    def build(self):
        model = CFANet(self.config)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(checkpoint: Checkpoint, path):
    """Text header (one line per parameter, byte offsets) + little-endian float32 payload."""
    lines = [MAGIC, f"version {FORMAT_VERSION}", "config " + json.dumps(checkpoint.config.to_dict(), sort_keys=True),
             "meta " + json.dumps(checkpoint.meta, sort_keys=True)]
    chunks, offset = [], 0
    for name in sorted(checkpoint.params):
        arr = np.ascontiguousarray(checkpoint.params[name], dtype="<f4")
        if any(ch.isspace() for ch in name):
            raise ArgumentError(f"parameter name {name!r} contains whitespace")
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"param {name} {shape} {offset} {arr.size}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    lines.append(f"end {offset}")
    header = ("\n".join(lines) + "\n").encode("ascii")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def next_line():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise TruncatedPayloadError(f"{path}: header ends prematurely")
        line = blob[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        return line

    if next_line() != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    key, _, value = next_line().partition(" ")
    if key != "version":
        raise CheckpointError(f"{path}: missing version line")
    if value != str(FORMAT_VERSION):
        raise VersionMismatchError(f"{path}: format version {value}, this build reads {FORMAT_VERSION}")
    config = meta = None
    entries = []
    while True:
        key, _, value = next_line().partition(" ")
        if key == "config":
            config = ModelConfig.from_dict(json.loads(value))
        elif key == "meta":
            meta = json.loads(value)
        elif key == "param":
            name, shape, offset, count = value.split(" ")
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
            entries.append((name, dims, int(offset), int(count)))
        elif key == "end":
            total = int(value)
            break
        else:
            raise CheckpointError(f"{path}: unexpected header line {key!r}")
    if config is None:
        raise CheckpointError(f"{path}: header has no config")
    payload = blob[pos:]
    if len(payload) < total:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} of {total} bytes")
    if len(payload) > total:
        raise CheckpointError(f"{path}: {len(payload) - total} trailing bytes after payload")
    if expected is not None:
        _check_config(config, expected, path)
    params = {}
    for name, dims, offset, count in entries:
        if int(np.prod(dims, dtype=np.int64)) != count or offset + 4 * count > total:
            raise ShapeMismatchError(f"{path}: entry {name} has inconsistent shape/offset")
        params[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
    return Checkpoint(params, config, meta or {})


def _check_config(found: ModelConfig, expected: ModelConfig, path):
    a, b = found.to_dict(), expected.to_dict()
    diffs = [k for k in a if k != "seed" and a[k] != b[k]]
    if diffs:
        detail = ", ".join(f"{k}: file={a[k]!r} expected={b[k]!r}" for k in diffs)
        raise ConfigMismatchError(f"{path}: config mismatch ({detail})")


def load_model(path, expected: ModelConfig | None = None):
    ckpt = load_checkpoint(path, expected)
    return ckpt.build(), ckpt
