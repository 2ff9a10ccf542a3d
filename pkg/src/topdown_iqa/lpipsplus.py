"""Semantically re-weighted multi-scale perceptual similarity.

Per-level similarity maps from unit-normalised feature differences are
pooled with a weight map taken from the reference features of one level,
instead of a plain spatial mean.
"""
from __future__ import annotations

import warnings

import numpy as np

from . import numerics as nx
from .exceptions import ArgumentError, DegenerateInputError
from .metrics import srcc
from .numerics import Tensor

DEFAULT_LAYER = 3


class DegenerateWeightWarning(UserWarning):
    """Weight map was all zero; uniform weights were used instead."""


def _level_array(f):
    a = f.data if isinstance(f, Tensor) else np.asarray(f)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ArgumentError("LPIPS+ works on one image at a time")
        a = a[0]
    if a.ndim != 3:
        raise ArgumentError(f"feature maps must be (C, H, W), got {a.shape}")
    return a.astype(np.float64)


def _unit_normalize(f, eps=1e-10):
    norm = np.sqrt((f * f).sum(axis=0, keepdims=True))
    return f / (norm + eps)


def quality_maps(pyr_d, pyr_r, orientation="similarity"):
    """One ``(1, H_m, W_m)`` map per level.

    Channel vectors are unit-normalised, the squared difference is summed
    over channels (``d`` in [0, 4]) and, for ``orientation="similarity"``,
    mapped to ``clip(1 - d, 0, 1)``.  ``orientation="distance"`` returns ``d``.
    """
    levels_d, levels_r = list(pyr_d), list(pyr_r)
    if len(levels_d) != len(levels_r):
        raise ArgumentError(f"pyramids have {len(levels_d)} and {len(levels_r)} levels")
    if orientation not in ("similarity", "distance"):
        raise ArgumentError(f"orientation must be 'similarity' or 'distance', got {orientation!r}")
    maps = []
    for fd, fr in zip(levels_d, levels_r):
        fd, fr = _level_array(fd), _level_array(fr)
        if fd.shape != fr.shape:
            raise ArgumentError(f"misaligned pyramid levels {fd.shape} vs {fr.shape}")
        diff = _unit_normalize(fd) - _unit_normalize(fr)
        d = (diff * diff).sum(axis=0, keepdims=True)
        maps.append(np.clip(1.0 - d, 0.0, 1.0) if orientation == "similarity" else d)
    return maps


def semantic_weight(pyr_r, layer=DEFAULT_LAYER):
    """Channel mean of the rectified reference features at ``layer`` (1-based)."""
    levels = list(pyr_r)
    if not 1 <= layer <= len(levels):
        raise ArgumentError(f"layer {layer} outside 1..{len(levels)}")
    f = _level_array(levels[layer - 1])
    return np.maximum(f, 0.0).mean(axis=0, keepdims=True)


def lpips_plus(maps, weight=None):
    """Sum over levels of the weight-averaged quality map.

    ``weight`` is resized bilinearly to each map's grid.  ``None`` means
    uniform weights.  An all-zero weight map falls back to uniform weights
    with a :class:`DegenerateWeightWarning`.
    """
    if weight is not None:
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim == 2:
            weight = weight[None]
        if np.any(weight < 0):
            raise ArgumentError("semantic weights must be nonnegative")
        if not np.any(weight > 0):
            warnings.warn("all-zero semantic weight map, using uniform weights", DegenerateWeightWarning, stacklevel=2)
            weight = None
    total = 0.0
    for s in maps:
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 2:
            s = s[None]
        if weight is None:
            total += float(s.mean())
            continue
        with nx.no_grad():
            w = nx.bilinear_resize(Tensor(weight, dtype=np.float64), *s.shape[-2:]).data
        mass = w.sum()
        if mass <= 0:
            warnings.warn("semantic weights vanish after resize, using uniform weights",
                          DegenerateWeightWarning, stacklevel=2)
            total += float(s.mean())
        else:
            total += float((w * s).sum() / mass)
    return total


def lpips_plus_pair(dist, ref, extractor, layer=DEFAULT_LAYER, orientation="similarity"):
    """LPIPS+ of one image pair; ``layer=0`` means uniform weights."""
    with nx.no_grad():
        pyr_d, pyr_r = extractor(dist), extractor(ref)
    maps = quality_maps(pyr_d, pyr_r, orientation)
    weight = semantic_weight(pyr_r, layer) if layer else None
    return lpips_plus(maps, weight)


def layer_sweep(pairs, mos, extractor, layers=None, orientation="similarity"):
    """SRCC against MOS for every choice of weighting layer.

    Returns rows ``{"layer": i, "srcc": r}``; layer 0 is the uniform
    baseline.  Quality maps are computed once per pair.
    """
    pairs = list(pairs)
    mos = np.asarray(mos, dtype=np.float64)
    if not pairs:
        raise ArgumentError("layer sweep needs at least one pair")
    if len(pairs) != mos.size:
        raise ArgumentError(f"{len(pairs)} pairs but {mos.size} MOS values")
    if np.ptp(mos) == 0:
        raise DegenerateInputError("layer sweep with constant MOS")
    cached = []
    for dist, ref in pairs:
        with nx.no_grad():
            pyr_d, pyr_r = extractor(dist), extractor(ref)
        cached.append((quality_maps(pyr_d, pyr_r, orientation), [_level_array(f) for f in pyr_r]))
    n_levels = len(cached[0][1])
    layers = range(0, n_levels + 1) if layers is None else layers
    rows = []
    for layer in layers:
        scores = []
        for maps, pyr_r in cached:
            weight = semantic_weight(pyr_r, layer) if layer else None
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateWeightWarning)
                scores.append(lpips_plus(maps, weight))
        try:
            r = srcc(scores, mos)
        except DegenerateInputError:
            r = float("nan")
        rows.append({"layer": int(layer), "srcc": r})
    return rows
