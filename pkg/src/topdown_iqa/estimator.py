"""scikit-learn style wrappers.

``CFANetRegressor`` trains the attention network on in-memory image arrays;
``LPIPSPlus`` is a training-free transformer scoring (distorted, reference)
pairs.  Both expose ``get_params`` / ``set_params`` through ``BaseEstimator``
so they compose with grid search and pipelines.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .backbone import DEFAULT_CHANNELS, BackboneConfig, ToyBackbone
from .data import DistRecord, Manifest, MosRecord, normalize_mos
from .lpipsplus import DEFAULT_LAYER, layer_sweep, lpips_plus_pair
from .metrics import srcc
from .model import CFANet, ModelConfig
from .trainer import TrainConfig, train
from .validation import check_images, check_pairs, check_targets


class CFANetRegressor(RegressorMixin, BaseEstimator):
    """Top-down attention quality regressor.

    ``mode="FR"`` expects ``X`` of shape ``(N, 2, 3, H, W)`` holding
    (distorted, reference) pairs; ``mode="NR"`` expects ``(N, 3, H, W)``.
    Scalar targets are min-max normalised for training and predictions are
    mapped back to the original scale.  With ``head="distribution"`` targets
    are ``(N, bins)`` probability vectors and predictions are their mean
    score over bins ``1..bins``.
    """

    def __init__(self, mode="FR", n_levels=5, channels=DEFAULT_CHANNELS, blocks=1, dim=None,
                 head="scalar", bins=10, heads=1, glp_width=64, freeze_backbone=False,
                 lr=None, weight_decay=1e-5, t_max=50, eta_min=0.0, max_epochs=200,
                 batch_size=8, patience=20, crop=None, hflip=0.5, vflip=0.5, random_state=0):
        self.mode = mode
        self.n_levels = n_levels
        self.channels = channels
        self.blocks = blocks
        self.dim = dim
        self.head = head
        self.bins = bins
        self.heads = heads
        self.glp_width = glp_width
        self.freeze_backbone = freeze_backbone
        self.lr = lr
        self.weight_decay = weight_decay
        self.t_max = t_max
        self.eta_min = eta_min
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.crop = crop
        self.hflip = hflip
        self.vflip = vflip
        self.random_state = random_state

    def _check_X(self, X):
        if self.mode == "FR":
            return check_pairs(X, self.n_levels)
        return check_images(X, self.n_levels)

    def _manifest(self, X, y, stats=None):
        if self.head == "distribution":
            records = [DistRecord(dist=x, p=p) for x, p in zip(X, y)]
            return Manifest("dist", records)
        normed, stats = normalize_mos(y, stats)
        if self.mode == "FR":
            records = [MosRecord(dist=x[0], ref=x[1], mos=float(m), mos_raw=float(r)) for x, m, r in zip(X, normed, y)]
            kind = "mos-fr"
        else:
            records = [MosRecord(dist=x, mos=float(m), mos_raw=float(r)) for x, m, r in zip(X, normed, y)]
            kind = "mos-nr"
        return Manifest(kind, records, mos_stats=stats)

    def fit(self, X, y, X_val=None, y_val=None):
        """Train; validation defaults to the training data when not given."""
        X = self._check_X(X)
        bins = self.bins if self.head == "distribution" else None
        y = check_targets(y, len(X), bins)
        size = self.crop if self.crop is not None else X.shape[-2:]
        config = ModelConfig(
            mode=self.mode, n=self.n_levels, channels=tuple(self.channels), blocks=self.blocks,
            freeze=self.freeze_backbone, dim=self.dim, head=self.head, bins=self.bins, heads=self.heads,
            glp_width=self.glp_width, image_size=tuple(size), seed=self.random_state,
        )
        train_set = self._manifest(X, y)
        if X_val is None:
            val_set = train_set
        else:
            X_val = self._check_X(X_val)
            val_set = self._manifest(X_val, check_targets(y_val, len(X_val), bins), train_set.mos_stats)
        tcfg = TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, t_max=self.t_max, eta_min=self.eta_min,
            max_epochs=self.max_epochs, batch_size=self.batch_size, patience=self.patience,
            seed=self.random_state, crop=None if self.crop is None else tuple(self.crop),
            hflip=self.hflip, vflip=self.vflip,
        )
        self.model_ = CFANet(config)
        self.checkpoint_, self.train_log_ = train(self.model_, train_set, val_set, tcfg)
        self.mos_stats_ = train_set.mos_stats
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        if self.mode == "FR":
            raw = np.concatenate([self.model_.predict(x[None, 0], x[None, 1]) for x in X])
        else:
            raw = np.concatenate([self.model_.predict(x[None]) for x in X])
        raw = raw.astype(np.float64)
        if self.head == "distribution" or self.mos_stats_ is None:
            return raw
        lo, hi = self.mos_stats_
        return raw * (hi - lo) + lo if hi != lo else np.full_like(raw, lo)

    def predict_distribution(self, X):
        check_is_fitted(self, "model_")
        if self.head != "distribution":
            raise AttributeError("predict_distribution needs head='distribution'")
        X = self._check_X(X)
        with nx.no_grad():
            return np.concatenate([self.model_(x[None]).data for x in X])

    def score(self, X, y, sample_weight=None):
        """Spearman rank correlation between predictions and targets."""
        y = np.asarray(y, dtype=np.float64)
        if self.head == "distribution":
            y = y @ np.arange(1, y.shape[1] + 1)
        return srcc(self.predict(X), y)


class LPIPSPlus(TransformerMixin, BaseEstimator):
    """Semantically weighted multi-scale similarity of (distorted, reference) pairs.

    ``layer`` picks the reference level whose rectified activations weight
    the per-level quality maps; ``layer=0`` gives the plain mean.  ``fit``
    only builds the seeded feature extractor, or adopts ``backbone``.
    """

    def __init__(self, layer=DEFAULT_LAYER, n_levels=5, channels=DEFAULT_CHANNELS, blocks=1,
                 orientation="similarity", random_state=0, backbone=None):
        self.layer = layer
        self.n_levels = n_levels
        self.channels = channels
        self.blocks = blocks
        self.orientation = orientation
        self.random_state = random_state
        self.backbone = backbone

    def fit(self, X=None, y=None):
        if self.backbone is not None:
            self.backbone_ = self.backbone
        else:
            cfg = BackboneConfig(n=self.n_levels, channels=tuple(self.channels), blocks=self.blocks, freeze=True)
            self.backbone_ = ToyBackbone(cfg, np.random.default_rng(self.random_state))
        return self

    def _extract(self, img):
        return self.backbone_(img)

    def transform(self, X):
        check_is_fitted(self, "backbone_")
        X = check_pairs(X, self.backbone_.cfg.n)
        scores = [lpips_plus_pair(x[0], x[1], self._extract, self.layer, self.orientation) for x in X]
        return np.asarray(scores, dtype=np.float64).reshape(-1, 1)

    def predict(self, X):
        return self.transform(X).ravel()

    def sweep(self, X, y):
        """SRCC per weighting layer (0 = uniform) against ``y``."""
        check_is_fitted(self, "backbone_")
        X = check_pairs(X, self.backbone_.cfg.n)
        return layer_sweep([(x[0], x[1]) for x in X], y, self._extract, orientation=self.orientation)
