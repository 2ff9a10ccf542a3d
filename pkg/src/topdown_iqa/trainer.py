"""Training loop: adaptive moments with decoupled weight decay, per-epoch
cosine annealing with restarts, early stopping on validation SRCC."""
from __future__ import annotations

import copy
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .data import AugmentConfig, DistRecord, ImageCache, Manifest, MosRecord, TwoAFCRecord, augment, center_crop_multiple, sample_rng
from .exceptions import ArgumentError, DegenerateInputError, NumericError
from .losses import bt_probability, emd_loss, loss_2afc, mos_mse
from .metrics import EvalReport, evaluate_scores, score_2afc, srcc
from .model import CFANet, Checkpoint, distribution_mean

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float | None = None  # 1e-4 for FR, 3e-5 for NR when unset
    weight_decay: float = 1e-5
    t_max: int = 50
    eta_min: float = 0.0
    restart: bool = True
    max_epochs: int = 200
    batch_size: int = 8
    patience: int = 20
    seed: int = 0
    crop: tuple | None = None
    hflip: float = 0.5
    vflip: float = 0.5
    shorter_side: int | None = None
    shorter_side_range: tuple | None = None
    emd_r: int = 2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr is not None and self.eta_min > self.lr:
            raise ArgumentError("eta_min must not exceed the base learning rate")
        if self.patience < 1:
            raise ArgumentError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.t_max < 1:
            raise ArgumentError("batch_size, max_epochs and t_max must be positive")
        for name in ("crop", "shorter_side_range", "betas"):
            v = getattr(self, name)
            if isinstance(v, list):
                object.__setattr__(self, name, tuple(v))

    def base_lr(self, mode):
        if self.lr is not None:
            return self.lr
        return 1e-4 if mode == "FR" else 3e-5

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self):
        return asdict(self)


def cosine_lr(epoch, eta_max, eta_min=0.0, t_max=50, restart=True):
    """Cosine annealing from ``eta_max`` to ``eta_min`` over ``t_max`` epochs.

    With ``restart`` the cycle repeats (``t mod t_max``); otherwise the rate
    stays at ``eta_min`` after the first cycle.
    """
    if epoch < 0:
        raise ArgumentError(f"epoch must be nonnegative, got {epoch}")
    t = epoch % t_max if restart else min(epoch, t_max)
    if not restart and epoch >= t_max:
        return eta_min
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t / t_max))


class AdamW:
    """Adam with decoupled weight decay applied as ``p *= 1 - lr * wd``."""

    def __init__(self, params, lr=1e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if getattr(p, "decay", True) and self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - self.lr * self.weight_decay)
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def record(self, epoch, loss, val_plcc, val_srcc, lr, best_srcc):
        self.epochs.append({"epoch": epoch, "train_loss": loss, "val_plcc": val_plcc,
                            "val_srcc": val_srcc, "lr": lr, "best_srcc": best_srcc})

    def to_csv(self):
        buf = io.StringIO()
        cols = ["epoch", "train_loss", "val_plcc", "val_srcc", "lr", "best_srcc"]
        buf.write(",".join(cols) + "\n")
        for row in self.epochs:
            buf.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
        buf.write(f"# best_epoch={self.best_epoch}\n")
        return buf.getvalue()


# -- batching -----------------------------------------------------------------

def _sample_images(record, cache):
    if isinstance(record, MosRecord):
        return (cache(record.dist),) if record.ref is None else (cache(record.dist), cache(record.ref))
    if isinstance(record, DistRecord):
        return (cache(record.dist),)
    return cache(record.ref), cache(record.a), cache(record.b)


def _stack_groups(items):
    """Group consecutive same-shape samples so they can run as one batch."""
    groups, current = [], []
    for item in items:
        if current and current[0][0][0].shape != item[0][0].shape:
            groups.append(current)
            current = []
        current.append(item)
    if current:
        groups.append(current)
    return groups


def _batch_loss(model, kind, group, emd_r):
    images = [np.stack(col) for col in zip(*(imgs for imgs, _ in group))]
    labels = [rec for _, rec in group]
    if kind == "2afc":
        ref, a, b = images
        y_a, y_b = model(a, ref), model(b, ref)
        return loss_2afc(y_a, y_b, np.array([r.p_ab for r in labels]))
    out = model(*images)
    if kind == "dist":
        return emd_loss(out, np.stack([r.p for r in labels]), r=emd_r)
    return mos_mse(out, np.array([r.mos for r in labels]))


def _check_kind(model, manifest):
    kind = manifest.kind
    if kind in ("mos-fr", "2afc") and model.mode != "FR":
        raise ArgumentError(f"{kind} data needs an FR model")
    if kind in ("mos-nr", "dist") and model.mode != "NR":
        raise ArgumentError(f"{kind} data needs an NR model")
    if (kind == "dist") != (model.config.head == "distribution"):
        raise ArgumentError(f"{kind} data does not match a {model.config.head} head")
    if kind == "dist" and manifest.records and len(manifest.records[0].p) != model.config.bins:
        raise ArgumentError(f"manifest has {len(manifest.records[0].p)} bins, model has {model.config.bins}")


# -- prediction / evaluation -------------------------------------------------------

def _prepare(img, step):
    return center_crop_multiple(np.asarray(img, dtype=np.float32), step)


def predict_record(model, record, cache=None):
    """Scalar prediction for one record; 2AFC records give ``(y_a, y_b)``."""
    cache = cache or ImageCache()
    step = 2 ** model.config.n
    if isinstance(record, TwoAFCRecord):
        ref, a, b = (_prepare(cache(x), step) for x in (record.ref, record.a, record.b))
        return float(model.predict(a, ref)[0]), float(model.predict(b, ref)[0])
    dist = _prepare(cache(record.dist), step)
    ref = None if getattr(record, "ref", None) is None else _prepare(cache(record.ref), step)
    return float(model.predict(dist, ref)[0])


def _labels(manifest):
    if manifest.kind == "dist":
        return np.array([float(distribution_mean(r.p)) for r in manifest.records])
    return np.array([r.mos for r in manifest.records])


def evaluate(model, manifest: Manifest, cache=None) -> EvalReport:
    """Score every record and run the correlation protocol.

    ``model`` is a :class:`CFANet` or any callable ``record -> score``
    (``record -> (y_a, y_b)`` for 2AFC manifests).
    """
    if not manifest.records:
        raise ArgumentError("cannot evaluate an empty manifest")
    cache = cache or ImageCache()
    if isinstance(model, CFANet):
        _check_kind(model, manifest)
        predict = lambda rec: predict_record(model, rec, cache)  # noqa: E731
    else:
        predict = model
    preds = [predict(r) for r in manifest.records]
    if manifest.kind == "2afc":
        ya, yb = (np.array(v) for v in zip(*preds))
        p_ab = np.array([r.p_ab for r in manifest.records])
        # p_a: share of votes against A, so that lower means better as for y
        report = EvalReport(n_samples=len(preds))
        report.twoafc = score_2afc(np.stack([ya, yb, 1.0 - p_ab, p_ab], axis=1))
        p_hat = bt_probability(ya, yb).data
        try:
            sub = evaluate_scores(p_hat, p_ab)
            report.plcc, report.srcc, report.fit = sub.plcc, sub.srcc, sub.fit
        except DegenerateInputError:
            pass
        return report
    preds = np.array(preds, dtype=np.float64)
    if not np.all(np.isfinite(preds)):
        raise NumericError("model produced non-finite scores")
    return evaluate_scores(preds, _labels(manifest))


def _val_metrics(model, manifest, cache):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = evaluate(model, manifest, cache)
    except DegenerateInputError:
        return float("nan"), float("nan")
    return rep.plcc, rep.srcc


def _key(srcc_value, plcc_value):
    """Validation ranking key: SRCC first, PLCC breaks ties; NaN ranks lowest."""
    return tuple(-math.inf if math.isnan(v) else v for v in (srcc_value, plcc_value))


# -- training -----------------------------------------------------------------------

def train(model: CFANet, train_set: Manifest, val_set: Manifest, cfg: TrainConfig, progress=None):
    """Fit ``model`` in place; return the best-validation checkpoint and the log.

    The first epoch always becomes the incumbent; later epochs replace it only
    on a strictly higher validation SRCC, with PLCC breaking exact SRCC ties
    (NaN never improves).  Training stops after ``patience`` epochs without
    improvement.
    """
    if not train_set.records or not val_set.records:
        raise ArgumentError("training and validation sets must be nonempty")
    if train_set.kind != val_set.kind:
        raise ArgumentError(f"train kind {train_set.kind} != validation kind {val_set.kind}")
    _check_kind(model, train_set)
    kind = train_set.kind
    eta_max = cfg.base_lr(model.mode)
    opt = AdamW(model.parameters(), lr=eta_max, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
    aug = AugmentConfig(crop=cfg.crop, hflip=cfg.hflip, vflip=cfg.vflip, seed=cfg.seed,
                        shorter_side=cfg.shorter_side, shorter_side_range=cfg.shorter_side_range)
    cache = ImageCache()
    meta = {"mos_stats": list(train_set.mos_stats)} if train_set.mos_stats else {}
    tlog = TrainLog()
    best = Checkpoint.from_model(model, meta)
    best_key = (-math.inf, -math.inf)
    stall = 0
    step = 2 ** model.config.n
    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(epoch, eta_max, cfg.eta_min, cfg.t_max, cfg.restart)
        opt.lr = lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            items = []
            for i in idx:
                rec = train_set.records[i]
                imgs = augment(_sample_images(rec, cache), aug, sample_rng(cfg.seed, epoch, int(i)))
                items.append((tuple(_prepare(im, step) for im in imgs), rec))
            opt.zero_grad()
            batch_total = 0.0
            for group in _stack_groups(items):
                loss = _batch_loss(model, kind, group, cfg.emd_r)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch starting at sample {start}")
                # scale so that split groups still average over the whole batch
                (loss * (len(group) / len(idx))).backward()
                batch_total += value * len(group)
            opt.step()
            losses.append(batch_total / len(idx))
        train_loss = float(np.mean(losses))
        val_plcc, val_srcc = _val_metrics(model, val_set, cache)
        key = _key(val_srcc, val_plcc)
        if epoch == 0 or key > best_key:
            best_key = key
            tlog.best_epoch = epoch
            best = Checkpoint.from_model(model, meta)
            stall = 0
        else:
            stall += 1
        tlog.record(epoch, train_loss, val_plcc, val_srcc, lr, best_key[0])
        if progress is not None:
            progress(tlog.epochs[-1])
        log.debug("epoch %d loss %.6f val srcc %.4f", epoch, train_loss, val_srcc)
        if stall >= cfg.patience:
            tlog.stopped_early = True
            break
    model.load_state_dict(copy.deepcopy(best.params))
    return best, tlog
