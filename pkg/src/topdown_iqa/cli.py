"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.  Every
failure prints one line ``error[<category>]: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings

import numpy as np

from . import __version__
from .backbone import DEFAULT_CHANNELS, BackboneConfig, ToyBackbone
from .data import (ImageCache, center_crop_multiple, load_image, load_manifest, parse_ratios,
                   save_image, split_by_reference, split_records, write_manifest)
from .exceptions import ArgumentError, DataError, NumericError
from .lpipsplus import DEFAULT_LAYER, layer_sweep, lpips_plus_pair
from .model import CFANet, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "model.ckpt"
TRAINLOG_NAME = "trainlog.csv"
CONFIG_NAME = "config.json"
RANGES_NAME = "ranges.txt"


class UsageError(Exception):
    """Bad flags or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers ------------------------------------------------------------------------

def _read_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise DataError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    known = set(ModelConfig.__dataclass_fields__) | set(TrainConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {', '.join(unknown)}")
    return raw


def _image(path, step=None):
    img = load_image(path)
    return img if step is None else center_crop_multiple(img, step)


def _model_config(raw, manifest, step_probe):
    d = dict(raw)
    kind = manifest.kind
    d.setdefault("mode", "FR" if manifest.is_fr else "NR")
    if kind == "dist":
        d.setdefault("head", "distribution")
        d.setdefault("bins", len(manifest.records[0].p))
    if "image_size" not in d:
        if d.get("crop"):
            d["image_size"] = d["crop"]
        else:
            n = d.get("n", ModelConfig.n)
            d["image_size"] = list(step_probe(2 ** n).shape[-2:])
    try:
        return ModelConfig.from_dict(d), TrainConfig.from_dict(
            {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (ArgumentError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _first_image(manifest):
    rec = manifest.records[0]
    return getattr(rec, "dist", None) or rec.a


def _prepared_model_inputs(model, dist, ref):
    step = 2 ** model.config.n
    if model.mode == "FR" and ref is None:
        raise UsageError("this checkpoint is full-reference; pass --ref")
    if model.mode == "NR" and ref is not None:
        raise UsageError("this checkpoint is no-reference; drop --ref")
    d = _image(dist, step)
    r = None if ref is None else _image(ref, step)
    if r is not None and r.shape != d.shape:
        raise DataError(f"distorted {d.shape[1:]} and reference {r.shape[1:]} sizes differ")
    return d, r


def _normalize_map(a):
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    return ((a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)), lo, hi


def _tile(weights, grid):
    """``(T, T)`` weights -> one image with each query's heat map in its grid cell."""
    h, w = grid
    return np.asarray(weights).reshape(h, w, h, w).transpose(0, 2, 1, 3).reshape(h * h, w * w)


# -- subcommands --------------------------------------------------------------------

def cmd_train(args):
    raw = _read_config(args.config)
    train_set = load_manifest(args.train)
    if not train_set.records:
        raise DataError(f"{args.train}: no records")
    mcfg, tcfg = _model_config(raw, train_set, lambda step: _image(_first_image(train_set), step))
    val_set = load_manifest(args.val, kind=train_set.kind, mos_stats=train_set.mos_stats)
    model = CFANet(mcfg)
    best, tlog = train(model, train_set, val_set, tcfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(best, os.path.join(args.out, CHECKPOINT_NAME))
    with open(os.path.join(args.out, TRAINLOG_NAME), "w", newline="") as fh:
        fh.write(tlog.to_csv())
    with open(os.path.join(args.out, CONFIG_NAME), "w") as fh:
        json.dump({**mcfg.to_dict(), **tcfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    best_row = tlog.epochs[tlog.best_epoch]
    print(f"best_epoch={tlog.best_epoch} val_srcc={best_row['val_srcc']!r} val_plcc={best_row['val_plcc']!r}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    stats = ckpt.meta.get("mos_stats")
    manifest = load_manifest(args.manifest, mos_stats=tuple(stats) if stats else None)
    report = evaluate(ckpt.build(), manifest, ImageCache())
    text = report.to_text()
    with open(args.report, "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_score(args):
    model = load_checkpoint(args.ckpt).build()
    dist, ref = _prepared_model_inputs(model, args.dist, args.ref)
    score = float(model.predict(dist, ref)[0])
    if not math.isfinite(score):
        raise NumericError("model produced a non-finite score")
    print(repr(score))
    return EXIT_OK


def _extractor(args):
    if args.ckpt:
        backbone = load_checkpoint(args.ckpt).build().backbone
    else:
        channels = tuple(args.channels) if args.channels else DEFAULT_CHANNELS[:args.levels]
        cfg = BackboneConfig(n=args.levels, channels=channels, freeze=True)
        backbone = ToyBackbone(cfg, np.random.default_rng(args.seed))
    return backbone, 2 ** backbone.cfg.n


def cmd_lpips_plus(args):
    if args.layer < 0:
        raise UsageError("--layer must be 0 (uniform) or a pyramid level")
    if args.sweep is None and (args.dist is None or args.ref is None):
        raise UsageError("pass --dist and --ref, or --sweep with --manifest")
    if args.sweep is not None and args.manifest is None:
        raise UsageError("--sweep needs --manifest with rated pairs")
    backbone, step = _extractor(args)
    if args.layer > backbone.cfg.n:
        raise UsageError(f"--layer {args.layer} exceeds the {backbone.cfg.n} pyramid levels")
    if args.sweep is not None:
        manifest = load_manifest(args.manifest, kind="mos-fr")
        cache = ImageCache()
        pairs = [(center_crop_multiple(cache(r.dist), step), center_crop_multiple(cache(r.ref), step))
                 for r in manifest.records]
        rows = layer_sweep(pairs, [r.mos_raw for r in manifest.records], backbone, orientation=args.orientation)
        lines = ["layer,srcc"] + [f"{r['layer']},{r['srcc']!r}" for r in rows]
        with open(args.sweep, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
        for line in lines[1:]:
            print(line)
    if args.dist is not None and args.ref is not None:
        d, r = _image(args.dist, step), _image(args.ref, step)
        if d.shape != r.shape:
            raise DataError(f"distorted {d.shape[1:]} and reference {r.shape[1:]} sizes differ")
        value = lpips_plus_pair(d, r, backbone, args.layer, args.orientation)
        if not math.isfinite(value):
            raise NumericError("LPIPS+ produced a non-finite value")
        print(repr(value))
    return EXIT_OK


def cmd_split(args):
    try:
        ratios = parse_ratios(args.ratios)
    except ArgumentError as exc:
        raise UsageError(str(exc)) from exc
    manifest = load_manifest(args.manifest)
    if args.by_reference:
        parts = split_by_reference(manifest, ratios, args.seed)
    else:
        parts = split_records(manifest, ratios, args.seed)
    os.makedirs(args.out, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        write_manifest(part, os.path.join(args.out, f"{name}.csv"))
        print(f"{name}={len(part)}")
    return EXIT_OK


def cmd_export_attn(args):
    """GLP masks ``glp_mask_level<i>.png`` for levels ``1..n-1`` and CSA grids
    ``csa_level<i>.png`` (level ``i`` queried by level ``i+1``) for ``i = 1..n-1``."""
    model = load_checkpoint(args.ckpt).build()
    dist, ref = _prepared_model_inputs(model, args.dist, args.ref)
    trace = {}
    from . import numerics as nx

    with nx.no_grad():
        model(dist[None], None if ref is None else ref[None], trace=trace)
    os.makedirs(args.out, exist_ok=True)
    n = model.config.n
    ranges = []
    for level in range(1, n):
        mask = trace["glp_mask"][level].data[0, 0]
        ranges.append(_write_map(args.out, f"glp_mask_level{level}.png", mask))
    for level in range(1, n):
        weights = trace["csa_weights"][level].data[0].mean(axis=0)
        grid = trace["glp_mask"][n].shape[-2:]
        ranges.append(_write_map(args.out, f"csa_level{level}.png", _tile(weights, grid)))
    with open(os.path.join(args.out, RANGES_NAME), "w") as fh:
        fh.writelines(f"{name} {lo!r} {hi!r}\n" for name, lo, hi in ranges)
    for name, _, _ in ranges:
        print(name)
    return EXIT_OK


def _write_map(out, name, array):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{name}: non-finite attention values")
    img, lo, hi = _normalize_map(array)
    save_image(os.path.join(out, name), img)
    return name, lo, hi


# -- parser -------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="topdown-iqa", description="Top-down attention image quality assessment.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a model from manifests")
    s.add_argument("--config", required=True, help="flat JSON of model and training fields")
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="score one image (pair)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dist", required=True)
    s.add_argument("--ref")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("lpips-plus", help="semantically weighted perceptual similarity")
    s.add_argument("--dist")
    s.add_argument("--ref")
    s.add_argument("--layer", type=int, default=DEFAULT_LAYER, help="weighting level, 0 for uniform")
    s.add_argument("--sweep", help="write per-layer SRCC for --manifest to this CSV")
    s.add_argument("--manifest", help="mos-fr manifest for --sweep")
    s.add_argument("--orientation", choices=("similarity", "distance"), default="similarity")
    s.add_argument("--ckpt", help="take the feature extractor from a trained checkpoint")
    s.add_argument("--levels", type=int, default=BackboneConfig.n)
    s.add_argument("--channels", type=int, nargs="+")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_lpips_plus)

    s = sub.add_parser("split", help="split a manifest into train/val/test")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ratios", default="6:2:2")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--by-reference", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("export-attn", help="write GLP masks and CSA weights as PNGs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dist", required=True)
    s.add_argument("--ref")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_attn)
    return p


def _fail(code, category, exc):
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error[{category}]: {message}", file=sys.stderr)
    return code


def run(argv=None):
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (NumericError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (DataError, ArgumentError, OSError) as exc:
        return _fail(EXIT_DATA, "data", exc)


def main():
    sys.exit(run())
