"""Manifests, image I/O, augmentation, resizing and reference-aware splits."""
from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import numerics as nx
from .exceptions import ArgumentError, DataError, ManifestError, UnsupportedKindError

KINDS = ("mos-fr", "mos-nr", "dist", "2afc")
HEADERS = {
    "mos-fr": ["dist_path", "ref_path", "mos"],
    "mos-nr": ["dist_path", "mos"],
    "2afc": ["ref_path", "a_path", "b_path", "p_ab"],
}
FR_KINDS = ("mos-fr", "2afc")

# -- images ---------------------------------------------------------------------

RAW_MAGIC = b"RAWT"


def save_raw(path, array):
    """Raw tensor file: magic, uint32 ndim, uint32 dims, little-endian float32 data."""
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_raw(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RAW_MAGIC or len(blob) < 8:
        raise DataError(f"{path}: not a raw tensor file")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    start = 8 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - start != 4 * count:
        raise DataError(f"{path}: payload size does not match shape {dims}")
    return np.frombuffer(blob, dtype="<f4", offset=start).reshape(dims).astype(np.float32)


def load_image(path):
    """Return a float32 ``(3, H, W)`` array in [0, 1] from a PNG/JPEG or raw tensor file."""
    if str(path).endswith(".raw"):
        img = load_raw(path)
        if img.ndim == 2:
            img = np.repeat(img[None], 3, axis=0)
        if img.ndim != 3 or img.shape[0] != 3:
            raise DataError(f"{path}: raw image must be (3, H, W), got {img.shape}")
        return img
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, img):
    """Write a ``(3, H, W)`` or ``(H, W)`` array in [0, 1]: PNG, or raw for ``.raw``."""
    img = np.asarray(img, dtype=np.float32)
    if str(path).endswith(".raw"):
        save_raw(path, img)
        return
    from PIL import Image

    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")


# -- manifests ------------------------------------------------------------------

@dataclass
class MosRecord:
    dist: object
    mos: float
    ref: object = None
    mos_raw: float = float("nan")


@dataclass
class DistRecord:
    dist: object
    p: np.ndarray


@dataclass
class TwoAFCRecord:
    ref: object
    a: object
    b: object
    p_ab: float


@dataclass
class Manifest:
    kind: str
    records: list
    root: str = "."
    mos_stats: tuple | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def is_fr(self):
        return self.kind in FR_KINDS

    def subset(self, indices):
        return replace(self, records=[self.records[i] for i in indices])


def infer_kind(header):
    header = [h.strip() for h in header]
    for kind, cols in HEADERS.items():
        if header == cols:
            return kind
    if len(header) >= 3 and header[0] == "dist_path" and all(h == f"p{i}" for i, h in enumerate(header[1:], 1)):
        return "dist"
    raise ManifestError(f"unrecognised header {','.join(header)}", row=1)


def _resolve(root, value, row, check_files):
    value = value.strip()
    if not value:
        raise ManifestError("empty path", row=row)
    path = value if os.path.isabs(value) else os.path.normpath(os.path.join(root, value))
    if check_files and not os.path.exists(path):
        raise ManifestError(f"missing file {value}", row=row)
    return path


def _number(value, row, what):
    try:
        x = float(value)
    except ValueError:
        raise ManifestError(f"{what} is not a number: {value!r}", row=row) from None
    if not math.isfinite(x):
        raise ManifestError(f"{what} is not finite", row=row)
    return x


def normalize_mos(values, stats=None):
    """Min-max scale to [0, 1]; ``stats=(lo, hi)`` reuses training-split statistics."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = (float(values.min()), float(values.max())) if stats is None else stats
    if hi == lo:
        return np.full_like(values, 0.5), (lo, hi)
    return (values - lo) / (hi - lo), (lo, hi)


def load_manifest(path, kind=None, mos_stats=None, mos_range=None, check_files=True):
    """Parse and validate a manifest CSV (header row required).

    Paths are relative to the manifest's directory.  MOS values are min-max
    normalised (using ``mos_stats`` when given); ``mos_range=(lo, hi)``
    rejects values outside the declared rating scale.
    """
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    if not rows:
        raise ManifestError("empty manifest", row=1)
    found = infer_kind(rows[0])
    if kind is not None and kind != found:
        raise ManifestError(f"expected a {kind} manifest, header says {found}", row=1)
    width = len(rows[0])
    records = []
    for row_no, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise ManifestError(f"expected {width} columns, found {len(row)}", row=row_no)
        if found in ("mos-fr", "mos-nr"):
            mos = _number(row[-1], row_no, "mos")
            if mos_range is not None and not mos_range[0] <= mos <= mos_range[1]:
                raise ManifestError(f"mos {mos} outside declared range {mos_range}", row=row_no)
            ref = _resolve(root, row[1], row_no, check_files) if found == "mos-fr" else None
            records.append(MosRecord(dist=_resolve(root, row[0], row_no, check_files), mos=mos, ref=ref, mos_raw=mos))
        elif found == "dist":
            p = np.array([_number(v, row_no, f"p{i}") for i, v in enumerate(row[1:], 1)])
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-4:
                raise ManifestError("score distribution must be nonnegative and sum to 1", row=row_no)
            records.append(DistRecord(dist=_resolve(root, row[0], row_no, check_files), p=p))
        else:
            p_ab = _number(row[3], row_no, "p_ab")
            if not 0.0 <= p_ab <= 1.0:
                raise ManifestError(f"p_ab {p_ab} outside [0, 1]", row=row_no)
            ref, a, b = (_resolve(root, v, row_no, check_files) for v in row[:3])
            records.append(TwoAFCRecord(ref=ref, a=a, b=b, p_ab=p_ab))
    manifest = Manifest(found, records, root=root)
    if found in ("mos-fr", "mos-nr") and records:
        normed, stats = normalize_mos([r.mos_raw for r in records], mos_stats)
        for r, v in zip(records, normed):
            r.mos = float(v)
        manifest.mos_stats = stats
    return manifest


def _rel(path, out_dir):
    if not isinstance(path, str):
        raise ArgumentError("only path-backed records can be written to a manifest")
    return os.path.relpath(path, out_dir).replace(os.sep, "/")


def write_manifest(manifest: Manifest, path):
    """Write records with paths relative to the output file's directory."""
    out_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if manifest.kind == "dist":
            k = len(manifest.records[0].p) if manifest.records else 0
            w.writerow(["dist_path"] + [f"p{i}" for i in range(1, k + 1)])
        else:
            w.writerow(HEADERS[manifest.kind])
        for r in manifest.records:
            if manifest.kind == "mos-fr":
                w.writerow([_rel(r.dist, out_dir), _rel(r.ref, out_dir), repr(r.mos_raw)])
            elif manifest.kind == "mos-nr":
                w.writerow([_rel(r.dist, out_dir), repr(r.mos_raw)])
            elif manifest.kind == "dist":
                w.writerow([_rel(r.dist, out_dir)] + [repr(float(x)) for x in r.p])
            else:
                w.writerow([_rel(r.ref, out_dir), _rel(r.a, out_dir), _rel(r.b, out_dir), repr(r.p_ab)])


# -- splitting ------------------------------------------------------------------

def split_counts(total, ratios):
    """Floor each share, then hand leftovers out in train -> val -> test order."""
    fracs = [Fraction(r).limit_denominator(10 ** 6) for r in ratios]
    if any(f < 0 for f in fracs) or sum(fracs) == 0:
        raise ArgumentError(f"invalid split ratios {ratios}")
    norm = sum(fracs)
    counts = [math.floor(total * f / norm) for f in fracs]
    i = 0
    while sum(counts) < total:
        counts[i % len(counts)] += 1
        i += 1
    return counts


def parse_ratios(text):
    try:
        parts = [Fraction(p) for p in text.split(":")]
    except (ValueError, ZeroDivisionError):
        raise ArgumentError(f"cannot parse ratios {text!r}") from None
    if len(parts) != 3:
        raise ArgumentError(f"expected train:val:test ratios, got {text!r}")
    return tuple(parts)


def _check_ratios(ratios):
    if len(ratios) != 3:
        raise ArgumentError("ratios must be (train, val, test)")
    fr = [Fraction(r).limit_denominator(10 ** 6) for r in ratios]
    total = sum(fr)
    # integer weights like 6:2:2 and fractions summing to one are both accepted
    if total != 1 and not all(f.denominator == 1 for f in fr):
        raise ArgumentError(f"ratios {ratios} must sum to 1 or be integer weights")


def _partition(groups, ratios, seed):
    counts = split_counts(len(groups), ratios)
    order = np.random.default_rng(seed).permutation(len(groups))
    bounds = np.cumsum([0] + counts)
    return [[groups[j] for j in sorted(order[bounds[s]:bounds[s + 1]])] for s in range(3)]


def split_by_reference(manifest: Manifest, ratios=(6, 2, 2), seed=0):
    """Shuffle distinct references and partition them; each record follows its reference."""
    if not manifest.is_fr:
        raise UnsupportedKindError(f"{manifest.kind} manifests have no reference column; use split_records")
    _check_ratios(ratios)
    refs = sorted({r.ref for r in manifest.records})
    parts = _partition(refs, ratios, seed)
    out = []
    for part in parts:
        keep = set(part)
        out.append(manifest.subset([i for i, r in enumerate(manifest.records) if r.ref in keep]))
    return tuple(out)


def split_records(manifest: Manifest, ratios=(6, 2, 2), seed=0):
    """Plain record-level split (for no-reference manifests)."""
    _check_ratios(ratios)
    parts = _partition(list(range(len(manifest))), ratios, seed)
    return tuple(manifest.subset(p) for p in parts)


# -- geometry -------------------------------------------------------------------

def resize_shorter_side(img, target):
    """Bilinear resize so the shorter side equals ``target``, keeping aspect ratio."""
    if target < 1:
        raise ArgumentError(f"target side must be positive, got {target}")
    img = np.asarray(img)
    h, w = img.shape[-2:]
    scale = target / min(h, w)
    new_h, new_w = (target, int(round(w * scale))) if h <= w else (int(round(h * scale)), target)
    if (new_h, new_w) == (h, w):
        return img
    with nx.no_grad():
        return nx.bilinear_resize(nx.Tensor(img), new_h, new_w).data


def center_crop_multiple(img, step):
    """Center-crop the last two axes down to multiples of ``step``."""
    h, w = img.shape[-2:]
    nh, nw = h - h % step, w - w % step
    if nh == 0 or nw == 0:
        raise ArgumentError(f"image {h}x{w} is smaller than the required multiple {step}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[..., top:top + nh, left:left + nw]


@dataclass
class AugmentConfig:
    crop: tuple | None = None
    hflip: float = 0.5
    vflip: float = 0.5
    seed: int = 0
    shorter_side: int | None = None
    shorter_side_range: tuple | None = None


def augment(images, cfg: AugmentConfig, rng):
    """Apply one random crop / flip draw identically to every image of a sample.

    ``images`` is a tuple of ``(3, H, W)`` arrays of equal size (e.g. distorted +
    reference, or reference + two candidates).  Labels are untouched by design.
    """
    images = [np.asarray(im) for im in images]
    if cfg.shorter_side_range is not None:
        lo, hi = cfg.shorter_side_range
        side = int(rng.integers(lo, hi + 1))
        images = [resize_shorter_side(im, side) for im in images]
    elif cfg.shorter_side is not None:
        images = [resize_shorter_side(im, cfg.shorter_side) for im in images]
    h, w = images[0].shape[-2:]
    if any(im.shape != images[0].shape for im in images):
        raise ArgumentError("images of one sample must share a shape")
    ch, cw = cfg.crop if cfg.crop is not None else (h, w)
    if ch > h or cw > w:
        raise ArgumentError(f"crop {ch}x{cw} larger than image {h}x{w}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip_h = rng.random() < cfg.hflip
    flip_v = rng.random() < cfg.vflip
    out = []
    for im in images:
        im = im[..., top:top + ch, left:left + cw]
        if flip_h:
            im = im[..., :, ::-1]
        if flip_v:
            im = im[..., ::-1, :]
        out.append(np.ascontiguousarray(im))
    return tuple(out)


def sample_rng(seed, epoch, index):
    """Independent generator per (seed, epoch, sample) so loading order is irrelevant."""
    return np.random.default_rng([seed, epoch, index])


# -- synthetic fixtures ---------------------------------------------------------

def make_texture(size=64, seed=0):
    """Smooth random colour texture in roughly [0.2, 0.8], shape ``(3, size, size)``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((3, size, size))
    for c in range(3):
        for _ in range(6):
            fy, fx = rng.uniform(1, 8, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            img[c] += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    img -= img.min()
    img /= img.max()
    return (0.2 + 0.6 * img).astype(np.float32)


def add_noise(img, sigma, seed):
    rng = np.random.default_rng(seed)
    noisy = img + sigma * rng.standard_normal(img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def noise_series(texture, sigmas, seed=0, sigma_max=None):
    """Distorted copies of ``texture`` with additive Gaussian noise.

    Returns ``(pairs, mos)`` with ``mos = 1 - sigma / sigma_max``.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    sigma_max = float(sigmas.max()) if sigma_max is None else sigma_max
    pairs = [(add_noise(texture, s, seed * 1000 + k), texture) for k, s in enumerate(sigmas)]
    return pairs, 1.0 - sigmas / sigma_max


def write_noise_manifest(out_dir, texture_seed=0, sigmas=None, size=64, noise_seed=0, fmt="png"):
    """Materialise a synthetic MOS-FR set on disk; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    sigmas = np.linspace(0.0, 0.3, 16) if sigmas is None else np.asarray(sigmas)
    tex = make_texture(size, texture_seed)
    pairs, mos = noise_series(tex, sigmas, seed=noise_seed, sigma_max=0.3)
    ext = ".png" if fmt == "png" else ".raw"
    ref_name = f"ref_{texture_seed}{ext}"
    save_image(os.path.join(out_dir, ref_name), tex)
    path = os.path.join(out_dir, "manifest.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADERS["mos-fr"])
        for k, ((dist, _), m) in enumerate(zip(pairs, mos)):
            name = f"dist_{texture_seed}_{k:02d}{ext}"
            save_image(os.path.join(out_dir, name), dist)
            w.writerow([name, ref_name, repr(float(m))])
    return path


@dataclass
class ImageCache:
    """Loads each path once; arrays pass through unchanged."""

    store: dict = field(default_factory=dict)

    def __call__(self, item):
        if not isinstance(item, str):
            return np.asarray(item, dtype=np.float32)
        if item not in self.store:
            self.store[item] = load_image(item)
        return self.store[item]
