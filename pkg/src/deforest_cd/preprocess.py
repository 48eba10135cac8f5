"""
Training-time image transforms.

* global histogram equalization, one channel at a time
* detection of the burned clear-cut ("magenta") spectral pattern and its
  replacement by a tiled texture of ordinary clear-cut
* joint random crop/resize and flips for (img1, img2, mask) triples
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import PatchSample
from .errors import ConfigurationError, DomainError, FormatError, ShapeError
from .raster import BinaryMask, RasterStack

__all__ = [
    "equalize_histogram",
    "equalization_lut",
    "equalize_stack",
    "equalize_quantized",
    "equalize_sample",
    "MagentaSignature",
    "TexturePatch",
    "MagentaReplacement",
    "fit_magenta",
    "detect_magenta",
    "texture_from_bbox",
    "replace_magenta",
    "AugmentConfig",
    "sample_rng",
    "augment",
    "augment_arrays",
]


# ---------------------------------------------------------------------------
# histogram equalization


def equalization_lut(band: np.ndarray, levels: int) -> np.ndarray:
    """Lookup table ``r_k = round((L - 1) * CDF(k))`` for ``k = 0 .. L-1``.

    Rounding is half-up and computed in exact integer arithmetic.
    """
    band = np.asarray(band)
    if levels < 2:
        raise ConfigurationError("need at least two intensity levels")
    if band.size == 0:
        raise DomainError("cannot equalize an empty band")
    if not np.issubdtype(band.dtype, np.integer):
        raise DomainError(f"equalization expects integer intensities, got {band.dtype}")
    lo, hi = int(band.min()), int(band.max())
    if lo < 0 or hi >= levels:
        raise DomainError(f"intensities must lie in [0, {levels - 1}], found [{lo}, {hi}]")
    counts = np.bincount(band.ravel(), minlength=levels).astype(np.int64)
    cum = np.cumsum(counts)
    n = int(cum[-1])
    # floor(((L-1) * cum + n/2) / n), kept in integers
    return ((levels - 1) * cum * 2 + n) // (2 * n)


def equalize_histogram(band: np.ndarray, levels: int = 256) -> np.ndarray:
    """Globally equalize one integer band with ``levels`` intensity levels.

    Raises
    ------
    DomainError
        If a value falls outside ``[0, levels - 1]``.
    """
    band = np.asarray(band)
    lut = equalization_lut(band, levels)
    return lut[band].astype(band.dtype)


def equalize_stack(stack: RasterStack, levels: int = 65536, skip: Sequence[str] = ("NDVI",)) -> RasterStack:
    """Equalize every band independently, leaving bands named in ``skip`` alone."""
    out = stack.data.copy()
    names = stack.band_names or [""] * stack.bands
    for k in range(stack.bands):
        if names[k] in skip:
            continue
        out[k] = equalize_histogram(stack.data[k], levels)
    return RasterStack(out, stack.transform, stack.band_names)


def equalize_quantized(band: np.ndarray, levels: int = 4096) -> np.ndarray:
    """Equalize a real-valued band by first binning it into ``levels`` uniform bins.

    Returns float32 values ``r_k / (levels - 1)`` in [0, 1]. A constant band
    maps to 1 everywhere.
    """
    band = np.asarray(band, dtype=np.float64)
    lo, hi = band.min(), band.max()
    if hi > lo:
        q = np.floor((band - lo) / (hi - lo) * levels).astype(np.int64)
        q = np.clip(q, 0, levels - 1)
    else:
        q = np.zeros(band.shape, dtype=np.int64)
    return (equalize_histogram(q, levels) / (levels - 1)).astype(np.float32)


def equalize_sample(sample: PatchSample, levels: int = 4096, skip: Sequence[str] = ("NDVI",)) -> PatchSample:
    """Per-patch equalization of stored (standardized) samples at load time."""
    names = sample.band_names or [""] * sample.img1.shape[0]

    def _eq(img):
        out = img.copy()
        for k in range(img.shape[0]):
            if names[k] not in skip:
                out[k] = equalize_quantized(img[k], levels)
        return out

    return PatchSample(
        _eq(sample.img1),
        _eq(sample.img2),
        sample.mask,
        sample.scene_id,
        sample.year_pair,
        sample.index,
        sample.origin,
        sample.band_names,
    )


# ---------------------------------------------------------------------------
# magenta clear-cut pattern


def _bbox_slices(bbox, shape) -> tuple[slice, slice]:
    """``(x0, y0, x1, y1)`` inclusive pixel corners (x = column, y = row)."""
    x0, y0, x1, y1 = (int(v) for v in bbox)
    x0, x1 = min(x0, x1), max(x0, x1)
    y0, y1 = min(y0, y1), max(y0, y1)
    h, w = shape
    if x0 < 0 or y0 < 0 or x1 >= w or y1 >= h:
        raise ConfigurationError(f"bbox {tuple(bbox)} is not inside a {h}x{w} image")
    return slice(y0, y1 + 1), slice(x0, x1 + 1)


@dataclass
class MagentaSignature:
    """Per-band mean/std of reference magenta pixels and the interval width ``k``."""

    mean: np.ndarray
    std: np.ndarray
    k: float = 1.2
    bands: tuple[int, ...] | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ShapeError("mean and std must have the same length")
        if np.any(self.std < 0):
            raise ConfigurationError("standard deviations must be non-negative")
        if self.k <= 0:
            raise ConfigurationError("interval width k must be positive")
        if self.bands is None:
            self.bands = tuple(range(len(self.mean)))
        self.bands = tuple(int(b) for b in self.bands)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "k": self.k, "bands": list(self.bands)}

    @classmethod
    def from_dict(cls, d: dict) -> "MagentaSignature":
        return cls(d["mean"], d["std"], d.get("k", 1.2), d.get("bands"))


@dataclass
class TexturePatch:
    data: np.ndarray
    bbox: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape[1:]) < 1:
            raise ShapeError(f"texture must be (C, h, w) with h, w >= 1, got {self.data.shape}")


def fit_magenta(stack: RasterStack, bbox, k: float = 1.2, bands: Sequence[int] | None = None) -> MagentaSignature:
    """Mean and population std of each band over the inclusive bbox ``(x0, y0, x1, y1)``."""
    rs, cs = _bbox_slices(bbox, stack.shape)
    region = stack.data[:, rs, cs].reshape(stack.bands, -1).astype(np.float64)
    if region.shape[1] == 0:
        raise ConfigurationError("empty bbox")
    bands = tuple(range(stack.bands)) if bands is None else tuple(bands)
    return MagentaSignature(region.mean(axis=1), region.std(axis=1), k, bands)


def detect_magenta(stack: RasterStack, sig: MagentaSignature) -> BinaryMask:
    """Flag pixels with ``mean_b - k*std_b <= p_b <= mean_b + k*std_b`` in every band of the signature."""
    flags = np.ones(stack.shape, dtype=bool)
    for b in sig.bands:
        p = stack.data[b].astype(np.float64)
        lo = sig.mean[b] - sig.k * sig.std[b]
        hi = sig.mean[b] + sig.k * sig.std[b]
        flags &= (p >= lo) & (p <= hi)
    return BinaryMask(flags.astype(np.uint8), stack.transform)


def texture_from_bbox(stack: RasterStack, bbox) -> TexturePatch:
    rs, cs = _bbox_slices(bbox, stack.shape)
    return TexturePatch(stack.data[:, rs, cs].copy(), tuple(int(v) for v in bbox))


def replace_magenta(stack: RasterStack, flags: BinaryMask, tex: TexturePatch) -> RasterStack:
    """Overwrite flagged pixels with the periodically tiled texture value at the same ``(i, j)``."""
    if flags.shape != stack.shape:
        raise ShapeError(f"flags {flags.shape} do not match image {stack.shape}")
    if tex.data.shape[0] != stack.bands:
        raise ShapeError(f"texture has {tex.data.shape[0]} bands, image has {stack.bands}")
    h, w = stack.shape
    th, tw = tex.data.shape[1:]
    tiled = np.tile(tex.data, (1, -(-h // th), -(-w // tw)))[:, :h, :w]
    out = np.where(flags.data.astype(bool)[None], tiled.astype(stack.data.dtype), stack.data)
    return RasterStack(out, stack.transform, stack.band_names)


@dataclass
class MagentaReplacement:
    """Signature plus texture, ready to be applied to raw scenes."""

    signature: MagentaSignature
    texture: TexturePatch

    def apply(self, stack: RasterStack) -> RasterStack:
        return replace_magenta(stack, detect_magenta(stack, self.signature), self.texture)

    def save(self, path) -> Path:
        """JSON description next to a raw little-endian f32 texture blob."""
        path = Path(path)
        blob = path.with_suffix(".tex.bin")
        doc = {
            "signature": self.signature.to_dict(),
            "texture": {
                "shape": list(self.texture.data.shape),
                "bbox": list(self.texture.bbox) if self.texture.bbox is not None else None,
                "dtype": "f32",
                "data": blob.name,
            },
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        blob.write_bytes(np.ascontiguousarray(self.texture.data, dtype="<f4").tobytes())
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MagentaReplacement":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            shape = tuple(int(v) for v in doc["texture"]["shape"])
            raw = (path.parent / doc["texture"]["data"]).read_bytes()
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: bad magenta description ({exc})") from exc
        if len(raw) != 4 * int(np.prod(shape)):
            raise FormatError(f"{path}: texture blob has the wrong size")
        data = np.frombuffer(raw, "<f4").reshape(shape).astype(np.float32)
        bbox = doc["texture"].get("bbox")
        return cls(MagentaSignature.from_dict(doc["signature"]), TexturePatch(data, tuple(bbox) if bbox else None))


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    scale_min: float = 0.4
    scale_max: float = 1.0
    vflip_p: float = 0.5
    hflip_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max <= 1:
            raise ConfigurationError("need 0 < scale_min <= scale_max <= 1")
        for p in (self.vflip_p, self.hflip_p):
            if not 0 <= p <= 1:
                raise ConfigurationError("flip probabilities must lie in [0, 1]")


def sample_rng(seed: int, epoch: int = 0, index: int = 0, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, stream, epoch, index)``.

    Philox output depends only on the key, so results do not change with the
    order or the worker in which samples are processed. ``stream`` separates
    independent uses of one seed (augmentation, shuffling, initialization).
    """
    ss = np.random.SeedSequence([int(seed), int(stream), int(epoch), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def _resize_coords(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    _, ih, iw = img.shape
    r = np.clip(_resize_coords(h, ih), 0, ih - 1)
    c = np.clip(_resize_coords(w, iw), 0, iw - 1)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, ih - 1)
    c1 = np.minimum(c0 + 1, iw - 1)
    fr = (r - r0)[None, :, None]
    fc = (c - c0)[None, None, :]
    top = img[:, r0][:, :, c0] * (1 - fc) + img[:, r0][:, :, c1] * fc
    bot = img[:, r1][:, :, c0] * (1 - fc) + img[:, r1][:, :, c1] * fc
    return (top * (1 - fr) + bot * fr).astype(img.dtype)


def _nearest(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    ih, iw = mask.shape
    r = np.minimum(np.floor((np.arange(h) + 0.5) * ih / h).astype(int), ih - 1)
    c = np.minimum(np.floor((np.arange(w) + 0.5) * iw / w).astype(int), iw - 1)
    return mask[r][:, c]


def augment_arrays(images: Sequence[np.ndarray], mask: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Apply one random crop/resize + flips identically to ``(C, H, W)`` images and an ``(H, W)`` mask.

    The same five random draws are consumed on every call, whatever the
    configured probabilities.
    """
    h, w = mask.shape
    scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    side = float(np.sqrt(scale))
    ch = min(h, max(1, int(round(h * side))))
    cw = min(w, max(1, int(round(w * side))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    vflip = rng.random() < cfg.vflip_p
    hflip = rng.random() < cfg.hflip_p

    out_imgs = []
    for img in images:
        crop = img[:, top : top + ch, left : left + cw]
        out = crop if (ch, cw) == (h, w) else _bilinear(crop, h, w)
        if vflip:
            out = out[:, ::-1, :]
        if hflip:
            out = out[:, :, ::-1]
        out_imgs.append(np.ascontiguousarray(out))
    m = mask[top : top + ch, left : left + cw]
    m = m if (ch, cw) == (h, w) else _nearest(m, h, w)
    if vflip:
        m = m[::-1, :]
    if hflip:
        m = m[:, ::-1]
    return out_imgs, np.ascontiguousarray(m)


def augment(sample: PatchSample, cfg: AugmentConfig, rng: np.random.Generator) -> PatchSample:
    (img1, img2), mask = augment_arrays([sample.img1, sample.img2], sample.mask, cfg, rng)
    return PatchSample(
        img1, img2, mask, sample.scene_id, sample.year_pair, sample.index, sample.origin, sample.band_names
    )
