"""
Change-detection dataset construction.

Turns a pair of co-registered scenes plus a polygon layer into fixed-size
(img1, img2, mask) samples: rasterize, align, crop to the common extent,
window, standardize, append NDVI, and store each sample in a compressed
``CDP1`` container.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, ShapeError
from .raster import (
    BinaryMask,
    GeoTransform,
    PolygonLayer,
    RasterStack,
    intersect_extents,
    null_mask,
    pixel_to_world,
    resample_to_grid,
    world_to_pixel,
)

__all__ = [
    "PatchSample",
    "BandStats",
    "rasterize_polygons",
    "window_starts",
    "extract_patches",
    "band_stats",
    "standardize",
    "ndvi_band",
    "compute_ndvi",
    "write_sample",
    "read_sample",
    "SceneInput",
    "BuildConfig",
    "prepare_scene",
    "build_dataset",
    "iter_samples",
    "LANDSAT_BANDS",
]

LANDSAT_BANDS = ["B1", "B2", "B3", "B4", "B5", "B6", "B7"]
RED, NIR = 3, 4

CDP_MAGIC = b"CDP1"
CDP_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQQ")
assert _HEADER.size == 40


@dataclass
class PatchSample:
    """Aligned ``(img1, img2, mask)`` window cut from one scene pair."""

    img1: np.ndarray
    img2: np.ndarray
    mask: np.ndarray
    scene_id: str = ""
    year_pair: tuple[int, int] = (0, 0)
    index: int = 0
    origin: tuple[int, int] = (0, 0)
    band_names: list[str] | None = None

    def __post_init__(self):
        if self.img1.shape != self.img2.shape:
            raise ShapeError(f"img1 {self.img1.shape} and img2 {self.img2.shape} differ")
        if self.img1.shape[1:] != self.mask.shape:
            raise ShapeError(f"mask {self.mask.shape} does not match images {self.img1.shape}")
        self.year_pair = tuple(int(y) for y in self.year_pair)
        self.origin = tuple(int(v) for v in self.origin)

    @property
    def key(self) -> tuple:
        return (self.scene_id, self.year_pair, self.index)


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ShapeError("mean and std must have one entry per band")
        if np.any(self.std < 0):
            raise ConfigurationError("standard deviations must be non-negative")


# ---------------------------------------------------------------------------
# rasterization


def _ring_edges(rows_cols: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    r = rows_cols[:, 0]
    c = rows_cols[:, 1]
    return r[:-1], c[:-1], r[1:], c[1:]


def _fill_polygon(out: np.ndarray, rings_px: list[np.ndarray]) -> None:
    """Even-odd scanline fill sampled at pixel centers (in place)."""
    h, w = out.shape
    edges = [np.concatenate(parts) for parts in zip(*(_ring_edges(r) for r in rings_px))]
    r0, c0, r1, c1 = edges
    horizontal = r0 == r1
    r0, c0, r1, c1 = r0[~horizontal], c0[~horizontal], r1[~horizontal], c1[~horizontal]
    if r0.size == 0:
        return
    lo = max(0, int(math.floor(min(r0.min(), r1.min()) - 0.5)))
    hi = min(h - 1, int(math.ceil(max(r0.max(), r1.max()) - 0.5)))
    for i in range(lo, hi + 1):
        y = i + 0.5
        cross = (r0 > y) != (r1 > y)
        if not cross.any():
            continue
        a0, b0, a1, b1 = r0[cross], c0[cross], r1[cross], c1[cross]
        xs = np.sort(b0 + (y - a0) * (b1 - b0) / (a1 - a0))
        for start, stop in zip(xs[0::2], xs[1::2]):
            # centers j + 0.5 in [start, stop)
            j0 = max(0, int(math.ceil(start - 0.5)))
            j1 = min(w, int(math.ceil(stop - 0.5)))
            if j1 > j0:
                out[i, j0:j1] ^= 1


def rasterize_polygons(
    layer: PolygonLayer,
    grid: GeoTransform,
    height: int,
    width: int,
    year_pair: tuple[int, int] | None = None,
) -> BinaryMask:
    """Burn polygons into a {0, 1} mask on ``grid``.

    A pixel is 1 iff its center lies inside at least one selected polygon
    (even-odd rule within a polygon, so holes are respected). With
    ``year_pair = (y1, y2)`` only polygons labelled ``dY`` with
    ``y1 < Y <= y2`` are burned; ``None`` burns all of them.
    """
    if year_pair is not None:
        layer = layer.between(*year_pair)
    out = np.zeros((height, width), dtype=np.uint8)
    for poly in layer.polygons:
        rings_px = []
        for ring in poly.rings:
            row, col = world_to_pixel(grid, ring[:, 0], ring[:, 1])
            rings_px.append(np.column_stack([row, col]))
        scratch = np.zeros_like(out)
        _fill_polygon(scratch, rings_px)
        out |= scratch
    return BinaryMask(out, grid)


# ---------------------------------------------------------------------------
# windowing


def window_starts(size: int, window: int, stride: int) -> list[int]:
    """Window origins ``0, stride, 2*stride, ...`` with ``start + window <= size``."""
    if window < 1 or stride < 1:
        raise ConfigurationError("window and stride must be positive")
    if window > size:
        raise ConfigurationError(f"window {window} is larger than the image ({size})")
    return list(range(0, size - window + 1, stride))


def extract_patches(
    i1: RasterStack,
    i2: RasterStack,
    m: BinaryMask,
    window: int = 256,
    stride: int = 200,
    max_null_frac: float = 0.05,
    null1: np.ndarray | None = None,
    null2: np.ndarray | None = None,
    scene_id: str = "",
    year_pair: tuple[int, int] = (0, 0),
) -> list[PatchSample]:
    """Cut jointly aligned sliding windows out of two images and a mask.

    A window is dropped when the fraction of its pixels that are null in
    img1 or img2 (union of positions) exceeds ``max_null_frac``. ``null1`` /
    ``null2`` override the null maps, which otherwise come from the all-bands-
    zero rule applied to ``i1`` / ``i2``. Emitted samples are numbered ``j =
    0, 1, ...`` in row-major window order.
    """
    if not (i1.shape == i2.shape == m.shape):
        raise ShapeError(f"inputs are not aligned: {i1.shape}, {i2.shape}, {m.shape}")
    h, w = m.shape
    rows = window_starts(h, window, stride)
    cols = window_starts(w, window, stride)
    null1 = null_mask(i1.data) if null1 is None else null1
    null2 = null_mask(i2.data) if null2 is None else null2
    null = null1 | null2
    # integral image for O(1) null counts per window
    acc = np.zeros((h + 1, w + 1), dtype=np.int64)
    acc[1:, 1:] = np.cumsum(np.cumsum(null, axis=0), axis=1)
    limit = max_null_frac * window * window

    # all matrices concatenated so one pass slices them together
    joint = np.concatenate(
        [i1.data.astype(np.float32), i2.data.astype(np.float32), m.data[None].astype(np.float32)]
    )
    c = i1.bands
    samples = []
    for r in rows:
        for q in cols:
            n_null = acc[r + window, q + window] - acc[r, q + window] - acc[r + window, q] + acc[r, q]
            if n_null > limit:
                continue
            block = joint[:, r : r + window, q : q + window]
            samples.append(
                PatchSample(
                    img1=block[:c].copy(),
                    img2=block[c : 2 * c].copy(),
                    mask=block[2 * c].astype(np.uint8),
                    scene_id=scene_id,
                    year_pair=year_pair,
                    index=len(samples),
                    origin=(r, q),
                    band_names=i1.band_names,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# normalization and NDVI


def band_stats(stack: RasterStack, exclude: np.ndarray | None = None) -> BandStats:
    """Per-band mean and population std over the whole scene (optionally skipping pixels)."""
    data = stack.data.reshape(stack.bands, -1).astype(np.float64)
    if exclude is not None:
        keep = ~exclude.reshape(-1)
        if keep.any():
            data = data[:, keep]
    return BandStats(data.mean(axis=1), data.std(axis=1))


def standardize(stack: RasterStack, stats: BandStats, eps: float = 1e-8) -> RasterStack:
    """``(x - mean_k) / std_k`` per band; bands with ``std_k < eps`` become 0."""
    if stats.mean.shape[0] != stack.bands:
        raise ShapeError(f"stats cover {stats.mean.shape[0]} bands, stack has {stack.bands}")
    mean = stats.mean[:, None, None]
    std = stats.std[:, None, None]
    flat = std < eps
    out = (stack.data.astype(np.float64) - mean) / np.where(flat, 1.0, std)
    out = np.where(flat, 0.0, out).astype(np.float32)
    return RasterStack(out, stack.transform, stack.band_names)


def ndvi_band(data: np.ndarray, red: int, nir: int, scale: float = 1.0, offset: float = 0.0) -> np.ndarray:
    """NDVI from the red and near-infrared bands of a ``(C, H, W)`` array.

    ``scale``/``offset`` convert stored integers to reflectance first. Pixels
    where NIR + red is zero get 0; the result is clipped to [-1, 1].
    """
    n_bands = data.shape[0]
    if not (0 <= red < n_bands and 0 <= nir < n_bands):
        raise ConfigurationError(f"band index out of range for {n_bands} bands")
    b1 = data[red].astype(np.float64) * scale + offset
    b2 = data[nir].astype(np.float64) * scale + offset
    den = b2 + b1
    zero = den == 0
    out = np.where(zero, 0.0, (b2 - b1) / np.where(zero, 1.0, den))
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def compute_ndvi(
    stack: RasterStack, red_band_idx: int = RED, nir_band_idx: int = NIR, scale: float = 1.0, offset: float = 0.0
) -> RasterStack:
    """Return ``stack`` (as float32) with an NDVI band appended last."""
    nd = ndvi_band(stack.data, red_band_idx, nir_band_idx, scale, offset)
    data = np.concatenate([stack.data.astype(np.float32), nd[None]])
    names = None if stack.band_names is None else [*stack.band_names, "NDVI"]
    return RasterStack(data, stack.transform, names)


# ---------------------------------------------------------------------------
# CDP1 sample container


def write_sample(s: PatchSample, path) -> Path:
    """Store a sample as a CDP1 file (40-byte header, DEFLATE payload, JSON metadata)."""
    c, h, w = s.img1.shape
    payload = b"".join(
        [
            np.ascontiguousarray(s.img1, dtype="<f4").tobytes(),
            np.ascontiguousarray(s.img2, dtype="<f4").tobytes(),
            np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes(),
        ]
    )
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    packed = comp.compress(payload) + comp.flush()
    meta = json.dumps(
        {
            "scene_id": s.scene_id,
            "year_pair": list(s.year_pair),
            "j": s.index,
            "origin": list(s.origin),
            "band_names": s.band_names,
        },
        sort_keys=True,
    ).encode("utf-8")
    header = _HEADER.pack(CDP_MAGIC, CDP_VERSION, c, h, w, 0, len(packed), len(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + packed + meta)
    return path


def read_sample(path) -> PatchSample:
    """Inverse of :func:`write_sample`.

    Raises
    ------
    FormatError
        On a bad magic/version, truncated payload or undecodable metadata.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the CDP1 header")
    magic, version, c, h, w, _flags, n_payload, n_meta = _HEADER.unpack_from(raw)
    if magic != CDP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CDP_VERSION:
        raise FormatError(f"{path}: unsupported CDP version {version}")
    body = raw[_HEADER.size :]
    if len(body) != n_payload + n_meta:
        raise FormatError(f"{path}: truncated or padded payload ({len(body)} of {n_payload + n_meta} bytes)")
    try:
        payload = zlib.decompress(body[:n_payload], -15)
        meta = json.loads(body[n_payload:].decode("utf-8"))
    except (zlib.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt sample ({exc})") from exc
    n_img = c * h * w * 4
    if len(payload) != 2 * n_img + h * w:
        raise FormatError(f"{path}: payload size does not match header shape")
    img1 = np.frombuffer(payload, "<f4", c * h * w, 0).reshape(c, h, w).astype(np.float32)
    img2 = np.frombuffer(payload, "<f4", c * h * w, n_img).reshape(c, h, w).astype(np.float32)
    mask = np.frombuffer(payload, np.uint8, h * w, 2 * n_img).reshape(h, w).copy()
    return PatchSample(
        img1,
        img2,
        mask,
        scene_id=meta.get("scene_id", ""),
        year_pair=tuple(meta.get("year_pair", (0, 0))),
        index=int(meta.get("j", 0)),
        origin=tuple(meta.get("origin", (0, 0))),
        band_names=meta.get("band_names"),
    )


# ---------------------------------------------------------------------------
# full build


@dataclass
class SceneInput:
    scene_id: str
    t1: RasterStack
    t2: RasterStack
    year_pair: tuple[int, int]


@dataclass
class BuildConfig:
    window: int = 256
    stride: int = 200
    max_null_frac: float = 0.05
    test_scenes: Sequence[str] = ()
    red_band: int = RED
    nir_band: int = NIR
    reflectance_scale: float = 1.0
    reflectance_offset: float = 0.0
    # "off" | "pre" (equalize raw bands before standardizing); "post" is applied at load time
    equalize: str = "off"
    magenta: object | None = None  # preprocess.MagentaReplacement
    threads: int = 1

    def validate(self) -> None:
        if self.window < 1 or self.stride < 1:
            raise ConfigurationError("window and stride must be positive")
        if not 0.0 <= self.max_null_frac <= 1.0:
            raise ConfigurationError("max_null_frac must lie in [0, 1]")
        if self.equalize not in ("off", "pre", "post"):
            raise ConfigurationError(f"unknown equalization mode {self.equalize!r}")


def _align_to(ref: RasterStack, other: RasterStack) -> RasterStack:
    """Resample ``other`` onto the pixel phase of ``ref`` when needed."""
    rt, ot = ref.transform, other.transform
    if np.allclose(rt.linear, ot.linear, rtol=0, atol=1e-9):
        r, c = world_to_pixel(rt, ot.origin_x, ot.origin_y)
        if abs(r - round(r)) < 1e-6 and abs(c - round(c)) < 1e-6:
            return other
    # bounding box of other's corners in ref pixel space
    corners = [(0, 0), (0, other.width), (other.height, 0), (other.height, other.width)]
    rr, cc = [], []
    for i, j in corners:
        x, y = pixel_to_world(ot, i, j)
        a, b = world_to_pixel(rt, x, y)
        rr.append(a)
        cc.append(b)
    r0, c0 = math.floor(min(rr)), math.floor(min(cc))
    r1, c1 = math.ceil(max(rr)), math.ceil(max(cc))
    return resample_to_grid(other, rt.shifted(r0, c0), r1 - r0, c1 - c0)


def prepare_scene(scene: SceneInput, layer: PolygonLayer, cfg: BuildConfig) -> list[PatchSample]:
    """Run the per-scene chain and return its samples (not yet written)."""
    from . import preprocess

    cfg.validate()
    t1 = scene.t1
    t2 = _align_to(t1, scene.t2)
    mask = rasterize_polygons(layer, t1.transform, t1.height, t1.width, scene.year_pair)
    t1, t2, mask = intersect_extents([t1, t2, mask])

    null1, null2 = null_mask(t1.data), null_mask(t2.data)
    raw1, raw2 = t1, t2
    if cfg.magenta is not None:
        raw1 = cfg.magenta.apply(raw1)
        raw2 = cfg.magenta.apply(raw2)

    names = list(t1.band_names or [f"B{k + 1}" for k in range(t1.bands)])
    processed = []
    for raw, null in ((raw1, null1), (raw2, null2)):
        src = raw
        if cfg.equalize == "pre":
            src = preprocess.equalize_stack(raw, levels=65536)
        stats = band_stats(src, exclude=null)
        std = standardize(src, stats)
        nd = ndvi_band(raw.data, cfg.red_band, cfg.nir_band, cfg.reflectance_scale, cfg.reflectance_offset)
        processed.append(RasterStack(np.concatenate([std.data, nd[None]]), raw.transform, [*names, "NDVI"]))

    return extract_patches(
        processed[0],
        processed[1],
        mask,
        cfg.window,
        cfg.stride,
        cfg.max_null_frac,
        null1=null1,
        null2=null2,
        scene_id=scene.scene_id,
        year_pair=scene.year_pair,
    )


def sample_relpath(s: PatchSample, split: str) -> str:
    y1, y2 = s.year_pair
    return f"{split}/{s.scene_id}/{y1}_{y2}/{s.index:05d}.cdp"


def build_dataset(scenes: Sequence[SceneInput], layer: PolygonLayer, out_dir, cfg: BuildConfig) -> dict:
    """Build and write the sample tree; returns (and writes) the manifest.

    Samples go to ``<out>/<train|test>/<scene>/<y1>_<y2>/<j>.cdp``. A scene is
    in the test split iff its id is listed in ``cfg.test_scenes``, so no scene
    contributes to both splits.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    ids = [s.scene_id for s in scenes]
    if len(set(zip(ids, [tuple(s.year_pair) for s in scenes]))) != len(scenes):
        raise ConfigurationError("duplicate (scene, year pair) entries")
    unknown = set(cfg.test_scenes) - set(ids)
    if unknown:
        raise ConfigurationError(f"test scenes not among inputs: {sorted(unknown)}")

    entries = []
    jobs = []
    for scene in sorted(scenes, key=lambda s: (s.scene_id, tuple(s.year_pair))):
        split = "test" if scene.scene_id in cfg.test_scenes else "train"
        samples = prepare_scene(scene, layer, cfg)
        files = []
        for s in samples:
            rel = sample_relpath(s, split)
            files.append(rel)
            jobs.append((s, out_dir / rel))
        entries.append(
            {
                "scene_id": scene.scene_id,
                "year_pair": list(scene.year_pair),
                "split": split,
                "count": len(samples),
                "files": files,
            }
        )

    def _write(job):
        write_sample(*job)

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            list(pool.map(_write, jobs))
    else:
        for job in jobs:
            _write(job)

    manifest = {
        "format": "CDP1",
        "window": cfg.window,
        "stride": cfg.stride,
        "max_null_frac": cfg.max_null_frac,
        "equalize": cfg.equalize,
        "magenta": cfg.magenta is not None,
        "scenes": entries,
        "counts": {
            "train": sum(e["count"] for e in entries if e["split"] == "train"),
            "test": sum(e["count"] for e in entries if e["split"] == "test"),
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def iter_samples(out_dir, split: str | None = None) -> Iterator[PatchSample]:
    """Read back samples listed in a dataset manifest, in manifest order."""
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    for entry in manifest["scenes"]:
        if split is not None and entry["split"] != split:
            continue
        for rel in entry["files"]:
            yield read_sample(out_dir / rel)
