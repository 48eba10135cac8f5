"""
Georeferenced raster and polygon primitives.

Pixel convention: fractional pixel coordinates ``(row, col)`` place the
corner of pixel ``(0, 0)`` at ``(0.0, 0.0)``; the center of pixel ``(i, j)``
is ``(i + 0.5, j + 0.5)``. Rasterization, resampling and cropping all use
this convention.

File formats
------------
Raster: a JSON sidecar ``<name>.json`` describing ``bands``, ``height``,
``width``, ``dtype`` (``u16``, ``f32`` or ``u8``), ``geotransform`` (six
reals, GDAL coefficient order) and ``band_names``, next to a raw
little-endian band-major binary file (``data`` field, default
``<name>.bin``).

Polygons: a GeoJSON-style FeatureCollection whose features carry Polygon or
MultiPolygon geometries in world coordinates and a ``class`` property of
the form ``dYYYY``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyOverlapError,
    FormatError,
    GridMismatchError,
    IngestionError,
    ShapeError,
)

__all__ = [
    "GeoTransform",
    "RasterStack",
    "BinaryMask",
    "Polygon",
    "PolygonLayer",
    "world_to_pixel",
    "pixel_to_world",
    "null_mask",
    "resample_to_grid",
    "intersect_extents",
    "read_raster",
    "write_raster",
    "read_mask",
    "write_mask",
    "read_polygons",
    "write_polygons",
    "parse_year",
]

_DTYPES = {"u16": np.dtype("<u2"), "f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_LABEL_RE = re.compile(r"^d(\d{4})$")


@dataclass(frozen=True)
class GeoTransform:
    """Six-coefficient affine map from pixel space to world space.

    ``x = origin_x + col * pixel_w + row * rot_x``
    ``y = origin_y + col * rot_y + row * pixel_h``
    """

    origin_x: float = 0.0
    origin_y: float = 0.0
    pixel_w: float = 1.0
    pixel_h: float = 1.0
    rot_x: float = 0.0
    rot_y: float = 0.0

    @classmethod
    def from_gdal(cls, coeffs: Sequence[float]) -> "GeoTransform":
        if len(coeffs) != 6:
            raise ConfigurationError(f"geotransform needs 6 coefficients, got {len(coeffs)}")
        ox, pw, rx, oy, ry, ph = (float(v) for v in coeffs)
        return cls(origin_x=ox, origin_y=oy, pixel_w=pw, pixel_h=ph, rot_x=rx, rot_y=ry)

    def to_gdal(self) -> list[float]:
        return [self.origin_x, self.pixel_w, self.rot_x, self.origin_y, self.rot_y, self.pixel_h]

    @property
    def determinant(self) -> float:
        return self.pixel_w * self.pixel_h - self.rot_x * self.rot_y

    @property
    def linear(self) -> np.ndarray:
        # maps (col, row) -> (x, y) offsets
        return np.array([[self.pixel_w, self.rot_x], [self.rot_y, self.pixel_h]])

    def shifted(self, rows: float, cols: float) -> "GeoTransform":
        """Same grid with its origin moved to pixel-space point ``(rows, cols)``."""
        x, y = pixel_to_world(self, rows, cols)
        return GeoTransform(x, y, self.pixel_w, self.pixel_h, self.rot_x, self.rot_y)


def _check_invertible(t: GeoTransform) -> float:
    det = t.determinant
    if not math.isfinite(det) or det == 0.0:
        raise ConfigurationError(f"singular geotransform (determinant {det})")
    return det


def pixel_to_world(t: GeoTransform, row, col):
    """Fractional pixel coordinates to world ``(x, y)``; works on scalars or arrays."""
    x = t.origin_x + col * t.pixel_w + row * t.rot_x
    y = t.origin_y + col * t.rot_y + row * t.pixel_h
    return x, y


def world_to_pixel(t: GeoTransform, x, y):
    """World ``(x, y)`` to unrounded fractional pixel ``(row, col)``.

    Raises
    ------
    ConfigurationError
        If the transform is singular.
    """
    det = _check_invertible(t)
    dx = x - t.origin_x
    dy = y - t.origin_y
    col = (t.pixel_h * dx - t.rot_x * dy) / det
    row = (-t.rot_y * dx + t.pixel_w * dy) / det
    return row, col


@dataclass
class RasterStack:
    """Multi-band image of shape ``(C, H, W)`` on a georeferenced grid."""

    data: np.ndarray
    transform: GeoTransform = field(default_factory=GeoTransform)
    band_names: list[str] | None = None

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ShapeError(f"raster data must be (C, H, W), got shape {self.data.shape}")
        if self.band_names is not None and len(self.band_names) != self.data.shape[0]:
            raise ShapeError(
                f"{len(self.band_names)} band names for {self.data.shape[0]} bands"
            )

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass
class BinaryMask:
    """Single-band {0, 1} raster."""

    data: np.ndarray
    transform: GeoTransform = field(default_factory=GeoTransform)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {data.shape}")
        if data.dtype != np.uint8:
            if data.size and not np.isin(data, (0, 1)).all():
                raise ShapeError("mask values must be 0 or 1")
            data = data.astype(np.uint8)
        self.data = data

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


Raster = Union[RasterStack, BinaryMask]


def null_mask(data: np.ndarray) -> np.ndarray:
    """Boolean ``(H, W)`` map of pixels that are zero in every band."""
    if data.ndim == 2:
        return data == 0
    return ~np.any(data != 0, axis=0)


def resample_to_grid(src: Raster, target: GeoTransform, height: int, width: int) -> Raster:
    """Nearest-neighbour resample of ``src`` onto the grid ``(target, height, width)``.

    Each output pixel takes the source pixel whose center is nearest to the
    world position of the output pixel center. Output pixels that fall outside
    the source get 0 (the nodata value).

    Raises
    ------
    EmptyOverlapError
        If no output pixel lands inside the source raster.
    """
    _check_invertible(target)
    det = _check_invertible(src.transform)
    s = src.transform
    # composite affine: target pixel -> world -> source pixel
    inv = np.array([[s.pixel_h, -s.rot_x], [-s.rot_y, s.pixel_w]]) / det
    lin = inv @ target.linear  # (col, row) -> (col, row)
    off = inv @ np.array([target.origin_x - s.origin_x, target.origin_y - s.origin_y])

    rows = np.arange(height) + 0.5
    cols = np.arange(width) + 0.5
    src_col = off[0] + lin[0, 0] * cols[None, :] + lin[0, 1] * rows[:, None]
    src_row = off[1] + lin[1, 0] * cols[None, :] + lin[1, 1] * rows[:, None]
    ri = np.floor(src_row).astype(np.int64)
    ci = np.floor(src_col).astype(np.int64)

    h, w = src.shape
    inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    if not inside.any():
        raise EmptyOverlapError("target grid does not overlap the source raster")
    ri = np.where(inside, ri, 0)
    ci = np.where(inside, ci, 0)

    if isinstance(src, BinaryMask):
        out = np.where(inside, src.data[ri, ci], 0).astype(np.uint8)
        return BinaryMask(out, target)
    out = src.data[:, ri, ci]
    out = np.where(inside[None], out, np.zeros((), dtype=src.data.dtype))
    return RasterStack(out.astype(src.data.dtype, copy=False), target, src.band_names)


def intersect_extents(items: Sequence[Raster], tol: float = 1e-6) -> list[Raster]:
    """Crop aligned rasters to their common extent.

    All inputs must share pixel size, rotation and sub-pixel phase. The
    outputs have identical transform and shape; pixel ``(i, j)`` is the same
    world location in each.

    Raises
    ------
    GridMismatchError
        If the inputs are not on one pixel grid.
    EmptyOverlapError
        If the common extent is empty.
    """
    if not items:
        return []
    ref = items[0].transform
    _check_invertible(ref)
    scale = max(abs(ref.pixel_w), abs(ref.pixel_h), abs(ref.rot_x), abs(ref.rot_y))
    offsets = []
    for k, item in enumerate(items):
        t = item.transform
        if not np.allclose(t.linear, ref.linear, rtol=0.0, atol=tol * scale):
            raise GridMismatchError(f"input {k} has a different pixel size or rotation")
        r, c = world_to_pixel(ref, t.origin_x, t.origin_y)
        ri, ci = round(r), round(c)
        if abs(r - ri) > tol or abs(c - ci) > tol:
            raise GridMismatchError(f"input {k} is offset by a fraction of a pixel")
        offsets.append((ri, ci))

    r0 = max(r for r, _ in offsets)
    c0 = max(c for _, c in offsets)
    r1 = min(r + it.height for (r, _), it in zip(offsets, items))
    c1 = min(c + it.width for (_, c), it in zip(offsets, items))
    if r1 <= r0 or c1 <= c0:
        raise EmptyOverlapError("inputs have no common extent")

    out_t = ref.shifted(r0, c0)
    out: list[Raster] = []
    for (r, c), item in zip(offsets, items):
        rs = slice(r0 - r, r1 - r)
        cs = slice(c0 - c, c1 - c)
        if isinstance(item, BinaryMask):
            out.append(BinaryMask(item.data[rs, cs], out_t))
        else:
            out.append(RasterStack(item.data[:, rs, cs], out_t, item.band_names))
    return out


# ---------------------------------------------------------------------------
# polygons


@dataclass
class Polygon:
    """Exterior ring plus optional holes, each an ``(n, 2)`` array of world ``(x, y)``."""

    exterior: np.ndarray
    holes: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.exterior = _normalize_ring(self.exterior)
        self.holes = [_normalize_ring(h) for h in self.holes]

    @property
    def rings(self) -> list[np.ndarray]:
        return [self.exterior, *self.holes]

    def area(self) -> float:
        return abs(_ring_area(self.exterior)) - sum(abs(_ring_area(h)) for h in self.holes)


def _normalize_ring(ring) -> np.ndarray:
    ring = np.asarray(ring, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise IngestionError(f"ring must be a sequence of (x, y) pairs, got shape {ring.shape}")
    if len(ring) and not np.array_equal(ring[0], ring[-1]):
        ring = np.vstack([ring, ring[:1]])
    if len(np.unique(ring[:-1], axis=0)) < 3:
        raise IngestionError("ring needs at least 3 distinct vertices")
    return ring


def _ring_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def parse_year(label: str) -> int:
    """Year encoded in a ``dYYYY`` class label."""
    m = _LABEL_RE.match(label)
    if m is None:
        raise IngestionError(f"class label {label!r} is not of the form dYYYY")
    return int(m.group(1))


@dataclass
class PolygonLayer:
    """Deforestation polygons with their ``dYYYY`` class labels."""

    polygons: list[Polygon] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.polygons) != len(self.labels):
            raise IngestionError("one class label is required per polygon")
        bad = [(i, lab) for i, lab in enumerate(self.labels) if not _LABEL_RE.match(str(lab))]
        if bad:
            listing = ", ".join(f"feature {i}: {lab!r}" for i, lab in bad)
            raise IngestionError(f"unparseable class labels ({listing})")

    def __len__(self) -> int:
        return len(self.polygons)

    def years(self) -> list[int]:
        return [parse_year(lab) for lab in self.labels]

    def between(self, y1: int, y2: int) -> "PolygonLayer":
        """Polygons deforested after ``y1`` and up to ``y2`` (``y1 < Y <= y2``)."""
        keep = [i for i, y in enumerate(self.years()) if y1 < y <= y2]
        return PolygonLayer([self.polygons[i] for i in keep], [self.labels[i] for i in keep])


# ---------------------------------------------------------------------------
# file I/O


def _sidecar_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    return path, path.with_suffix(".bin")


def write_raster(raster: Raster, path) -> Path:
    """Write a raster as JSON sidecar + raw binary; returns the sidecar path."""
    meta_path, bin_path = _sidecar_paths(path)
    if isinstance(raster, BinaryMask):
        data = raster.data[None].astype(np.uint8)
        names = ["mask"]
    else:
        data = raster.data
        names = raster.band_names
    for key, dt in _DTYPES.items():
        if data.dtype == dt or data.dtype == dt.newbyteorder("="):
            dtype = key
            break
    else:
        raise FormatError(f"unsupported raster dtype {data.dtype}")
    meta = {
        "bands": int(data.shape[0]),
        "height": int(data.shape[1]),
        "width": int(data.shape[2]),
        "dtype": dtype,
        "geotransform": raster.transform.to_gdal(),
        "band_names": list(names) if names is not None else None,
        "data": bin_path.name,
    }
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes())
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return meta_path


def read_raster(path) -> RasterStack:
    """Read a raster written by :func:`write_raster` (or any conforming producer)."""
    meta_path, default_bin = _sidecar_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
        bands, height, width = int(meta["bands"]), int(meta["height"]), int(meta["width"])
        dtype = _DTYPES[meta["dtype"]]
        transform = GeoTransform.from_gdal(meta["geotransform"])
    except FileNotFoundError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{meta_path}: bad raster sidecar ({exc})") from exc
    bin_path = meta_path.parent / meta.get("data", default_bin.name)
    raw = bin_path.read_bytes()
    expected = bands * height * width * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{bin_path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(bands, height, width)
    data = data.astype(dtype.newbyteorder("="))
    return RasterStack(data, transform, meta.get("band_names"))


def write_mask(mask: BinaryMask, path) -> Path:
    return write_raster(mask, path)


def read_mask(path) -> BinaryMask:
    stack = read_raster(path)
    if stack.bands != 1:
        raise FormatError(f"{path}: mask file has {stack.bands} bands")
    data = stack.data[0]
    if not np.isin(data, (0, 1)).all():
        raise FormatError(f"{path}: mask values must be 0 or 1")
    return BinaryMask(data.astype(np.uint8), stack.transform)


def read_polygons(path) -> PolygonLayer:
    """Load a FeatureCollection of (Multi)Polygons with ``class`` properties."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("type") != "FeatureCollection":
        raise IngestionError(f"{path}: expected a FeatureCollection")
    polygons, labels = [], []
    for k, feat in enumerate(doc.get("features", [])):
        label = (feat.get("properties") or {}).get("class")
        if not isinstance(label, str) or not _LABEL_RE.match(label):
            raise IngestionError(f"{path}: feature {k} has unparseable class label {label!r}")
        geom = feat.get("geometry") or {}
        if geom.get("type") == "Polygon":
            parts = [geom["coordinates"]]
        elif geom.get("type") == "MultiPolygon":
            parts = geom["coordinates"]
        else:
            raise IngestionError(f"{path}: feature {k} has unsupported geometry {geom.get('type')!r}")
        for rings in parts:
            polygons.append(Polygon(np.asarray(rings[0], float), [np.asarray(h, float) for h in rings[1:]]))
            labels.append(label)
    return PolygonLayer(polygons, labels)


def write_polygons(layer: PolygonLayer, path) -> Path:
    features = []
    for poly, label in zip(layer.polygons, layer.labels):
        features.append(
            {
                "type": "Feature",
                "properties": {"class": label},
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [ring.tolist() for ring in poly.rings],
                },
            }
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}) + "\n")
    return path
