"""
Synthetic bitemporal scenes and base-detector maps for desk-scale runs.

Spectra are drawn from fixed per-band Gaussian signatures for intact forest,
ordinary clear-cut and burned clear-cut ("magenta"), in Landsat Collection 2
style 16-bit digital numbers. Deforestation blobs are star-shaped polygons;
the t2 image equals t1 except inside the rasterized new blobs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import LANDSAT_BANDS, rasterize_polygons
from .preprocess import sample_rng
from .raster import BinaryMask, GeoTransform, Polygon, PolygonLayer, RasterStack

__all__ = [
    "FOREST",
    "CLEARED",
    "MAGENTA",
    "SynthConfig",
    "SynthScene",
    "ErrorModel",
    "gen_scene",
    "gen_producer_maps",
    "DEFAULT_PRODUCERS",
]

FOREST = np.array([7800, 8000, 8600, 8000, 19000, 12500, 9500], dtype=np.float64)
CLEARED = np.array([8400, 8800, 9800, 10500, 15500, 17000, 13500], dtype=np.float64)
# burned clear-cut: vegetation index close to forest, SWIR collapsed
MAGENTA = np.array([9000, 9300, 8300, 8300, 17500, 8200, 7600], dtype=np.float64)


@dataclass
class SynthConfig:
    size: int = 1024
    n_blobs: int = 30
    n_prior_blobs: int = 4
    radius_range: tuple[float, float] = (10.0, 40.0)
    band_noise: float = 150.0
    blob_jitter: float = 200.0
    band_correlation: float = 0.9
    magenta_rate: float = 0.0
    edge_nodata: int = 0
    year_pair: tuple[int, int] = (2018, 2019)
    pixel_size: float = 30.0
    origin: tuple[float, float] = (500_000.0, 9_500_000.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.magenta_rate <= 1.0:
            raise ValueError("magenta_rate must lie in [0, 1]")
        if not 0.0 <= self.band_correlation <= 1.0:
            raise ValueError("band_correlation must lie in [0, 1]")
        if self.size < 8:
            raise ValueError("scene size must be at least 8 pixels")

    @property
    def transform(self) -> GeoTransform:
        ox, oy = self.origin
        return GeoTransform(ox, oy, self.pixel_size, -self.pixel_size)


@dataclass
class SynthScene:
    t1: RasterStack
    t2: RasterStack
    truth: PolygonLayer
    mask: BinaryMask
    magenta_mask: np.ndarray
    magenta_bbox: tuple[int, int, int, int] | None = None
    texture_bbox: tuple[int, int, int, int] | None = None

    def __iter__(self):
        return iter((self.t1, self.t2, self.truth))


def _star_polygon(rng, cx, cy, r, n_vertices=24) -> np.ndarray:
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = r * rng.uniform(0.75, 1.25, n_vertices)
    return np.column_stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)])


def _inner_bbox(t: GeoTransform, cx, cy, r, size) -> tuple[int, int, int, int]:
    """Pixel bbox ``(x0, y0, x1, y1)`` of a square safely inside a star blob."""
    col = (cx - t.origin_x) / t.pixel_w
    row = (cy - t.origin_y) / t.pixel_h
    half = 0.45 * r / abs(t.pixel_w)
    x0, x1 = int(np.ceil(col - half)), int(np.floor(col + half)) - 1
    y0, y1 = int(np.ceil(row - half)), int(np.floor(row + half)) - 1
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, size - 1), min(y1, size - 1)
    return x0, y0, max(x0, x1), max(y0, y1)


def gen_scene(cfg: SynthConfig = SynthConfig()) -> SynthScene:
    """Generate a (t1, t2, truth polygons) triple; bit-identical for a given config."""
    rng = sample_rng(cfg.seed, stream=10)
    t = cfg.transform
    n = cfg.size
    y1, y2 = cfg.year_pair
    ps = abs(cfg.pixel_size)

    def blob(kind_rng):
        # keep the blob (and its 1.3 r margin) inside the scene
        r = min(kind_rng.uniform(*cfg.radius_range) * ps, n * ps / 2.6)
        margin = r * 1.3
        cx = t.origin_x + kind_rng.uniform(margin, n * ps - margin)
        cy = t.origin_y - kind_rng.uniform(margin, n * ps - margin)
        return cx, cy, r, _star_polygon(kind_rng, cx, cy, r)

    new_blobs = [blob(rng) for _ in range(cfg.n_blobs)]
    prior_blobs = [blob(rng) for _ in range(cfg.n_prior_blobs)]
    is_magenta = rng.random(cfg.n_blobs) < cfg.magenta_rate

    polygons, labels = [], []
    for _, _, _, ring in prior_blobs:
        polygons.append(Polygon(ring))
        labels.append(f"d{y1}")
    for _, _, _, ring in new_blobs:
        polygons.append(Polygon(ring))
        labels.append(f"d{y2}")
    layer = PolygonLayer(polygons, labels)

    # per-pixel noise shares a brightness term across bands
    a, b = np.sqrt(cfg.band_correlation), np.sqrt(1.0 - cfg.band_correlation)

    def noise(count):
        shape = (7, count) if np.isscalar(count) else (7, *count)
        common = rng.standard_normal(shape[1:])
        return cfg.band_noise * (a * common + b * rng.standard_normal(shape))

    # t1: forest plus earlier clearings
    t1 = FOREST[:, None, None] + noise((n, n))
    for cx, cy, r, ring in prior_blobs:
        m = rasterize_polygons(PolygonLayer([Polygon(ring)], [f"d{y1}"]), t, n, n).data.astype(bool)
        t1[:, m] = CLEARED[:, None] + noise(int(m.sum()))

    # t2: t1 with the new blobs replaced
    t2 = t1.copy()
    magenta_mask = np.zeros((n, n), dtype=bool)
    for k, (cx, cy, r, ring) in enumerate(new_blobs):
        m = rasterize_polygons(PolygonLayer([Polygon(ring)], [f"d{y2}"]), t, n, n).data.astype(bool)
        sig = MAGENTA if is_magenta[k] else CLEARED
        offset = rng.normal(0.0, cfg.blob_jitter, 7)
        t2[:, m] = (sig + offset)[:, None] + noise(int(m.sum()))
        if is_magenta[k]:
            magenta_mask |= m
        else:
            magenta_mask &= ~m

    t1 = np.clip(np.rint(t1), 1, 65535).astype(np.uint16)
    t2 = np.clip(np.rint(t2), 1, 65535).astype(np.uint16)
    if cfg.edge_nodata > 0:
        ii, jj = np.mgrid[0:n, 0:n]
        e = cfg.edge_nodata
        corners = (ii + jj < e) | ((n - 1 - ii) + (n - 1 - jj) < e)
        t1[:, corners] = 0
        t2[:, corners] = 0

    mask = rasterize_polygons(layer, t, n, n, cfg.year_pair)
    magenta_bbox = texture_bbox = None
    mag_idx = [k for k in range(cfg.n_blobs) if is_magenta[k]]
    clr_idx = [k for k in range(cfg.n_blobs) if not is_magenta[k]]
    if mag_idx:
        k = max(mag_idx, key=lambda i: new_blobs[i][2])
        magenta_bbox = _inner_bbox(t, *new_blobs[k][:3], n)
    if clr_idx:
        k = max(clr_idx, key=lambda i: new_blobs[i][2])
        texture_bbox = _inner_bbox(t, *new_blobs[k][:3], n)

    names = list(LANDSAT_BANDS)
    return SynthScene(
        RasterStack(t1, t, names),
        RasterStack(t2, t, list(names)),
        layer,
        mask,
        magenta_mask & mask.data.astype(bool),
        magenta_bbox,
        texture_bbox,
    )


@dataclass
class ErrorModel:
    """How a simulated detector corrupts the truth.

    ``miss_rate`` of positive pixels are dropped, ``false_alarm_rate`` of
    negative pixels fire, then the map is blurred (``blur`` is a Gaussian
    sigma in pixels), jittered by Gaussian ``noise`` and clipped to [0, 1].
    """

    miss_rate: float = 0.0
    false_alarm_rate: float = 0.0
    blur: float = 0.0
    noise: float = 0.0
    name: str = ""

    def __post_init__(self):
        for v in (self.miss_rate, self.false_alarm_rate):
            if not 0.0 <= v <= 1.0:
                raise ValueError("error rates must lie in [0, 1]")


# four detectors with different precision/recall balances
DEFAULT_PRODUCERS = (
    ErrorModel(0.36, 0.008, 0.6, 0.15, "high-precision"),
    ErrorModel(0.22, 0.036, 0.6, 0.15, "high-recall"),
    ErrorModel(0.28, 0.018, 0.8, 0.20, "balanced"),
    ErrorModel(0.14, 0.020, 0.5, 0.25, "noisy"),
)


def gen_producer_maps(truth, model: ErrorModel, rng: np.random.Generator) -> np.ndarray:
    """Corrupt a binary truth mask into a float32 probability map."""
    t = np.asarray(truth).astype(bool)
    u_miss = rng.random(t.shape)
    u_fa = rng.random(t.shape)
    z = rng.standard_normal(t.shape)
    score = t.astype(np.float64)
    score[t & (u_miss < model.miss_rate)] = 0.0
    score[~t & (u_fa < model.false_alarm_rate)] = 1.0
    if model.blur > 0:
        score = gaussian_filter(score, model.blur, mode="nearest")
    if model.noise > 0:
        score = score + model.noise * z
    return np.clip(score, 0.0, 1.0).astype(np.float32)
