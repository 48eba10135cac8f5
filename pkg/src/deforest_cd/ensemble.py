"""
Combining the probability maps of several change detectors.

Three strategies: majority vote over binarized maps (ties go negative),
probability averaging against the mean threshold, and a trained BasicFCN
that takes the stacked maps as input channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fcn
from .errors import FormatError, ShapeError
from .postprocess import binarize, remove_small
from .raster import read_mask, read_raster

__all__ = [
    "ProbabilityMapSet",
    "simple_vote",
    "weighted_vote",
    "tile_pairs",
    "fcn_ensemble_train",
    "fcn_ensemble_predict",
    "predict_map",
    "load_manifest",
    "ProducerManifest",
]


@dataclass
class ProbabilityMapSet:
    """``N`` aligned ``(H, W)`` probability maps and one threshold per producer."""

    maps: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim == 2:
            self.maps = self.maps[None]
        if self.maps.ndim != 3 or self.maps.shape[0] < 1:
            raise ShapeError(f"expected (N, H, W) maps, got shape {self.maps.shape}")
        self.thresholds = np.atleast_1d(np.asarray(self.thresholds, dtype=np.float64))
        if self.thresholds.shape != (self.maps.shape[0],):
            raise ShapeError(f"{len(self.thresholds)} thresholds for {self.maps.shape[0]} maps")
        if np.any((self.thresholds <= 0) | (self.thresholds >= 1)):
            raise ValueError("thresholds must lie strictly between 0 and 1")

    @property
    def n(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]

    def binarized(self, min_keep: int | None = None) -> np.ndarray:
        """``(N, H, W)`` uint8 predictions, optionally after small-region removal."""
        preds = np.stack([binarize(m, t) for m, t in zip(self.maps, self.thresholds)])
        if min_keep is not None:
            preds = np.stack([remove_small(p, min_keep) for p in preds])
        return preds


def simple_vote(pms: ProbabilityMapSet, min_keep: int | None = None) -> np.ndarray:
    """1 where more than half of the binarized producers say 1; ties give 0."""
    votes = pms.binarized(min_keep).sum(axis=0, dtype=np.int64)
    return (2 * votes > pms.n).astype(np.uint8)


def weighted_vote(pms: ProbabilityMapSet) -> np.ndarray:
    """1 where the mean probability is strictly above the mean threshold.

    The mean is accumulated in float64 and compared in the maps' own float
    type, so a mean that equals the threshold at that precision stays 0.
    """
    dtype = pms.maps.dtype if np.issubdtype(pms.maps.dtype, np.floating) else np.float64
    mean_prob = pms.maps.astype(np.float64).mean(axis=0).astype(dtype)
    tau = np.asarray(pms.thresholds.mean(), dtype=dtype)
    return (mean_prob > tau).astype(np.uint8)


def tile_pairs(maps: np.ndarray, truth: np.ndarray, window: int, stride: int | None = None):
    """Cut ``(N, H, W)`` maps and an ``(H, W)`` mask into aligned training windows.

    Returns ``(pairs, origins)`` where each pair is ``(inputs (N, w, w), mask (w, w))``.
    """
    stride = stride or window
    if maps.shape[1:] != truth.shape:
        raise ShapeError(f"maps {maps.shape} and truth {truth.shape} are not aligned")
    h, w = truth.shape
    pairs, origins = [], []
    for r in range(0, h - window + 1, stride):
        for c in range(0, w - window + 1, stride):
            pairs.append(
                (
                    np.ascontiguousarray(maps[:, r : r + window, c : c + window], dtype=np.float32),
                    np.ascontiguousarray(truth[r : r + window, c : c + window], dtype=np.uint8),
                )
            )
            origins.append((r, c))
    return pairs, origins


def fcn_ensemble_train(samples, cfg: fcn.TrainConfig = fcn.TrainConfig(), focal: fcn.FocalConfig = fcn.FocalConfig()):
    """Train the BasicFCN combiner on ``(stacked maps (N, H, W), truth (H, W))`` pairs."""
    samples = list(samples)
    ns = {np.shape(x)[0] for x, _ in samples}
    if len(ns) != 1:
        raise ShapeError(f"samples stack different numbers of producers: {sorted(ns)}")
    return fcn.train(samples, cfg, focal)


def fcn_ensemble_predict(
    w: fcn.FcnWeights, tau: float, maps, min_keep: int | None = None, batch_size: int = 32
) -> np.ndarray:
    """Binarized combiner output for ``(N, H, W)`` maps (or a batch ``(B, N, H, W)``)."""
    maps = maps.maps if isinstance(maps, ProbabilityMapSet) else np.asarray(maps)
    single = maps.ndim == 3
    x = maps[None] if single else maps
    if x.shape[1] != w.n_in:
        raise ShapeError(f"combiner expects {w.n_in} producers, got {x.shape[1]}")
    probs = fcn.predict(w, x.astype(np.float32), batch_size)
    out = binarize(probs, tau)
    if min_keep is not None:
        out = np.stack([remove_small(o, min_keep) for o in out])
    return out[0] if single else out


def predict_map(w: fcn.FcnWeights, maps: np.ndarray, tile: int = 256) -> np.ndarray:
    """Combiner probabilities for one large ``(N, H, W)`` stack, tile by tile.

    Each tile is read with a 2-pixel halo (the receptive-field radius of two
    stacked 3x3 convolutions), so the stitched result equals a single
    whole-image forward pass.
    """
    maps = np.asarray(maps, dtype=np.float32)
    _, h, wd = maps.shape
    out = np.empty((h, wd), dtype=np.float32)
    halo = 2
    for r in range(0, h, tile):
        for c in range(0, wd, tile):
            r0, c0 = max(r - halo, 0), max(c - halo, 0)
            r1, c1 = min(r + tile + halo, h), min(c + tile + halo, wd)
            p = fcn.fcn_forward(w, maps[None, :, r0:r1, c0:c1])[0, 0]
            rr, cc = min(r + tile, h), min(c + tile, wd)
            out[r:rr, c:cc] = p[r - r0 : rr - r0, c - c0 : cc - c0]
    return out


# ---------------------------------------------------------------------------
# producer manifest


@dataclass
class ProducerManifest:
    """Producers, their thresholds and per-sample map files.

    JSON layout::

        {"producers": [{"name": "m1", "threshold": 0.45,
                        "maps": {"<sample id>": "maps/m1_<id>.json", ...}}, ...],
         "truth": {"<sample id>": "truth_<id>.json", ...}}

    Paths are relative to the manifest file. Maps are 1-band f32 rasters,
    truth files are 1-band mask rasters.
    """

    root: Path
    names: list[str]
    thresholds: list[float]
    maps: list[dict[str, str]]
    truth: dict[str, str]

    @property
    def sample_ids(self) -> list[str]:
        ids = sorted(self.maps[0]) if self.maps else []
        return ids

    def load_maps(self, sample_id: str) -> np.ndarray:
        layers = []
        for name, m in zip(self.names, self.maps):
            if sample_id not in m:
                raise FormatError(f"{self.root}: producer {name!r} has no map for sample {sample_id!r}")
            path = self.root / m[sample_id]
            stack = read_raster(path)
            if stack.bands != 1:
                raise FormatError(f"{path}: probability map must have one band")
            layers.append(stack.data[0].astype(np.float32))
        shapes = {layer.shape for layer in layers}
        if len(shapes) != 1:
            raise ShapeError(f"sample {sample_id!r}: producer maps differ in shape {sorted(shapes)}")
        return np.stack(layers)

    def load_truth(self, sample_id: str) -> np.ndarray:
        if sample_id not in self.truth:
            raise FormatError(f"{self.root}: no truth mask for sample {sample_id!r}")
        return read_mask(self.root / self.truth[sample_id]).data

    def map_set(self, sample_id: str) -> ProbabilityMapSet:
        return ProbabilityMapSet(self.load_maps(sample_id), self.thresholds)


def load_manifest(path) -> ProducerManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        producers = doc["producers"]
        names = [p["name"] for p in producers]
        thresholds = [float(p["threshold"]) for p in producers]
        maps = [dict(p["maps"]) for p in producers]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed producer manifest ({exc})") from exc
    if not producers:
        raise FormatError(f"{path}: manifest lists no producers")
    ids = set(maps[0])
    for name, m in zip(names, maps):
        if set(m) != ids:
            missing = sorted(ids ^ set(m))
            raise FormatError(f"{path}: producer {name!r} disagrees on sample ids {missing}")
    return ProducerManifest(path.parent, names, thresholds, maps, dict(doc.get("truth", {})))
