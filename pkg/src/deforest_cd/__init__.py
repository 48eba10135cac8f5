"""
deforest_cd: bitemporal deforestation change detection on multi-band rasters.

Submodules
----------
raster
    Georeferenced rasters, affine transforms, polygon layers and file I/O.
dataset
    Rasterization, standardization, NDVI and sliding-window sample building.
preprocess
    Histogram equalization, magenta clear-cut replacement and augmentation.
fcn
    The two-convolution BasicFCN with focal loss, Adam and threshold selection.
postprocess
    Binarization and 4-connected small-region removal.
metrics
    Confusion counts and the derived metrics.
ensemble
    Simple, weighted and FCN-based combination of probability maps.
synth
    Synthetic scenes and detector maps for desk-scale experiments.
"""

from . import dataset, ensemble, errors, fcn, metrics, postprocess, preprocess, raster, synth
from .errors import (
    ConfigurationError,
    DeforestError,
    DomainError,
    EmptyOverlapError,
    FormatError,
    GridMismatchError,
    IngestionError,
    ShapeError,
)
from .metrics import ConfusionCounts, UndefinedMetric
from .raster import BinaryMask, GeoTransform, Polygon, PolygonLayer, RasterStack

__version__ = "0.1.0"

__all__ = [
    "raster",
    "dataset",
    "preprocess",
    "fcn",
    "postprocess",
    "metrics",
    "ensemble",
    "synth",
    "errors",
    "BinaryMask",
    "GeoTransform",
    "Polygon",
    "PolygonLayer",
    "RasterStack",
    "ConfusionCounts",
    "UndefinedMetric",
    "DeforestError",
    "ConfigurationError",
    "DomainError",
    "EmptyOverlapError",
    "FormatError",
    "GridMismatchError",
    "IngestionError",
    "ShapeError",
]
