"""
Binarization and removal of small connected regions from predicted masks.

Components use 4-connectivity. Labeling is a two-pass union-find over
horizontal runs: the first pass merges each run with the overlapping runs
of the previous row, the second pass assigns contiguous ids ``1..K`` in
raster order of first appearance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeError

__all__ = [
    "ComponentLabeling",
    "binarize",
    "label_components",
    "remove_small",
    "remove_small_stitched",
    "write_pgm",
    "read_pgm",
    "PRODES_MIN_AREA_HA",
    "area_to_pixels",
]

PRODES_MIN_AREA_HA = 6.25


@dataclass
class ComponentLabeling:
    labels: np.ndarray  # (H, W) int32, 0 = background
    sizes: np.ndarray  # sizes[k - 1] is the pixel count of component k

    @property
    def count(self) -> int:
        return len(self.sizes)


def binarize(probs, tau: float) -> np.ndarray:
    """1 where ``probs > tau`` (strictly), else 0, as uint8.

    ``tau`` is cast to the dtype of ``probs`` so a float32 map equal to the
    threshold is not promoted past it.
    """
    probs = np.asarray(probs)
    if not np.issubdtype(probs.dtype, np.floating):
        probs = probs.astype(np.float64)
    return (probs > np.asarray(tau, dtype=probs.dtype)).astype(np.uint8)


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def label_components(mask) -> ComponentLabeling:
    """Label 4-connected foreground components of a 2-D mask."""
    data = np.asarray(mask).astype(bool)
    if data.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {data.shape}")
    h, w = data.shape
    padded = np.zeros((h, w + 2), dtype=np.int8)
    padded[:, 1:-1] = data
    d = np.diff(padded, axis=1)
    run_row, run_start = np.nonzero(d == 1)
    _, run_end = np.nonzero(d == -1)
    n = len(run_row)
    if n == 0:
        return ComponentLabeling(np.zeros((h, w), np.int32), np.zeros(0, np.int64))

    row_first = np.searchsorted(run_row, np.arange(h + 1))
    rows = run_row.tolist()
    starts = run_start.tolist()
    ends = run_end.tolist()
    first = row_first.tolist()
    parent = list(range(n))

    # pass 1: merge runs that share a column with a run in the row above
    for r in range(1, h):
        i, i_end = first[r], first[r + 1]
        j, j_end = first[r - 1], first[r]
        while i < i_end and j < j_end:
            if starts[i] < ends[j] and starts[j] < ends[i]:
                a, b = _find(parent, i), _find(parent, j)
                if a != b:
                    if a < b:
                        parent[b] = a
                    else:
                        parent[a] = b
            if ends[i] <= ends[j]:
                i += 1
            else:
                j += 1

    # pass 2: contiguous ids in raster order
    run_label = np.empty(n, dtype=np.int32)
    ids: dict[int, int] = {}
    for k in range(n):
        root = _find(parent, k)
        lab = ids.get(root)
        if lab is None:
            lab = ids[root] = len(ids) + 1
        run_label[k] = lab

    lengths = run_end - run_start
    flat_start = run_row * w + run_start
    offsets = np.repeat(flat_start - (np.cumsum(lengths) - lengths), lengths)
    positions = offsets + np.arange(int(lengths.sum()))
    labels = np.zeros(h * w, dtype=np.int32)
    labels[positions] = np.repeat(run_label, lengths)
    sizes = np.bincount(run_label, weights=lengths, minlength=len(ids) + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels.reshape(h, w), sizes)


def remove_small(mask, min_keep: int = 51) -> np.ndarray:
    """Zero every 4-connected component smaller than ``min_keep`` pixels.

    The default drops regions of up to 50 pixels.
    """
    data = np.asarray(mask)
    lab = label_components(data)
    if lab.count == 0:
        return data.astype(np.uint8, copy=True)
    keep = np.concatenate([[False], lab.sizes >= min_keep])
    return keep[lab.labels].astype(np.uint8)


def remove_small_stitched(
    masks: Sequence[np.ndarray], origins: Sequence[tuple[int, int]], shape: tuple[int, int], min_keep: int = 51
) -> list[np.ndarray]:
    """Scene-level variant: stitch patches (OR on overlaps), filter once, cut back out.

    Avoids dropping regions that are only small because a window boundary
    split them.
    """
    scene = np.zeros(shape, dtype=np.uint8)
    for m, (r, c) in zip(masks, origins):
        m = np.asarray(m)
        scene[r : r + m.shape[0], c : c + m.shape[1]] |= m.astype(np.uint8)
    kept = remove_small(scene, min_keep)
    return [
        kept[r : r + np.shape(m)[0], c : c + np.shape(m)[1]] & np.asarray(m, dtype=np.uint8)
        for m, (r, c) in zip(masks, origins)
    ]


def area_to_pixels(area_ha: float, pixel_size_m: float = 30.0) -> float:
    """Number of square pixels covering ``area_ha`` hectares."""
    return area_ha * 10_000.0 / pixel_size_m**2


def write_pgm(mask, path) -> Path:
    """Binary PGM (P5) with maxval 1."""
    data = np.asarray(mask, dtype=np.uint8)
    h, w = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n1\n".encode("ascii") + data.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    try:
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM is not supported")
    # header ends after exactly one whitespace byte following maxval
    header_len = raw.index(parts[3], len(parts[0]) + len(parts[1]) + len(parts[2])) + len(parts[3]) + 1
    body = raw[header_len:]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w).copy()
