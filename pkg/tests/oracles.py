"""Independent reference implementations used by the test suite.

Each oracle is deliberately naive: plain loops or textbook formulas that
share no code with the package.
"""

from __future__ import annotations

from collections import deque
from fractions import Fraction

import numpy as np


# ---------------------------------------------------------------------------
# connected components


def bfs_components(mask: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """4-connected labels by breadth-first flood fill, numbered in scan order."""
    h, w = mask.shape
    fg = np.asarray(mask, dtype=bool).tolist()
    labels = [[0] * w for _ in range(h)]
    sizes = []
    for i in range(h):
        for j in range(w):
            if fg[i][j] and labels[i][j] == 0:
                lab = len(sizes) + 1
                labels[i][j] = lab
                q = deque([(i, j)])
                n = 0
                while q:
                    a, b = q.popleft()
                    n += 1
                    for u, v in ((a + 1, b), (a - 1, b), (a, b + 1), (a, b - 1)):
                        if 0 <= u < h and 0 <= v < w and fg[u][v] and labels[u][v] == 0:
                            labels[u][v] = lab
                            q.append((u, v))
                sizes.append(n)
    return np.array(labels, dtype=np.int64).reshape(h, w), sizes


def same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    """True when two label images describe the same set of regions."""
    if not np.array_equal(a > 0, b > 0):
        return False
    fg = a > 0
    pairs = set(zip(a[fg].tolist(), b[fg].tolist()))
    return len(pairs) == len(set(a[fg].tolist())) == len(set(b[fg].tolist()))


def bfs_remove_small(mask: np.ndarray, min_keep: int) -> np.ndarray:
    labels, sizes = bfs_components(mask)
    keep = np.array([False] + [s >= min_keep for s in sizes])
    return keep[labels].astype(np.uint8)


# ---------------------------------------------------------------------------
# point in polygon


def center_in_rings(rings_px: list[np.ndarray], h: int, w: int) -> np.ndarray:
    """Crossing-number test of every pixel center against ``(row, col)`` rings.

    An edge counts when it straddles the center's row (half-open in y) and
    crosses strictly to the right of the center. Vectorized over pixels only.
    """
    y, x = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    inside = np.zeros((h, w), dtype=bool)
    for ring in rings_px:
        for k in range(len(ring) - 1):
            r0, c0 = ring[k]
            r1, c1 = ring[k + 1]
            if r0 == r1:
                continue
            straddle = (r0 > y) != (r1 > y)
            xc = c0 + (y - r0) * (c1 - c0) / (r1 - r0)
            inside ^= straddle & (x < xc)
    return inside


# ---------------------------------------------------------------------------
# convolutional network


def naive_conv3x3(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 cross-correlation with loops; ``x`` is (N, C, H, W)."""
    n, c, h, w = x.shape
    o = k.shape[0]
    out = np.zeros((n, o, h, w), dtype=np.float64)
    for s in range(n):
        for f in range(o):
            for i in range(h):
                for j in range(w):
                    acc = float(b[f])
                    for ch in range(c):
                        for di in range(3):
                            for dj in range(3):
                                u, v = i + di - 1, j + dj - 1
                                if 0 <= u < h and 0 <= v < w:
                                    acc += float(k[f, ch, di, dj]) * float(x[s, ch, u, v])
                    out[s, f, i, j] = acc
    return out


def naive_fcn(params: dict, x: np.ndarray, training: bool, eps: float = 1e-5) -> np.ndarray:
    """conv -> batch norm -> ReLU -> conv -> sigmoid, in float64."""
    z1 = naive_conv3x3(x, params["w1"], params["b1"])
    if training:
        mu = z1.mean(axis=(0, 2, 3))
        var = z1.var(axis=(0, 2, 3))
    else:
        mu, var = params["running_mean"], params["running_var"]
    xhat = (z1 - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + eps)
    a = np.maximum(params["gamma"][None, :, None, None] * xhat + params["beta"][None, :, None, None], 0.0)
    z2 = naive_conv3x3(a, params["w2"], params["b2"])
    return 1.0 / (1.0 + np.exp(-z2))


def focal_reference(p: float, y: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    pt = p if y == 1 else 1.0 - p
    at = alpha if y == 1 else 1.0 - alpha
    return -at * (1.0 - pt) ** gamma * np.log(pt)


def richardson_derivative(f, x: np.ndarray, idx, h: float) -> float:
    """Central difference with one Richardson step: ``(4 D(h/2) - D(h)) / 3``."""

    def central(step):
        orig = x[idx]
        x[idx] = orig + step
        up = f()
        x[idx] = orig - step
        down = f()
        x[idx] = orig
        return (up - down) / (2 * step)

    return (4.0 * central(h / 2) - central(h)) / 3.0


# ---------------------------------------------------------------------------
# metrics


def metrics_closed_form(tp: int, fp: int, tn: int, fn: int) -> dict:
    """Textbook formulas, using (P_o, P_e) for kappa."""
    n = tp + fp + tn + fn
    out = {}
    out["accuracy"] = (tp + tn) / n if n else None
    out["precision"] = tp / (tp + fp) if tp + fp else None
    out["recall"] = tp / (tp + fn) if tp + fn else None
    p, r = out["precision"], out["recall"]
    if 2 * tp + fp + fn == 0:
        out["f1"] = None
    elif p is None or r is None or p + r == 0:
        out["f1"] = 0.0
    else:
        out["f1"] = 2 * p * r / (p + r)
    out["iou"] = tp / (tp + fp + fn) if tp + fp + fn else None
    if n:
        po = (tp + tn) / n
        pe = ((tp + fp) / n) * ((tp + fn) / n) + ((fn + tn) / n) * ((fp + tn) / n)
        out["kappa"] = (po - pe) / (1 - pe) if pe != 1 else None
    else:
        out["kappa"] = None
    return out


def kappa_textbook_binary(tp: int, fp: int, tn: int, fn: int):
    den = (tp + fp) * (fp + tn) + (tp + fn) * (fn + tn)
    return None if den == 0 else 2 * (tp * tn - fn * fp) / den


# ---------------------------------------------------------------------------
# windows and histograms


def enumerate_windows(h: int, w: int, window: int, stride: int) -> list[tuple[int, int]]:
    """Row-major window origins from the closed-form count per axis."""
    n_r = (h - window) // stride + 1 if h >= window else 0
    n_c = (w - window) // stride + 1 if w >= window else 0
    return [(a * stride, b * stride) for a in range(n_r) for b in range(n_c)]


def equalize_reference(band: np.ndarray, levels: int) -> np.ndarray:
    """``round_half_up((L - 1) * CDF(v))`` with exact rational arithmetic."""
    flat = band.ravel()
    values, counts = np.unique(flat, return_counts=True)
    total = flat.size
    lut = {}
    cum = 0
    for v, c in zip(values.tolist(), counts.tolist()):
        cum += c
        q = Fraction((levels - 1) * cum, total) + Fraction(1, 2)
        lut[v] = q.numerator // q.denominator
    return np.array([lut[v] for v in flat.tolist()]).reshape(band.shape)
