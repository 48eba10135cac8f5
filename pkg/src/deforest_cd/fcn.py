"""
BasicFCN: a two-convolution fully convolutional combiner, trained from scratch.

Architecture (all convolutions 3x3, stride 1, padding 1, with bias)::

    conv(N_in -> 12) -> batch norm -> ReLU -> conv(12 -> 1) -> sigmoid

Training uses the focal loss, Adam with an additive L2 term, a hashed 20%
validation split, best-epoch selection on validation F1 at 0.5 and a final
threshold sweep on the validation set.

Activations are kept channel-last (``(N, H, W, C)``) internally so that each
convolution is a single matrix product over im2col patches.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import FormatError, ShapeError
from .preprocess import AugmentConfig, augment_arrays, sample_rng

__all__ = [
    "FcnWeights",
    "FocalConfig",
    "OptimizerState",
    "TrainConfig",
    "TrainResult",
    "DEFAULT_GRID",
    "init_weights",
    "fcn_forward",
    "fcn_logits",
    "focal_loss",
    "focal_loss_logits",
    "backward",
    "adam_step",
    "validation_indices",
    "select_threshold",
    "train",
    "predict",
    "save_weights",
    "load_weights",
]

PARAM_NAMES = ("w1", "b1", "gamma", "beta", "w2", "b2")
DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))

STREAM_AUGMENT, STREAM_SHUFFLE, STREAM_INIT = 0, 1, 2


@dataclass
class FcnWeights:
    w1: np.ndarray  # (hidden, n_in, 3, 3)
    b1: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    w2: np.ndarray  # (1, hidden, 3, 3)
    b2: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @property
    def n_in(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "FcnWeights":
        arrays = {k: v.copy() for k, v in self.__dict__.items() if isinstance(v, np.ndarray)}
        return replace(self, **arrays)

    def astype(self, dtype) -> "FcnWeights":
        arrays = {k: v.astype(dtype) for k, v in self.__dict__.items() if isinstance(v, np.ndarray)}
        return replace(self, **arrays)


@dataclass
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 32
    val_fraction: float = 0.2
    threshold_grid: Sequence[float] = DEFAULT_GRID
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 12
    augment: AugmentConfig | None = None
    log_path: str | None = None

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie strictly between 0 and 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class TrainResult:
    weights: FcnWeights
    threshold: float
    best_epoch: int
    history: list[dict]
    val_indices: list[int]
    train_indices: list[int]
    selected_by: str = "f1"


def init_weights(n_in: int, seed: int = 0, hidden: int = 12, dtype=np.float32) -> FcnWeights:
    """Fan-in scaled uniform kernels, zero biases, identity batch norm."""
    rng = sample_rng(seed, stream=STREAM_INIT)
    b1 = 1.0 / np.sqrt(n_in * 9)
    b2 = 1.0 / np.sqrt(hidden * 9)
    return FcnWeights(
        w1=rng.uniform(-b1, b1, (hidden, n_in, 3, 3)).astype(dtype),
        b1=np.zeros(hidden, dtype),
        gamma=np.ones(hidden, dtype),
        beta=np.zeros(hidden, dtype),
        w2=rng.uniform(-b2, b2, (1, hidden, 3, 3)).astype(dtype),
        b2=np.zeros(1, dtype),
        running_mean=np.zeros(hidden, dtype),
        running_var=np.ones(hidden, dtype),
    )


# ---------------------------------------------------------------------------
# convolution helpers (channel-last)


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N*H*W, C*9)`` with column order ``(c, di, dj)``."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N, H, W, C, 3, 3)
    return win.reshape(n * h * w, c * 9)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    n, h, w, c = shape
    cols = cols.reshape(n, h, w, c, 3, 3)
    out = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            out[:, di : di + h, dj : dj + w, :] += cols[..., di, dj]
    return out[:, 1:-1, 1:-1, :]


def _forward(w: FcnWeights, x: np.ndarray, training: bool):
    if x.ndim != 4:
        raise ShapeError(f"expected an N x C x H x W tensor, got shape {x.shape}")
    if x.shape[1] != w.n_in:
        raise ShapeError(f"input has {x.shape[1]} channels, network expects {w.n_in}")
    n, _, h, wd = x.shape
    dtype = w.w1.dtype
    xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype)
    cols1 = _im2col(xl)
    k1 = w.w1.reshape(w.hidden, -1)
    z1 = cols1 @ k1.T + w.b1
    if training:
        mu = z1.mean(axis=0)
        var = z1.var(axis=0)
    else:
        mu, var = w.running_mean, w.running_var
    invstd = 1.0 / np.sqrt(var + w.eps)
    xhat = (z1 - mu) * invstd
    bn = w.gamma * xhat + w.beta
    a = np.maximum(bn, 0)
    cols2 = _im2col(a.reshape(n, h, wd, w.hidden))
    z2 = cols2 @ w.w2.reshape(1, -1).T + w.b2
    logits = z2.reshape(n, h, wd)[:, None]
    cache = dict(shape=(n, h, wd), cols1=cols1, mu=mu, var=var, invstd=invstd, xhat=xhat, bn=bn, cols2=cols2)
    return logits, cache


def fcn_logits(w: FcnWeights, x: np.ndarray, training: bool = False) -> np.ndarray:
    return _forward(w, x, training)[0]


def fcn_forward(w: FcnWeights, x: np.ndarray, training: bool = False) -> np.ndarray:
    """Probabilities ``(N, 1, H, W)`` for an ``(N, N_in, H, W)`` input.

    With ``training=True`` batch norm uses the batch statistics; otherwise the
    running statistics. Running statistics are not updated here.
    """
    return expit(fcn_logits(w, x, training))


# ---------------------------------------------------------------------------
# loss


def focal_loss(p: np.ndarray, y: np.ndarray, cfg: FocalConfig = FocalConfig(), clip: float = 1e-12) -> float:
    """Mean of ``-alpha_t (1 - p_t)^gamma log(p_t)`` over all pixels, from probabilities."""
    p = np.clip(np.asarray(p, dtype=np.float64), clip, 1.0 - clip)
    y = np.asarray(y).reshape(p.shape).astype(bool)
    pt = np.where(y, p, 1.0 - p)
    at = np.where(y, cfg.alpha, 1.0 - cfg.alpha)
    return float(np.mean(-at * (1.0 - pt) ** cfg.gamma * np.log(pt)))


def focal_loss_logits(z: np.ndarray, y: np.ndarray, cfg: FocalConfig = FocalConfig()):
    """Focal loss from logits and its gradient w.r.t. the logits.

    Uses ``log p_t = -softplus(-s z)`` with ``s = 2y - 1`` so it stays finite
    for saturated logits. Returns ``(mean loss, dL/dz)``.
    """
    y = np.asarray(y).reshape(z.shape).astype(bool)
    s = np.where(y, 1.0, -1.0).astype(z.dtype)
    u = s * z
    log_pt = -np.logaddexp(0.0, -u)
    pt = expit(u)
    one_m = expit(-u)
    at = np.where(y, cfg.alpha, 1.0 - cfg.alpha).astype(z.dtype)
    mod = one_m**cfg.gamma
    loss = at * mod * (-log_pt)
    d_u = at * mod * (cfg.gamma * pt * log_pt - one_m)
    m = z.size
    return float(loss.mean()), (s * d_u / m).astype(z.dtype)


# ---------------------------------------------------------------------------
# gradients


def backward(w: FcnWeights, x: np.ndarray, y: np.ndarray, cfg: FocalConfig = FocalConfig()):
    """Mean focal loss and its exact gradient for every trainable parameter.

    Batch norm runs in training mode (batch statistics), as during an
    optimization step. Returns ``(loss, grads, cache)`` where ``grads`` maps
    parameter names to arrays shaped like the parameters.
    """
    logits, c = _forward(w, x, training=True)
    n, h, wd = c["shape"]
    loss, dz = focal_loss_logits(logits, y, cfg)
    g2 = dz.reshape(-1, 1)

    grads = {}
    grads["w2"] = (c["cols2"].T @ g2).T.reshape(w.w2.shape)
    grads["b2"] = g2.sum(axis=0)
    da = _col2im(g2 @ w.w2.reshape(1, -1), (n, h, wd, w.hidden)).reshape(-1, w.hidden)

    dbn = da * (c["bn"] > 0)
    xhat = c["xhat"]
    grads["gamma"] = (dbn * xhat).sum(axis=0)
    grads["beta"] = dbn.sum(axis=0)
    dxhat = dbn * w.gamma
    m = dxhat.shape[0]
    dz1 = c["invstd"] / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))

    grads["w1"] = (c["cols1"].T @ dz1).T.reshape(w.w1.shape)
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads, c


def adam_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One bias-corrected Adam update with L2 added to the gradient (in place).

    Returns ``(params, state)`` for convenience.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# threshold selection


def _f1_score(pred: np.ndarray, truth: np.ndarray) -> float | None:
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    den = 2 * tp + fp + fn
    return None if den == 0 else 2 * tp / den


def select_threshold(probs, masks, grid: Sequence[float] = DEFAULT_GRID) -> float:
    """Grid value maximizing F1 of ``probs > tau``; ties go to the smallest ``tau``.

    A threshold where neither prediction nor truth has a positive pixel counts
    as a perfect score. The grid is scanned by value, so its order is
    irrelevant.
    """
    if len(grid) == 0:
        raise ValueError("threshold grid is empty")
    probs = np.asarray(probs)
    truth = np.asarray(masks).reshape(probs.shape).astype(bool)
    best_tau, best = None, -1.0
    for tau in sorted(float(t) for t in grid):
        f1 = _f1_score(probs > np.asarray(tau, dtype=probs.dtype), truth)
        score = 1.0 if f1 is None else f1
        if score > best:
            best_tau, best = tau, score
    return best_tau


# ---------------------------------------------------------------------------
# training


def validation_indices(n: int, fraction: float, seed: int) -> list[int]:
    """Indices of the validation split: the ``round(fraction * n)`` smallest index hashes.

    Membership depends only on ``(seed, index)``, never on sample order.
    """
    n_val = int(np.floor(fraction * n + 0.5))
    n_val = min(max(n_val, 1), n - 1)
    keys = [hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest() for i in range(n)]
    return sorted(sorted(range(n), key=lambda i: keys[i])[:n_val])


def _stack(samples, idx):
    x = np.stack([samples[i][0] for i in idx])
    y = np.stack([samples[i][1] for i in idx])
    return x, y


def predict(w: FcnWeights, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode probabilities ``(N, H, W)``, computed in batches."""
    out = [fcn_forward(w, x[i : i + batch_size])[:, 0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + x.shape[2:], dtype=np.float32)


def train(samples, cfg: TrainConfig = TrainConfig(), focal: FocalConfig = FocalConfig()) -> TrainResult:
    """Train a BasicFCN on ``(inputs (C, H, W), mask (H, W))`` pairs.

    The weights of the epoch with the best validation F1 (threshold 0.5) are
    kept, then the binarization threshold is swept on the validation split.
    If the validation masks hold no positive pixel, F1 is undefined and the
    epoch is chosen by validation loss instead (with a warning).
    """
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("training needs at least two samples")
    shapes = {(np.shape(s[0]), np.shape(s[1])) for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"samples have inconsistent shapes: {sorted(shapes)}")
    n_in = np.shape(samples[0][0])[0]

    val_idx = validation_indices(len(samples), cfg.val_fraction, cfg.seed)
    val_set = set(val_idx)
    train_idx = [i for i in range(len(samples)) if i not in val_set]
    x_val, y_val = _stack(samples, val_idx)
    x_val = x_val.astype(np.float32)
    y_val = y_val.astype(bool)

    by_loss = not y_val.any()
    if by_loss:
        warnings.warn("validation masks contain no positive pixel; selecting the epoch by validation loss")

    w = init_weights(n_in, cfg.seed, cfg.hidden)
    opt = OptimizerState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    best_w, best_score, best_epoch = w.copy(), -np.inf, 0
    history = []

    for epoch in range(cfg.epochs):
        order = sample_rng(cfg.seed, epoch, stream=STREAM_SHUFFLE).permutation(train_idx)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xs, ys = [], []
            for i in batch:
                x, y = samples[i]
                if cfg.augment is not None:
                    (x,), y = augment_arrays([x], y, cfg.augment, sample_rng(cfg.seed, epoch, int(i)))
                xs.append(x)
                ys.append(y)
            xb = np.stack(xs).astype(np.float32)
            yb = np.stack(ys)
            loss, grads, cache = backward(w, xb, yb, focal)
            m = w.momentum
            count = cache["cols1"].shape[0]
            w.running_mean = ((1 - m) * w.running_mean + m * cache["mu"]).astype(w.running_mean.dtype)
            unbiased = cache["var"] * count / max(count - 1, 1)
            w.running_var = ((1 - m) * w.running_var + m * unbiased).astype(w.running_var.dtype)
            adam_step(opt, w.params(), grads)
            losses.append(loss * len(batch))

        p_val = predict(w, x_val, cfg.batch_size)
        val_loss = focal_loss(p_val, y_val, focal)
        val_f1 = _f1_score(p_val > np.float32(0.5), y_val)
        score = -val_loss if by_loss else (val_f1 if val_f1 is not None else 0.0)
        history.append(
            {
                "epoch": epoch,
                "loss": float(np.sum(losses) / len(order)),
                "val_loss": val_loss,
                "val_f1": val_f1,
            }
        )
        if score > best_score:
            best_w, best_score, best_epoch = w.copy(), score, epoch

    p_val = predict(best_w, x_val, cfg.batch_size)
    tau = select_threshold(p_val, y_val, cfg.threshold_grid)
    if cfg.log_path:
        Path(cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.log_path).write_text(
            json.dumps({"best_epoch": best_epoch, "threshold": tau, "epochs": history}, indent=2) + "\n"
        )
    return TrainResult(best_w, tau, best_epoch, history, val_idx, train_idx, "loss" if by_loss else "f1")


# ---------------------------------------------------------------------------
# weight files

_FCNW_MAGIC = b"FCNW"
_FCNW_VERSION = 1
_TENSORS = ("w1", "b1", "gamma", "beta", "running_mean", "running_var", "w2", "b2")


def save_weights(w: FcnWeights, path, meta: dict | None = None) -> Path:
    """``FCNW`` file: magic, u32 version, u32 header length, JSON header, raw f32 LE tensors."""
    header = {
        "tensors": [{"name": k, "shape": list(getattr(w, k).shape)} for k in _TENSORS],
        "momentum": w.momentum,
        "eps": w.eps,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(getattr(w, k), dtype="<f4").tobytes() for k in _TENSORS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_FCNW_MAGIC + struct.pack("<II", _FCNW_VERSION, len(hbytes)) + hbytes + blobs)
    return path


def load_weights(path) -> tuple[FcnWeights, dict]:
    """Read an ``FCNW`` file; returns the weights and the stored metadata."""
    raw = Path(path).read_bytes()
    if raw[:4] != _FCNW_MAGIC or len(raw) < 12:
        raise FormatError(f"{path}: not an FCNW weight file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _FCNW_VERSION:
        raise FormatError(f"{path}: unsupported FCNW version {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    offset = 12 + hlen
    arrays = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        if offset + 4 * count > len(raw):
            raise FormatError(f"{path}: truncated tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(raw, "<f4", count, offset).reshape(t["shape"]).astype(np.float32)
        offset += 4 * count
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after tensors")
    w = FcnWeights(**arrays, momentum=header["momentum"], eps=header["eps"])
    return w, header.get("meta", {})
