"""From node probabilities to image-resolution pseudo-labels: bilinear
upsampling, dense mean-field CRF, argmax, box instances and mIoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from a2gnn.labels import UNKNOWN, box_order

CRF_MAX_PIXELS = 16384
_DENSE_KERNEL_PIXELS = 4096
_BLOCK = 1024


@dataclass
class CrfConfig:
    iterations: int = 10
    w_appearance: float = 4.0
    theta_alpha: float = 40.0
    theta_beta: float = 13.0
    w_smooth: float = 3.0
    theta_gamma: float = 3.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ("theta_alpha", "theta_beta", "theta_gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.w_appearance < 0 or self.w_smooth < 0:
            raise ValueError("kernel weights must be non-negative")


@dataclass
class InstanceMask:
    box: int
    cls: int
    mask: np.ndarray
    confidence: float


def _interp_axis(n_in: int, n_out: int, scale: float):
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def upsample(O: np.ndarray, grid, dims, stride: int | None = None) -> np.ndarray:
    """Channel-wise bilinear upsampling to ``dims`` with per-pixel renormalisation.

    Sample positions use the half-pixel convention, so node ``k`` of a grid
    downsampled by ``stride`` sits at the centre of its cell. Without
    ``stride`` the ratio ``grid / dims`` is used per axis.
    """
    h, w = grid
    H, W = dims
    p = np.asarray(O, np.float64).reshape(h, w, -1)
    sy = 1.0 / stride if stride else h / H
    sx = 1.0 / stride if stride else w / W
    y0, y1, fy = _interp_axis(h, H, sy)
    x0, x1, fx = _interp_axis(w, W, sx)
    top = p[y0][:, x0] * (1 - fx)[None, :, None] + p[y0][:, x1] * fx[None, :, None]
    bot = p[y1][:, x0] * (1 - fx)[None, :, None] + p[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out / out.sum(axis=2, keepdims=True)


def _kernel_rows(pos, rgb, rows, cfg: CrfConfig):
    dp = ((pos[rows, None, :] - pos[None, :, :]) ** 2).sum(-1)
    dc = ((rgb[rows, None, :] - rgb[None, :, :]) ** 2).sum(-1)
    k = cfg.w_appearance * np.exp(-dp / (2 * cfg.theta_alpha**2) - dc / (2 * cfg.theta_beta**2))
    k += cfg.w_smooth * np.exp(-dp / (2 * cfg.theta_gamma**2))
    k[np.arange(len(rows)), rows] = 0.0
    return k


def crf_refine(p: np.ndarray, image: np.ndarray, cfg: CrfConfig | None = None) -> np.ndarray:
    """Mean-field inference of a fully connected CRF with Potts compatibility.

    ``p`` is the ``(H, W, C)`` unary distribution, ``image`` RGB on 0..255.
    The pairwise pass is exact and quadratic in the pixel count, so images
    are limited to 16384 pixels.
    """
    cfg = cfg or CrfConfig()
    p = np.asarray(p, np.float64)
    H, W, C = p.shape
    img = np.asarray(image, np.float64)
    if img.shape[:2] != (H, W):
        raise ValueError(f"image is {img.shape[:2]}, probabilities are {(H, W)}")
    n = H * W
    if n > CRF_MAX_PIXELS:
        raise ValueError(f"{n} pixels exceeds the {CRF_MAX_PIXELS}-pixel CRF limit; downscale first")
    ys, xs = np.mgrid[0:H, 0:W]
    pos = np.stack([ys.ravel(), xs.ravel()], 1).astype(np.float64)
    rgb = img.reshape(n, -1)
    unary = np.log(np.maximum(p.reshape(n, C), 1e-12))
    Q = np.exp(unary - unary.max(1, keepdims=True))
    Q /= Q.sum(1, keepdims=True)
    dense = _kernel_rows(pos, rgb, np.arange(n), cfg) if n <= _DENSE_KERNEL_PIXELS else None
    for _ in range(cfg.iterations):
        if dense is not None:
            msg = dense @ Q
        else:
            msg = np.empty_like(Q)
            for s in range(0, n, _BLOCK):
                rows = np.arange(s, min(s + _BLOCK, n))
                msg[rows] = _kernel_rows(pos, rgb, rows, cfg) @ Q
        # Potts: penalty sum_j k_ij (1 - Q_j(l)) differs from -msg by a per-pixel constant
        z = unary + msg
        Q = np.exp(z - z.max(1, keepdims=True))
        Q /= Q.sum(1, keepdims=True)
    return Q.reshape(H, W, C)


def to_labels(p: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest class id."""
    return np.argmax(np.asarray(p), axis=-1).astype(np.uint8)


def to_instances(labels: np.ndarray, p: np.ndarray, boxes) -> list:
    """One mask per box: pixels inside it carrying the box class.

    A pixel inside several boxes of its class goes to the smallest one.
    """
    labels = np.asarray(labels)
    p = np.asarray(p, np.float64)
    owner = np.full(labels.shape, -1, dtype=np.int64)
    for k in box_order(boxes):
        region = owner[boxes[k].slices()]
        match = labels[boxes[k].slices()] == boxes[k].cls
        region[match] = k
    out = []
    for k, box in enumerate(boxes):
        mask = owner == k
        conf = float(p[..., box.cls][mask].mean()) if mask.any() else 0.0
        out.append(InstanceMask(k, box.cls, mask, conf))
    return out


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> dict:
    """Per-class IoU and their mean; pixels with ground truth 255 are ignored.

    Classes that appear in neither map have no IoU (``None``) and are left
    out of the mean.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != UNKNOWN
    per_class = []
    for c in range(n_classes):
        p_c, g_c = (pred == c) & valid, (gt == c) & valid
        tp = int((p_c & g_c).sum())
        denom = int(p_c.sum() + g_c.sum()) - tp
        per_class.append(tp / denom if denom else None)
    scored = [v for v in per_class if v is not None]
    return {"per_class": per_class, "miou": float(np.mean(scored)) if scored else float("nan")}
