"""Box geometry, box regression losses and mask losses.

Boxes are normalized ``(cx, cy, w, h)`` unless a function says it takes corner
boxes ``(x1, y1, x2, y2)``. Numpy helpers serve matching and evaluation; the
``Tensor`` versions carry gradients for training.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, PROB_EPS, Tensor, concat, maximum, minimum, where

HULL_EPS = 1e-12


def to_xyxy(box):
    """Convert ``(..., 4)`` center boxes to corner boxes (numpy or Tensor)."""
    if isinstance(box, Tensor):
        c = box[..., 0:2]
        half = box[..., 2:4] * 0.5
        return concat([c - half, c + half], axis=-1)
    box = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def to_cxcywh(box) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    x1, y1, x2, y2 = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def _iou_and_union(a: np.ndarray, b: np.ndarray):
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0), union


def iou(a, b):
    """IoU of corner boxes, broadcasting over leading axes. Zero-union pairs give 0."""
    out, _ = _iou_and_union(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def giou(a, b):
    """Generalized IoU of corner boxes; 0 when the enclosing hull has no area."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ious, union = _iou_and_union(a, b)
    lt = np.minimum(a[..., :2], b[..., :2])
    rb = np.maximum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0, None)
    hull = wh[..., 0] * wh[..., 1]
    safe = np.where(hull >= HULL_EPS, hull, 1.0)
    out = np.where(hull >= HULL_EPS, ious - (hull - union) / safe, 0.0)
    return float(out) if out.ndim == 0 else out


def pairwise_iou(a, b) -> np.ndarray:
    """``(n, m)`` IoU matrix between corner boxes ``a (n,4)`` and ``b (m,4)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.asarray(iou(a[:, None, :], b[None, :, :])).reshape(len(a), len(b))


def pairwise_giou(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.asarray(giou(a[:, None, :], b[None, :, :])).reshape(len(a), len(b))


def giou_tensor(a: Tensor, b) -> Tensor:
    """Elementwise GIoU of ``(..., 4)`` corner boxes with gradients through ``a`` and ``b``."""
    b = b if isinstance(b, Tensor) else Tensor(b)
    x1, y1, x2, y2 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    u1, v1, u2, v2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    area_a = (x2 - x1).clip(0.0) * (y2 - y1).clip(0.0)
    area_b = (u2 - u1).clip(0.0) * (v2 - v1).clip(0.0)
    iw = (minimum(x2, u2) - maximum(x1, u1)).clip(0.0)
    ih = (minimum(y2, v2) - maximum(y1, v1)).clip(0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    ok_u = union.data > 0
    iou_t = where(ok_u, inter / where(ok_u, union, 1.0), 0.0)
    hw = (maximum(x2, u2) - minimum(x1, u1)).clip(0.0)
    hh = (maximum(y2, v2) - minimum(y1, v1)).clip(0.0)
    hull = hw * hh
    ok_h = hull.data >= HULL_EPS
    return where(ok_h, iou_t - (hull - union) / where(ok_h, hull, 1.0), 0.0)


def box_losses(pred: Tensor, gt) -> tuple[Tensor, Tensor]:
    """L1 over center-format coordinates and ``1 - GIoU`` for matched box pairs.

    ``pred`` and ``gt`` are ``(..., 4)``; both returned tensors have shape ``(...)``.
    """
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"box shapes differ: {pred.shape} vs {gt.shape}")
    l1 = (pred - gt).abs().sum(axis=-1)
    g = giou_tensor(to_xyxy(pred), to_xyxy(gt))
    return l1, 1.0 - g


# -- masks ---------------------------------------------------------------------


def rasterize_box(box, size: int = 32) -> np.ndarray:
    """Binary ``size x size`` mask of pixels whose centers fall inside a center box."""
    x1, y1, x2, y2 = to_xyxy(np.asarray(box, dtype=np.float64))
    centers = (np.arange(size) + 0.5) / size
    inside_x = (centers >= x1) & (centers < x2)
    inside_y = (centers >= y1) & (centers < y2)
    return inside_y[:, None] & inside_x[None, :]


def rasterize_union(boxes, size: int = 32) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for b in boxes:
        mask |= rasterize_box(b, size)
    return mask


def _check_mask_shapes(pred: Tensor, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def focal_loss(pred: Tensor, gt, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean per-pixel focal loss of soft predictions against a binary mask.

    With ``gamma == 0`` and ``alpha is None`` this is plain binary cross entropy.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check_mask_shapes(pred, gt)
    p = pred.clip(PROB_EPS, 1.0 - PROB_EPS)
    p_t = p * gt + (1.0 - p) * (1.0 - gt)
    loss = -p_t.log()
    if gamma:
        loss = loss * (1.0 - p_t) ** gamma
    if alpha is not None:
        alpha_t = alpha * gt + (1.0 - alpha) * (1.0 - gt)
        loss = loss * alpha_t
    return loss.mean()


def dice_loss(pred: Tensor, gt, smooth: float = 1.0) -> Tensor:
    """``1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`` per mask over the last two
    axes, averaged over any leading axes."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check_mask_shapes(pred, gt)
    axes = (-2, -1)
    inter = (pred * gt).sum(axis=axes)
    per_mask = 1.0 - (2.0 * inter + smooth) / (pred.sum(axis=axes) + gt.sum(axis=axes) + smooth)
    return per_mask.mean()
