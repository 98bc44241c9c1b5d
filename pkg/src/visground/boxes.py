"""Box geometry, GIoU/L1 training loss and the IoU@0.5 accuracy metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalised (cx, cy, w, h) form."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"degenerate box: w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class LossWeights:
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0

    def __post_init__(self):
        if self.lambda_giou < 0 or self.lambda_l1 < 0:
            raise ContractError("loss weights must be nonnegative")


def _overlaps(a: Box, b: Box):
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = a.area + b.area - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, hull


def iou(a: Box, b: Box) -> float:
    inter, union, _ = _overlaps(a, b)
    return inter / union


def giou(a: Box, b: Box) -> float:
    inter, union, hull = _overlaps(a, b)
    return inter / union - (hull - union) / hull


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised IoU for ``[..., 4]`` arrays of (cx, cy, w, h)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    lo = np.maximum(a[..., :2] - a[..., 2:] / 2, b[..., :2] - b[..., 2:] / 2)
    hi = np.minimum(a[..., :2] + a[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2)
    wh = np.clip(hi - lo, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def giou_tensor(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable GIoU between predicted ``[..., 4]`` boxes and fixed targets."""
    gt = np.asarray(gt, dtype=pred.dtype)
    gw, gh = gt[..., 2], gt[..., 3]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ContractError("degenerate ground-truth box")
    cx, cy, w, h = (pred[..., k] for k in range(4))
    px1, px2 = cx - T.scale(w, 0.5), cx + T.scale(w, 0.5)
    py1, py2 = cy - T.scale(h, 0.5), cy + T.scale(h, 0.5)
    gx1, gx2 = gt[..., 0] - gw / 2, gt[..., 0] + gw / 2
    gy1, gy2 = gt[..., 1] - gh / 2, gt[..., 1] + gh / 2
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = w * h + gw * gh - inter
    hull = (T.maximum(px2, gx2) - T.minimum(px1, gx1)) * (T.maximum(py2, gy2) - T.minimum(py1, gy1))
    return inter / union - (hull - union) / hull


def stage_loss(pred: Tensor, gt, weights: LossWeights = LossWeights()) -> Tensor:
    """``lambda_giou * (1 - GIoU) + lambda_l1 * |pred - gt|_1`` per box.

    ``pred`` is ``[..., 4]``; the result has the leading shape of ``pred``.
    """
    gt = gt.as_array() if isinstance(gt, Box) else np.asarray(gt)
    gt = gt.astype(pred.dtype)
    g = giou_tensor(pred, gt)
    l1 = T.absolute(pred - gt).sum(axis=-1)
    return T.scale(1.0 - g, weights.lambda_giou) + T.scale(l1, weights.lambda_l1)


def total_loss(boxes: Tensor, gt, weights: LossWeights = LossWeights()) -> Tensor:
    """Sum of per-stage losses. ``boxes`` is ``[..., N, 4]``, ``gt`` is ``[..., 4]``."""
    if boxes.ndim < 2 or boxes.shape[-2] == 0:
        raise ContractError("total_loss needs at least one stage prediction")
    gt = gt.as_array() if isinstance(gt, Box) else np.asarray(gt)
    return stage_loss(boxes, gt[..., None, :], weights).sum(axis=-1)


def accuracy_at_0_5(pairs: Iterable[tuple[Box, Box]]) -> float:
    """Percentage of (prediction, ground truth) pairs with IoU strictly above 0.5."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("accuracy needs at least one prediction")
    hits = sum(iou(p, g) > 0.5 for p, g in pairs)
    return 100.0 * hits / len(pairs)


def accuracy_from_arrays(pred: np.ndarray, gt: np.ndarray) -> float:
    if len(pred) == 0:
        raise ContractError("accuracy needs at least one prediction")
    return float(100.0 * np.mean(iou_array(pred, gt) > 0.5))


def boxes_from_array(arr: np.ndarray) -> list[Box]:
    return [Box(*map(float, row)) for row in np.asarray(arr).reshape(-1, 4)]


def corners_box(corners: Sequence[float]) -> Box:
    return Box.from_corners(*corners)
