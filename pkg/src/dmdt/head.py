"""Box prediction head, L1 + GIoU objective and the acc@0.5 metric.

Boxes are (cx, cy, w, h) in fractions of the image side.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import MLP, Module


def pool_reg(f_d, mask):
    return ag.masked_mean(f_d, mask)


class PredictionHead(Module):
    """Three affine layers with ReLU between, sigmoid on the four outputs."""

    def __init__(self, dim, rng, dtype=np.float64):
        self.mlp = MLP([dim, dim, dim, 4], rng, dtype)

    def forward(self, f_reg):
        return ag.sigmoid(self.mlp(f_reg))


def to_corners(box):
    box = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(box, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def iou_giou(a, b):
    """Numpy IoU and GIoU for broadcastable (..., 4) center-form boxes.

    A zero-area union gives IoU 0 and a zero-area hull gives GIoU 0.
    """
    ca, cb = to_corners(a), to_corners(b)
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])) * (
        np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
        giou = np.where(hull > 0, iou - (hull - union) / hull, 0.0)
    return iou, giou


def giou(a, b):
    return iou_giou(a, b)[1]


def iou(a, b):
    return iou_giou(a, b)[0]


def giou_tensor(pred, target):
    """Differentiable GIoU between (B, 4) tensors; returns (B,)."""
    target = ag.as_tensor(target, pred.dtype)
    px0, py0, px1, py1 = _corners_t(pred)
    tx0, ty0, tx1, ty1 = _corners_t(target)
    area_p = (px1 - px0) * (py1 - py0)
    area_t = (tx1 - tx0) * (ty1 - ty0)
    iw = ag.relu(ag.minimum(px1, tx1) - ag.maximum(px0, tx0))
    ih = ag.relu(ag.minimum(py1, ty1) - ag.maximum(py0, ty0))
    inter = iw * ih
    union = area_p + area_t - inter
    hull = (ag.maximum(px1, tx1) - ag.minimum(px0, tx0)) * (ag.maximum(py1, ty1) - ag.minimum(py0, ty0))
    # degenerate guards: swap a zero denominator for 1 and zero the term
    u_ok = union.data > 0
    h_ok = hull.data > 0
    safe_union = ag.masked_fill(union, ~u_ok, 1.0)
    safe_hull = ag.masked_fill(hull, ~h_ok, 1.0)
    iou_t = ag.masked_fill(inter / safe_union, ~u_ok, 0.0)
    g = iou_t - (hull - union) / safe_hull
    return ag.masked_fill(g, ~h_ok, 0.0)


def _corners_t(box):
    cx, cy, w, h = (box[..., i] for i in range(4))
    hw, hh = ag.scale(w, 0.5), ag.scale(h, 0.5)
    return cx - hw, cy - hh, cx + hw, cy + hh


def total_loss(pred, target, l1_reduction="sum"):
    """Batch-mean of L1 (summed over the 4 components by default) + (1 - GIoU).

    Returns (loss, l1, giou_loss) with the last two as python floats.
    """
    target_t = ag.as_tensor(np.asarray(target, dtype=pred.dtype))
    l1 = ag.abs_(pred - target_t).sum(axis=-1)
    if l1_reduction == "mean":
        l1 = ag.scale(l1, 0.25)
    elif l1_reduction != "sum":
        raise ValueError(f"l1_reduction must be 'sum' or 'mean', got {l1_reduction!r}")
    g = ag.sub(1.0, giou_tensor(pred, target_t))
    loss = ag.mean(l1 + g)
    return loss, float(l1.data.mean()), float(g.data.mean())


def acc_at_50(predictions, ground_truths):
    """Fraction of predictions whose IoU with the ground truth is strictly above 0.5."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(ground_truths, dtype=np.float64).reshape(-1, 4)
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predictions vs {len(t)} ground truths")
    if len(p) == 0:
        raise ValueError("acc@0.5 is undefined for an empty set")
    return float(np.mean(iou(p, t) > 0.5))
