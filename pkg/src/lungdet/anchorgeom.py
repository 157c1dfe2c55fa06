"""Cube boxes, IOU, box encoding and anchor target assignment.

Boxes are rows ``(x, y, z, d)``: an axis-aligned cube of side ``d`` mm
centred at ``(x, y, z)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class NoduleBox(NamedTuple):
    x: float
    y: float
    z: float
    d: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.d], dtype=np.float64)


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4))
    arr = arr.reshape(-1, 4)
    if np.any(arr[:, 3] <= 0):
        raise ValueError("box diameters must be positive")
    return arr


def anchor_box(cell_xyz, stride: float, diameter: float, patch_origin=(0.0, 0.0, 0.0)) -> NoduleBox:
    """Anchor for grid cell ``(i, j, k)`` given in (x, y, z) order; ``patch_origin`` is the patch corner."""
    c = np.asarray(patch_origin, dtype=np.float64) + (np.asarray(cell_xyz, dtype=np.float64) + 0.5) * stride
    return NoduleBox(float(c[0]), float(c[1]), float(c[2]), float(diameter))


def grid_anchor_boxes(patch_size: int, strides, anchors) -> np.ndarray:
    """All anchor boxes of a patch in patch-frame mm, one row per (head, z, y, x, anchor).

    The row order matches flattening each head grid ``[D', H', W', N_A]`` and
    concatenating heads in ``strides`` order.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    out = []
    for s in strides:
        side = patch_size // s
        c = (np.arange(side) + 0.5) * s
        zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
        centers = np.stack([xx, yy, zz], axis=-1).reshape(-1, 1, 3)
        centers = np.broadcast_to(centers, (centers.shape[0], anchors.size, 3))
        d = np.broadcast_to(anchors, centers.shape[:2])[..., None]
        out.append(np.concatenate([centers, d], axis=-1).reshape(-1, 4))
    return np.concatenate(out, axis=0)


def iou_3d(a, b) -> float:
    return float(iou_matrix(np.asarray(a, dtype=np.float64).reshape(1, 4),
                            np.asarray(b, dtype=np.float64).reshape(1, 4))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cube IOU between box arrays ``a`` (M, 4) and ``b`` (G, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ra = a[:, None, 3] / 2
    rb = b[None, :, 3] / 2
    inter = np.ones((a.shape[0], b.shape[0]))
    # volumes use the same edge arithmetic as the intersection, so identical boxes give exactly 1
    va = np.ones((a.shape[0], 1))
    vb = np.ones((1, b.shape[0]))
    for ax in range(3):
        lo_a, hi_a = a[:, None, ax] - ra, a[:, None, ax] + ra
        lo_b, hi_b = b[None, :, ax] - rb, b[None, :, ax] + rb
        inter *= np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)
        va = va * (hi_a - lo_a)
        vb = vb * (hi_b - lo_b)
    union = va + vb - inter
    return inter / union


def encode_box(gt, anchor) -> np.ndarray:
    """Regression target ``((gt_c - a_c) / a_d, ln(gt_d / a_d))``; works row-wise on arrays."""
    gt = np.asarray(gt, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    t = np.empty(np.broadcast_shapes(gt.shape, anchor.shape))
    t[..., :3] = (gt[..., :3] - anchor[..., :3]) / anchor[..., 3:4]
    t[..., 3] = np.log(gt[..., 3] / anchor[..., 3])
    return t


def decode_box(t, anchor) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    box = np.empty(np.broadcast_shapes(t.shape, anchor.shape))
    box[..., :3] = anchor[..., :3] + t[..., :3] * anchor[..., 3:4]
    box[..., 3] = anchor[..., 3] * np.exp(t[..., 3])
    return box


@dataclass
class TargetAssignment:
    labels: np.ndarray    # (M,) int8 in {POSITIVE, NEGATIVE, IGNORE}
    matched: np.ndarray   # (M,) matched gt index, -1 where not positive
    targets: np.ndarray   # (M, 4) regression targets, zero where not positive

    @property
    def positive(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negative(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)

    def counts(self) -> dict:
        return {"positive": int((self.labels == POSITIVE).sum()),
                "negative": int((self.labels == NEGATIVE).sum()),
                "ignore": int((self.labels == IGNORE).sum())}


def assign_targets(anchor_boxes: np.ndarray, gts, pos_iou: float = 0.3, neg_iou: float = 0.001,
                   force_match: bool = True) -> TargetAssignment:
    """Label anchors: max IOU > ``pos_iou`` positive, < ``neg_iou`` negative, otherwise ignored.

    With ``force_match`` every gt left without a positive gets its highest-IOU
    unclaimed anchor (lowest anchor index on ties) made positive even below
    ``pos_iou``, provided the overlap is non-zero.  Argmax ties over gts
    resolve to the lowest gt index.
    """
    if not (0 <= neg_iou < pos_iou <= 1):
        raise ValueError(f"thresholds must satisfy 0 <= neg < pos <= 1, got {neg_iou}, {pos_iou}")
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    gts = as_boxes(gts)
    m = anchor_boxes.shape[0]
    labels = np.full(m, NEGATIVE, dtype=np.int8)
    matched = np.full(m, -1, dtype=np.int64)
    targets = np.zeros((m, 4))
    if gts.shape[0] == 0:
        return TargetAssignment(labels, matched, targets)
    ious = iou_matrix(anchor_boxes, gts)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(m), best_gt]
    labels[best >= neg_iou] = IGNORE
    pos = best > pos_iou
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    if force_match:
        for g in range(gts.shape[0]):
            if np.any(matched == g):
                continue
            # best anchor not already claimed by another gt
            col = np.where(labels == POSITIVE, -1.0, ious[:, g])
            a = int(col.argmax())
            if col[a] > 0:
                labels[a] = POSITIVE
                matched[a] = g
    sel = labels == POSITIVE
    targets[sel] = encode_box(gts[matched[sel]], anchor_boxes[sel])
    return TargetAssignment(labels, matched, targets)
