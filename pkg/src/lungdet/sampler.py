"""Anchor-based patch sampling: crop, augment, hard-negative selection and loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensorcore as tc
from .anchorgeom import TargetAssignment
from .infer import extract_patch, patch_corner_world
from .volio import Volume, world_to_voxel

GROUND_TRUTH = "ground_truth"
FALSE_POSITIVE = "false_positive"


# ---------------------------------------------------------------------------
# sampling anchors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingAnchor:
    scan: int
    point: tuple          # world (x, y, z) mm
    source: str = GROUND_TRUTH
    round: int = 0

    def to_dict(self):
        return {"scan": self.scan, "point": list(self.point), "source": self.source, "round": self.round}


@dataclass
class SamplingAnchorSet:
    anchors: list = field(default_factory=list)

    def __len__(self):
        return len(self.anchors)

    def __iter__(self):
        return iter(self.anchors)

    def points(self, scan: int | None = None) -> np.ndarray:
        pts = [a.point for a in self.anchors if scan is None or a.scan == scan]
        return np.asarray(pts, dtype=np.float64).reshape(-1, 3)

    def count(self, source: str) -> int:
        return sum(a.source == source for a in self.anchors)

    def to_list(self):
        return [a.to_dict() for a in self.anchors]

    @classmethod
    def from_list(cls, items):
        return cls([SamplingAnchor(int(d["scan"]), tuple(d["point"]), d["source"], int(d["round"])) for d in items])


def _as_entries(points, source, round_index):
    out = []
    for p in points:
        if isinstance(p, SamplingAnchor):
            out.append(p)
        elif isinstance(p, tuple) and len(p) == 2 and np.size(p[1]) == 3:
            out.append(SamplingAnchor(int(p[0]), tuple(float(v) for v in p[1]), source, round_index))
        else:
            out.append(SamplingAnchor(0, tuple(float(v) for v in np.ravel(p)), source, round_index))
    return out


def update_sampling_anchors(gt_points, fp_points=(), round_index: int = 0, merge_mm: float = 1.0) -> SamplingAnchorSet:
    """Union of ground-truth and false-positive locations with ``merge_mm`` de-duplication.

    Items are ``(scan, (x, y, z))`` pairs, :class:`SamplingAnchor` objects, or bare
    points (scan 0).  Ground-truth entries are always kept; a point within
    ``merge_mm`` of an already kept point of the same scan is dropped.
    """
    kept: list = []
    by_scan: dict = {}
    for entry in _as_entries(gt_points, GROUND_TRUTH, 0) + _as_entries(fp_points, FALSE_POSITIVE, round_index):
        p = np.asarray(entry.point)
        prev = by_scan.get(entry.scan)
        # ground truth comes first, so a merged false positive keeps ground-truth provenance
        if prev and np.any(np.linalg.norm(np.asarray(prev) - p, axis=1) <= merge_mm):
            continue
        kept.append(entry)
        by_scan.setdefault(entry.scan, []).append(p)
    return SamplingAnchorSet(kept)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass
class PatchSample:
    patch: np.ndarray        # (g, g, g) in (z, y, x)
    origin: np.ndarray       # world (x, y, z) of the patch corner
    gts: np.ndarray          # (k, 4) boxes in patch frame (mm from the corner, x y z d)
    record: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.patch.shape[0]


def crop_patch(v: Volume, center, gamma: int, jitter_mm: float = 16.0, rng=None, gts=None) -> PatchSample:
    """Cube of side ``gamma`` around ``center`` (world mm) plus uniform jitter.

    ``v`` is canonical with 1 mm spacing; voxels outside the volume are 0.
    Ground-truth boxes ``gts`` (world, rows x y z d) are attached when their
    centre lies inside the window.
    """
    center = np.asarray(center, dtype=np.float64)
    shift = np.zeros(3)
    if jitter_mm > 0:
        if rng is None:
            raise ValueError("jitter needs a random generator")
        shift = rng.uniform(-jitter_mm, jitter_mm, size=3)
    idx = world_to_voxel(v, center + shift)
    start = np.floor(idx - (gamma - 1) / 2 + 0.5).astype(np.int64)
    patch = extract_patch(v.data, start, gamma)
    origin = patch_corner_world(v, start)
    boxes = np.zeros((0, 4))
    if gts is not None and len(gts):
        g = np.asarray(gts, dtype=np.float64).reshape(-1, 4).copy()
        g[:, :3] -= origin
        inside = np.all((g[:, :3] >= 0) & (g[:, :3] < gamma * v.spacing), axis=1)
        boxes = g[inside]
    return PatchSample(patch, origin, boxes, {"start": start.tolist(), "jitter": shift.tolist()})


def _flip_boxes(boxes, world_axis, gamma):
    out = boxes.copy()
    out[:, world_axis] = gamma - out[:, world_axis]
    return out


def _rot90_boxes(boxes, k, gamma):
    out = boxes.copy()
    for _ in range(k % 4):
        x, y = out[:, 0].copy(), out[:, 1].copy()
        out[:, 0] = y
        out[:, 1] = gamma - x
    return out


def augment(sample: PatchSample, rng, flip_p: float = 0.5, rotate: bool = True,
            scale_range=(0.85, 1.15), scale_p: float = 0.5, ops: dict | None = None) -> PatchSample:
    """Random axis flips, axial right-angle rotations and isotropic scaling.

    ``ops`` forces a specific transform (keys ``flip`` [x, y, z] bools,
    ``rot`` int, ``scale`` float) instead of drawing one.
    """
    g = sample.size
    if ops is None:
        flips = [bool(rng.random() < flip_p) for _ in range(3)]
        rot = int(rng.integers(0, 4)) if rotate else 0
        scale = float(rng.uniform(*scale_range)) if rng.random() < scale_p else 1.0
    else:
        flips = list(ops.get("flip", [False, False, False]))
        rot = int(ops.get("rot", 0))
        scale = float(ops.get("scale", 1.0))
    data = sample.patch
    boxes = sample.gts.copy()
    for world_axis, do in enumerate(flips):
        if do:
            data = np.flip(data, axis=2 - world_axis)
            boxes = _flip_boxes(boxes, world_axis, g)
    if rot % 4:
        # rotates the (y, x) plane; a point (x, y) goes to (y, g - x)
        data = np.rot90(data, k=rot % 4, axes=(1, 2))
        boxes = _rot90_boxes(boxes, rot, g)
    data = np.ascontiguousarray(data)
    if scale != 1.0:
        c = g / 2.0
        offset = (c - 0.5) * (1 - 1 / scale)
        data = ndimage.affine_transform(data, np.eye(3) / scale, offset=offset, order=1,
                                        mode="constant", cval=0.0, prefilter=False).astype(data.dtype)
        boxes[:, :3] = c + scale * (boxes[:, :3] - c)
        boxes[:, 3] *= scale
        inside = np.all((boxes[:, :3] >= 0) & (boxes[:, :3] < g), axis=1)
        boxes = boxes[inside]
    record = dict(sample.record)
    record.update({"flip": flips, "rot": rot % 4, "scale": scale})
    return PatchSample(data, sample.origin, boxes, record)


# ---------------------------------------------------------------------------
# hard negatives and loss
# ---------------------------------------------------------------------------

def ohem_select(neg_logits, k: int = 5) -> np.ndarray:
    """Indices of the ``k`` largest logits; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(neg_logits, dtype=np.float64).reshape(-1)
    return np.argsort(-x, kind="stable")[:k]


def detection_loss(grids, assignments, k: int = 5, reg_weight: float = 1.0):
    """Cross entropy over positives plus ``k`` hardest negatives per patch, smooth L1 over positives.

    ``grids`` is the detector output (list of ``HeadGrid`` with tensors
    ``[N, D', H', W', N_A, 5]``); ``assignments`` holds one
    :class:`TargetAssignment` per batch item over the concatenated anchor table.
    Returns ``(loss_tensor, parts)``.
    """
    if isinstance(assignments, TargetAssignment):
        assignments = [assignments]
    tensors = [hg.grid if hasattr(hg, "grid") else hg for hg in grids]
    n = tensors[0].shape[0]
    if len(assignments) != n:
        raise tc.ShapeError(f"{len(assignments)} assignments for a batch of {n}")
    per_item = [int(np.prod(t.shape[1:5])) for t in tensors]
    total_rows = sum(per_item)
    if any(a.labels.shape[0] != total_rows for a in assignments):
        raise tc.ShapeError("assignment does not match the grid geometry")
    flat = tc.concat_rows([tc.reshape(t, (n * m, 5)) for t, m in zip(tensors, per_item)])
    head_start = np.concatenate([[0], np.cumsum(per_item)[:-1]])
    block_start = np.concatenate([[0], np.cumsum([n * m for m in per_item])[:-1]])

    def global_rows(item, local):
        local = np.asarray(local, dtype=np.int64)
        h = np.searchsorted(head_start, local, side="right") - 1
        return block_start[h] + item * np.asarray(per_item)[h] + (local - head_start[h])

    cls_rows, cls_labels, pos_rows, pos_targets = [], [], [], []
    for item, ta in enumerate(assignments):
        pos = ta.positive
        neg = ta.negative
        rows_pos = global_rows(item, pos)
        rows_neg = global_rows(item, neg)
        hard = rows_neg[ohem_select(flat.data[rows_neg, 0], k)] if rows_neg.size else rows_neg
        cls_rows += [rows_pos, hard]
        cls_labels += [np.ones(rows_pos.size), np.zeros(hard.size)]
        pos_rows.append(rows_pos)
        pos_targets.append(ta.targets[pos])
    cls_rows = np.concatenate(cls_rows).astype(np.int64)
    cls_labels = np.concatenate(cls_labels)
    pos_rows = np.concatenate(pos_rows).astype(np.int64)
    pos_targets = np.concatenate(pos_targets, axis=0).reshape(-1, 4)

    cls = tc.bce_with_logits(tc.take(flat, (cls_rows, 0)), cls_labels)
    parts = {"cls": float(cls.data), "reg": 0.0, "positives": int(pos_rows.size),
             "negatives": int(cls_rows.size - pos_rows.size)}
    loss = cls
    if pos_rows.size:
        reg = tc.smooth_l1(tc.take(flat, (pos_rows[:, None], np.arange(1, 5)[None, :])), pos_targets)
        parts["reg"] = float(reg.data)
        loss = tc.add(cls, tc.mul_scalar(reg, reg_weight))
    parts["loss"] = float(loss.data)
    return loss, parts
