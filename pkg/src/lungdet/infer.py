"""Tiled full-volume detection and proposal merging.

Detections are ``(n, 5)`` arrays with columns ``(score, x, y, z, d)`` in world mm.
"""
from __future__ import annotations

import csv
from typing import NamedTuple

import numpy as np

from .anchorgeom import NoduleBox, decode_box, grid_anchor_boxes, iou_matrix
from .detnet import ConfigError
from .tensorcore import sigmoid
from .volio import Volume, voxel_to_world

DET_COLUMNS = ("score", "x", "y", "z", "d")


class Detection(NamedTuple):
    score: float
    box: NoduleBox


def empty_detections() -> np.ndarray:
    return np.zeros((0, 5))


def to_detection_list(dets: np.ndarray) -> list:
    return [Detection(float(r[0]), NoduleBox(*map(float, r[1:]))) for r in np.asarray(dets).reshape(-1, 5)]


def from_detection_list(items) -> np.ndarray:
    rows = [[d.score, d.box.x, d.box.y, d.box.z, d.box.d] for d in items]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def tile_starts(n: int, gamma: int, overlap: int = 32) -> list:
    if not 0 <= overlap < gamma:
        raise ValueError(f"overlap must be in [0, gamma), got {overlap}")
    if n <= gamma:
        return [(n - gamma) // 2]
    stride = gamma - overlap
    count = int(np.ceil((n - gamma) / stride)) + 1
    return [min(i * stride, n - gamma) for i in range(count)]


def tile_grid(extents_zyx, gamma: int, overlap: int = 32) -> np.ndarray:
    """Patch start corners (z, y, x) covering a grid of the given extents."""
    axes = [tile_starts(int(n), gamma, overlap) for n in extents_zyx]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)


def tile_centers(extents_zyx, gamma: int, overlap: int = 32) -> np.ndarray:
    """Patch centres in mm from the grid corner, (z, y, x) order, for a 1 mm grid."""
    return tile_grid(extents_zyx, gamma, overlap) + gamma / 2.0


def extract_patch(data: np.ndarray, start_zyx, size: int, pad_value: float = 0.0) -> np.ndarray:
    """Cube of side ``size`` starting at ``start_zyx``; outside voxels get ``pad_value``."""
    start = np.asarray(start_zyx, dtype=np.int64)
    out = np.full((size, size, size), pad_value, dtype=data.dtype)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + size, data.shape)
    if np.any(src_hi <= src_lo):
        return out
    dst_lo = src_lo - start
    dst_hi = dst_lo + (src_hi - src_lo)
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
        data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    return out


def patch_corner_world(v: Volume, start_zyx) -> np.ndarray:
    """World position of the lower corner of voxel ``start_zyx`` (canonical volumes)."""
    return voxel_to_world(v, np.asarray(start_zyx, dtype=np.float64)) - 0.5 * v.spacing


# ---------------------------------------------------------------------------
# decoding and merging
# ---------------------------------------------------------------------------

def decode_proposals(grids, patch_origin, patch_size: int, anchors, score_threshold: float | None = None,
                     anchor_table: np.ndarray | None = None) -> np.ndarray:
    """Turn head grids into world-frame detections.

    ``grids`` is a list of ``(stride, array [D', H', W', N_A, 5])`` for one
    patch; ``patch_origin`` is the world position of the patch corner.
    """
    strides = [int(s) for s, _ in grids]
    if anchor_table is None:
        anchor_table = grid_anchor_boxes(patch_size, strides, anchors)
    flat = np.concatenate([np.asarray(g, dtype=np.float64).reshape(-1, 5) for _, g in grids], axis=0)
    if flat.shape[0] != anchor_table.shape[0]:
        raise ValueError("grid geometry does not match the anchor table")
    scores = sigmoid(flat[:, 0])
    keep = np.arange(flat.shape[0]) if score_threshold is None else np.flatnonzero(scores >= score_threshold)
    boxes = decode_box(flat[keep, 1:], anchor_table[keep])
    boxes[:, :3] += np.asarray(patch_origin, dtype=np.float64)
    return np.concatenate([scores[keep, None], boxes], axis=1)


def _order(dets: np.ndarray) -> np.ndarray:
    return np.argsort(-dets[:, 0], kind="stable")


def nms(dets, iou_threshold: float = 0.1) -> np.ndarray:
    """Greedy hard NMS; output sorted by descending score."""
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 5)
    if dets.shape[0] == 0:
        return empty_detections()
    dets = dets[_order(dets)]
    alive = np.ones(dets.shape[0], dtype=bool)
    keep = []
    for i in range(dets.shape[0]):
        if not alive[i]:
            continue
        keep.append(i)
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if rest.size:
            ious = iou_matrix(dets[i:i + 1, 1:], dets[rest, 1:])[0]
            alive[rest[ious > iou_threshold]] = False
    return dets[keep]


def soft_nms(dets, sigma: float = 0.5, score_floor: float = 0.05) -> np.ndarray:
    """Gaussian soft-NMS: competitors' scores are multiplied by ``exp(-iou**2 / sigma)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 5)
    if dets.shape[0] == 0:
        return empty_detections()
    dets = dets[_order(dets)].copy()
    active = np.flatnonzero(dets[:, 0] >= score_floor)
    out = []
    while active.size:
        j = int(np.argmax(dets[active, 0]))  # first max keeps earlier index on ties
        i = active[j]
        out.append(dets[i].copy())
        active = np.delete(active, j)
        if not active.size:
            break
        ious = iou_matrix(dets[i:i + 1, 1:], dets[active, 1:])[0]
        dets[active, 0] *= np.exp(-(ious ** 2) / sigma)
        active = active[dets[active, 0] >= score_floor]
    return np.asarray(out).reshape(-1, 5)


def merge_detections(dets, method: str = "nms", iou_threshold: float = 0.1, sigma: float = 0.5,
                     score_floor: float = 0.05) -> np.ndarray:
    if method == "nms":
        return nms(dets, iou_threshold)
    if method == "soft_nms":
        return soft_nms(dets, sigma, score_floor)
    raise ValueError(f"unknown merge method {method!r}")


def detect_volume(model, v: Volume, score_threshold: float = 0.1, merge: str = "nms", nms_iou: float = 0.1,
                  overlap: int = 32, soft_sigma: float = 0.5, crop_info=None, tile_offset=(0, 0, 0),
                  max_candidates: int = 5000) -> np.ndarray:
    """Tile ``v``, run ``model`` in eval mode per patch, decode, threshold and merge.

    ``v`` must be preprocessed (canonical, 1 mm, normalised).  Coordinates are in
    the world frame of ``v``; when ``crop_info`` is given they are verified to
    coincide with the pre-crop world frame.  At most ``max_candidates``
    top-scoring proposals enter the merge step, which bounds its quadratic cost
    for poorly trained models.
    """
    cfg = model.cfg
    gamma = cfg.patch_size
    if not v.is_canonical:
        raise ConfigError("detect_volume expects a canonical volume")
    if not np.allclose(v.spacing, 1.0):
        raise ConfigError(f"detect_volume expects 1 mm spacing, got {v.spacing}")
    model.eval()
    anchor_table = grid_anchor_boxes(gamma, cfg.head_strides, cfg.anchors)
    starts = tile_grid(v.shape, gamma, overlap) + np.asarray(tile_offset, dtype=np.int64)
    found = []
    for start in starts:
        patch = extract_patch(v.data, start, gamma).astype(model.dtype, copy=False)
        grids = model.forward(patch[None, None])
        arrays = [(hg.stride, hg.grid.data[0]) for hg in grids]
        origin = patch_corner_world(v, start)
        found.append(decode_proposals(arrays, origin, gamma, cfg.anchors, score_threshold, anchor_table))
    dets = np.concatenate(found, axis=0) if found else empty_detections()
    dets = dets[dets[:, 0] >= score_threshold] if score_threshold is not None else dets
    if dets.shape[0] > max_candidates:
        dets = dets[_order(dets)[:max_candidates]]
    merged = merge_detections(dets, merge, nms_iou, soft_sigma)
    if crop_info is not None and merged.shape[0]:
        # the crop keeps world geometry; map one voxel through both frames as a guard
        probe = np.zeros(3)
        if not np.allclose(voxel_to_world(v, probe), crop_info.to_original_world(probe), atol=1e-6):
            raise ConfigError("crop info does not match the volume geometry")
    return merged


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

DETECTION_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "probability"]


def write_detections_csv(path, per_scan: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTION_HEADER)
        for uid in sorted(per_scan):
            for s, x, y, z, d in np.asarray(per_scan[uid]).reshape(-1, 5):
                w.writerow([uid, repr(float(x)), repr(float(y)), repr(float(z)), repr(float(d)), repr(float(s))])


def read_detections_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r = [float(row["probability"]), float(row["coordX"]), float(row["coordY"]),
                 float(row["coordZ"]), float(row.get("diameter_mm") or 0.0)]
            out.setdefault(row["seriesuid"], []).append(r)
    return {k: np.asarray(v).reshape(-1, 5) for k, v in out.items()}
