"""Synthetic chest phantoms: tissue body, two air-filled lungs, spherical nodules, vessel tubes."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .froc import ScanTruth, write_annotations_csv
from .volio import Volume, write_metaimage

MAX_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    pass


@dataclass
class PhantomConfig:
    shape: tuple = (128, 128, 128)          # z, y, x voxels
    spacing: float = 1.0                    # mm, isotropic
    body_axes: tuple = (0.97, 0.95, 0.98)   # body semi-axes (x, y, z) as fractions of the half extent
    lung_offset_x: float = 0.47             # lung centres at +-offset along x
    lung_axes: tuple = (0.42, 0.82, 0.88)   # lung semi-axes (x, y, z)
    nodule_count: tuple = (1, 3)            # inclusive range
    nodule_diameter: tuple = (3.0, 30.0)    # mm
    nodule_hu: tuple = (-50.0, 100.0)
    vessel_count: int = 5
    vessel_radius: tuple = (1.0, 2.5)       # mm
    vessel_length: tuple = (30.0, 80.0)     # mm
    air_hu: float = -1000.0
    lung_hu: float = -750.0
    tissue_hu: float = 40.0
    vessel_hu: float = -50.0
    noise_sigma: float = 10.0
    nodule_gap_mm: float = 1.0              # extra spacing between nodules and to the lung wall
    wall_mm: float = 4.0                    # minimum tissue between lungs and the body surface

    def validate(self):
        lo, hi = self.nodule_diameter
        if not 3.0 <= lo <= hi <= 30.0:
            raise ValueError(f"nodule diameters must lie in [3, 30] mm, got {self.nodule_diameter}")
        if self.nodule_count[0] < 0 or self.nodule_count[0] > self.nodule_count[1]:
            raise ValueError(f"bad nodule count range {self.nodule_count}")
        if self.vessel_count < 0 or self.noise_sigma < 0:
            raise ValueError("vessel count and noise sigma must be non-negative")
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"bad phantom shape {self.shape}")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class Phantom(NamedTuple):
    volume: Volume        # HU values, float32
    truth: ScanTruth
    lung_mask: np.ndarray  # ground-truth lung label (bool)
    nodule_hu: np.ndarray  # per-nodule intensity


def _grid_mm(cfg: PhantomConfig):
    """World coordinates (x, y, z) of the voxel centres as broadcastable arrays, plus the origin."""
    shape = np.asarray(cfg.shape)
    origin_zyx = -(shape - 1) / 2.0 * cfg.spacing
    z, y, x = (origin_zyx[i] + np.arange(shape[i]) * cfg.spacing for i in range(3))
    return x[None, None, :], y[None, :, None], z[:, None, None], origin_zyx[::-1].copy()


def _ellipsoid(x, y, z, center, axes):
    return (((x - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2
            + ((z - center[2]) / axes[2]) ** 2) <= 1.0


def _soft_sphere_weight(dist, radius):
    """1 inside, 0 outside, raised-cosine ramp one voxel wide centred on the surface."""
    t = np.clip(dist - (radius - 0.5), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def _bbox(center_xyz, reach, origin_xyz, spacing, shape_zyx):
    c = (np.asarray(center_xyz) - origin_xyz) / spacing
    lo = np.maximum(np.floor(c - reach / spacing), 0).astype(int)[::-1]
    hi = np.minimum(np.ceil(c + reach / spacing) + 1, np.asarray(shape_zyx)[::-1]).astype(int)[::-1]
    return tuple(slice(a, b) for a, b in zip(lo, hi))


def _local_dist(sl, center_xyz, origin_xyz, spacing):
    z = origin_xyz[2] + np.arange(sl[0].start, sl[0].stop) * spacing
    y = origin_xyz[1] + np.arange(sl[1].start, sl[1].stop) * spacing
    x = origin_xyz[0] + np.arange(sl[2].start, sl[2].stop) * spacing
    return np.sqrt((x[None, None, :] - center_xyz[0]) ** 2 + (y[None, :, None] - center_xyz[1]) ** 2
                   + (z[:, None, None] - center_xyz[2]) ** 2)


def _inside_lung(lung, center_xyz, reach, origin_xyz, spacing):
    sl = _bbox(center_xyz, reach, origin_xyz, spacing, lung.shape)
    d = _local_dist(sl, center_xyz, origin_xyz, spacing)
    ball = d <= reach
    # the whole ball must fit in the grid, not just its clipped part
    full = int(np.ceil(2 * reach / spacing)) + 1
    if any(s.stop - s.start < full for s in sl):
        return False
    return bool(np.all(lung[sl][ball]))


def _render_vessels(data, lung, cfg, rng, origin_xyz):
    lung_idx = np.argwhere(lung)
    for _ in range(cfg.vessel_count):
        radius = rng.uniform(*cfg.vessel_radius)
        length = rng.uniform(*cfg.vessel_length)
        start = lung_idx[rng.integers(len(lung_idx))][::-1] * cfg.spacing + origin_xyz
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        points = [start]
        p = start.copy()
        for _ in range(int(length / cfg.spacing)):
            direction = direction + 0.3 * rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            q = p + direction * cfg.spacing
            iq = np.round((q - origin_xyz) / cfg.spacing).astype(int)[::-1]
            if np.any(iq < 0) or np.any(iq >= lung.shape) or not lung[tuple(iq)]:
                break
            p = q
            points.append(p)
        points = np.asarray(points)
        lo = points.min(0) - radius - 2
        hi = points.max(0) + radius + 2
        sl = _bbox((lo + hi) / 2, (hi - lo).max() / 2, origin_xyz, cfg.spacing, data.shape)
        centre_line = np.zeros(tuple(s.stop - s.start for s in sl), dtype=bool)
        idx = np.round((points - origin_xyz) / cfg.spacing).astype(int)[:, ::-1] - [s.start for s in sl]
        ok = np.all((idx >= 0) & (idx < centre_line.shape), axis=1)
        centre_line[tuple(idx[ok].T)] = True
        dist = ndimage.distance_transform_edt(~centre_line, sampling=cfg.spacing)
        w = _soft_sphere_weight(dist, radius) * lung[sl]
        data[sl] = data[sl] * (1 - w) + cfg.vessel_hu * w


def _place_nodules(lung, cfg, rng, origin_xyz, count):
    lung_idx = np.argwhere(lung)
    placed = []
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise PlacementError(f"could not place {count} nodules after {MAX_ATTEMPTS} attempts")
        d = rng.uniform(*cfg.nodule_diameter)
        r = d / 2
        c = lung_idx[rng.integers(len(lung_idx))][::-1] * cfg.spacing + origin_xyz
        c = c + rng.uniform(-0.5, 0.5, size=3) * cfg.spacing
        if any(np.linalg.norm(c - p[:3]) <= r + p[3] / 2 + cfg.nodule_gap_mm for p in placed):
            continue
        if not _inside_lung(lung, c, r + cfg.nodule_gap_mm, origin_xyz, cfg.spacing):
            continue
        placed.append(np.array([c[0], c[1], c[2], d]))
    return np.asarray(placed, dtype=np.float64).reshape(-1, 4)


def generate_phantom(cfg: PhantomConfig | None = None, seed=0, uid: str = "phantom") -> Phantom:
    """Render one phantom; deterministic for a given ``seed`` (int or SeedSequence)."""
    cfg = (cfg or PhantomConfig()).validate()
    rng = np.random.default_rng(seed)
    x, y, z, origin_xyz = _grid_mm(cfg)
    half = (np.asarray(cfg.shape)[::-1] - 1) / 2.0 * cfg.spacing
    body = _ellipsoid(x, y, z, (0, 0, 0), np.asarray(cfg.body_axes) * half)
    lung_axes = np.asarray(cfg.lung_axes) * half
    lung = np.zeros(cfg.shape, dtype=bool)
    for side in (-1, 1):
        lung |= _ellipsoid(x, y, z, (side * cfg.lung_offset_x * half[0], 0, 0), lung_axes)
    # keep a tissue wall so the lungs never touch the ambient air
    lung &= _ellipsoid(x, y, z, (0, 0, 0), np.asarray(cfg.body_axes) * half - cfg.wall_mm)
    data = np.full(cfg.shape, cfg.air_hu, dtype=np.float64)
    data[body] = cfg.tissue_hu
    data[lung] = cfg.lung_hu

    _render_vessels(data, lung, cfg, rng, origin_xyz)
    count = int(rng.integers(cfg.nodule_count[0], cfg.nodule_count[1] + 1))
    nodules = _place_nodules(lung, cfg, rng, origin_xyz, count)
    hus = rng.uniform(*cfg.nodule_hu, size=len(nodules))
    for (cx, cy, cz, d), hu in zip(nodules, hus):
        c = np.array([cx, cy, cz])
        sl = _bbox(c, d / 2 + 1.5, origin_xyz, cfg.spacing, data.shape)
        w = _soft_sphere_weight(_local_dist(sl, c, origin_xyz, cfg.spacing), d / 2)
        data[sl] = data[sl] * (1 - w) + hu * w

    if cfg.noise_sigma > 0:
        data += rng.normal(0.0, cfg.noise_sigma, size=data.shape)
    data = np.round(data).astype(np.float32)
    vol = Volume(data, np.full(3, cfg.spacing), origin_xyz, np.eye(3))
    return Phantom(vol, ScanTruth(uid, nodules), lung, hus)


def phantom_uid(i: int) -> str:
    return f"phantom_{i:03d}"


def fold_assignment(n_scans: int, seed=0, n_folds: int = 5) -> np.ndarray:
    """Fold index per scan: a seeded permutation dealt round-robin, so folds differ in size by at most one."""
    if n_scans < n_folds:
        raise ValueError(f"need at least {n_folds} scans for a {n_folds}-fold split")
    order = np.random.default_rng(seed).permutation(n_scans)
    folds = np.empty(n_scans, dtype=np.int64)
    folds[order] = np.arange(n_scans) % n_folds
    return folds


def generate_dataset(out_dir, n_scans: int, cfg: PhantomConfig | None = None, seed: int = 0,
                     write_masks: bool = True) -> dict:
    """Write ``n_scans`` phantoms plus annotations, an empty irrelevant-findings list and a fold file.

    Layout: ``<uid>.mhd/.raw`` (MET_SHORT HU), ``masks/<uid>_lung.mhd`` (MET_UCHAR),
    ``annotations.csv``, ``irrelevant.csv``, ``folds.csv`` and ``phantom_config.json``.
    """
    cfg = (cfg or PhantomConfig()).validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_scans)
    folds = fold_assignment(n_scans, seed)
    annotations = {}
    for i, child in enumerate(children):
        uid = phantom_uid(i)
        ph = generate_phantom(cfg, child, uid)
        write_metaimage(ph.volume, out / f"{uid}.mhd", element_type="MET_SHORT")
        if write_masks:
            (out / "masks").mkdir(exist_ok=True)
            mask_vol = Volume(ph.lung_mask.astype(np.uint8), ph.volume.spacing, ph.volume.origin,
                              ph.volume.direction)
            write_metaimage(mask_vol, out / "masks" / f"{uid}_lung.mhd", element_type="MET_UCHAR")
        annotations[uid] = ph.truth.nodules
    write_annotations_csv(out / "annotations.csv", annotations)
    write_annotations_csv(out / "irrelevant.csv", {})
    with open(out / "folds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seriesuid", "fold_index"])
        for i in range(n_scans):
            w.writerow([phantom_uid(i), int(folds[i])])
    (out / "phantom_config.json").write_text(json.dumps({"seed": seed, "n_scans": n_scans,
                                                         "config": cfg.to_dict()}, indent=2, sort_keys=True))
    return {"uids": [phantom_uid(i) for i in range(n_scans)], "folds": folds.tolist(),
            "annotations": annotations}


def read_folds_csv(path) -> dict:
    with open(path, newline="") as fh:
        return {row["seriesuid"]: int(row["fold_index"]) for row in csv.DictReader(fh)}
