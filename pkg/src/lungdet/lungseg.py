"""Coarse lung segmentation by HU thresholding and morphology, plus crop/normalise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volio import Volume, reorient_canonical, resample_isotropic, voxel_to_world


class SegmentationError(RuntimeError):
    """No plausible lung component was found."""


HU_WINDOW = (-1200.0, 600.0)


@dataclass
class CropInfo:
    lower: np.ndarray  # inclusive voxel corner (z, y, x) in the pre-crop grid
    upper: np.ndarray  # exclusive voxel corner
    shape: tuple       # pre-crop extents
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.int64)
        self.upper = np.asarray(self.upper, dtype=np.int64)
        if np.any(self.lower >= self.upper) or np.any(self.lower < 0) or np.any(self.upper > self.shape):
            raise ValueError(f"invalid crop box {self.lower}..{self.upper} in {self.shape}")

    def parent_volume(self) -> Volume:
        """An empty stand-in for the pre-crop geometry (data not retained)."""
        return Volume(np.zeros((1, 1, 1), np.float32), self.spacing, self.origin, self.direction)

    def to_original_index(self, index_zyx) -> np.ndarray:
        return np.asarray(index_zyx, dtype=np.float64) + self.lower

    def to_original_world(self, cropped_index_zyx) -> np.ndarray:
        return voxel_to_world(self.parent_volume(), self.to_original_index(cropped_index_zyx))

    def to_dict(self) -> dict:
        return {
            "lower": self.lower.tolist(), "upper": self.upper.tolist(), "shape": list(self.shape),
            "spacing": np.asarray(self.spacing).tolist(), "origin": np.asarray(self.origin).tolist(),
            "direction": np.asarray(self.direction).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CropInfo":
        return cls(np.array(d["lower"]), np.array(d["upper"]), tuple(d["shape"]),
                   np.array(d["spacing"]), np.array(d["origin"]), np.array(d["direction"]))


def threshold_air(v: Volume, hu_cutoff: float = -400.0) -> np.ndarray:
    return np.asarray(v.data) < hu_cutoff


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components_3d(mask: np.ndarray, connectivity: int = 26):
    """Label connected components; label 1 is the largest, 0 is background.

    Returns ``(labels, sizes)`` where ``sizes[i]`` is the voxel count of label ``i + 1``
    (descending; ties keep scan order of first occurrence).
    """
    raw, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_structure(connectivity))
    if n == 0:
        return raw.astype(np.int32), np.zeros(0, dtype=np.int64)
    counts = np.bincount(raw.ravel(), minlength=n + 1)[1:]
    # ndimage numbers labels in scan order, so a stable sort keeps first-occurrence ties
    order = np.argsort(-counts, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return remap[raw], counts[order]


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    g = np.arange(-r, r + 1)
    zz, yy, xx = np.meshgrid(g, g, g, indexing="ij")
    return (zz ** 2 + yy ** 2 + xx ** 2) <= r * r


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 1:
        raise ValueError("radius must be >= 1")
    return ndimage.binary_dilation(mask, structure=ball(radius), border_value=0)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion; voxels outside the grid count as foreground."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    return ndimage.binary_erosion(mask, structure=ball(radius), border_value=1)


def closing(mask: np.ndarray, radius: int) -> np.ndarray:
    return erode(dilate(mask, radius), radius)


def _touches_boundary(labels: np.ndarray) -> np.ndarray:
    faces = [labels[0], labels[-1], labels[:, 0], labels[:, -1], labels[:, :, 0], labels[:, :, -1]]
    return np.unique(np.concatenate([f.ravel() for f in faces]))


def segment_lungs(v: Volume, hu_cutoff: float = -400.0, closing_radius: int = 3,
                  volume_range_l=(0.5, 12.0), fill_holes: bool = True,
                  second_fraction: float = 0.1) -> np.ndarray:
    """Threshold, drop ambient air, keep the lung component(s), close small gaps.

    The second-largest interior component is kept when it is at least
    ``second_fraction`` of the largest one (two lungs); the pair must fall in
    ``volume_range_l`` litres.
    """
    air = threshold_air(v, hu_cutoff)
    labels, sizes = connected_components_3d(air, connectivity=6)
    outside = set(_touches_boundary(labels).tolist())
    interior = [lab for lab in range(1, len(sizes) + 1) if lab not in outside]
    if not interior:
        raise SegmentationError("no interior air component found")
    voxel_ml = float(np.prod(v.spacing)) / 1000.0
    lo, hi = volume_range_l
    keep = None
    # try the largest interior component alone or with the next one
    cands = interior[:2]
    sizes_l = [sizes[lab - 1] * voxel_ml / 1000.0 for lab in cands]
    if len(cands) == 2 and sizes[cands[1] - 1] >= second_fraction * sizes[cands[0] - 1]:
        if lo <= sum(sizes_l) <= hi:
            keep = cands
    if keep is None and lo <= sizes_l[0] <= hi:
        keep = cands[:1]
    if keep is None:
        raise SegmentationError(
            f"interior air components {sizes_l} L outside plausible range {volume_range_l}")
    mask = np.isin(labels, keep)
    if closing_radius > 0:
        mask = closing(mask, closing_radius)
    if fill_holes:
        mask = ndimage.binary_fill_holes(mask)
    return mask


def mask_volume_litres(mask: np.ndarray, spacing) -> float:
    return float(mask.sum()) * float(np.prod(spacing)) / 1e6


def normalize_hu(values: np.ndarray, window=HU_WINDOW) -> np.ndarray:
    lo, hi = window
    out = (np.clip(values, lo, hi) - lo) / (hi - lo)
    return out.astype(np.float32)


def crop_and_normalize(v: Volume, mask: np.ndarray, margin_mm: float = 5.0, window=HU_WINDOW):
    """Crop to the mask bounding box (plus margin) and map HU to [0, 1]."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != v.shape:
        raise ValueError(f"mask shape {mask.shape} != volume shape {v.shape}")
    if not mask.any():
        raise ValueError("cannot crop to an empty mask")
    idx = np.argwhere(mask)
    margin = np.ceil(margin_mm / v.spacing[::-1]).astype(np.int64)
    lower = np.maximum(idx.min(0) - margin, 0)
    upper = np.minimum(idx.max(0) + 1 + margin, v.shape)
    info = CropInfo(lower, upper, v.shape, v.spacing.copy(), v.origin.copy(), v.direction.copy())
    sl = tuple(slice(a, b) for a, b in zip(lower, upper))
    data = normalize_hu(v.data[sl], window)
    origin = voxel_to_world(v, lower.astype(np.float64))
    return Volume(data, v.spacing.copy(), origin, v.direction.copy()), info


@dataclass
class PreprocessResult:
    volume: Volume          # canonical, isotropic, cropped, intensities in [0, 1]
    crop: CropInfo
    mask: np.ndarray | None  # lung mask on the resampled grid, None after fallback
    fallback: bool = False


def preprocess(v: Volume, spacing_mm: float = 1.0, hu_cutoff: float = -400.0, closing_radius: int = 3,
               volume_range_l=(0.5, 12.0), margin_mm: float = 5.0, allow_fallback: bool = True) -> PreprocessResult:
    """Reorient, resample to ``spacing_mm``, segment, crop and normalise.

    When segmentation fails and ``allow_fallback`` is set, the whole resampled
    volume is normalised instead of raising.
    """
    iso = resample_isotropic(reorient_canonical(v), (spacing_mm,) * 3)
    try:
        mask = segment_lungs(iso, hu_cutoff, closing_radius, volume_range_l)
    except SegmentationError:
        if not allow_fallback:
            raise
        out, info = crop_and_normalize(iso, np.ones(iso.shape, dtype=bool), 0.0)
        return PreprocessResult(out, info, None, True)
    out, info = crop_and_normalize(iso, mask, margin_mm)
    return PreprocessResult(out, info, mask, False)
