"""Volumetric image I/O, orientation normalisation and isotropic resampling.

Arrays are stored in (z, y, x) order with x fastest.  World points, spacing and
origin are given in (x, y, z) order, as in MetaImage headers.  Column ``i`` of
``direction`` is the world direction of voxel axis ``i`` (x, y, z), so a voxel
with index (ix, iy, iz) sits at ``origin + direction @ (spacing * (ix, iy, iz))``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Malformed or unsupported MetaImage header."""


class SizeMismatchError(FormatError):
    """Raw payload size disagrees with the header."""


class OrientationError(ValueError):
    """Direction matrix is not a signed permutation."""


_MET_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_USHORT": np.dtype("<u2"),
    "MET_INT": np.dtype("<i4"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_CHAR": np.dtype("i1"),
}


def _is_signed_permutation(m: np.ndarray) -> bool:
    m = np.asarray(m)
    if m.shape != (3, 3):
        return False
    if not np.all(np.isin(m, (-1.0, 0.0, 1.0))):
        return False
    return bool(np.all(np.abs(m).sum(0) == 1) and np.all(np.abs(m).sum(1) == 1))


@dataclass
class Volume:
    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        self.validate()

    def validate(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D with non-zero extents, got {self.data.shape}")
        if not np.all(self.spacing > 0) or not np.all(np.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not _is_signed_permutation(self.direction):
            raise OrientationError(f"direction is not a signed permutation:\n{self.direction}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_canonical(self) -> bool:
        return bool(np.array_equal(self.direction, np.eye(3)))

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing.copy(), self.origin.copy(), self.direction.copy())


def voxel_to_world(v: Volume, index_zyx) -> np.ndarray:
    """Map continuous voxel indices (..., 3) in (z, y, x) order to world (x, y, z) mm."""
    idx = np.asarray(index_zyx, dtype=np.float64)[..., ::-1]
    return v.origin + (idx * v.spacing) @ v.direction.T


def world_to_voxel(v: Volume, point_xyz) -> np.ndarray:
    """Inverse of :func:`voxel_to_world`; out-of-bounds indices are returned as is."""
    p = np.asarray(point_xyz, dtype=np.float64)
    # direction is orthogonal, so its inverse is its transpose
    idx_xyz = ((p - v.origin) @ v.direction) / v.spacing
    return idx_xyz[..., ::-1]


# ---------------------------------------------------------------------------
# MetaImage
# ---------------------------------------------------------------------------

def _parse_header(path: Path) -> dict:
    header = {}
    try:
        text = path.read_bytes()
    except OSError:
        raise
    lines = text.split(b"\n")
    for raw in lines:
        line = raw.decode("latin-1").strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        header[key] = value
        if key == "ElementDataFile":
            break
    return header


def _floats(header: dict, key: str, n: int, default=None) -> np.ndarray:
    if key not in header:
        if default is None:
            raise FormatError(f"missing header field {key}")
        return np.asarray(default, dtype=np.float64)
    try:
        vals = np.array([float(s) for s in header[key].split()], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"bad value for {key}: {header[key]!r}") from exc
    if vals.size != n:
        raise FormatError(f"{key} must have {n} values, got {vals.size}")
    return vals


def read_metaimage(path) -> Volume:
    """Read a ``.mhd``/``.raw`` pair (or a single ``.mha`` with LOCAL data)."""
    path = Path(path)
    header = _parse_header(path)
    if header.get("NDims", "3") != "3":
        raise FormatError(f"only 3D images are supported, NDims={header.get('NDims')}")
    for key in ("DimSize", "ElementType", "ElementDataFile"):
        if key not in header:
            raise FormatError(f"missing header field {key}")
    dims = _floats(header, "DimSize", 3).astype(np.int64)
    if np.any(dims < 1):
        raise FormatError(f"DimSize must be positive, got {dims}")
    spacing = _floats(header, "ElementSpacing", 3, default=(1, 1, 1))
    offset_key = next((k for k in ("Offset", "Origin", "Position") if k in header), None)
    origin = _floats(header, offset_key, 3) if offset_key else np.zeros(3)
    tm_key = "TransformMatrix" if "TransformMatrix" in header else "Orientation"
    direction = _floats(header, tm_key, 9, default=np.eye(3).ravel()).reshape(3, 3).T
    etype = header["ElementType"]
    if etype not in _MET_TYPES:
        raise FormatError(f"unsupported ElementType {etype}")
    dtype = _MET_TYPES[etype]
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        dtype = dtype.newbyteorder(">")
    if header.get("CompressedData", "False").lower() == "true":
        raise FormatError("compressed MetaImage payloads are not supported")

    data_file = header["ElementDataFile"]
    expected = int(np.prod(dims)) * dtype.itemsize
    if data_file == "LOCAL":
        blob = path.read_bytes()
        payload = blob[len(blob) - expected:] if len(blob) >= expected else b""
        if len(blob) < expected:
            raise SizeMismatchError(f"{path}: payload shorter than {expected} bytes")
    else:
        raw_path = path.parent / data_file
        payload = raw_path.read_bytes()
        if len(payload) != expected:
            raise SizeMismatchError(
                f"{raw_path}: payload has {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims[::-1])
    data = arr.astype(np.float32)
    if etype == "MET_UCHAR":
        data = arr.copy()
    return Volume(data, spacing, origin, direction)


def _fmt(values) -> str:
    return " ".join(repr(float(v)) if not float(v).is_integer() else str(int(v)) for v in values)


def write_metaimage(v: Volume, path, element_type: str | None = None) -> None:
    """Write ``v`` as ``path`` (.mhd header) plus a sibling ``.raw`` payload."""
    v.validate()
    path = Path(path)
    if element_type is None:
        element_type = "MET_UCHAR" if v.data.dtype in (np.uint8, np.bool_) else "MET_FLOAT"
    if element_type not in _MET_TYPES:
        raise FormatError(f"unsupported ElementType {element_type}")
    dtype = _MET_TYPES[element_type]
    data = v.data.astype(dtype)
    if element_type in ("MET_SHORT", "MET_USHORT", "MET_INT", "MET_UCHAR", "MET_CHAR"):
        if not np.array_equal(data, v.data):
            raise ValueError(f"data not representable as {element_type}")
    raw_name = path.with_suffix(".raw").name
    nz, ny, nx = v.shape
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"TransformMatrix = {_fmt(v.direction.T.ravel())}",
        f"Offset = {_fmt(v.origin)}",
        "CenterOfRotation = 0 0 0",
        f"ElementSpacing = {_fmt(v.spacing)}",
        f"DimSize = {nx} {ny} {nz}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {raw_name}",
    ]
    # write to a temp name first so a failed write never leaves a half pair
    tmp_raw = path.parent / (raw_name + ".tmp")
    with open(tmp_raw, "wb") as fh:
        fh.write(np.ascontiguousarray(data).tobytes())
    os.replace(tmp_raw, path.parent / raw_name)
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Orientation and resampling
# ---------------------------------------------------------------------------

def reorient_canonical(v: Volume) -> Volume:
    """Permute/flip the voxel grid so that ``direction`` becomes the identity.

    World positions are preserved: every world point maps to the same value.
    """
    if not _is_signed_permutation(v.direction):
        raise OrientationError("only signed-permutation directions are supported")
    if v.is_canonical:
        return v.copy()
    d = v.direction
    # voxel axis i (xyz order) runs along world axis world_of[i] with sign[i]
    world_of = np.abs(d).argmax(axis=0)
    sign = d[world_of, np.arange(3)]
    n_xyz = np.array(v.shape[::-1])

    data = v.data
    # flip negative axes first (array axis for voxel axis i is 2 - i)
    for i in range(3):
        if sign[i] < 0:
            data = np.flip(data, axis=2 - i)
    # new array axis for world axis w is 2 - w; it comes from voxel axis i with world_of[i] == w
    src_for_world = np.argsort(world_of)
    perm = [2 - src_for_world[2 - a] for a in range(3)]
    data = np.ascontiguousarray(np.transpose(data, perm))

    corner_xyz = np.where(sign < 0, n_xyz - 1, 0).astype(np.float64)
    origin = voxel_to_world(v, corner_xyz[::-1])
    spacing = v.spacing[src_for_world]
    return Volume(data, spacing, origin, np.eye(3))


def _interp_axis(data: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation along one axis with edge replication."""
    n = data.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = (coords - lo).astype(data.dtype)
    shape = [1, 1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, hi, axis=axis)
    return a + (b - a) * frac


def resample_isotropic(v: Volume, target=(1.0, 1.0, 1.0)) -> Volume:
    """Trilinear resampling to ``target`` spacing (x, y, z mm); origin is kept."""
    target = np.asarray(target, dtype=np.float64).reshape(3)
    if not np.all(target > 0):
        raise ValueError(f"target spacing must be positive, got {target}")
    if not v.is_canonical:
        raise OrientationError("resample_isotropic expects a canonical volume")
    n_xyz = np.array(v.shape[::-1])
    out_xyz = np.maximum(1, np.round(n_xyz * v.spacing / target).astype(np.int64))
    data = v.data.astype(np.float32, copy=False)
    if np.array_equal(out_xyz, n_xyz) and np.allclose(target, v.spacing, rtol=0, atol=0):
        return Volume(data.copy(), target, v.origin.copy(), np.eye(3))
    # separable: trilinear interpolation is a product of 1D linear interpolations
    for i in range(3):
        axis = 2 - i
        coords = np.arange(out_xyz[i], dtype=np.float64) * target[i] / v.spacing[i]
        data = _interp_axis(data, axis, coords)
    return Volume(np.ascontiguousarray(data, dtype=np.float32), target, v.origin.copy(), np.eye(3))
