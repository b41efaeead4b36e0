"""Regular-grid scalar volumes, trilinear sampling and MetaImage / landmark I/O.

All public functions take and return world coordinates in millimetres. Voxel
indices only appear internally. Volume data is held with x as the fastest
varying axis, which is also the on-disk ordering of the ``.raw`` payload.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MetaImageError(ValueError):
    """Malformed MetaImage header or payload."""


@dataclass(frozen=True)
class Volume:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    flat: np.ndarray = field(repr=False)  # x-fastest, length prod(dims)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError(f"dims must be 3 extents >= 2, got {dims}")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        flat = np.ascontiguousarray(self.flat, dtype=np.float64).ravel()
        if flat.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(f"data length {flat.size} != prod{dims}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("volume data must be finite")
        flat.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "flat", flat)

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "Volume":
        """Build from an array indexed ``[i, j, k]`` (x, y, z)."""
        data = np.asarray(data, dtype=np.float64)
        return cls(data.shape, spacing, origin, data.ravel(order="F"))

    @property
    def data(self) -> np.ndarray:
        """Read-only view indexed ``[i, j, k]``."""
        return self.flat.reshape(self.dims, order="F")

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi

    def world_grid(self) -> np.ndarray:
        """World coordinates of every node, shape ``(prod(dims), 3)``, x-fastest."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1)

    def with_data(self, data) -> "Volume":
        return Volume.from_array(data, self.spacing, self.origin)

    def same_grid(self, other: "Volume") -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing)
                and np.allclose(self.origin, other.origin))


@dataclass
class LandmarkSet:
    points: np.ndarray  # (n, 3) world mm
    frame_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("landmark set must not be empty")

    def inside(self, vol: Volume) -> bool:
        lo, hi = vol.box
        return bool(np.all((self.points >= lo) & (self.points <= hi)))


def _locate(vol: Volume, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(vol.dims)
    q = (pts - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    # snap round-off so that world nodes hit stored values exactly
    r = np.rint(q)
    q = np.where(np.abs(q - r) < 1e-9, r, q)
    upper = dims - 1
    clamped = (q < 0.0) | (q > upper)
    q = np.clip(q, 0.0, upper)
    i0 = np.minimum(np.floor(q).astype(np.int64), upper - 1)
    frac = q - i0
    return i0, frac, clamped


def _corners(vol: Volume, i0):
    nx, ny = vol.dims[0], vol.dims[1]
    base = i0[:, 0] + nx * (i0[:, 1] + ny * i0[:, 2])
    sx, sy, sz = 1, nx, nx * ny
    f = vol.flat
    return (f[base], f[base + sx], f[base + sy], f[base + sx + sy],
            f[base + sz], f[base + sx + sz], f[base + sy + sz], f[base + sx + sy + sz])


def sample_trilinear(vol: Volume, points, return_flag: bool = False):
    """Trilinear interpolation at world points.

    Points outside the world box are clamped to the nearest boundary value;
    with ``return_flag`` the boolean ``out_of_domain`` mask is returned too.
    """
    i0, fr, clamped = _locate(vol, points)
    c000, c100, c010, c110, c001, c101, c011, c111 = _corners(vol, i0)
    fx, fy, fz = fr[:, 0], fr[:, 1], fr[:, 2]
    # (1-f) a + f b is exact at both f=0 and f=1
    c00 = (1 - fx) * c000 + fx * c100
    c10 = (1 - fx) * c010 + fx * c110
    c01 = (1 - fx) * c001 + fx * c101
    c11 = (1 - fx) * c011 + fx * c111
    c0 = (1 - fy) * c00 + fy * c10
    c1 = (1 - fy) * c01 + fy * c11
    val = (1 - fz) * c0 + fz * c1
    if return_flag:
        return val, clamped.any(axis=1)
    return val


def sample_gradient(vol: Volume, points, return_flag: bool = False):
    """Analytic spatial gradient of the trilinear interpolant (intensity / mm).

    Clamped axes have zero derivative, matching the clamped interpolant.
    """
    i0, fr, clamped = _locate(vol, points)
    c000, c100, c010, c110, c001, c101, c011, c111 = _corners(vol, i0)
    fx, fy, fz = fr[:, 0], fr[:, 1], fr[:, 2]
    gx_ = 1 - fx
    gy_ = 1 - fy
    gz_ = 1 - fz
    dx = ((c100 - c000) * gy_ * gz_ + (c110 - c010) * fy * gz_
          + (c101 - c001) * gy_ * fz + (c111 - c011) * fy * fz)
    dy = ((c010 - c000) * gx_ * gz_ + (c110 - c100) * fx * gz_
          + (c011 - c001) * gx_ * fz + (c111 - c101) * fx * fz)
    dz = ((c001 - c000) * gx_ * gy_ + (c101 - c100) * fx * gy_
          + (c011 - c010) * gx_ * fy + (c111 - c110) * fx * fy)
    grad = np.stack([dx, dy, dz], axis=1) / np.asarray(vol.spacing)
    grad[clamped] = 0.0
    if return_flag:
        return grad, clamped.any(axis=1)
    return grad


def sample_with_gradient(vol: Volume, points):
    """Value, gradient and out-of-domain flag in one call."""
    val, flag = sample_trilinear(vol, points, return_flag=True)
    return val, sample_gradient(vol, points), flag


def world_to_index(vol: Volume, points) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - np.asarray(vol.origin)) / np.asarray(vol.spacing)


# --- MetaImage -------------------------------------------------------------

_REQUIRED = ("NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementDataFile")


def _parse_numbers(key, text, count, kind):
    parts = text.split()
    if len(parts) != count:
        raise MetaImageError(f"{key}: expected {count} values, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError as err:
        raise MetaImageError(f"{key}: cannot parse {text!r}") from err


def read_header(path) -> dict:
    header = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise MetaImageError(f"line {lineno}: expected 'Key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            header[key] = value
    for key in _REQUIRED:
        if key not in header:
            raise MetaImageError(f"{key}: missing from header {path}")
    return header


def read_metaimage(path) -> Volume:
    path = Path(path)
    h = read_header(path)
    if h["NDims"].strip() != "3":
        raise MetaImageError(f"NDims: only 3 is supported, got {h['NDims']!r}")
    dims = _parse_numbers("DimSize", h["DimSize"], 3, int)
    spacing = _parse_numbers("ElementSpacing", h["ElementSpacing"], 3, float)
    origin = _parse_numbers("Offset", h["Offset"], 3, float)
    if h["ElementType"] != "MET_FLOAT":
        raise MetaImageError(f"ElementType: only MET_FLOAT is supported, got {h['ElementType']!r}")
    msb = h.get("ElementByteOrderMSB", h.get("BinaryDataByteOrderMSB", "False"))
    if msb.lower() not in ("false", "0"):
        raise MetaImageError(f"ElementByteOrderMSB: only little-endian payloads, got {msb!r}")
    raw_path = path.parent / h["ElementDataFile"]
    payload = np.fromfile(raw_path, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2]
    if payload.size != expected:
        raise MetaImageError(
            f"payload size mismatch: {raw_path.name} holds {payload.size} floats, DimSize needs {expected}")
    if any(d < 2 for d in dims) or min(spacing) <= 0:
        raise MetaImageError(f"DimSize/ElementSpacing invalid: {dims} {spacing}")
    return Volume(dims, spacing, origin, payload.astype(np.float64))


def write_metaimage(vol: Volume, path) -> Path:
    path = Path(path)
    if path.suffix != ".mhd":
        path = path.with_suffix(".mhd")
    raw_name = path.with_suffix(".raw").name
    os.makedirs(path.parent, exist_ok=True)
    vol.flat.astype("<f4").tofile(path.parent / raw_name)
    fmt = lambda v: " ".join(repr(float(x)) for x in v)  # noqa: E731
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "DimSize = " + " ".join(str(d) for d in vol.dims),
        "ElementSpacing = " + fmt(vol.spacing),
        "Offset = " + fmt(vol.origin),
        "ElementType = MET_FLOAT",
        "ElementByteOrderMSB = False",
        f"ElementDataFile = {raw_name}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# --- landmarks -------------------------------------------------------------

LANDMARK_HEADER = ("x_mm", "y_mm", "z_mm")


def read_landmarks(path, frame_id: int = 0) -> LandmarkSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LANDMARK_HEADER:
            raise ValueError(f"{path}: landmark CSV header must be {','.join(LANDMARK_HEADER)}")
        rows = [[float(v) for v in row] for row in reader if row]
    return LandmarkSet(np.array(rows), frame_id)


def write_landmarks(points, path) -> Path:
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LANDMARK_HEADER)
        for p in np.asarray(points, dtype=np.float64).reshape(-1, 3):
            writer.writerow([repr(float(c)) for c in p])
    return path
