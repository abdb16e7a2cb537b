"""Raster data model and I/O for height fields and grayscale views.

Conventions used throughout the package:

* raster values are row-major 2-D float arrays; row 0 is the southernmost
  scanline and the row index grows northward, which matches the bottom-up
  scanline order of the PFM container, so no flip happens at I/O time;
* world coordinates are metric; cell (col, row) has its center at
  ``(origin_x + (col + 0.5) * cell, origin_y + (row + 0.5) * cell)``;
* nodata lives in an explicit boolean mask in memory and as the sentinel
  ``NODATA_SENTINEL`` inside files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NODATA_SENTINEL = -1.0e30

# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass
class HeightField:
    """Georeferenced single-band height raster (meters)."""

    values: np.ndarray
    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size: float = 1.0
    nodata_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("height field must be a 2-D array")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.nodata_mask is None:
            self.nodata_mask = np.zeros(self.values.shape, dtype=bool)
        else:
            self.nodata_mask = np.asarray(self.nodata_mask, dtype=bool)
            if self.nodata_mask.shape != self.values.shape:
                raise ValueError("nodata mask shape must match values")
        if not np.all(np.isfinite(self.values[~self.nodata_mask])):
            raise ValueError("valid height cells must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def world_to_cell(self, x, y):
        """Map world coordinates to fractional (col, row) cell coordinates."""
        col = (np.asarray(x, dtype=np.float64) - self.origin_x) / self.cell_size - 0.5
        row = (np.asarray(y, dtype=np.float64) - self.origin_y) / self.cell_size - 0.5
        return col, row

    def cell_to_world(self, col, row):
        """Map fractional (col, row) cell coordinates to world coordinates."""
        x = self.origin_x + (np.asarray(col, dtype=np.float64) + 0.5) * self.cell_size
        y = self.origin_y + (np.asarray(row, dtype=np.float64) + 0.5) * self.cell_size
        return x, y

    def copy(self) -> "HeightField":
        return HeightField(
            self.values.copy(),
            self.origin_x,
            self.origin_y,
            self.cell_size,
            self.nodata_mask.copy(),
        )

    def same_grid(self, other: "HeightField") -> bool:
        return (
            self.values.shape == other.values.shape
            and abs(self.origin_x - other.origin_x) < 1e-9
            and abs(self.origin_y - other.origin_y) < 1e-9
            and abs(self.cell_size - other.cell_size) < 1e-12
        )


@dataclass
class GrayImage:
    """Single-channel intensity image with values in [0, 1]."""

    values: np.ndarray
    validity_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("image must be a 2-D array")
        if self.validity_mask is None:
            self.validity_mask = np.ones(self.values.shape, dtype=bool)
        else:
            self.validity_mask = np.asarray(self.validity_mask, dtype=bool)
            if self.validity_mask.shape != self.values.shape:
                raise ValueError("validity mask shape must match values")
        valid = self.values[self.validity_mask]
        if valid.size and (valid.min() < -1e-9 or valid.max() > 1 + 1e-9):
            raise ValueError("valid intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class AffineCamera:
    """Parallel-projection camera: pixel (u, v) = A @ (X, Y, Z) + b.

    ``A`` is 2x3 of rank 2; its one-dimensional null space is the viewing ray
    shared by every scene point that lands on the same pixel. The stored sun
    direction is a unit vector pointing from the surface toward the sun.
    """

    A: np.ndarray
    b: np.ndarray
    sun_direction: np.ndarray
    azimuth_deg: float = 0.0
    off_nadir_deg: float = 0.0
    timestamp_days: float = 0.0

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.sun_direction = np.asarray(self.sun_direction, dtype=np.float64)
        if self.A.shape != (2, 3) or self.b.shape != (2,):
            raise ValueError("camera requires a 2x3 A and length-2 b")
        if np.linalg.matrix_rank(self.A) != 2:
            raise ValueError("camera matrix A must have rank 2")
        norm = np.linalg.norm(self.sun_direction)
        if not np.isclose(norm, 1.0, atol=1e-6):
            raise ValueError("sun_direction must be a unit vector")
        if self.sun_direction[2] <= 0:
            raise ValueError("sun must be above the horizon")

    def ray_direction(self) -> np.ndarray:
        """Unit viewing ray (pointing down toward the ground)."""
        ray = np.cross(self.A[0], self.A[1])
        if abs(ray[2]) < 1e-12:
            raise ValueError("viewing ray must not be horizontal")
        ray = ray / np.linalg.norm(ray)
        if ray[2] > 0:
            ray = -ray
        return ray

    def off_nadir_from_ray(self) -> float:
        """Off-nadir angle in degrees recomputed from the null space."""
        ray = self.ray_direction()
        return float(np.degrees(np.arccos(np.clip(-ray[2], -1.0, 1.0))))

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project (..., 3) world points to (..., 2) pixel coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.A.T + self.b


def make_affine_camera(
    azimuth_deg: float,
    off_nadir_deg: float,
    cell_size: float,
    b: tuple[float, float] = (0.0, 0.0),
    sun_direction=(0.0, 0.0, 1.0),
    timestamp_days: float = 0.0,
) -> AffineCamera:
    """Ground-projected affine camera.

    Pixel u advances along the view azimuth at one image column per ground
    cell; the off-nadir tilt mixes height into u only, so two cameras sharing
    an azimuth produce row-aligned (epipolar) images whatever their tilts.
    """
    az = np.radians(azimuth_deg)
    tilt = np.tan(np.radians(off_nadir_deg))
    ca, sa = np.cos(az), np.sin(az)
    A = np.array([[ca, sa, tilt], [-sa, ca, 0.0]]) / cell_size
    return AffineCamera(
        A=A,
        b=np.asarray(b, dtype=np.float64),
        sun_direction=np.asarray(sun_direction, dtype=np.float64),
        azimuth_deg=float(azimuth_deg),
        off_nadir_deg=float(off_nadir_deg),
        timestamp_days=float(timestamp_days),
    )


@dataclass
class NormalizationStats:
    """Height normalization record attached to every network input."""

    mean_height: float
    std_height: float
    mode: str = "absolute"
    baseline: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("absolute", "inverse_depth"):
            raise ValueError(f"unknown normalization mode: {self.mode!r}")
        if not (np.isfinite(self.mean_height) and np.isfinite(self.std_height)):
            raise ValueError("normalization statistics must be finite")
        if not self.std_height > 0:
            raise ValueError("std_height must be positive")
        if self.mode == "inverse_depth" and not self.baseline > 0:
            raise ValueError("baseline must be positive")


# ---------------------------------------------------------------------------
# sampling and normalization
# ---------------------------------------------------------------------------


def bilinear_sample(values: np.ndarray, cols, rows, nodata_mask: np.ndarray | None = None):
    """Bilinear interpolation at fractional (col, row) positions.

    Returns ``(samples, valid)``. A sample is valid when its 2x2 footprint
    lies inside the raster and touches no nodata cell; invalid samples are 0.
    """
    vals = np.asarray(values, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    h, w = vals.shape
    if h < 2 or w < 2:
        raise ValueError("bilinear sampling needs at least a 2x2 raster")

    finite = np.isfinite(cols) & np.isfinite(rows)
    cols = np.where(finite, cols, -1.0)
    rows = np.where(finite, rows, -1.0)
    inside = finite & (cols >= 0) & (rows >= 0) & (cols <= w - 1) & (rows <= h - 1)
    c0c = np.clip(np.floor(cols).astype(np.int64), 0, w - 2)
    r0c = np.clip(np.floor(rows).astype(np.int64), 0, h - 2)
    fc = cols - c0c
    fr = rows - r0c

    p00 = vals[r0c, c0c]
    p01 = vals[r0c, c0c + 1]
    p10 = vals[r0c + 1, c0c]
    p11 = vals[r0c + 1, c0c + 1]
    out = (
        (1 - fr) * ((1 - fc) * p00 + fc * p01)
        + fr * ((1 - fc) * p10 + fc * p11)
    )

    valid = inside.copy()
    if nodata_mask is not None:
        m = np.asarray(nodata_mask, dtype=bool)
        touched = m[r0c, c0c] | m[r0c, c0c + 1] | m[r0c + 1, c0c] | m[r0c + 1, c0c + 1]
        valid &= ~touched
    out = np.where(valid, out, 0.0)
    return out, valid


def normalize_heights(field: HeightField, stats: NormalizationStats) -> HeightField:
    """Map heights into network units; nodata cells are preserved.

    ``absolute`` mode applies (h - mean) / std. ``inverse_depth`` mode maps a
    depth raster to baseline / d; nonpositive depths have no finite inverse
    and become nodata.
    """
    vals = field.values.copy()
    mask = field.nodata_mask.copy()
    if stats.mode == "absolute":
        vals = (vals - stats.mean_height) / stats.std_height
    else:
        bad = ~mask & (vals <= 0)
        mask = mask | bad
        with np.errstate(divide="ignore"):
            vals = np.where(mask, vals, stats.baseline / np.where(mask, 1.0, vals))
    vals[mask] = 0.0
    return HeightField(vals, field.origin_x, field.origin_y, field.cell_size, mask)


def denormalize_heights(field: HeightField, stats: NormalizationStats) -> HeightField:
    """Inverse of :func:`normalize_heights`.

    In inverse-depth mode a normalized value of 0 corresponds to infinite
    depth and maps to nodata.
    """
    vals = field.values.copy()
    mask = field.nodata_mask.copy()
    if stats.mode == "absolute":
        vals = vals * stats.std_height + stats.mean_height
    else:
        bad = ~mask & (vals == 0)
        mask = mask | bad
        vals = np.where(mask, 0.0, stats.baseline / np.where(mask, 1.0, vals))
    vals[mask] = 0.0
    return HeightField(vals, field.origin_x, field.origin_y, field.cell_size, mask)


# ---------------------------------------------------------------------------
# dihedral transforms
# ---------------------------------------------------------------------------

ROTATION_OPS = ("rot90", "rot180", "rot270")
FLIP_OPS = ("flip_h", "flip_v")
DIHEDRAL_OPS = ("identity",) + ROTATION_OPS + FLIP_OPS


def rotate_flip(values: np.ndarray, op: str) -> np.ndarray:
    """Apply a named dihedral op to a 2-D array (rotations are clockwise).

    Rotations require square input so that stacked channels and targets keep
    a common shape under augmentation.
    """
    vals = np.asarray(values)
    if vals.ndim != 2:
        raise ValueError("rotate_flip expects a 2-D array")
    if op == "identity":
        return vals.copy()
    if op in ROTATION_OPS:
        if vals.shape[0] != vals.shape[1]:
            raise ValueError("rotations require square input")
        k = {"rot90": -1, "rot180": 2, "rot270": 1}[op]
        return np.rot90(vals, k).copy()
    if op == "flip_h":
        return vals[:, ::-1].copy()
    if op == "flip_v":
        return vals[::-1, :].copy()
    raise ValueError(f"unknown op: {op!r}")


# ---------------------------------------------------------------------------
# PFM container
# ---------------------------------------------------------------------------


def write_pfm(path, values: np.ndarray, nodata_mask: np.ndarray | None = None) -> None:
    """Write a single-band PFM file (float32, little-endian, bottom-up rows).

    Nodata cells are stored as the sentinel value. Row 0 of the array is
    written first, which is the bottom scanline by this package's convention.
    """
    vals = np.asarray(values, dtype=np.float32)
    if vals.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    if nodata_mask is not None:
        vals = vals.copy()
        vals[np.asarray(nodata_mask, dtype=bool)] = np.float32(NODATA_SENTINEL)
    h, w = vals.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(vals.astype("<f4").tobytes())


def read_pfm(path):
    """Read a single-band PFM file.

    Returns ``(values, nodata_mask)`` with float32 values in this package's
    row order (row 0 = bottom scanline). The sign of the scale line selects
    endianness (negative = little-endian).
    """
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            raise ValueError("color PFM is not supported; expected grayscale 'Pf'")
        if magic != b"Pf":
            raise ValueError(f"not a PFM file (magic {magic!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ValueError("malformed PFM dimension line")
        w, h = (int(t) for t in dims)
        if w <= 0 or h <= 0:
            raise ValueError("PFM dimensions must be positive")
        scale = float(fh.readline().strip())
        if scale == 0:
            raise ValueError("PFM scale must be nonzero")
        payload = fh.read(4 * w * h)
        if len(payload) != 4 * w * h:
            raise ValueError("truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    vals = np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.float32)
    mask = vals == np.float32(NODATA_SENTINEL)
    return vals, mask


def write_height_pfm(path, field: HeightField) -> None:
    """Write a height field as PFM plus a JSON sidecar with the georeference."""
    write_pfm(path, field.values, field.nodata_mask)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(
        json.dumps(
            {
                "origin_x": field.origin_x,
                "origin_y": field.origin_y,
                "cell_size": field.cell_size,
            },
            indent=0,
            sort_keys=True,
        )
    )


def read_height_pfm(path) -> HeightField:
    """Read a height field written by :func:`write_height_pfm`."""
    vals, mask = read_pfm(path)
    sidecar = Path(str(path) + ".json")
    meta = {"origin_x": 0.0, "origin_y": 0.0, "cell_size": 1.0}
    if sidecar.exists():
        meta.update(json.loads(sidecar.read_text()))
    out = np.asarray(vals, dtype=np.float64)
    out = out.copy()
    out[mask] = 0.0
    return HeightField(out, meta["origin_x"], meta["origin_y"], meta["cell_size"], mask)


# ---------------------------------------------------------------------------
# 8-bit exports (quicklooks)
# ---------------------------------------------------------------------------


def write_pgm(path, image: GrayImage) -> None:
    """Write an 8-bit binary PGM quicklook (invalid pixels become 0)."""
    vals = np.clip(image.values, 0.0, 1.0)
    data = np.where(image.validity_mask, np.round(vals * 255.0), 0.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data[::-1].tobytes())


def write_png(path, image: GrayImage) -> None:
    """Write an 8-bit grayscale PNG quicklook."""
    from PIL import Image

    vals = np.clip(image.values, 0.0, 1.0)
    data = np.where(image.validity_mask, np.round(vals * 255.0), 0.0).astype(np.uint8)
    Image.fromarray(data[::-1], mode="L").save(path)


_RAMP = np.array(
    [
        (0.050, 0.030, 0.300),
        (0.110, 0.420, 0.810),
        (0.120, 0.730, 0.660),
        (0.520, 0.800, 0.250),
        (0.980, 0.850, 0.210),
        (0.980, 0.450, 0.120),
        (0.870, 0.120, 0.120),
    ]
)


def height_to_rgb(field: HeightField, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Map heights to an RGB uint8 array with a fixed color ramp.

    Nodata cells render as mid gray. Row order is north-up (row 0 at the top
    of the returned array) so the export looks like a map.
    """
    vals = field.values
    valid = ~field.nodata_mask
    if vmin is None:
        vmin = float(vals[valid].min()) if valid.any() else 0.0
    if vmax is None:
        vmax = float(vals[valid].max()) if valid.any() else 1.0
    if vmax <= vmin:
        vmax = vmin + 1.0
    t = np.clip((vals - vmin) / (vmax - vmin), 0.0, 1.0) * (len(_RAMP) - 1)
    i0 = np.floor(t).astype(int)
    i1 = np.minimum(i0 + 1, len(_RAMP) - 1)
    f = (t - i0)[..., None]
    rgb = (1 - f) * _RAMP[i0] + f * _RAMP[i1]
    rgb[~valid] = (0.5, 0.5, 0.5)
    out = np.round(rgb * 255.0).astype(np.uint8)
    return out[::-1]


def write_height_png(path, field: HeightField, vmin: float | None = None, vmax: float | None = None) -> None:
    """Write a color-ramp PNG rendering of a height field."""
    from PIL import Image

    Image.fromarray(height_to_rgb(field, vmin, vmax), mode="RGB").save(path)
