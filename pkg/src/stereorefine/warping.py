"""Ortho-rectification of views onto a DEM grid and network input stacks.

Each view is resampled independently by projecting every DEM cell center
through its camera, deliberately without any visibility test: where the true
viewing ray crosses the surface more than once, the warp drops a displaced
copy of nearby texture into the hidden cells instead of masking them. The
mismatch between two such warps is the signal the refinement net learns
from, so the duplicate-texture cells are kept and an explicit ray-marching
oracle (double_intersection_mask) identifies them for diagnostics and tests.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .raster import (
    AffineCamera,
    GrayImage,
    HeightField,
    NormalizationStats,
    bilinear_sample,
    normalize_heights,
)


class Variant(Enum):
    """Input-stack layout and residual wiring of the refinement variants."""

    STEREO = "stereo"
    MONO = "mono"
    ZERO = "zero"
    UNET_STEREO = "unet_stereo"

    @property
    def in_channels(self) -> int:
        return {Variant.STEREO: 3, Variant.MONO: 2, Variant.ZERO: 1, Variant.UNET_STEREO: 2}[self]

    @property
    def image_count(self) -> int:
        return {Variant.STEREO: 2, Variant.MONO: 1, Variant.ZERO: 0, Variant.UNET_STEREO: 2}[self]

    @property
    def residual(self) -> bool:
        # the long residual connection needs a DEM channel to add to
        return self is not Variant.UNET_STEREO


def _cell_center_grids(dem: HeightField) -> tuple[np.ndarray, np.ndarray]:
    h, w = dem.values.shape
    x = dem.origin_x + (np.arange(w) + 0.5) * dem.cell_size
    y = dem.origin_y + (np.arange(h) + 0.5) * dem.cell_size
    return np.meshgrid(x, y)


def ortho_rectify(img: GrayImage, cam: AffineCamera, dem: HeightField) -> GrayImage:
    """Resample one view onto the DEM grid, one bilinear tap per cell.

    Every cell center projects through the camera at its stored height and
    samples the image; no ray casting. Out-of-image samples and nodata cells
    are invalid with value 0. A nadir camera has no height term, so its
    output is bit-identical across (dense) DEMs.
    """
    xg, yg = _cell_center_grids(dem)
    z = np.where(dem.nodata_mask, 0.0, dem.values)
    a, b = cam.A, cam.b
    u = a[0, 0] * xg + a[0, 1] * yg + a[0, 2] * z + b[0]
    v = a[1, 0] * xg + a[1, 1] * yg + a[1, 2] * z + b[1]
    nodata = None if img.validity_mask.all() else ~img.validity_mask
    samples, valid = bilinear_sample(img.values, u, v, nodata)
    valid &= ~dem.nodata_mask
    return GrayImage(np.where(valid, samples, 0.0), valid)


def photoconsistency_map(ortho_1: GrayImage, ortho_2: GrayImage) -> GrayImage:
    """Absolute intensity difference where both warps are valid (else 0).

    Diagnostic only; the refinement net never consumes this raster.
    """
    if ortho_1.values.shape != ortho_2.values.shape:
        raise ValueError("warped views must share a grid")
    valid = ortho_1.validity_mask & ortho_2.validity_mask
    diff = np.where(valid, np.abs(ortho_1.values - ortho_2.values), 0.0)
    return GrayImage(diff, valid)


def build_input_stack(
    dem: HeightField,
    ortho_1: GrayImage | None,
    ortho_2: GrayImage | None,
    variant: Variant,
    stats: NormalizationStats,
) -> np.ndarray:
    """Stack the network input channels for one variant, as float32 CxHxW.

    Layouts: STEREO [dem, o1, o2]; MONO [dem, o1]; ZERO [dem];
    UNET_STEREO [o1, o2]. The DEM channel is normalized with ``stats`` and
    nodata cells become 0 (the normalized mean); image channels stay in
    their native [0, 1] with invalid pixels zero-filled.
    """
    channels: list[np.ndarray] = []
    if variant is not Variant.UNET_STEREO:
        norm = normalize_heights(dem, stats)
        channels.append(np.where(norm.nodata_mask, 0.0, norm.values))
    for name, img in (("ortho_1", ortho_1), ("ortho_2", ortho_2))[: variant.image_count]:
        if img is None:
            raise ValueError(f"variant {variant.value!r} needs {name}")
        if img.values.shape != dem.values.shape:
            raise ValueError("input rasters must share the DEM grid")
        channels.append(np.where(img.validity_mask, img.values, 0.0))
    return np.stack(channels).astype(np.float32)


def double_intersection_mask(
    dem: HeightField, cam: AffineCamera, clearance_m: float = 1e-3
) -> np.ndarray:
    """Cells whose viewing ray meets the surface again on the way up.

    Marches from each cell center toward the camera in half-cell horizontal
    steps and flags cells where the DEM rises above the line of sight by
    more than ``clearance_m``. These are exactly the cells ortho_rectify
    fills with displaced copies of other texture. Nadir rays never
    re-intersect; nodata cells are never flagged.
    """
    ray = cam.ray_direction()
    hx, hy = float(ray[0] / -ray[2]), float(ray[1] / -ray[2])
    speed = float(np.hypot(hx, hy))
    flagged = np.zeros(dem.values.shape, dtype=bool)
    if speed < 1e-12:
        return flagged
    start = np.where(dem.nodata_mask, np.inf, dem.values)
    finite = start[np.isfinite(start)]
    if finite.size == 0:
        return flagged
    zmax, zmin = float(finite.max()), float(finite.min())
    if zmax - zmin <= clearance_m:
        return flagged
    xg, yg = _cell_center_grids(dem)
    nodata = dem.nodata_mask if dem.nodata_mask.any() else None
    dt = dem.cell_size / (2.0 * speed)
    steps = int(np.ceil((zmax - zmin) / dt))
    for k in range(1, steps + 1):
        t = k * dt
        cols = (xg - hx * t - dem.origin_x) / dem.cell_size - 0.5
        rows = (yg - hy * t - dem.origin_y) / dem.cell_size - 0.5
        surf, valid = bilinear_sample(dem.values, cols, rows, nodata)
        flagged |= valid & (surf > start + t + clearance_m)
    return flagged
