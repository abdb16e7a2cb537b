"""Initial surface reconstruction: census-based semi-global matching.

The matcher consumes an epipolar-aligned rendered pair whose cameras share
one vertical plane, so disparity is purely horizontal and maps to height
through an exact linear relation. A controllable truth-degradation model
provides a deterministic stand-in for matcher noise in fast tests, and a
5x5 median filter supplies the classic denoising baseline.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster import AffineCamera, GrayImage, HeightField, make_affine_camera
from .scene import SceneTruth, render_view, _scene_pixel_bounds

# ---------------------------------------------------------------------------
# parameters and volumes
# ---------------------------------------------------------------------------


@dataclass
class SgmParams:
    """Semi-global matcher parameters."""

    census_window: int = 5
    p1: float = 6.0
    p2: float = 48.0
    path_count: int = 8
    lr_threshold: float = 1.0

    def __post_init__(self) -> None:
        if self.census_window not in (3, 5):
            raise ValueError("census_window must be 3 or 5 (codes are 32-bit)")
        if not (self.p2 > self.p1 > 0):
            raise ValueError("penalties must satisfy p2 > p1 > 0")
        if self.path_count not in (4, 8):
            raise ValueError("path_count must be 4 or 8")
        if self.lr_threshold <= 0:
            raise ValueError("lr_threshold must be positive")


@dataclass
class CostVolume:
    """Per-pixel matching costs for disparities d_min..d_max inclusive."""

    costs: np.ndarray  # (H, W, D)
    d_min: int
    d_max: int

    def __post_init__(self) -> None:
        if self.costs.ndim != 3:
            raise ValueError("cost volume must be 3-D")
        if self.d_max <= self.d_min:
            raise ValueError("d_max must exceed d_min")
        if self.costs.shape[2] != self.d_max - self.d_min + 1:
            raise ValueError("depth axis must match the disparity range")
        if not np.all(np.isfinite(self.costs)) or self.costs.min() < 0:
            raise ValueError("costs must be finite and nonnegative")

    @property
    def height(self) -> int:
        return self.costs.shape[0]

    @property
    def width(self) -> int:
        return self.costs.shape[1]

    def disparities(self) -> np.ndarray:
        return np.arange(self.d_min, self.d_max + 1)


# ---------------------------------------------------------------------------
# census cost
# ---------------------------------------------------------------------------

_POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def census_transform(values: np.ndarray, window: int = 5) -> np.ndarray:
    """Census bit codes: one bit per window neighbor that is darker than
    the center. Borders use edge-clamped padding."""
    vals = np.asarray(values)
    half = window // 2
    padded = np.pad(vals, half, mode="edge")
    h, w = vals.shape
    code = np.zeros((h, w), dtype=np.uint32)
    bit = 0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            if dy == 0 and dx == 0:
                continue
            neigh = padded[half + dy : half + dy + h, half + dx : half + dx + w]
            code |= (neigh < vals).astype(np.uint32) << np.uint32(bit)
            bit += 1
    return code


def _hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = a ^ b
    return (
        _POPCOUNT8[x & 0xFF]
        + _POPCOUNT8[(x >> np.uint32(8)) & 0xFF]
        + _POPCOUNT8[(x >> np.uint32(16)) & 0xFF]
        + _POPCOUNT8[(x >> np.uint32(24)) & 0xFF]
    ).astype(np.uint8)


def _cost_from_census(code_l: np.ndarray, code_r: np.ndarray, d_range, window: int) -> CostVolume:
    d_min, d_max = int(d_range[0]), int(d_range[1])
    h, w = code_l.shape
    if d_max - d_min + 1 >= w:
        raise ValueError("disparity range exceeds image width")
    max_cost = np.uint8(window * window - 1)
    costs = np.full((h, w, d_max - d_min + 1), max_cost, dtype=np.uint8)
    for k, d in enumerate(range(d_min, d_max + 1)):
        if d >= 0:
            if d < w:
                costs[:, d:, k] = _hamming(code_l[:, d:], code_r[:, : w - d])
        else:
            if -d < w:
                costs[:, : w + d, k] = _hamming(code_l[:, : w + d], code_r[:, -d:])
    return CostVolume(costs, d_min, d_max)


def census_cost(left: GrayImage, right: GrayImage, d_range, params: SgmParams | None = None) -> CostVolume:
    """Hamming distance of census codes per candidate disparity.

    ``cost(y, x, k)`` compares the left pixel (y, x) against the right pixel
    (y, x - d); samples falling outside the right image get the maximum cost.
    """
    if left.values.shape != right.values.shape:
        raise ValueError("stereo pair must share dimensions")
    window = params.census_window if params is not None else 5
    code_l = census_transform(left.values, window)
    code_r = census_transform(right.values, window)
    return _cost_from_census(code_l, code_r, d_range, window)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _step(c, pred, none_mask, p1, p2):
    """One recurrence step: c and pred are (N, D) slabs."""
    with np.errstate(invalid="ignore"):
        m = pred.min(axis=1, keepdims=True)
        up = np.full_like(pred, np.inf)
        up[:, 1:] = pred[:, :-1]
        dn = np.full_like(pred, np.inf)
        dn[:, :-1] = pred[:, 1:]
        cand = np.minimum(pred, m + p2)
        np.minimum(cand, up + p1, out=cand)
        np.minimum(cand, dn + p1, out=cand)
        out = c + cand - m
    if none_mask is not None and none_mask.any():
        out[none_mask] = c[none_mask]
    return out


def _sweep_vertical(costs, p1, p2, row_step, col_shift, out):
    h, w, _ = costs.shape
    rows = range(h) if row_step > 0 else range(h - 1, -1, -1)
    prev = None
    if col_shift > 0:
        none_mask = np.zeros(w, dtype=bool)
        none_mask[:col_shift] = True
    elif col_shift < 0:
        none_mask = np.zeros(w, dtype=bool)
        none_mask[col_shift:] = True
    else:
        none_mask = None
    for r in rows:
        c = costs[r].astype(np.float32)
        if prev is None:
            cur = c
        else:
            if col_shift == 0:
                pred = prev
            else:
                pred = np.empty_like(prev)
                if col_shift > 0:
                    pred[col_shift:] = prev[:-col_shift]
                    pred[:col_shift] = np.inf
                else:
                    pred[:col_shift] = prev[-col_shift:]
                    pred[col_shift:] = np.inf
            cur = _step(c, pred, none_mask, p1, p2)
        out[r] += cur
        prev = cur


def _sweep_horizontal(costs, p1, p2, col_step, out):
    _, w, _ = costs.shape
    cols = range(w) if col_step > 0 else range(w - 1, -1, -1)
    prev = None
    for ci in cols:
        c = costs[:, ci].astype(np.float32)
        cur = c if prev is None else _step(c, prev, None, p1, p2)
        out[:, ci] += cur
        prev = cur


def sgm_aggregate(cv: CostVolume, params: SgmParams) -> CostVolume:
    """Sum the standard per-path recurrence over 4 or 8 scan directions.

    Each path subtracts the predecessor's minimum, so per-path costs stay
    bounded by the raw cost plus p2; in the zero-penalty limit the aggregate
    is exactly path_count times the raw volume.
    """
    out = np.zeros(cv.costs.shape, dtype=np.float32)
    p1 = np.float32(params.p1)
    p2 = np.float32(params.p2)
    _sweep_horizontal(cv.costs, p1, p2, +1, out)
    _sweep_horizontal(cv.costs, p1, p2, -1, out)
    _sweep_vertical(cv.costs, p1, p2, +1, 0, out)
    _sweep_vertical(cv.costs, p1, p2, -1, 0, out)
    if params.path_count == 8:
        _sweep_vertical(cv.costs, p1, p2, +1, +1, out)
        _sweep_vertical(cv.costs, p1, p2, +1, -1, out)
        _sweep_vertical(cv.costs, p1, p2, -1, +1, out)
        _sweep_vertical(cv.costs, p1, p2, -1, -1, out)
    return CostVolume(out, cv.d_min, cv.d_max)


def wta_subpixel(cv: CostVolume) -> np.ndarray:
    """Winner-takes-all disparity with parabola refinement.

    Ties pick the smaller disparity; the subpixel offset is
    0.5 * (c- - c+) / (c- - 2*c0 + c+), clamped to [-0.5, 0.5], and zero at
    range borders or where the parabola degenerates.
    """
    costs = cv.costs
    h, w, d = costs.shape
    idx = costs.argmin(axis=2)
    rr, cc = np.mgrid[0:h, 0:w]
    c0 = costs[rr, cc, idx].astype(np.float64)
    interior = (idx > 0) & (idx < d - 1)
    lo = np.maximum(idx - 1, 0)
    hi = np.minimum(idx + 1, d - 1)
    cm = costs[rr, cc, lo].astype(np.float64)
    cp = costs[rr, cc, hi].astype(np.float64)
    denom = cm - 2.0 * c0 + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = 0.5 * (cm - cp) / denom
    offset = np.where(interior & (denom > 0), offset, 0.0)
    offset = np.clip(offset, -0.5, 0.5)
    return (cv.d_min + idx + offset).astype(np.float64)


def lr_check(d_left: np.ndarray, d_right: np.ndarray, threshold: float):
    """Left-right consistency filter with nearest-valid horizontal fill.

    A left pixel x survives iff |d_L(x) + d_R(x - d_L(x))| <= threshold,
    with the right disparity sampled at the nearest pixel. Invalid cells are
    filled from the nearest valid cell in the same row (ties break left);
    rows with no valid cell fall back to the global median disparity.
    Returns (filled, valid_mask). An infinite threshold is the identity.
    """
    d_left = np.asarray(d_left, dtype=np.float64)
    if not math.isfinite(threshold):
        return d_left.copy(), np.ones(d_left.shape, dtype=bool)
    h, w = d_left.shape
    cols = np.arange(w)[None, :].repeat(h, axis=0)
    xr = np.rint(cols - d_left).astype(np.int64)
    inb = (xr >= 0) & (xr < w)
    xr_c = np.clip(xr, 0, w - 1)
    rows = np.arange(h)[:, None].repeat(w, axis=1)
    disp_sum = d_left + d_right[rows, xr_c]
    valid = inb & (np.abs(disp_sum) <= threshold)

    filled = d_left.copy()
    if not valid.all():
        # distance to nearest valid column, forward and backward
        idx = np.where(valid, cols, -1)
        left_src = np.maximum.accumulate(idx, axis=1)
        idx_r = np.where(valid, cols, 2 * w)
        right_src = np.minimum.accumulate(idx_r[:, ::-1], axis=1)[:, ::-1]
        dist_l = np.where(left_src >= 0, cols - left_src, np.inf)
        dist_r = np.where(right_src < 2 * w, right_src - cols, np.inf)
        use_left = dist_l <= dist_r
        src = np.where(use_left, np.maximum(left_src, 0), np.minimum(right_src, w - 1))
        have_any = valid.any(axis=1)
        fallback = float(np.median(d_left[valid])) if valid.any() else 0.0
        filled = d_left[rows, src]
        filled[~have_any] = fallback
        filled[valid] = d_left[valid]
    return filled, valid


# ---------------------------------------------------------------------------
# epipolar pairs and geometry
# ---------------------------------------------------------------------------


@dataclass
class EpipolarGeometry:
    """Exact linear disparity-to-height map plus the left camera frame."""

    alpha: float  # meters per pixel of disparity
    beta: float
    cam_left: AffineCamera
    cam_right: AffineCamera

    def height_from_disparity(self, d: np.ndarray) -> np.ndarray:
        return self.alpha * np.asarray(d, dtype=np.float64) + self.beta

    def disparity_from_height(self, h) -> np.ndarray:
        if math.isinf(self.alpha):
            return np.zeros_like(np.asarray(h, dtype=np.float64))
        return (np.asarray(h, dtype=np.float64) - self.beta) / self.alpha


def _horizontal_ray(cam: AffineCamera) -> np.ndarray:
    ray = cam.ray_direction()
    return ray[:2] / -ray[2]


def coplanar_rig(cam_a: AffineCamera, cam_b: AffineCamera, cell_size: float):
    """Project a camera pair into their common vertical parallax plane.

    The relative horizontal parallax h_a - h_b is preserved exactly; the
    returned cameras share one azimuth (signed off-nadir tilts), which makes
    their renders row-aligned. Raises when the rays are parallel.
    """
    ha = _horizontal_ray(cam_a)
    hb = _horizontal_ray(cam_b)
    g = ha - hb
    norm = float(np.hypot(*g))
    if norm < 1e-9:
        raise ValueError("cameras have no horizontal parallax; cannot build a rig")
    ghat = g / norm
    azimuth = math.degrees(math.atan2(ghat[1], ghat[0]))
    rigs = []
    for cam, h in ((cam_a, ha), (cam_b, hb)):
        tan_t = float(h @ ghat)
        rigs.append(
            make_affine_camera(
                azimuth_deg=azimuth % 360.0,
                off_nadir_deg=math.degrees(math.atan(tan_t)),
                cell_size=cell_size,
                sun_direction=cam.sun_direction,
                timestamp_days=cam.timestamp_days,
            )
        )
    return rigs[0], rigs[1]


def epipolar_pair(scene: SceneTruth, cam_a: AffineCamera, cam_b: AffineCamera):
    """Render a coplanar camera pair row-aligned and return the geometry.

    Both cameras are re-framed with one shared pixel offset, so v rows agree
    and the disparity-to-height map has beta = 0 exactly: h = alpha * d with
    alpha = cell_size / (tan t_a - tan t_b).

    Returns ``(image_a, image_b, EpipolarGeometry)``.
    """
    if not np.allclose(cam_a.A[1], cam_b.A[1], atol=1e-9):
        raise ValueError("cameras are not row-aligned (v rows differ)")
    if not np.allclose(cam_a.A[0, :2], cam_b.A[0, :2], atol=1e-9):
        raise ValueError("cameras do not share an image azimuth")
    ha = _horizontal_ray(cam_a)
    hb = _horizontal_ray(cam_b)
    if abs(ha[0] * hb[1] - ha[1] * hb[0]) > 1e-9:
        raise ValueError("camera rays are not coplanar with the vertical")

    # common frame covering both projections of the scene
    ua0, ua1, va0, va1 = _scene_pixel_bounds(scene, cam_a)
    ub0, ub1, vb0, vb1 = _scene_pixel_bounds(scene, cam_b)
    u_min, v_min = min(ua0, ub0), min(va0, vb0)
    u_max, v_max = max(ua1, ub1), max(va1, vb1)
    margin = 2.0
    shift = np.array([u_min, v_min]) - (margin - 0.5)
    width = int(math.ceil(u_max - u_min + 2 * margin)) + 1
    height = int(math.ceil(v_max - v_min + 2 * margin)) + 1

    framed = []
    for cam in (cam_a, cam_b):
        framed.append(
            AffineCamera(
                A=cam.A.copy(),
                b=cam.b - shift,
                sun_direction=cam.sun_direction.copy(),
                azimuth_deg=cam.azimuth_deg,
                off_nadir_deg=cam.off_nadir_deg,
                timestamp_days=cam.timestamp_days,
            )
        )
    fa, fb = framed
    img_a = render_view(scene, fa, image_size=(height, width))
    img_b = render_view(scene, fb, image_size=(height, width))

    cell = scene.spec.cell_size
    dtan = (fa.A[0, 2] - fb.A[0, 2]) * cell  # tan t_a - tan t_b
    alpha = cell / dtan if abs(dtan) > 1e-12 else math.inf
    geom = EpipolarGeometry(alpha=alpha, beta=0.0, cam_left=fa, cam_right=fb)
    return img_a, img_b, geom


# ---------------------------------------------------------------------------
# disparity to DEM
# ---------------------------------------------------------------------------


def disparities_to_dem(
    disparity: np.ndarray,
    geometry: EpipolarGeometry,
    grid: HeightField,
    valid_mask: np.ndarray | None = None,
) -> HeightField:
    """Convert a left-view disparity raster to a DEM on the given grid.

    Each valid pixel maps to a height through the linear coefficients and to
    a world point through the left camera; samples are splatted into grid
    cells and reduced by the per-cell median. Remaining holes are filled by
    iterated 3x3 neighborhood medians.
    """
    d = np.asarray(disparity, dtype=np.float64)
    h_img, w_img = d.shape
    if valid_mask is None:
        valid_mask = np.ones(d.shape, dtype=bool)
    heights = geometry.height_from_disparity(d)

    cam = geometry.cam_left
    uu, vv = np.meshgrid(np.arange(w_img, dtype=np.float64), np.arange(h_img, dtype=np.float64))
    Minv = np.linalg.inv(cam.A[:, :2])
    rhs_u = uu - cam.b[0] - cam.A[0, 2] * heights
    rhs_v = vv - cam.b[1] - cam.A[1, 2] * heights
    x = Minv[0, 0] * rhs_u + Minv[0, 1] * rhs_v
    y = Minv[1, 0] * rhs_u + Minv[1, 1] * rhs_v

    cols, rows = grid.world_to_cell(x, y)
    ci = np.rint(cols).astype(np.int64)
    ri = np.rint(rows).astype(np.int64)
    ok = valid_mask & (ci >= 0) & (ci < grid.width) & (ri >= 0) & (ri < grid.height)

    flat_idx = ri[ok] * grid.width + ci[ok]
    sample_h = heights[ok]
    out = np.full(grid.height * grid.width, np.nan)
    if flat_idx.size:
        order = np.lexsort((sample_h, flat_idx))
        sidx = flat_idx[order]
        svals = sample_h[order]
        starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
        ends = np.r_[starts[1:], sidx.size]
        # per-cell median of the sorted segment (averaging convention)
        lo = starts + (ends - starts - 1) // 2
        hi = starts + (ends - starts) // 2
        med = 0.5 * (svals[lo] + svals[hi])
        out[sidx[starts]] = med
    dem = out.reshape(grid.height, grid.width)
    dem = fill_holes_median(dem)
    return HeightField(dem, grid.origin_x, grid.origin_y, grid.cell_size)


def fill_holes_median(values: np.ndarray, max_iterations: int = 64) -> np.ndarray:
    """Fill NaN cells with the median of their valid 3x3 neighbors."""
    out = values.copy()
    for _ in range(max_iterations):
        holes = np.isnan(out)
        if not holes.any():
            return out
        padded = np.pad(out, 1, mode="constant", constant_values=np.nan)
        stack = np.stack(
            [
                padded[1 + dy : 1 + dy + out.shape[0], 1 + dx : 1 + dx + out.shape[1]]
                for dy in (-1, 0, 1)
                for dx in (-1, 0, 1)
                if not (dy == 0 and dx == 0)
            ]
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            neigh = np.nanmedian(stack, axis=0)
        fillable = holes & np.isfinite(neigh)
        if not fillable.any():
            break
        out[fillable] = neigh[fillable]
    holes = np.isnan(out)
    if holes.any():
        finite = out[~holes]
        out[holes] = float(np.median(finite)) if finite.size else 0.0
    return out


def median_filter(dem: HeightField, kernel: int = 5) -> HeightField:
    """Nodata-aware median filter with edge-clamped borders.

    Cells whose whole window is nodata stay nodata; all other cells get the
    median of the valid values in their window.
    """
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError("kernel must be odd")
    half = kernel // 2
    work = dem.values.copy()
    work[dem.nodata_mask] = np.nan
    padded = np.pad(work, half, mode="edge")
    h, w = work.shape
    out = np.empty_like(work)
    chunk = max(1, int(4e6 / (w * kernel * kernel)))
    for r0 in range(0, h, chunk):
        r1 = min(r0 + chunk, h)
        win = np.lib.stride_tricks.sliding_window_view(
            padded[r0 : r1 + 2 * half], (kernel, kernel)
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out[r0:r1] = np.nanmedian(win, axis=(2, 3))
    mask = np.isnan(out)
    out[mask] = 0.0
    return HeightField(out, dem.origin_x, dem.origin_y, dem.cell_size, mask)


# ---------------------------------------------------------------------------
# deterministic truth degradation
# ---------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    """Degradation model standing in for matcher noise in fast tests."""

    edge_sigma_cells: float = 2.0
    speckle_sigma_m: float = 1.0
    blob_count: int = 0
    blob_amplitude_m: float = 3.0
    blob_radius_cells: float = 8.0

    def __post_init__(self) -> None:
        if min(self.edge_sigma_cells, self.speckle_sigma_m, self.blob_amplitude_m, self.blob_radius_cells) < 0:
            raise ValueError("noise parameters must be nonnegative")
        if self.blob_count < 0:
            raise ValueError("blob_count must be nonnegative")


def degrade_truth(target: HeightField, noise: NoiseSpec, seed: int = 0) -> HeightField:
    """Smooth edges, add speckle, and drop sparse blob outliers.

    A zero-amplitude spec returns the input unchanged; fixed seeds give
    bit-identical output.
    """
    rng = np.random.default_rng(seed)
    vals = target.values.copy()
    if noise.edge_sigma_cells > 0:
        vals = ndimage.gaussian_filter(vals, noise.edge_sigma_cells, mode="nearest")
    if noise.speckle_sigma_m > 0:
        vals = vals + rng.normal(0.0, noise.speckle_sigma_m, size=vals.shape)
    h, w = vals.shape
    for _ in range(noise.blob_count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        amp = rng.uniform(-1.0, 1.0) * noise.blob_amplitude_m
        rad = noise.blob_radius_cells
        r0, r1 = int(max(cy - rad - 1, 0)), int(min(cy + rad + 2, h))
        c0, c1 = int(max(cx - rad - 1, 0)), int(min(cx + rad + 2, w))
        if r0 >= r1 or c0 >= c1 or rad == 0 or amp == 0:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        bump = np.maximum(0.0, 1.0 - ((yy - cy) ** 2 + (xx - cx) ** 2) / rad**2)
        vals[r0:r1, c0:c1] += amp * bump
    return HeightField(vals, target.origin_x, target.origin_y, target.cell_size, target.nodata_mask.copy())


# ---------------------------------------------------------------------------
# full matcher path
# ---------------------------------------------------------------------------


def match_pair(left: GrayImage, right: GrayImage, d_range, params: SgmParams):
    """Census + SGM + subpixel WTA + left-right check on one epipolar pair.

    Returns ``(disparity, valid_mask)`` for the left view.
    """
    cv = census_cost(left, right, d_range, params)
    agg = sgm_aggregate(cv, params)
    d_left = wta_subpixel(agg)
    del cv, agg
    neg_range = (-int(d_range[1]), -int(d_range[0]))
    cv_r = census_cost(right, left, neg_range, params)
    agg_r = sgm_aggregate(cv_r, params)
    d_right = wta_subpixel(agg_r)
    del cv_r, agg_r
    return lr_check(d_left, d_right, params.lr_threshold)


def match_scene(
    scene: SceneTruth,
    cam_a: AffineCamera,
    cam_b: AffineCamera,
    params: SgmParams | None = None,
    d_margin_px: int = 4,
) -> HeightField:
    """Initial DEM from one camera pair via the coplanar epipolar rig.

    The disparity search range comes from the scene's height bounds (the
    desk-scale analog of a coarse terrain prior) plus a margin.
    """
    params = params or SgmParams()
    rig_a, rig_b = coplanar_rig(cam_a, cam_b, scene.spec.cell_size)
    if rig_a.A[0, 2] < rig_b.A[0, 2]:
        rig_a, rig_b = rig_b, rig_a  # order so alpha > 0
    img_a, img_b, geom = epipolar_pair(scene, rig_a, rig_b)
    zmin, zmax = scene.height_bounds()
    d_lo = geom.disparity_from_height(zmin)
    d_hi = geom.disparity_from_height(zmax)
    d_range = (
        int(math.floor(min(d_lo, d_hi))) - d_margin_px,
        int(math.ceil(max(d_lo, d_hi))) + d_margin_px,
    )
    disparity, valid = match_pair(img_a, img_b, d_range, params)
    valid &= img_a.validity_mask
    return disparities_to_dem(disparity, geom, scene.target_dem, valid)
