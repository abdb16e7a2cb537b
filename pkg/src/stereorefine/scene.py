"""Procedural urban scenes and parallel-projection rendering.

A scene is a pair of height surfaces on one grid: ``target_dem`` holds
terrain plus extruded buildings and is what reconstruction is scored
against; ``render_surface`` additionally carries tree canopies, so trees
are visible in imagery but absent from the learning target. Rendering is
a parallel projection along each camera's viewing ray with exact per-ray
visibility, Lambertian shading, and cast shadows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster import AffineCamera, GrayImage, HeightField, bilinear_sample, make_affine_camera

# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

ROOF_TYPES = ("flat", "gabled", "shed")

# shading model shared by all renders
AMBIENT = 0.25
# band limits keeping resampled textures smooth at the cell scale
ALBEDO_SMOOTH_SIGMA = 1.5
COLOR_SMOOTH_SIGMA = 1.0
SHADOW_CLEARANCE_M = 0.15


@dataclass
class AlbedoSpec:
    """Texture parameters: per-surface base albedo plus band-limited noise."""

    ground: float = 0.45
    roof_range: tuple[float, float] = (0.25, 0.80)
    tree: float = 0.22
    noise_amplitude: float = 0.10
    noise_sigma_cells: float = 1.5

    def __post_init__(self) -> None:
        if not 0 < self.ground < 1:
            raise ValueError("ground albedo must lie in (0, 1)")
        lo, hi = self.roof_range
        if not (0 < lo <= hi < 1):
            raise ValueError("roof albedo range must lie in (0, 1)")
        if self.noise_amplitude < 0 or self.noise_sigma_cells <= 0:
            raise ValueError("invalid albedo noise parameters")


@dataclass
class SceneSpec:
    """Parameters of the procedural scene generator."""

    seed: int = 0
    extent_m: float = 512.0
    cell_size: float = 0.25
    terrain_amplitude: float = 2.5
    building_count: int = 180
    roof_mix: dict = field(default_factory=lambda: {"flat": 0.4, "gabled": 0.4, "shed": 0.2})
    tree_density: float = 25.0
    albedo_spec: AlbedoSpec = field(default_factory=AlbedoSpec)

    def __post_init__(self) -> None:
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.extent_m < 4 * self.cell_size:
            raise ValueError("extent too small")
        if self.building_count < 0 or self.tree_density < 0 or self.terrain_amplitude < 0:
            raise ValueError("counts and amplitudes must be nonnegative")
        if set(self.roof_mix) - set(ROOF_TYPES):
            raise ValueError(f"roof types must be among {ROOF_TYPES}")
        total = sum(self.roof_mix.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError("roof_mix probabilities must sum to 1")
        if any(p < 0 for p in self.roof_mix.values()):
            raise ValueError("roof_mix probabilities must be nonnegative")

    @property
    def cells(self) -> int:
        return int(round(self.extent_m / self.cell_size))


@dataclass
class SceneTruth:
    """Generated scene: two surfaces, semantic masks, and surface albedo."""

    spec: SceneSpec
    target_dem: HeightField
    render_surface: HeightField
    building_mask: np.ndarray
    tree_mask: np.ndarray
    albedo: GrayImage

    def height_bounds(self) -> tuple[float, float]:
        return float(self.render_surface.values.min()), float(self.render_surface.values.max())


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, shape, sigma_cells: float) -> np.ndarray:
    """White noise low-passed to the given sigma, rescaled to unit std."""
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_cells, mode="reflect")
    std = noise.std()
    return noise / std if std > 0 else noise


def _cell_centers(n: int, cell: float) -> np.ndarray:
    return (np.arange(n) + 0.5) * cell


def add_building(
    target: np.ndarray,
    building_mask: np.ndarray,
    cell_size: float,
    center_xy: tuple[float, float],
    size_lw: tuple[float, float],
    angle_deg: float,
    wall_height: float,
    roof_type: str,
    roof_rise: float = 0.0,
) -> None:
    """Extrude one rectangular building into ``target`` in place.

    The footprint covers cells whose centers fall inside the rotated
    rectangle; the foundation is the median terrain under the footprint so
    walls stay vertical on sloped ground.
    """
    if roof_type not in ROOF_TYPES:
        raise ValueError(f"unknown roof type {roof_type!r}")
    h, w = target.shape
    cx, cy = center_xy
    length, width = size_lw
    ang = math.radians(angle_deg)
    ca, sa = math.cos(ang), math.sin(ang)

    reach = 0.5 * math.hypot(length, width)
    c_lo = max(int((cx - reach) / cell_size) - 1, 0)
    c_hi = min(int((cx + reach) / cell_size) + 2, w)
    r_lo = max(int((cy - reach) / cell_size) - 1, 0)
    r_hi = min(int((cy + reach) / cell_size) + 2, h)
    if c_lo >= c_hi or r_lo >= r_hi:
        return

    xs = _cell_centers(w, cell_size)[c_lo:c_hi] - cx
    ys = _cell_centers(h, cell_size)[r_lo:r_hi] - cy
    gx, gy = np.meshgrid(xs, ys)
    p = gx * ca + gy * sa  # along the long axis
    q = -gx * sa + gy * ca
    inside = (np.abs(p) <= length / 2) & (np.abs(q) <= width / 2)
    if not inside.any():
        return

    sub = target[r_lo:r_hi, c_lo:c_hi]
    base = float(np.median(sub[inside]))
    if roof_type == "flat":
        roof = np.zeros_like(q)
    elif roof_type == "gabled":
        roof = roof_rise * (1.0 - np.abs(q) / (width / 2))
    else:  # shed
        roof = roof_rise * (q / width + 0.5)
    elev = base + wall_height + roof
    sub[inside] = np.maximum(sub[inside], elev[inside])
    building_mask[r_lo:r_hi, c_lo:c_hi][inside] = True


def _rasterize_rect_mask(
    shape, cell_size, center_xy, size_lw, angle_deg
) -> tuple[slice, slice, np.ndarray]:
    """Footprint mask of a rotated rectangle within its bounding window."""
    h, w = shape
    cx, cy = center_xy
    length, width = size_lw
    ang = math.radians(angle_deg)
    ca, sa = math.cos(ang), math.sin(ang)
    reach = 0.5 * math.hypot(length, width)
    c_lo = max(int((cx - reach) / cell_size) - 1, 0)
    c_hi = min(int((cx + reach) / cell_size) + 2, w)
    r_lo = max(int((cy - reach) / cell_size) - 1, 0)
    r_hi = min(int((cy + reach) / cell_size) + 2, h)
    rows = slice(r_lo, r_hi)
    cols = slice(c_lo, c_hi)
    if c_lo >= c_hi or r_lo >= r_hi:
        return rows, cols, np.zeros((0, 0), dtype=bool)
    xs = _cell_centers(w, cell_size)[cols] - cx
    ys = _cell_centers(h, cell_size)[rows] - cy
    gx, gy = np.meshgrid(xs, ys)
    p = gx * ca + gy * sa
    q = -gx * sa + gy * ca
    return rows, cols, (np.abs(p) <= length / 2) & (np.abs(q) <= width / 2)


def generate_scene(spec: SceneSpec) -> SceneTruth:
    """Build a deterministic scene from a spec.

    Raises ValueError when the extent cannot host the requested number of
    buildings; the message reports how many fit.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.cells
    cell = spec.cell_size
    shape = (n, n)

    # terrain: smooth random field (about 40 m correlation length) scaled so
    # its extreme value equals the requested amplitude; the noise draw always
    # happens so the seed stream is independent of the amplitude
    terrain = _smooth_noise(rng, shape, sigma_cells=40.0 / cell)
    peak = np.abs(terrain).max()
    terrain *= spec.terrain_amplitude / peak if peak > 0 else 0.0
    target = terrain.copy()

    building_mask = np.zeros(shape, dtype=bool)
    occupied = np.zeros(shape, dtype=bool)  # footprints plus spacing margin
    roof_names = list(ROOF_TYPES)
    roof_probs = np.array([spec.roof_mix.get(t, 0.0) for t in roof_names])

    roof_albedo: list[tuple[slice, slice, np.ndarray, float]] = []
    placed = 0
    attempts = 0
    max_attempts = max(60 * spec.building_count, 1)
    margin_m = 2.0
    while placed < spec.building_count and attempts < max_attempts:
        attempts += 1
        length = rng.uniform(8.0, 26.0)
        width = rng.uniform(6.0, 16.0)
        angle = rng.uniform(0.0, 180.0)
        reach = 0.5 * math.hypot(length, width) + margin_m
        cx = rng.uniform(reach, spec.extent_m - reach) if spec.extent_m > 2 * reach else -1.0
        cy = rng.uniform(reach, spec.extent_m - reach) if spec.extent_m > 2 * reach else -1.0
        wall = rng.uniform(3.0, 14.0)
        roof_type = roof_names[rng.choice(len(roof_names), p=roof_probs)]
        rise = {"flat": 0.0, "gabled": rng.uniform(1.5, 4.0), "shed": rng.uniform(1.0, 3.0)}[roof_type]
        albedo_val = rng.uniform(*spec.albedo_spec.roof_range)
        if cx < 0:
            continue
        rows, cols, pad_inside = _rasterize_rect_mask(
            shape, cell, (cx, cy), (length + 2 * margin_m, width + 2 * margin_m), angle
        )
        if pad_inside.size == 0 or occupied[rows, cols][pad_inside].any():
            continue
        add_building(target, building_mask, cell, (cx, cy), (length, width), angle, wall, roof_type, rise)
        occupied[rows, cols] |= pad_inside
        frows, fcols, finside = _rasterize_rect_mask(shape, cell, (cx, cy), (length, width), angle)
        roof_albedo.append((frows, fcols, finside, albedo_val))
        placed += 1
    if placed < spec.building_count:
        raise ValueError(
            f"extent {spec.extent_m} m cannot host {spec.building_count} buildings; "
            f"feasible maximum is about {placed}"
        )

    # trees: rounded canopy blobs, kept only where they rise >= 1 m above the
    # target so the two surfaces agree exactly everywhere else
    canopy = np.zeros(shape)
    area_ha = (spec.extent_m / 100.0) ** 2
    tree_count = int(round(spec.tree_density * area_ha))
    if tree_count > 0:
        candidates = rng.uniform(0.0, spec.extent_m, size=(tree_count * 8, 2))
        radii = rng.uniform(1.25, 4.0, size=tree_count * 8)
        heights = rng.uniform(2.0, 8.0, size=tree_count * 8)
        kept = 0
        for (cx, cy), radius, height in zip(candidates, radii, heights):
            if kept >= tree_count:
                break
            col = int(cx / cell)
            row = int(cy / cell)
            if not (0 <= col < n and 0 <= row < n) or occupied[row, col]:
                continue
            c_lo = max(int((cx - radius) / cell) - 1, 0)
            c_hi = min(int((cx + radius) / cell) + 2, n)
            r_lo = max(int((cy - radius) / cell) - 1, 0)
            r_hi = min(int((cy + radius) / cell) + 2, n)
            xs = _cell_centers(n, cell)[c_lo:c_hi] - cx
            ys = _cell_centers(n, cell)[r_lo:r_hi] - cy
            gx, gy = np.meshgrid(xs, ys)
            blob = height * np.maximum(0.0, 1.0 - (gx**2 + gy**2) / radius**2)
            window = canopy[r_lo:r_hi, c_lo:c_hi]
            np.maximum(window, terrain[r_lo:r_hi, c_lo:c_hi] + blob - target[r_lo:r_hi, c_lo:c_hi], out=window)
            kept += 1

    lift = np.where((canopy >= 1.0) & ~building_mask, canopy, 0.0)
    tree_mask = lift > 0
    render = target + lift

    # albedo: piecewise-constant surfaces plus band-limited noise, then a
    # small blur so resampling the texture stays below quantization error
    albedo = np.full(shape, spec.albedo_spec.ground)
    for rows, cols, inside, value in roof_albedo:
        albedo[rows, cols][inside] = value
    albedo[tree_mask] = spec.albedo_spec.tree
    albedo = albedo + spec.albedo_spec.noise_amplitude * _smooth_noise(
        rng, shape, spec.albedo_spec.noise_sigma_cells
    )
    albedo = ndimage.gaussian_filter(albedo, ALBEDO_SMOOTH_SIGMA, mode="reflect")
    albedo = np.clip(albedo, 0.02, 0.98)

    return SceneTruth(
        spec=spec,
        target_dem=HeightField(target, 0.0, 0.0, cell),
        render_surface=HeightField(render, 0.0, 0.0, cell),
        building_mask=building_mask,
        tree_mask=tree_mask,
        albedo=GrayImage(albedo),
    )


def box_scene(
    extent_m: float = 32.0,
    cell_size: float = 0.25,
    box_size: tuple[float, float] = (10.0, 8.0),
    box_height: float = 6.0,
    ground_albedo: float = 0.5,
    roof_albedo: float = 0.8,
    noise_amplitude: float = 0.0,
    seed: int = 0,
    base_height: float = 0.0,
) -> SceneTruth:
    """One axis-aligned flat-roof box on flat ground, for analytic checks.

    ``box_height=0`` leaves the ground flat but keeps the albedo rectangle,
    and ``base_height`` lifts the whole scene by a constant.
    """
    spec = SceneSpec(
        seed=seed,
        extent_m=extent_m,
        cell_size=cell_size,
        terrain_amplitude=0.0,
        building_count=0,
        tree_density=0.0,
        albedo_spec=AlbedoSpec(ground=ground_albedo, noise_amplitude=noise_amplitude),
    )
    n = spec.cells
    target = np.full((n, n), float(base_height))
    mask = np.zeros((n, n), dtype=bool)
    center = (extent_m / 2.0, extent_m / 2.0)
    paint = np.zeros((n, n), dtype=bool)
    if box_height > 0:
        add_building(target, mask, cell_size, center, box_size, 0.0, box_height, "flat")
        paint = mask
    else:
        rows, cols, inside = _rasterize_rect_mask((n, n), cell_size, center, box_size, 0.0)
        paint[rows, cols] |= inside
    rng = np.random.default_rng(seed)
    albedo = np.full((n, n), ground_albedo)
    albedo[paint] = roof_albedo
    if noise_amplitude > 0:
        albedo = albedo + noise_amplitude * _smooth_noise(rng, (n, n), 1.5)
    albedo = ndimage.gaussian_filter(albedo, ALBEDO_SMOOTH_SIGMA, mode="reflect")
    albedo = np.clip(albedo, 0.02, 0.98)
    dem = HeightField(target, 0.0, 0.0, cell_size)
    return SceneTruth(
        spec=spec,
        target_dem=dem,
        render_surface=dem.copy(),
        building_mask=mask,
        tree_mask=np.zeros((n, n), dtype=bool),
        albedo=GrayImage(albedo),
    )


# ---------------------------------------------------------------------------
# acquisition constellation
# ---------------------------------------------------------------------------


def sun_from_angles(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


def make_acquisitions(
    n: int,
    azimuth_range: tuple[float, float] = (0.0, 360.0),
    off_nadir_range: tuple[float, float] = (4.0, 25.0),
    time_range: tuple[float, float] = (0.0, 900.0),
    seed: int = 0,
    cell_size: float = 0.25,
    sun_elevation_range: tuple[float, float] = (35.0, 70.0),
) -> list[AffineCamera]:
    """Sample an acquisition constellation of ``n`` affine cameras."""
    if n < 2:
        raise ValueError("need at least two acquisitions")
    for name, (lo, hi) in (
        ("azimuth_range", azimuth_range),
        ("off_nadir_range", off_nadir_range),
        ("time_range", time_range),
        ("sun_elevation_range", sun_elevation_range),
    ):
        if hi < lo:
            raise ValueError(f"empty {name}")
    rng = np.random.default_rng(seed)
    cams = []
    for _ in range(n):
        azimuth = rng.uniform(*azimuth_range) % 360.0
        off_nadir = rng.uniform(*off_nadir_range)
        timestamp = rng.uniform(*time_range)
        sun = sun_from_angles(rng.uniform(0.0, 360.0), rng.uniform(*sun_elevation_range))
        cams.append(
            make_affine_camera(
                azimuth_deg=azimuth,
                off_nadir_deg=off_nadir,
                cell_size=cell_size,
                sun_direction=sun,
                timestamp_days=timestamp,
            )
        )
    return cams


def intersection_angle_deg(cam_a: AffineCamera, cam_b: AffineCamera) -> float:
    """Angle between the two viewing rays, in degrees."""
    dot = float(np.dot(cam_a.ray_direction(), cam_b.ray_direction()))
    return math.degrees(math.acos(min(1.0, max(-1.0, dot))))


# ---------------------------------------------------------------------------
# shading and shadows
# ---------------------------------------------------------------------------


def surface_normals(values: np.ndarray, cell_size: float) -> np.ndarray:
    """Unit normals from central differences, shape (H, W, 3)."""
    dzdy, dzdx = np.gradient(values, cell_size)
    n = np.stack([-dzdx, -dzdy, np.ones_like(values)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return n


def shadow_mask(surface: np.ndarray, cell_size: float, sun_direction: np.ndarray) -> np.ndarray:
    """True where the surface point is shadowed by other surface.

    The raster is resampled onto a grid rotated so the sun azimuth points
    along +x; along each row a point is shadowed iff the running maximum of
    h - x*tan(elevation) further down-sun exceeds its own value.
    """
    sx, sy, sz = (float(v) for v in sun_direction)
    horiz = math.hypot(sx, sy)
    if horiz < 1e-12:
        return np.zeros(surface.shape, dtype=bool)
    tan_elev = sz / horiz
    h, w = surface.shape
    az = math.atan2(sy, sx)
    ca, sa = math.cos(az), math.sin(az)

    # rotated sampling grid, sized to cover the original raster
    diag = int(math.ceil(math.hypot(h, w))) + 2
    ii = np.arange(diag) - diag / 2.0
    gx, gy = np.meshgrid(ii, ii)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cols = cx + gx * ca - gy * sa
    rows = cy + gx * sa + gy * ca
    heights, hvalid = bilinear_sample(surface, cols, rows)
    heights[~hvalid] = -np.inf

    # suffix running max along -x (down-sun side), excluding the cell itself
    g = heights - gx * cell_size * tan_elev
    suffix = np.full_like(g, -np.inf)
    suffix[:, :-1] = np.maximum.accumulate(g[:, ::-1], axis=1)[:, ::-1][:, 1:]
    shadowed_rot = suffix > g + SHADOW_CLEARANCE_M

    # resample the rotated mask back onto the original grid
    oc, orr = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dx = oc - cx
    dy = orr - cy
    rc = (dx * ca + dy * sa) + diag / 2.0
    rr = (-dx * sa + dy * ca) + diag / 2.0
    vals, ok = bilinear_sample(shadowed_rot.astype(np.float64), rc, rr)
    return (vals > 0.5) & ok


def shade_surface(scene: SceneTruth, sun_direction: np.ndarray) -> np.ndarray:
    """Shaded color raster on the scene grid for one sun position."""
    surface = scene.render_surface.values
    cell = scene.spec.cell_size
    normals = surface_normals(surface, cell)
    incidence = np.clip(normals @ np.asarray(sun_direction, dtype=np.float64), 0.0, None)
    lit = ~shadow_mask(surface, cell, sun_direction)
    light = AMBIENT + (1.0 - AMBIENT) * incidence * lit
    color = scene.albedo.values * light
    color = ndimage.gaussian_filter(color, COLOR_SMOOTH_SIGMA, mode="nearest")
    return np.clip(color, 0.0, 1.0)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _scene_pixel_bounds(scene: SceneTruth, cam: AffineCamera) -> tuple[float, float, float, float]:
    zmin, zmax = scene.height_bounds()
    ext = scene.spec.extent_m
    corners = []
    for x in (0.0, ext):
        for y in (0.0, ext):
            for z in (zmin - 1.0, zmax + 1.0):
                corners.append((x, y, z))
    uv = cam.project(np.asarray(corners))
    return uv[:, 0].min(), uv[:, 0].max(), uv[:, 1].min(), uv[:, 1].max()


def frame_camera(cam: AffineCamera, scene: SceneTruth, margin_px: float = 2.0) -> AffineCamera:
    """Shift the pixel offset so the scene projects into positive pixels.

    The extra half-pixel shift makes nadir pixel centers coincide with DEM
    cell centers, which keeps nadir renders and warps resampling-free.
    """
    u_min, _, v_min, _ = _scene_pixel_bounds(scene, cam)
    b = cam.b - np.array([u_min, v_min]) + (margin_px - 0.5)
    return AffineCamera(
        A=cam.A.copy(),
        b=b,
        sun_direction=cam.sun_direction.copy(),
        azimuth_deg=cam.azimuth_deg,
        off_nadir_deg=cam.off_nadir_deg,
        timestamp_days=cam.timestamp_days,
    )


def _march_bilinear(vals: np.ndarray, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Fast float32 bilinear with -inf outside the raster."""
    h, w = vals.shape
    inside = (cols >= 0) & (rows >= 0) & (cols <= w - 1) & (rows <= h - 1)
    c0 = np.clip(cols.astype(np.int32), 0, w - 2)
    r0 = np.clip(rows.astype(np.int32), 0, h - 2)
    fc = np.clip(cols - c0, 0.0, 1.0)
    fr = np.clip(rows - r0, 0.0, 1.0)
    top = vals[r0, c0] * (1 - fc) + vals[r0, c0 + 1] * fc
    bot = vals[r0 + 1, c0] * (1 - fc) + vals[r0 + 1, c0 + 1] * fc
    out = top * (1 - fr) + bot * fr
    out[~inside] = -np.inf
    return out


def render_view(scene: SceneTruth, cam: AffineCamera, image_size: tuple[int, int] | None = None) -> GrayImage:
    """Render the scene through an affine camera.

    Every pixel traces its viewing ray against ``render_surface`` from the
    top of the scene downward, so occlusion in the imagery is exact. The
    surface color comes from one shaded raster per (scene, sun), which makes
    two renders with equal geometry differ in shading only. Pixels whose
    rays miss the scene are flagged invalid.
    """
    cell = scene.spec.cell_size
    surface32 = scene.render_surface.values.astype(np.float32)
    color = shade_surface(scene, cam.sun_direction)

    u_min, u_max, v_min, v_max = _scene_pixel_bounds(scene, cam)
    if image_size is None:
        width = int(math.ceil(u_max + 2.0)) + 1
        height = int(math.ceil(v_max + 2.0)) + 1
    else:
        height, width = image_size
    zmin, zmax = scene.height_bounds()
    zmin -= 0.5
    zmax += 0.5

    ray = cam.ray_direction()
    ray = ray / -ray[2]  # scale so one unit of descent moves (rx, ry)
    rx, ry = ray[0], ray[1]

    # invert the pixel mapping at a reference height, then descend: the 2x2
    # block of A acting on (X, Y) is invertible because A has rank 2 and the
    # ray is not horizontal
    M = cam.A[:, :2]
    Minv = np.linalg.inv(M)
    us, vs = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    rhs = np.stack([us - cam.b[0] - cam.A[0, 2] * zmax, vs - cam.b[1] - cam.A[1, 2] * zmax], axis=-1)
    xy_top = rhs @ Minv.T
    x_top = xy_top[..., 0].astype(np.float32)
    y_top = xy_top[..., 1].astype(np.float32)

    tan_total = math.hypot(rx, ry)
    if tan_total < 1e-9:
        cols, rows = scene.render_surface.world_to_cell(x_top, y_top)
        z_hit = _march_bilinear(surface32, cols.astype(np.float32), rows.astype(np.float32))
        hit = np.isfinite(z_hit)
        x_hit, y_hit = x_top, y_top
    else:
        dz = min(cell / (2.0 * tan_total), (zmax - zmin) / 8.0)
        steps = int(math.ceil((zmax - zmin) / dz)) + 1
        z_hit = np.full((height, width), np.nan, dtype=np.float32)
        hit = np.zeros((height, width), dtype=bool)
        z_prev = np.float32(zmax)
        cols = (x_top / cell - 0.5).astype(np.float32)
        rows = (y_top / cell - 0.5).astype(np.float32)
        f_prev = _march_bilinear(surface32, cols, rows) - z_prev
        dcol = np.float32(rx * dz / cell)
        drow = np.float32(ry * dz / cell)
        for k in range(1, steps + 1):
            z = np.float32(zmax - k * dz)
            cols = cols + dcol
            rows = rows + drow
            f = _march_bilinear(surface32, cols, rows) - z
            crossing = ~hit & (f >= 0) & (f_prev < 0) & np.isfinite(f_prev)
            if crossing.any():
                fp = f_prev[crossing]
                t = fp / (fp - f[crossing])
                z_hit[crossing] = z_prev + (z - z_prev) * t
                hit |= crossing
            f_prev = f
            z_prev = z
            if hit.all():
                break
        x_hit = x_top + rx * (zmax - z_hit)
        y_hit = y_top + ry * (zmax - z_hit)

    out = np.zeros((height, width))
    if hit.any():
        ccols = x_hit[hit] / cell - 0.5
        crows = y_hit[hit] / cell - 0.5
        vals, ok = bilinear_sample(color, ccols, crows)
        sampled = np.zeros_like(vals)
        sampled[ok] = vals[ok]
        out[hit] = np.clip(sampled, 0.0, 1.0)
        valid = np.zeros((height, width), dtype=bool)
        idx = np.flatnonzero(hit)
        valid.flat[idx[ok]] = True
    else:
        valid = np.zeros((height, width), dtype=bool)
    return GrayImage(out, valid)
