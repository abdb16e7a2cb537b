"""Pipeline orchestration: scene synthesis through the comparison table.

Stages run in order (synth, match, warp, train, refine, iterate, eval,
report); every file an earlier stage wrote stays on disk when a later one
fails, and each output is recorded in a manifest with its content hash and
producing stage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import METHOD_ORDER, TRAINABLE_VARIANTS, PipelineConfig, dump_config
from .figures import save_height_map, save_loss_curves, save_method_comparison
from .matching import match_scene, median_filter
from .metrics import MetricsReport, compute_metrics, emit_table
from .network import Checkpoint, Unet
from .raster import (
    AffineCamera,
    GrayImage,
    HeightField,
    denormalize_heights,
    write_height_pfm,
    write_pfm,
    write_png,
)
from .scene import SceneTruth, frame_camera, generate_scene, render_view
from .training import (
    StripeSplit,
    TrainingData,
    TrainResult,
    select_stereo_pair,
    train,
    training_stats,
    write_run_log,
)
from .warping import Variant, build_input_stack, ortho_rectify

# overlap exceeds half the per-level receptive-field growth at five levels
TILE_OVERLAP_CELLS = 16
# the second-round network must be trained independently of the first
ITERATION_SEED_OFFSET = 101


class PipelineError(RuntimeError):
    """Stage-tagged failure; outputs written before the failure remain."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, str(exc)) from exc


# ---------------------------------------------------------------------------
# run directory and manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunPaths:
    """Canonical run-directory layout."""

    root: Path

    @property
    def inputs(self) -> Path:
        return self.root / "inputs"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def rasters(self) -> Path:
        return self.root / "rasters"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @classmethod
    def create(cls, root) -> "RunPaths":
        paths = cls(Path(root))
        for sub in (paths.root, paths.inputs, paths.checkpoints, paths.rasters, paths.reports):
            sub.mkdir(parents=True, exist_ok=True)
        return paths


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def sha256_array(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()


class RunManifest:
    """Content hashes of every stage output, persisted after each record."""

    def __init__(self, path) -> None:
        self.path = Path(path)
        self.entries: dict[str, dict] = {}

    def record(self, stage: str, file_path) -> str:
        file_path = Path(file_path)
        digest = sha256_file(file_path)
        rel = str(file_path.relative_to(self.path.parent))
        self.entries[rel] = {"stage": stage, "sha256": digest}
        self.flush()
        return digest

    def flush(self) -> None:
        with open(self.path, "w") as f:
            json.dump(self.entries, f, indent=2, sort_keys=True)
            f.write("\n")


# ---------------------------------------------------------------------------
# tiled inference
# ---------------------------------------------------------------------------


def _reflect_pad(stack: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    # np.pad caps reflection at size-1 per call; loop for rasters smaller
    # than the requested margin
    top, bottom, left, right = pads
    out = stack
    while top or bottom or left or right:
        h, w = out.shape[1], out.shape[2]
        if h == 1 and (top or bottom) or w == 1 and (left or right):
            mode = "edge"
            t, b, l, r = top, bottom, left, right
        else:
            mode = "reflect"
            t, b = min(top, h - 1), min(bottom, h - 1)
            l, r = min(left, w - 1), min(right, w - 1)
        out = np.pad(out, ((0, 0), (t, b), (l, r)), mode=mode)
        top, bottom, left, right = top - t, bottom - b, left - l, right - r
    return out


def tiled_forward(
    model: Unet,
    stack: np.ndarray,
    tile: int | None = None,
    overlap: int = TILE_OVERLAP_CELLS,
    batch_size: int = 4,
) -> np.ndarray:
    """Run the network over a full CxHxW stack in overlapping tiles.

    Tiles step by (tile - 2*overlap); only that center region of each tile is
    written, so seams fall where a neighboring tile provides full context.
    A raster no larger than one tile runs as a single reflect-padded tile,
    so a raster of exactly tile size equals the direct forward pass.
    """
    torch.set_num_threads(1)
    if stack.ndim != 3:
        raise ValueError("expected a CxHxW stack")
    tile = int(tile or model.cfg.patch_size)
    stride = 2**model.cfg.levels
    if tile % stride:
        raise ValueError(f"tile must be a multiple of {stride}")
    _, h, w = stack.shape
    stack = stack.astype(np.float32, copy=False)

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if h <= tile and w <= tile:
                padded = _reflect_pad(stack, (0, tile - h, 0, tile - w))
                pred = model.run_raster(torch.from_numpy(padded[None])).numpy()
                return pred[0, 0, :h, :w]

            core = tile - 2 * overlap
            if core <= 0:
                raise ValueError("overlap too large for the tile size")
            ny = math.ceil(h / core)
            nx = math.ceil(w / core)
            padded = _reflect_pad(
                stack,
                (overlap, ny * core - h + overlap, overlap, nx * core - w + overlap),
            )
            origins = [(ty * core, tx * core) for ty in range(ny) for tx in range(nx)]
            out = np.zeros((ny * core, nx * core), dtype=np.float32)
            for start in range(0, len(origins), batch_size):
                chunk = origins[start : start + batch_size]
                batch = np.stack([padded[:, r : r + tile, c : c + tile] for r, c in chunk])
                pred = model.run_raster(torch.from_numpy(batch)).numpy()[:, 0]
                for k, (r, c) in enumerate(chunk):
                    out[r : r + core, c : c + core] = pred[
                        k, overlap : overlap + core, overlap : overlap + core
                    ]
            return out[:h, :w]
    finally:
        if was_training:
            model.train()


def _unpack_refiner(checkpoint):
    if isinstance(checkpoint, TrainResult):
        return checkpoint.build_model(), checkpoint.net_config, checkpoint.variant, checkpoint.stats
    if isinstance(checkpoint, Checkpoint):
        model = Unet(checkpoint.config)
        model.load_state_dict(checkpoint.state)
        model.eval()
        return model, checkpoint.config, checkpoint.variant, checkpoint.stats
    raise TypeError("expected a TrainResult or Checkpoint")


def tiled_inference(
    checkpoint,
    dem: HeightField,
    images: tuple[GrayImage, ...] = (),
    tile: int | None = None,
    overlap: int | None = None,
) -> HeightField:
    """Apply a trained refiner to a full DEM raster tile by tile."""
    model, cfg, variant, stats = _unpack_refiner(checkpoint)
    images = tuple(images) + (None, None)
    stack = build_input_stack(dem, images[0], images[1], variant, stats)
    tile = int(tile or cfg.patch_size)
    if overlap is None:
        overlap = min(TILE_OVERLAP_CELLS, tile // 4)
    pred = tiled_forward(model, stack, tile=tile, overlap=overlap)
    normalized = HeightField(
        pred.astype(np.float64), dem.origin_x, dem.origin_y, dem.cell_size, dem.nodata_mask.copy()
    )
    return denormalize_heights(normalized, stats)


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------


@dataclass
class IterationResult:
    """Second refinement round: intermediate DEM, re-warped inputs, final DEM."""

    dem_1: HeightField
    dem_2: HeightField
    second: TrainResult
    orthos: tuple[GrayImage, GrayImage]
    provenance: dict[str, str]


def iterate_refinement(
    first,
    images: tuple[GrayImage, GrayImage],
    cameras,
    dem_0: HeightField,
    target: HeightField,
    train_config,
) -> IterationResult:
    """Refine once, re-warp from the improved DEM, train and apply a second net.

    The second network is trained from scratch (shifted seed) on inputs
    re-warped with dem_1; the provenance hashes pin exactly which rasters fed
    it.
    """
    _, _, variant, _ = _unpack_refiner(first)
    orthos_0 = tuple(ortho_rectify(img, cam, dem_0) for img, cam in zip(images, cameras))
    dem_1 = tiled_inference(first, dem_0, orthos_0)
    orthos_1 = tuple(ortho_rectify(img, cam, dem_1) for img, cam in zip(images, cameras))
    provenance = {
        "dem_1": sha256_array(dem_1.values),
        "ortho_a_from_dem_1": sha256_array(orthos_1[0].values),
        "ortho_b_from_dem_1": sha256_array(orthos_1[1].values),
    }
    split = StripeSplit(dem_1.width)
    data = TrainingData(dem_1, target, orthos_1, split, training_stats(dem_1, split))
    second_config = dataclasses.replace(
        train_config, variant=variant, seed=train_config.seed + ITERATION_SEED_OFFSET
    )
    second = train(second_config, data)
    dem_2 = tiled_inference(second, dem_1, orthos_1)
    return IterationResult(dem_1, dem_2, second, orthos_1, provenance)


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass
class PreparedRun:
    """Shared state after the synth, match, and warp stages."""

    scene: SceneTruth
    cameras: list
    pair: tuple[int, int]
    framed: tuple
    views: tuple[GrayImage, GrayImage]
    orthos: tuple[GrayImage, GrayImage]
    initial: HeightField
    data: TrainingData


@dataclass
class RunResult:
    """Everything a finished pipeline run produced."""

    config: PipelineConfig
    paths: RunPaths | None
    prepared: PreparedRun
    train_results: dict[str, TrainResult] = field(default_factory=dict)
    iteration: IterationResult | None = None
    refined: dict[str, HeightField] = field(default_factory=dict)
    reports: list[tuple[str, MetricsReport]] = field(default_factory=list)
    table_csv: str = ""


def _write_gray(path, image: GrayImage) -> None:
    write_pfm(path, image.values, ~image.validity_mask)


def _record_height(manifest: RunManifest | None, stage: str, path) -> None:
    # height PFMs carry a georeference sidecar; track both
    if manifest is not None:
        manifest.record(stage, path)
        manifest.record(stage, Path(str(path) + ".json"))


def _test_stripe_report(prepared: PreparedRun, dem: HeightField, trunc: float) -> MetricsReport:
    # evaluation is confined to the held-out test stripe by excluding the rest
    test_mask = prepared.data.split.column_mask("test")
    off_test = np.broadcast_to(~test_mask, prepared.initial.values.shape)
    return compute_metrics(
        dem,
        prepared.scene.target_dem,
        prepared.scene.building_mask,
        off_test,
        trunc,
    )


def camera_record(cam) -> dict:
    return {
        "A": cam.A.tolist(),
        "b": cam.b.tolist(),
        "sun_direction": cam.sun_direction.tolist(),
        "azimuth_deg": cam.azimuth_deg,
        "off_nadir_deg": cam.off_nadir_deg,
        "timestamp_days": cam.timestamp_days,
    }


def camera_from_record(record: dict) -> AffineCamera:
    return AffineCamera(**record)


def synth_stage(config: PipelineConfig, paths=None, manifest=None):
    """Generate the scene and camera constellation; write inputs/."""
    with _stage("synth"):
        scene = generate_scene(config.scene)
        cameras = config.cameras.build(config.scene.cell_size)
        if paths is not None:
            write_height_pfm(paths.inputs / "target_dem.pfm", scene.target_dem)
            _record_height(manifest, "synth", paths.inputs / "target_dem.pfm")
            np.savez_compressed(
                paths.inputs / "masks.npz",
                building=scene.building_mask,
                tree=scene.tree_mask,
            )
            with open(paths.inputs / "cameras.json", "w") as f:
                json.dump([camera_record(cam) for cam in cameras], f, indent=2)
            if manifest is not None:
                manifest.record("synth", paths.inputs / "masks.npz")
                manifest.record("synth", paths.inputs / "cameras.json")
    return scene, cameras


def match_stage(config: PipelineConfig, scene, cameras, paths=None, manifest=None):
    """Pick the stereo pair and reconstruct the initial DEM."""
    with _stage("match"):
        pair = select_stereo_pair(cameras)
        initial = match_scene(
            scene,
            cameras[pair[0]],
            cameras[pair[1]],
            config.matcher.params(),
            config.matcher.d_margin_px,
        )
        if paths is not None:
            write_height_pfm(paths.rasters / "initial.pfm", initial)
            _record_height(manifest, "match", paths.rasters / "initial.pfm")
    return pair, initial


def warp_stage(config: PipelineConfig, scene, cameras, pair, initial, paths=None, manifest=None):
    """Render the pair's views and ortho-rectify them onto the initial DEM."""
    with _stage("warp"):
        framed = tuple(frame_camera(cameras[k], scene) for k in pair)
        views = tuple(render_view(scene, cam) for cam in framed)
        orthos = tuple(ortho_rectify(img, cam, initial) for img, cam in zip(views, framed))
        split = StripeSplit(initial.width)
        data = TrainingData(
            initial, scene.target_dem, orthos, split, training_stats(initial, split)
        )
        if paths is not None:
            with open(paths.inputs / "cameras_framed.json", "w") as f:
                json.dump([camera_record(cam) for cam in framed], f, indent=2)
            if manifest is not None:
                manifest.record("warp", paths.inputs / "cameras_framed.json")
            for tag, view, ortho in zip("ab", views, orthos):
                write_png(paths.inputs / f"view_{tag}.png", view)
                _write_gray(paths.inputs / f"view_{tag}.pfm", view)
                _write_gray(paths.rasters / f"ortho_{tag}.pfm", ortho)
                if manifest is not None:
                    manifest.record("warp", paths.inputs / f"view_{tag}.png")
                    manifest.record("warp", paths.inputs / f"view_{tag}.pfm")
                    manifest.record("warp", paths.rasters / f"ortho_{tag}.pfm")
    return framed, views, orthos, data


def prepare_run(
    config: PipelineConfig,
    paths: RunPaths | None = None,
    manifest: RunManifest | None = None,
) -> PreparedRun:
    """Run the synth, match, and warp stages."""
    scene, cameras = synth_stage(config, paths, manifest)
    pair, initial = match_stage(config, scene, cameras, paths, manifest)
    framed, views, orthos, data = warp_stage(
        config, scene, cameras, pair, initial, paths, manifest
    )
    return PreparedRun(scene, cameras, pair, framed, views, orthos, initial, data)


def train_stage(
    config: PipelineConfig,
    prepared: PreparedRun,
    names,
    paths: RunPaths | None = None,
    manifest: RunManifest | None = None,
) -> dict[str, TrainResult]:
    """Train one network per listed variant; repeats reuse the first run."""
    results: dict[str, TrainResult] = {}
    for name in names:
        if name in results:
            continue
        with _stage("train"):
            run_config = dataclasses.replace(config.train, variant=Variant(name))
            result = train(run_config, prepared.data)
            results[name] = result
            if paths is not None:
                ckpt = paths.checkpoints / f"{name}.ckpt"
                result.save(ckpt)
                log = paths.reports / f"train_{name}.csv"
                write_run_log(log, result.log)
                if manifest is not None:
                    manifest.record("train", ckpt)
                    manifest.record("train", log)
    return results


def run_pipeline(config: PipelineConfig, out_dir) -> RunResult:
    """Full run: synth, match, warp, train, iterate, eval, report."""
    paths = RunPaths.create(out_dir)
    manifest = RunManifest(paths.root / "manifest.json")
    with open(paths.root / "config.yaml", "w") as f:
        f.write(dump_config(config))
    manifest.record("synth", paths.root / "config.yaml")

    prepared = prepare_run(config, paths, manifest)
    result = RunResult(config=config, paths=paths, prepared=prepared)

    trainable = [v for v in config.variants if v in TRAINABLE_VARIANTS]
    result.train_results = train_stage(config, prepared, trainable, paths, manifest)

    with _stage("refine"):
        for name, tr in result.train_results.items():
            refined = tiled_inference(tr, prepared.initial, prepared.orthos)
            result.refined[name] = refined
            write_height_pfm(paths.rasters / f"refined_{name}.pfm", refined)
            _record_height(manifest, "refine", paths.rasters / f"refined_{name}.pfm")

    if "stereo_iter" in config.variants:
        with _stage("iterate"):
            iteration = iterate_refinement(
                result.train_results["stereo"],
                prepared.views,
                prepared.framed,
                prepared.initial,
                prepared.scene.target_dem,
                config.train,
            )
            result.iteration = iteration
            result.refined["stereo_iter"] = iteration.dem_2
            for tag, ortho in zip("ab", iteration.orthos):
                _write_gray(paths.rasters / f"ortho_iter_{tag}.pfm", ortho)
                manifest.record("iterate", paths.rasters / f"ortho_iter_{tag}.pfm")
            ckpt = paths.checkpoints / "stereo_iter.ckpt"
            iteration.second.save(ckpt, extra={"provenance": iteration.provenance})
            manifest.record("iterate", ckpt)
            write_run_log(paths.reports / "train_stereo_iter.csv", iteration.second.log)
            manifest.record("iterate", paths.reports / "train_stereo_iter.csv")
            write_height_pfm(paths.rasters / "refined_stereo_iter.pfm", iteration.dem_2)
            _record_height(manifest, "iterate", paths.rasters / "refined_stereo_iter.pfm")

    with _stage("eval"):
        result.refined["median"] = median_filter(prepared.initial)
        result.refined["initial"] = prepared.initial
        rows = [
            (name, _test_stripe_report(prepared, result.refined[name], config.eval.trunc))
            for name in METHOD_ORDER
            if name in result.refined
        ]
        result.reports = rows
        result.table_csv = emit_table(rows)
        with open(paths.reports / "metrics.csv", "w", newline="") as f:
            f.write(result.table_csv)
        manifest.record("eval", paths.reports / "metrics.csv")

    with _stage("report"):
        logs = {name: tr.log for name, tr in result.train_results.items()}
        if result.iteration is not None:
            logs["stereo_iter"] = result.iteration.second.log
        if logs:
            fig = save_loss_curves(paths.reports / "loss_curves.png", logs)
            manifest.record("report", fig)
        fig = save_method_comparison(paths.reports / "method_comparison.png", result.reports)
        manifest.record("report", fig)
        fig = save_height_map(paths.rasters / "initial.png", prepared.initial, "initial DEM")
        manifest.record("report", fig)
        fig = save_height_map(
            paths.rasters / "target.png", prepared.scene.target_dem, "target DEM"
        )
        manifest.record("report", fig)
        best = next((n for n in ("stereo_iter", "stereo") if n in result.refined), None)
        if best is not None:
            fig = save_height_map(
                paths.rasters / f"refined_{best}.png", result.refined[best], f"refined ({best})"
            )
            manifest.record("report", fig)

    return result


def run_ablation(config: PipelineConfig, variant_list, out_dir=None):
    """Train the listed variants with identical data, seed, and budget.

    Returns (rows, train_results); rows keep the given order, and repeated
    names reuse the deterministic first run.
    """
    for name in variant_list:
        if name not in TRAINABLE_VARIANTS:
            raise ValueError(f"ablation variants must be trainable, got {name!r}")
    paths = RunPaths.create(out_dir) if out_dir is not None else None
    manifest = RunManifest(paths.root / "manifest.json") if paths is not None else None
    prepared = prepare_run(config, paths, manifest)
    results = train_stage(config, prepared, list(dict.fromkeys(variant_list)), paths, manifest)

    refined = {
        name: tiled_inference(results[name], prepared.initial, prepared.orthos)
        for name in dict.fromkeys(variant_list)
    }
    rows = [
        (name, _test_stripe_report(prepared, refined[name], config.eval.trunc))
        for name in variant_list
    ]
    if paths is not None:
        with open(paths.reports / "ablation.csv", "w", newline="") as f:
            f.write(emit_table(rows))
        if manifest is not None:
            manifest.record("eval", paths.reports / "ablation.csv")
    return rows, results
