"""Command-line interface.

``stereorefine`` exposes each pipeline stage as a subcommand plus file-level
tools for applying checkpoints and scoring rasters. Subcommands that take a
config run the stage chain up to and including their own stage, writing into
the standard run layout (inputs/, checkpoints/, rasters/, reports/).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    TRAINABLE_VARIANTS,
    PipelineConfig,
    default_config,
    dump_config,
    load_config,
    reseed,
)
from .figures import save_residual_histograms
from .metrics import class_residuals, compute_metrics, emit_table
from .network import load_checkpoint
from .pipeline import (
    PipelineError,
    RunManifest,
    RunPaths,
    camera_from_record,
    iterate_refinement,
    match_stage,
    prepare_run,
    run_ablation,
    run_pipeline,
    synth_stage,
    tiled_inference,
    train_stage,
    warp_stage,
)
from .raster import GrayImage, read_height_pfm, read_pfm, write_height_pfm


def _config_from_args(args, apply_variants: bool = True) -> PipelineConfig:
    config = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        config = reseed(config, args.seed)
    if apply_variants and getattr(args, "variants", None):
        config = dataclasses.replace(config, variants=tuple(args.variants))
    return config


def _open_run(args, config: PipelineConfig):
    paths = RunPaths.create(args.out)
    manifest = RunManifest(paths.root / "manifest.json")
    with open(paths.root / "config.yaml", "w") as f:
        f.write(dump_config(config))
    manifest.record("synth", paths.root / "config.yaml")
    return paths, manifest


def _read_gray(path) -> GrayImage:
    values, nodata = read_pfm(path)
    return GrayImage(np.clip(values, 0.0, 1.0), ~nodata)


def cmd_synth(args) -> int:
    config = _config_from_args(args)
    paths, manifest = _open_run(args, config)
    synth_stage(config, paths, manifest)
    print(f"scene written to {paths.inputs}")
    return 0


def cmd_match(args) -> int:
    config = _config_from_args(args)
    paths, manifest = _open_run(args, config)
    scene, cameras = synth_stage(config, paths, manifest)
    pair, initial = match_stage(config, scene, cameras, paths, manifest)
    print(f"pair {pair}, initial DEM written to {paths.rasters / 'initial.pfm'}")
    return 0


def cmd_warp(args) -> int:
    config = _config_from_args(args)
    paths, manifest = _open_run(args, config)
    scene, cameras = synth_stage(config, paths, manifest)
    pair, initial = match_stage(config, scene, cameras, paths, manifest)
    warp_stage(config, scene, cameras, pair, initial, paths, manifest)
    print(f"ortho views written to {paths.rasters}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    paths, manifest = _open_run(args, config)
    prepared = prepare_run(config, paths, manifest)
    names = [v for v in config.variants if v in TRAINABLE_VARIANTS]
    results = train_stage(config, prepared, names, paths, manifest)
    for name, result in results.items():
        print(
            f"{name}: best val MAE {result.best_val_mae:.3f} m at step "
            f"{result.best_step} (initial {result.initial_val_mae:.3f} m)"
        )
    return 0


def cmd_refine(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    dem = read_height_pfm(args.dem)
    orthos = tuple(_read_gray(p) for p in args.ortho or ())
    refined = tiled_inference(
        checkpoint, dem, orthos, tile=args.tile, overlap=args.overlap
    )
    write_height_pfm(args.out, refined)
    print(f"refined DEM written to {args.out}")
    return 0


def cmd_iterate(args) -> int:
    paths = RunPaths(Path(args.run))
    config = load_config(paths.root / "config.yaml")
    checkpoint = load_checkpoint(paths.checkpoints / "stereo.ckpt")
    views = (
        _read_gray(paths.inputs / "view_a.pfm"),
        _read_gray(paths.inputs / "view_b.pfm"),
    )
    with open(paths.inputs / "cameras_framed.json") as f:
        framed = tuple(camera_from_record(rec) for rec in json.load(f))
    dem_0 = read_height_pfm(paths.rasters / "initial.pfm")
    target = read_height_pfm(paths.inputs / "target_dem.pfm")
    iteration = iterate_refinement(checkpoint, views, framed, dem_0, target, config.train)
    manifest = RunManifest(paths.root / "manifest.json")
    out = paths.rasters / "refined_stereo_iter.pfm"
    write_height_pfm(out, iteration.dem_2)
    manifest.record("iterate", out)
    manifest.record("iterate", Path(str(out) + ".json"))
    ckpt = paths.checkpoints / "stereo_iter.ckpt"
    iteration.second.save(ckpt, extra={"provenance": iteration.provenance})
    manifest.record("iterate", ckpt)
    print(f"second-round DEM written to {out}")
    return 0


def cmd_eval(args) -> int:
    pred = read_height_pfm(args.pred)
    truth = read_height_pfm(args.truth)
    building_mask = None
    if args.masks:
        with np.load(args.masks) as masks:
            building_mask = masks["building"]
    report = compute_metrics(pred, truth, building_mask, trunc=args.trunc)
    table = emit_table([(args.method, report)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(table)
    per_class, _, _ = class_residuals(pred, truth, building_mask, trunc=args.trunc)
    save_residual_histograms(
        out / "residual_histograms.png", per_class, args.trunc, title=args.method
    )
    sys.stdout.write(table)
    return 0


def cmd_pipeline(args) -> int:
    config = _config_from_args(args)
    result = run_pipeline(config, args.out)
    sys.stdout.write(result.table_csv)
    return 0


def cmd_ablate(args) -> int:
    config = _config_from_args(args, apply_variants=False)
    rows, _ = run_ablation(config, tuple(args.variants), args.out)
    sys.stdout.write(emit_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereorefine",
        description="Residual stereo refinement of gridded height models.",
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="override every stage seed (staggered)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    for name, func, help_text in (
        ("synth", cmd_synth, "generate the scene, cameras, and ground truth"),
        ("match", cmd_match, "synth, then reconstruct the initial DEM"),
        ("warp", cmd_warp, "synth and match, then ortho-rectify the views"),
        ("train", cmd_train, "prepare data and train the configured variants"),
        ("pipeline", cmd_pipeline, "run every stage and write the metrics table"),
    ):
        p = add(name, func, help_text)
        p.add_argument("--config", help="YAML config file (defaults built in)")
        p.add_argument("--out", required=True, help="run directory")
        if name in ("train", "pipeline"):
            p.add_argument(
                "--variants", nargs="+", metavar="NAME", help="override the variants list"
            )

    p = add("refine", cmd_refine, "apply a checkpoint to a DEM raster tile by tile")
    p.add_argument("--checkpoint", required=True, help="trained network file")
    p.add_argument("--dem", required=True, help="input DEM (PFM with JSON sidecar)")
    p.add_argument(
        "--ortho", action="append", metavar="PFM", help="ortho view, repeat per image"
    )
    p.add_argument("--out", required=True, help="output DEM path (PFM)")
    p.add_argument("--tile", type=int, default=None, help="tile size in cells")
    p.add_argument("--overlap", type=int, default=None, help="tile overlap in cells")

    p = add("iterate", cmd_iterate, "second refinement round on an existing run")
    p.add_argument("--run", required=True, help="run directory holding a stereo checkpoint")

    p = add("eval", cmd_eval, "score a refined DEM against a target DEM")
    p.add_argument("--pred", required=True, help="refined DEM (PFM)")
    p.add_argument("--truth", required=True, help="target DEM (PFM)")
    p.add_argument("--masks", help="NPZ with a 'building' mask")
    p.add_argument("--trunc", type=float, default=20.0, help="truncation threshold [m]")
    p.add_argument("--method", default="refined", help="row label for the table")
    p.add_argument("--out", required=True, help="report directory")

    p = add("ablate", cmd_ablate, "train several variants on identical data")
    p.add_argument("--config", help="YAML config file (defaults built in)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument(
        "--variants", nargs="+", required=True, metavar="NAME", help="variants to train"
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
