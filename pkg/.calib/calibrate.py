"""Benchmark calibration: stage timings plus criterion 6-9 quantities."""

import dataclasses
import sys
import time

import numpy as np
import torch

torch.set_num_threads(1)

from stereorefine.config import default_config
from stereorefine.matching import median_filter
from stereorefine.metrics import compute_metrics
from stereorefine.pipeline import (
    iterate_refinement,
    prepare_run,
    tiled_inference,
    train_stage,
)

WIDTHS = tuple(int(w) for w in sys.argv[1].split(",")) if len(sys.argv) > 1 else None
STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else None


def main():
    config = default_config()
    if WIDTHS is not None:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, channel_widths=WIDTHS)
        )
    if STEPS is not None:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, max_steps=STEPS)
        )
    print(f"train config: {config.train}", flush=True)

    t0 = time.perf_counter()
    prepared = prepare_run(config)
    print(f"prepare_run: {time.perf_counter() - t0:.1f} s", flush=True)

    test_mask = prepared.data.split.column_mask("test")
    off_test = np.broadcast_to(~test_mask, prepared.initial.values.shape)

    def stripe_report(dem):
        return compute_metrics(
            dem,
            prepared.scene.target_dem,
            prepared.scene.building_mask,
            off_test,
            config.eval.trunc,
        )

    reports = {
        "initial": stripe_report(prepared.initial),
        "median": stripe_report(median_filter(prepared.initial)),
    }

    results = {}
    timings = {}
    refined = {}
    for name in ("zero", "mono", "stereo", "unet_stereo"):
        t0 = time.perf_counter()
        results[name] = train_stage(config, prepared, [name])[name]
        timings[name] = time.perf_counter() - t0
        t0 = time.perf_counter()
        refined[name] = tiled_inference(results[name], prepared.initial, prepared.orthos)
        infer_s = time.perf_counter() - t0
        reports[name] = stripe_report(refined[name])
        print(
            f"{name}: train {timings[name]:.0f} s, infer {infer_s:.0f} s, "
            f"best val MAE {results[name].best_val_mae:.3f}",
            flush=True,
        )

    t0 = time.perf_counter()
    iteration = iterate_refinement(
        results["stereo"],
        prepared.views,
        prepared.framed,
        prepared.initial,
        prepared.scene.target_dem,
        config.train,
    )
    timings["stereo_iter"] = time.perf_counter() - t0
    refined["stereo_iter"] = iteration.dem_2
    reports["stereo_iter"] = stripe_report(iteration.dem_2)
    print(f"stereo_iter: total {timings['stereo_iter']:.0f} s", flush=True)

    print("\ntest-stripe overall MAE (trunc 20):")
    for name in ("initial", "median", "zero", "mono", "stereo", "unet_stereo", "stereo_iter"):
        r = reports[name]
        print(
            f"  {name:12s} mae {r.overall.mae:7.3f}  rmse {r.overall.rmse:7.3f}  "
            f"medae {r.overall.medae:7.3f}"
        )

    init = reports["initial"].overall.mae
    stereo = reports["stereo"].overall.mae
    print("\ncriterion checks:")
    print(
        f"  c6 stereo/initial = {stereo / init:.3f} (need <= 0.5), "
        f"train {timings['stereo']:.0f} s (budget 1800)"
    )
    maes = {n: reports[n].overall.mae for n in reports}
    chain = ["median", "zero", "mono", "stereo"]
    for hi, lo in zip(chain, chain[1:]):
        ratio = maes[lo] / maes[hi]
        print(f"  c7 {hi} >= {lo}: {maes[hi]:.3f} vs {maes[lo]:.3f} (lo/hi {ratio:.3f}, ok if <= 1.02)")
    print(f"  c7 unet_stereo/stereo = {maes['unet_stereo'] / stereo:.3f} (need >= 1.5)")
    print(f"  c8 stereo_iter/stereo = {maes['stereo_iter'] / stereo:.3f} (need <= 1.05)")

    tree = prepared.scene.tree_mask
    target = prepared.scene.target_dem.values
    tree_init = np.abs(prepared.initial.values - target)[tree].mean()
    tree_ref = np.abs(refined["stereo"].values - target)[tree].mean()
    print(
        f"  c9 tree MAE refined {tree_ref:.3f} vs initial {tree_init:.3f} "
        f"(ratio {tree_ref / tree_init:.3f}, need <= 0.5)"
    )


if __name__ == "__main__":
    main()
