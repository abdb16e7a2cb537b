"""Initial-DEM quality vs matcher settings, with refinement headroom."""

import dataclasses
import sys
import time

import numpy as np
import torch

torch.set_num_threads(1)

from stereorefine.config import MatcherConfig, default_config
from stereorefine.matching import median_filter
from stereorefine.metrics import compute_metrics
from stereorefine.pipeline import prepare_run, tiled_inference, train_stage

WIDTHS = (16, 32, 64, 96, 128)


def run(tag, matcher_kwargs, lr=1e-3, steps=1500):
    base = default_config()
    config = dataclasses.replace(
        base,
        matcher=MatcherConfig(**matcher_kwargs),
        train=dataclasses.replace(
            base.train, channel_widths=WIDTHS, lr=lr, max_steps=steps, eval_every=50
        ),
    )
    t0 = time.perf_counter()
    prepared = prepare_run(config)
    print(f"[{tag}] prepare {time.perf_counter() - t0:.0f} s", flush=True)

    test_mask = prepared.data.split.column_mask("test")
    off_test = np.broadcast_to(~test_mask, prepared.initial.values.shape)

    def report(dem):
        return compute_metrics(
            dem,
            prepared.scene.target_dem,
            prepared.scene.building_mask,
            off_test,
            config.eval.trunc,
        ).overall

    r = report(prepared.initial)
    print(f"[{tag}] initial mae {r.mae:.3f} rmse {r.rmse:.3f} medae {r.medae:.3f}", flush=True)
    r = report(median_filter(prepared.initial))
    print(f"[{tag}] median  mae {r.mae:.3f}", flush=True)

    tree = prepared.scene.tree_mask
    target = prepared.scene.target_dem.values
    init_tree = np.abs(prepared.initial.values - target)[tree].mean()

    init_mae = report(prepared.initial).mae
    for name in ("zero", "mono", "stereo"):
        t0 = time.perf_counter()
        result = train_stage(config, prepared, [name])[name]
        dt = time.perf_counter() - t0
        refined = tiled_inference(result, prepared.initial, prepared.orthos)
        r = report(refined)
        extra = ""
        if name == "stereo":
            ref_tree = np.abs(refined.values - target)[tree].mean()
            extra = (
                f", ratio {r.mae / init_mae:.3f}, tree {ref_tree:.3f}/{init_tree:.3f}"
                f" ({ref_tree / init_tree:.3f})"
            )
        print(f"[{tag}] {name} mae {r.mae:.3f} ({dt:.0f}s){extra}", flush=True)


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "paths4"
    settings = {
        "paths4": dict(path_count=4),
        "paths4win3": dict(path_count=4, census_window=3),
        "paths4p2lo": dict(path_count=4, p2=24),
        "win3": dict(census_window=3),
    }
    run(which, settings[which])
