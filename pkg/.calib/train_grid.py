"""Train-budget grid on one prepared benchmark scene."""

import dataclasses
import time

import numpy as np
import torch

torch.set_num_threads(1)

from stereorefine.config import default_config
from stereorefine.metrics import compute_metrics
from stereorefine.pipeline import prepare_run, tiled_inference, train_stage

WIDTHS = (16, 32, 64, 96, 128)


def main():
    base = default_config()
    config = dataclasses.replace(
        base, train=dataclasses.replace(base.train, channel_widths=WIDTHS)
    )
    t0 = time.perf_counter()
    prepared = prepare_run(config)
    print(f"prepare_run: {time.perf_counter() - t0:.0f} s", flush=True)

    test_mask = prepared.data.split.column_mask("test")
    off_test = np.broadcast_to(~test_mask, prepared.initial.values.shape)

    def stripe_mae(dem):
        return compute_metrics(
            dem,
            prepared.scene.target_dem,
            prepared.scene.building_mask,
            off_test,
            config.eval.trunc,
        ).overall.mae

    init = stripe_mae(prepared.initial)
    print(f"initial stripe MAE {init:.3f}", flush=True)

    for lr, steps in ((1e-3, 1000), (3e-4, 1000), (1e-3, 2000)):
        cfg = dataclasses.replace(
            config,
            train=dataclasses.replace(
                config.train, lr=lr, max_steps=steps, eval_every=50
            ),
        )
        line = [f"lr={lr:g} steps={steps}:"]
        for name in ("zero", "mono", "stereo"):
            t0 = time.perf_counter()
            result = train_stage(cfg, prepared, [name])[name]
            dt = time.perf_counter() - t0
            refined = tiled_inference(result, prepared.initial, prepared.orthos)
            mae = stripe_mae(refined)
            line.append(f"{name} {mae:.3f} ({dt:.0f}s, val {result.best_val_mae:.3f})")
            print("  ".join(line), flush=True)


if __name__ == "__main__":
    main()
