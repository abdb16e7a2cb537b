"""Patch-based training loop for the residual refinement network.

The scene is split into five vertical stripes (three train, one validation,
one test). Training draws random 128x128 patches from the train stripes,
augments them with dihedral transforms, and optimizes a masked L1 loss with
hand-rolled Adam. The best-validation state is what gets checkpointed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .network import (
    AdamState,
    Unet,
    UnetConfig,
    adam_step,
    default_widths,
    l1_loss,
    save_checkpoint,
)
from .raster import GrayImage, HeightField, NormalizationStats, normalize_heights
from .scene import intersection_angle_deg
from .warping import Variant, build_input_stack

# pair-selection thresholds: intersection angle window, incidence cap, and
# the period for time-of-year differences
INTERSECTION_MIN_DEG = 10.0
INTERSECTION_MAX_DEG = 28.0
OFF_NADIR_MAX_DEG = 40.0
TIME_PERIOD_DAYS = 180.0

# published training hyperparameters; desk-scale defaults differ (see
# TrainConfig) because tiny synthetic datasets under-train at lr 1e-5
PAPER_LR = 1e-5
PAPER_BATCH_SIZE = 20

STRIPE_COUNT = 5
TRAIN_STRIPES = (0, 1, 2)
VAL_STRIPE = 3
TEST_STRIPE = 4


# ---------------------------------------------------------------------------
# configuration and data bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run."""

    variant: Variant = Variant.STEREO
    lr: float = 1e-4
    batch_size: int = 8
    weight_decay: float = 1e-5
    max_steps: int = 400
    seed: int = 0
    augment_rotations: bool = True
    augment_flips: bool = True
    eval_every: int = 25
    levels: int = 5
    channel_widths: tuple[int, ...] | None = None
    val_patch_cap: int = 12

    def __post_init__(self) -> None:
        if not isinstance(self.variant, Variant):
            raise ValueError("variant must be a Variant")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.levels < 1:
            raise ValueError("levels must be at least 1")
        if self.val_patch_cap < 1:
            raise ValueError("val_patch_cap must be at least 1")
        if self.channel_widths is not None:
            object.__setattr__(self, "channel_widths", tuple(self.channel_widths))

    @property
    def patch_size(self) -> int:
        return 4 * 2**self.levels

    def network_config(self) -> UnetConfig:
        widths = self.channel_widths or default_widths(self.levels)
        return UnetConfig(
            in_channels=self.variant.in_channels,
            levels=self.levels,
            channel_widths=tuple(widths),
            patch_size=self.patch_size,
            residual=self.variant.residual,
        )


@dataclass(frozen=True)
class StripeSplit:
    """Five vertical stripes over the raster width: three train, one val, one test."""

    width: int

    def __post_init__(self) -> None:
        if self.width < STRIPE_COUNT:
            raise ValueError("raster too narrow for five stripes")

    @property
    def boundaries(self) -> tuple[int, ...]:
        return tuple(i * self.width // STRIPE_COUNT for i in range(STRIPE_COUNT + 1))

    def bounds(self, stripe: int) -> tuple[int, int]:
        b = self.boundaries
        return b[stripe], b[stripe + 1]

    def role_bounds(self, role: str) -> tuple[tuple[int, int], ...]:
        stripes = {
            "train": TRAIN_STRIPES,
            "val": (VAL_STRIPE,),
            "test": (TEST_STRIPE,),
        }.get(role)
        if stripes is None:
            raise ValueError(f"unknown stripe role: {role!r}")
        return tuple(self.bounds(s) for s in stripes)

    def columns(self, role: str) -> np.ndarray:
        parts = [np.arange(lo, hi) for lo, hi in self.role_bounds(role)]
        return np.concatenate(parts)

    def column_mask(self, role: str) -> np.ndarray:
        mask = np.zeros(self.width, dtype=bool)
        mask[self.columns(role)] = True
        return mask


@dataclass
class TrainingData:
    """Full-scene rasters shared by every patch: input DEM, target, ortho views."""

    initial: HeightField
    target: HeightField
    images: tuple[GrayImage, ...]
    split: StripeSplit
    stats: NormalizationStats

    def __post_init__(self) -> None:
        self.images = tuple(self.images)
        if not self.initial.same_grid(self.target):
            raise ValueError("initial and target DEMs must share a grid")
        for img in self.images:
            if img.values.shape != self.initial.values.shape:
                raise ValueError("ortho views must share the DEM grid")
        if self.split.width != self.initial.width:
            raise ValueError("stripe split width must match the DEM width")


def training_stats(initial: HeightField, split: StripeSplit) -> NormalizationStats:
    """Height normalization from the train stripes only (no val/test leakage)."""
    cols = split.column_mask("train")
    vals = initial.values[:, cols]
    good = ~initial.nodata_mask[:, cols]
    if not good.any():
        raise ValueError("no valid cells in the train stripes")
    mean = float(vals[good].mean())
    # floor guards degenerate flat scenes
    std = max(float(vals[good].std()), 1e-3)
    return NormalizationStats(mean_height=mean, std_height=std)


def make_training_data(
    initial: HeightField,
    target: HeightField,
    images: tuple[GrayImage, ...] = (),
    stats: NormalizationStats | None = None,
) -> TrainingData:
    split = StripeSplit(initial.width)
    if stats is None:
        stats = training_stats(initial, split)
    return TrainingData(initial, target, tuple(images), split, stats)


# ---------------------------------------------------------------------------
# stereo-pair selection
# ---------------------------------------------------------------------------


def time_gap_days(t_a: float, t_b: float) -> float:
    """Acquisition-time difference folded into the seasonal half-period."""
    m = abs(t_a - t_b) % TIME_PERIOD_DAYS
    return min(m, TIME_PERIOD_DAYS - m)


def select_stereo_pair(cameras) -> tuple[int, int]:
    """Pick the admissible pair with the smallest seasonal time gap.

    Admissible pairs have an intersection angle within [10, 28] degrees and
    both off-nadir angles at most 40 degrees. Ties resolve to the
    lexicographically smallest index pair.
    """
    if len(cameras) < 2:
        raise ValueError("need at least two cameras")
    best: tuple[int, int] | None = None
    best_gap = math.inf
    for i in range(len(cameras)):
        for j in range(i + 1, len(cameras)):
            a, b = cameras[i], cameras[j]
            if abs(a.off_nadir_deg) > OFF_NADIR_MAX_DEG:
                continue
            if abs(b.off_nadir_deg) > OFF_NADIR_MAX_DEG:
                continue
            angle = intersection_angle_deg(a, b)
            if not INTERSECTION_MIN_DEG <= angle <= INTERSECTION_MAX_DEG:
                continue
            gap = time_gap_days(a.timestamp_days, b.timestamp_days)
            if gap < best_gap:
                best = (i, j)
                best_gap = gap
    if best is None:
        raise ValueError(
            f"no admissible stereo pair among {len(cameras)} cameras "
            f"(need intersection angle in [{INTERSECTION_MIN_DEG:g}, "
            f"{INTERSECTION_MAX_DEG:g}] deg and off-nadir <= {OFF_NADIR_MAX_DEG:g} deg)"
        )
    return best


# ---------------------------------------------------------------------------
# patch sampling and augmentation
# ---------------------------------------------------------------------------


@dataclass
class PatchSample:
    """One training example: input stack, normalized target, loss mask."""

    stack: np.ndarray
    target: np.ndarray
    valid: np.ndarray
    row0: int
    col0: int
    pair_index: int = 0


def apply_dihedral(values: np.ndarray, rotation_k: int, flip: bool) -> np.ndarray:
    """Rotate by rotation_k quarter turns, then optionally flip the last axis."""
    out = np.rot90(values, rotation_k % 4, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(
    sample: PatchSample,
    rng: np.random.Generator,
    rotations: bool = True,
    flips: bool = True,
) -> PatchSample:
    """Apply one random dihedral transform to all channels and the target.

    With both toggles on, the draw is uniform over the eight elements of the
    dihedral group (four rotations times an optional flip).
    """
    k = int(rng.integers(4)) if rotations else 0
    flip = bool(rng.integers(2)) if flips else False
    return PatchSample(
        stack=apply_dihedral(sample.stack, k, flip),
        target=apply_dihedral(sample.target, k, flip),
        valid=apply_dihedral(sample.valid, k, flip),
        row0=sample.row0,
        col0=sample.col0,
        pair_index=sample.pair_index,
    )


class PatchSampler:
    """Crops patches from precomputed full-scene stacks.

    Training crops come from the train stripes and draw their ortho pair from
    ``pair_pool``; the validation grid always uses the held-out pair carried
    by ``data.images``.
    """

    def __init__(
        self,
        data: TrainingData,
        variant: Variant,
        patch_size: int,
        pair_pool=None,
    ) -> None:
        if pair_pool is None:
            pair_pool = [data.images]
        if not pair_pool:
            raise ValueError("pair pool must not be empty")
        if len(data.images) < variant.image_count:
            raise ValueError("data bundle lacks ortho views for the variant")
        self.data = data
        self.variant = variant
        self.patch = int(patch_size)
        self.stacks = [self._stack_for(data, variant, pair) for pair in pair_pool]
        self.val_stack = self._stack_for(data, variant, data.images)
        norm_target = normalize_heights(data.target, data.stats)
        self.target = np.where(norm_target.nodata_mask, 0.0, norm_target.values).astype(
            np.float32
        )
        self.valid = ~(data.initial.nodata_mask | data.target.nodata_mask)

        self._row_count = data.initial.height - self.patch + 1
        if self._row_count < 1:
            raise ValueError("raster shorter than the patch size")
        self._col_starts: list[tuple[int, int]] = []
        total = 0
        for lo, hi in data.split.role_bounds("train"):
            count = hi - lo - self.patch + 1
            if count > 0:
                self._col_starts.append((lo, count))
                total += count
        if total == 0:
            raise ValueError("train stripes narrower than the patch size")
        self._total_cols = total

    @staticmethod
    def _stack_for(data: TrainingData, variant: Variant, pair) -> np.ndarray:
        images = tuple(pair)[: variant.image_count] + (None, None)
        return build_input_stack(data.initial, images[0], images[1], variant, data.stats)

    def _patch_from(self, stack: np.ndarray, row0: int, col0: int, pair_index: int) -> PatchSample:
        p = self.patch
        window = (slice(row0, row0 + p), slice(col0, col0 + p))
        return PatchSample(
            stack=np.ascontiguousarray(stack[(slice(None),) + window]),
            target=self.target[window].copy(),
            valid=self.valid[window].copy(),
            row0=row0,
            col0=col0,
            pair_index=pair_index,
        )

    def sample(
        self, rng: np.random.Generator, pair_rng: np.random.Generator | None = None
    ) -> PatchSample:
        """Uniform crop over all patch positions inside single train stripes."""
        k = int(rng.integers(self._total_cols))
        col0 = 0
        for lo, count in self._col_starts:
            if k < count:
                col0 = lo + k
                break
            k -= count
        row0 = int(rng.integers(self._row_count))
        idx = 0
        if len(self.stacks) > 1:
            if pair_rng is None:
                raise ValueError("pair_rng is required with more than one pair")
            idx = int(pair_rng.integers(len(self.stacks)))
        return self._patch_from(self.stacks[idx], row0, col0, idx)

    def val_patches(self, cap: int) -> list[PatchSample]:
        """Deterministic non-overlapping grid over the validation stripe."""
        p = self.patch
        (lo, hi), = self.data.split.role_bounds("val")
        if hi - lo < p:
            raise ValueError("validation stripe narrower than the patch size")
        positions = [
            (r, c)
            for r in range(0, self.data.initial.height - p + 1, p)
            for c in range(lo, hi - p + 1, p)
        ]
        if len(positions) > cap:
            picks = np.unique(np.linspace(0, len(positions) - 1, cap).round().astype(int))
            positions = [positions[i] for i in picks]
        return [self._patch_from(self.val_stack, r, c, 0) for r, c in positions]


def sample_patch(
    sampler: PatchSampler,
    rng: np.random.Generator,
    pair_rng: np.random.Generator | None = None,
) -> PatchSample:
    """Draw one training patch (see PatchSampler.sample)."""
    return sampler.sample(rng, pair_rng)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""

    def __init__(self, step: int, loss: float, lr: float) -> None:
        super().__init__(
            f"training diverged at step {step}: loss {loss!r} with lr {lr:g}; "
            "lower the learning rate or check the input normalization"
        )
        self.step = step
        self.loss = loss
        self.lr = lr


@dataclass
class LogRow:
    """One run-log record; val_mae is filled only on evaluation steps."""

    step: int
    train_loss: float | None
    val_mae: float | None


@dataclass
class TrainResult:
    """Best-validation weights plus the full run log."""

    state: dict
    net_config: UnetConfig
    variant: Variant
    stats: NormalizationStats
    log: list[LogRow] = field(default_factory=list)
    best_val_mae: float = math.inf
    best_step: int = 0
    initial_val_mae: float = math.inf

    def build_model(self) -> Unet:
        model = Unet(self.net_config)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def save(self, path, extra: dict | None = None) -> None:
        record = {
            "best_val_mae": self.best_val_mae,
            "best_step": self.best_step,
            "initial_val_mae": self.initial_val_mae,
        }
        record.update(extra or {})
        save_checkpoint(path, self.state, self.net_config, self.variant, self.stats, record)


def write_run_log(path, log: list[LogRow]) -> None:
    """CSV run log: step, train_loss, val_mae (blank when not recorded)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "train_loss", "val_mae"])
        for row in log:
            writer.writerow(
                [
                    row.step,
                    "" if row.train_loss is None else repr(row.train_loss),
                    "" if row.val_mae is None else repr(row.val_mae),
                ]
            )


def evaluate_patches(model: Unet, samples: list[PatchSample], stats: NormalizationStats) -> float:
    """Mean absolute error in meters over the valid cells of the given patches."""
    was_training = model.training
    model.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, len(samples), 8):
            chunk = samples[start : start + 8]
            x = torch.from_numpy(np.stack([s.stack for s in chunk]))
            pred = model(x).numpy()[:, 0]
            for k, s in enumerate(chunk):
                diff = np.abs(pred[k][s.valid] - s.target[s.valid])
                total += float(diff.sum())
                count += int(s.valid.sum())
    if was_training:
        model.train()
    if count == 0:
        return math.nan
    return total / count * stats.std_height


def _snapshot(model: Unet) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _train_core(config: TrainConfig, data: TrainingData, pair_pool) -> TrainResult:
    torch.set_num_threads(1)
    if data.stats.mode != "absolute":
        raise ValueError("training expects absolute height normalization")
    for pair in pair_pool:
        if len(pair) < config.variant.image_count:
            raise ValueError("pair pool entry has too few images for the variant")

    net_cfg = config.network_config()
    torch.manual_seed(config.seed)
    model = Unet(net_cfg)
    model.train()

    sampler = PatchSampler(data, config.variant, net_cfg.patch_size, pair_pool)
    rng_patch = np.random.default_rng([config.seed, 11])
    rng_aug = np.random.default_rng([config.seed, 22])
    rng_pair = np.random.default_rng([config.seed, 33])
    val_samples = sampler.val_patches(config.val_patch_cap)

    params = dict(model.named_parameters())
    adam = AdamState()

    mae0 = evaluate_patches(model, val_samples, data.stats)
    result = TrainResult(
        state=_snapshot(model),
        net_config=net_cfg,
        variant=config.variant,
        stats=data.stats,
        log=[LogRow(0, None, mae0)],
        best_val_mae=mae0,
        best_step=0,
        initial_val_mae=mae0,
    )

    do_augment = config.augment_rotations or config.augment_flips
    for step in range(1, config.max_steps + 1):
        batch = []
        for _ in range(config.batch_size):
            s = sampler.sample(rng_patch, rng_pair)
            if do_augment:
                s = augment(s, rng_aug, config.augment_rotations, config.augment_flips)
            batch.append(s)
        x = torch.from_numpy(np.stack([s.stack for s in batch]))
        y = torch.from_numpy(np.stack([s.target for s in batch]))[:, None]
        m = torch.from_numpy(np.stack([s.valid for s in batch]))[:, None]

        pred = model(x)
        loss = l1_loss(pred, y, m)
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            raise TrainingDiverged(step, loss_value, config.lr)
        model.zero_grad()
        loss.backward()
        grads = {k: p.grad for k, p in params.items()}
        adam = adam_step(params, grads, adam, lr=config.lr, weight_decay=config.weight_decay)

        val_mae = None
        if step % config.eval_every == 0 or step == config.max_steps:
            val_mae = evaluate_patches(model, val_samples, data.stats)
            if val_mae < result.best_val_mae:
                result.best_val_mae = val_mae
                result.best_step = step
                result.state = _snapshot(model)
        result.log.append(LogRow(step, loss_value, val_mae))
    return result


def train(config: TrainConfig, data: TrainingData) -> TrainResult:
    """Train one refiner on the held-out pair carried by ``data``.

    Deterministic under a fixed seed; checkpoints the best-validation state;
    aborts with TrainingDiverged when the loss stops being finite.
    """
    return _train_core(config, data, [data.images])


def train_generalized(config: TrainConfig, data: TrainingData, pair_pool) -> TrainResult:
    """Train with each patch paired against a uniform draw from ``pair_pool``.

    Validation stays on the held-out pair in ``data.images``. A pool with a
    single entry equal to that pair behaves exactly like ``train``.
    """
    return _train_core(config, data, list(pair_pool))
