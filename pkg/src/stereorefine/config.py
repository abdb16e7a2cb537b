"""Run configuration: one YAML file with per-stage sections.

Every section maps onto a dataclass; keys that match no field are rejected so
typos fail fast instead of silently running with defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import yaml

from .matching import SgmParams
from .scene import AlbedoSpec, SceneSpec, make_acquisitions
from .training import TrainConfig

TRAINABLE_VARIANTS = ("zero", "mono", "stereo", "unet_stereo")
VARIANT_CHOICES = TRAINABLE_VARIANTS + ("stereo_iter",)
# fixed row order of the comparison table
METHOD_ORDER = ("initial", "median", "unet_stereo", "zero", "mono", "stereo", "stereo_iter")


@dataclass(frozen=True)
class CameraConfig:
    """Acquisition constellation parameters."""

    count: int = 6
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    off_nadir_range: tuple[float, float] = (4.0, 25.0)
    time_range: tuple[float, float] = (0.0, 900.0)
    sun_elevation_range: tuple[float, float] = (35.0, 70.0)
    seed: int = 1

    def build(self, cell_size: float):
        return make_acquisitions(
            self.count,
            azimuth_range=self.azimuth_range,
            off_nadir_range=self.off_nadir_range,
            time_range=self.time_range,
            seed=self.seed,
            cell_size=cell_size,
            sun_elevation_range=self.sun_elevation_range,
        )


@dataclass(frozen=True)
class MatcherConfig:
    """Semi-global matcher parameters plus the disparity search margin."""

    census_window: int = 5
    p1: float = 6.0
    p2: float = 48.0
    path_count: int = 8
    lr_threshold: float = 1.0
    d_margin_px: int = 4

    def params(self) -> SgmParams:
        return SgmParams(
            census_window=self.census_window,
            p1=self.p1,
            p2=self.p2,
            path_count=self.path_count,
            lr_threshold=self.lr_threshold,
        )


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation thresholds."""

    trunc: float = 20.0


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one pipeline run needs, stage by stage."""

    scene: SceneSpec
    cameras: CameraConfig
    matcher: MatcherConfig
    train: TrainConfig
    eval: EvalConfig
    variants: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "variants", tuple(self.variants))
        if not self.variants:
            raise ValueError("variants list must not be empty")
        for name in self.variants:
            if name not in VARIANT_CHOICES:
                raise ValueError(
                    f"unknown variant {name!r}; choose from {', '.join(VARIANT_CHOICES)}"
                )
        if "stereo_iter" in self.variants:
            if "stereo" not in self.variants[: self.variants.index("stereo_iter")]:
                raise ValueError("stereo_iter requires stereo earlier in the variants list")


def _coerce(value, annotation: str):
    if isinstance(value, list) and annotation.startswith("tuple"):
        return tuple(value)
    return value


def _from_mapping(cls, section, name: str):
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(section) - set(fields)
    if unknown:
        raise ValueError(f"unknown key(s) in config section {name!r}: {sorted(unknown)}")
    kwargs = {}
    for key, value in section.items():
        if key == "albedo_spec" and isinstance(value, dict):
            value = _from_mapping(AlbedoSpec, value, f"{name}.albedo_spec")
        kwargs[key] = _coerce(value, str(fields[key].type))
    return cls(**kwargs)


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ValueError("config root must be a mapping")
    known = {"scene", "cameras", "matcher", "train", "eval", "variants"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    train_section = raw.get("train") or {}
    if not isinstance(train_section, dict):
        raise ValueError("config section 'train' must be a mapping")
    train_section = dict(train_section)
    if "variant" in train_section:
        raise ValueError("train.variant is set by the variants list, not the config file")
    return PipelineConfig(
        scene=_from_mapping(SceneSpec, raw.get("scene"), "scene"),
        cameras=_from_mapping(CameraConfig, raw.get("cameras"), "cameras"),
        matcher=_from_mapping(MatcherConfig, raw.get("matcher"), "matcher"),
        train=_from_mapping(TrainConfig, train_section, "train"),
        eval=_from_mapping(EvalConfig, raw.get("eval"), "eval"),
        variants=tuple(raw.get("variants") or default_variants()),
    )


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        raw = yaml.safe_load(f)
    return config_from_dict(raw or {})


def default_variants() -> tuple[str, ...]:
    return ("zero", "mono", "stereo", "unet_stereo", "stereo_iter")


def default_config() -> PipelineConfig:
    """Shipped benchmark defaults: 512 m scene, seed 7, equal-budget training."""
    return PipelineConfig(
        scene=SceneSpec(seed=7),
        cameras=CameraConfig(),
        matcher=MatcherConfig(),
        train=TrainConfig(batch_size=4, max_steps=300, eval_every=25),
        eval=EvalConfig(),
        variants=default_variants(),
    )


def reseed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    """Apply one global seed to every stage, for the CLI --seed flag."""
    return dataclasses.replace(
        cfg,
        scene=dataclasses.replace(cfg.scene, seed=seed),
        cameras=dataclasses.replace(cfg.cameras, seed=seed + 1),
        train=dataclasses.replace(cfg.train, seed=seed + 2),
    )


def config_to_dict(cfg: PipelineConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        return obj

    out = {
        "scene": plain(cfg.scene),
        "cameras": plain(cfg.cameras),
        "matcher": plain(cfg.matcher),
        "train": plain(cfg.train),
        "eval": plain(cfg.eval),
        "variants": list(cfg.variants),
    }
    out["train"].pop("variant", None)
    return out


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
