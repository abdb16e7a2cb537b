import pytest

from stereorefine.config import (
    CameraConfig,
    EvalConfig,
    MatcherConfig,
    PipelineConfig,
)
from stereorefine.scene import SceneSpec
from stereorefine.training import TrainConfig


def make_tiny_config(variants=("zero",), **train_overrides) -> PipelineConfig:
    """Small scene and network so a full pipeline run takes seconds."""
    train = dict(
        levels=2,
        channel_widths=(8, 16),
        batch_size=4,
        max_steps=30,
        eval_every=10,
        lr=2e-3,
    )
    train.update(train_overrides)
    return PipelineConfig(
        scene=SceneSpec(seed=5, extent_m=48.0, building_count=3),
        cameras=CameraConfig(count=6, seed=1),
        matcher=MatcherConfig(),
        train=TrainConfig(**train),
        eval=EvalConfig(),
        variants=variants,
    )


@pytest.fixture
def tiny_config():
    return make_tiny_config()


# acceptance tests register one (name, passed, detail) entry per criterion
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, passed, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {name}: {status} ({detail})")
