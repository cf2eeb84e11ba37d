import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from invlab.core import DataCondition, FTLevel, ImageSample
from invlab.dataio import Pipeline, synthetic_faces
from invlab.desk import pool_specs
from invlab.pipeline import DataConfig, MetricConfig, ReconConfig, StageCache, default_manifest, run_experiment
from invlab.zoo import ExtractorSpec, LayerSpec, train_extractor

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def rand_image(rng, h=64, w=64, c=3, sid="s0", kid="k0"):
    return ImageSample(rng.random((h, w, c)).astype(np.float32), sid, kid)


def tiny_spec(model_id="tiny", activation="relu", length=16, bn=False):
    layers = (LayerSpec("conv1", "conv", 4, 3, 1, activation, True, bn),
              LayerSpec("conv2", "conv", 8, 3, 1, activation, True),
              LayerSpec("emb", "dense", length, activation=activation))
    spec = ExtractorSpec(model_id, layers, input_size=(64, 64, 3), pretraining="test")
    sizes = spec.layer_sizes()
    return ExtractorSpec(model_id, layers, tuple((l, sizes[l]) for l in spec.layer_ids), (64, 64, 3), "test")


@pytest.fixture(scope="session")
def small_faces():
    """6 subjects x 6 samples of desk faces."""
    return synthetic_faces(0, range(6), range(6), Pipeline.A, 64)


@pytest.fixture(scope="session")
def tiny_phi(small_faces):
    return train_extractor(tiny_spec(), small_faces, seed=0, epochs=1)


# ---------------------------------------------------------------------------
# Desk world: one cached pipeline run shared by slow tests and the acceptance module.


def _cache_root(tmp_path_factory) -> Path:
    env = os.environ.get("INVLAB_TEST_CACHE")
    return Path(env) if env else tmp_path_factory.mktemp("stage-cache")


@pytest.fixture(scope="session")
def stage_cache(tmp_path_factory):
    return StageCache(_cache_root(tmp_path_factory))


DESK_DATA = DataConfig(target_samples=10)
DESK_METRICS = MetricConfig(ensemble=(1, 5))


def desk_manifest(seed=0, in_pool=True, ft_level=FTLevel.NO_ADAPT, out="runs/desk", **kw):
    target = "cnn-a" if in_pool else "cnn-a-bn"
    return default_manifest(f"desk-{seed}-{target}-{FTLevel.parse(ft_level).label}",
                            DataCondition.SAME_PREPROCESSING, ft_level, target, in_pool, seed, str(out),
                            data=DESK_DATA, metrics=DESK_METRICS, **kw)


@pytest.fixture(scope="session")
def desk_runner(stage_cache, tmp_path_factory):
    """Callable (seed, in_pool, ft_level, mode) -> (report, artifacts); memoized per session."""
    out_root = tmp_path_factory.mktemp("desk-runs")
    memo = {}

    def run(seed=0, in_pool=True, ft_level=FTLevel.NO_ADAPT, mode="attack"):
        key = (seed, in_pool, FTLevel.parse(ft_level), mode)
        if key not in memo:
            kw = {"recon": ReconConfig(mode=mode)} if mode != "attack" else {}
            name = f"s{seed}-{'in' if in_pool else 'out'}-{key[2].label}-{mode}"
            m = desk_manifest(seed, in_pool, ft_level, out=out_root / name, **kw)
            memo[key] = run_experiment(m, stage_cache)
        return memo[key]

    return run


@pytest.fixture(scope="session")
def desk_run(desk_runner):
    return desk_runner(0, True)


@pytest.fixture(scope="session")
def desk_pool_specs():
    return pool_specs()


# ---------------------------------------------------------------------------
# One summary line per acceptance criterion, printed at the end of the session.

ACCEPTANCE_LINES: dict = {}


def record_criterion(label: str, passed: bool, detail: str):
    line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES[label] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for label in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[label])
