import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sagalab.backend import AnalyticBackend, NeglectModel, build_scene_dataset, make_prompts
from sagalab.schedule import make_schedule

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def vp():
    return make_schedule("vp-diffusion")


@pytest.fixture(scope="session")
def flow():
    return make_schedule("linear-flow")


@pytest.fixture(scope="session")
def small_world():
    """Two-entity prompts on a small grid with mixing neglect."""
    rng = np.random.default_rng(3)
    prompts = make_prompts(4, 2, 6, rng)
    lib, _ = build_scene_dataset(6, (4, 8, 8), 1.0, prompts, 4, np.random.default_rng(4),
                                 neglect=NeglectModel(0.5, "mix"), attention_gain=0.1)
    return prompts, lib


@pytest.fixture(scope="session")
def small_backend(small_world, vp):
    return AnalyticBackend(small_world[1], vp)
