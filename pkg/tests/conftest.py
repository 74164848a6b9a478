import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from prefpose.diffusion import build_schedule
from prefpose.skeleton import GenConfig, generate_dataset

from helpers import SeedRun

ACCEPT_SEEDS = (7, 8, 9)

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(GenConfig(n_samples=24), 5, "unit")


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def accept_runs(tmp_path_factory):
    """Default-config CLI runs for the acceptance seeds, built step by step on demand.

    They go to a temporary directory unless ``PREFPOSE_ACCEPT_DIR`` is set, in
    which case completed steps are reused on the next invocation.
    """
    env = os.environ.get("PREFPOSE_ACCEPT_DIR")
    base = Path(env) if env else tmp_path_factory.mktemp("accept")
    base.mkdir(parents=True, exist_ok=True)
    return {s: SeedRun(base, s) for s in ACCEPT_SEEDS}
