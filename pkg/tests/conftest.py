import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings
from scipy.spatial.transform import Rotation

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

REFLECT_Z = np.diag([1.0, 1.0, -1.0])


def random_motion(rng: np.random.Generator, reflect: bool = False, scale: float = 1.0):
    from equiflow.pga import RigidMotion

    r = Rotation.random(random_state=rng).as_matrix()
    if reflect:
        r = r @ REFLECT_Z
    return RigidMotion(r, scale * rng.normal(size=3))


def random_mv(rng: np.random.Generator, *shape) -> torch.Tensor:
    return torch.as_tensor(rng.normal(size=(*shape, 16)))


@pytest.fixture
def rng():
    return np.random.default_rng(20260101)


@pytest.fixture(scope="session")
def aero_sample():
    from equiflow.datasets import generate_dataset

    return generate_dataset("aero", {"x": 1}, "canonical", 5, 48, 96)["x"][0]


@pytest.fixture(scope="session")
def hemo_sample():
    from equiflow.datasets import generate_dataset

    return generate_dataset("hemo", {"x": 1}, "haar", 6, 48, 96)["x"][0]
