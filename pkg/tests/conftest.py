import numpy as np
import pytest
from guided_wost.scene import load_scene
from guided_wost.presets import get_preset
from guided_wost.geom2d import build_accel


def square_doc(left="dirichlet", right="dirichlet", edges="neumann"):
    return {
        "bbox": {"min": [0, 0], "max": [1, 1]},
        "epsilon_shell": 1e-4,
        "values": {
            "zero": {"type": "constant", "value": 0.0},
            "one": {"type": "constant", "value": 1.0},
        },
        "segments": [
            {"a": [0, 0], "b": [1, 0], "kind": edges, "value": "zero"},
            {"a": [1, 0], "b": [1, 1], "kind": right, "value": "one"},
            {"a": [1, 1], "b": [0, 1], "kind": edges, "value": "zero"},
            {"a": [0, 1], "b": [0, 0], "kind": left, "value": "zero"},
        ],
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def square_scene():
    return load_scene(square_doc())


@pytest.fixture
def dirichlet_square():
    return load_scene(square_doc(edges="dirichlet"))


@pytest.fixture
def harmonic_disk():
    return get_preset("harmonic-disk").scene()


@pytest.fixture
def square_accel(square_scene):
    return build_accel(square_scene)
