from pathlib import Path

import pytest

from obsfusion.models import (
    DEFAULT_CAMERA_XI,
    Box,
    CameraModel,
    ExtrinsicsSE3,
    SceneSpec,
    Trajectory,
)
from obsfusion.simulator import simulate_sequence


@pytest.fixture
def schema_dir():
    return Path(__file__).resolve().parent.parent / "schema"


@pytest.fixture
def config_dir():
    return Path(__file__).resolve().parent / "config"


@pytest.fixture
def small_camera():
    return CameraModel(fx=200, fy=200, cx=160, cy=120, width=320, height=240)


@pytest.fixture
def default_xi():
    return ExtrinsicsSE3.from_vector(list(DEFAULT_CAMERA_XI))


@pytest.fixture
def box_scene(small_camera):
    """A half metre box about 8 m ahead, crossed by rings -9 and -11."""
    return SceneSpec(
        boxes=(Box(center=(0.0, 8.45, 0.25), size=(0.2, 0.5, 0.5)),),
        camera=small_camera,
        trajectory=Trajectory(n=3, step=0.5),
        seed=3,
    )


@pytest.fixture
def temporal_scene():
    """
    Box seen by ring -5 in frames 0-3; in frame 4 ring -5 passes over it
    and ring -7 already lands on the ground in front of it.
    """
    return SceneSpec(
        boxes=(Box(center=(0.0, 19.3, 0.165), size=(0.4, 0.2, 0.33)),),
        trajectory=Trajectory(n=5, step=0.9),
    )


@pytest.fixture
def sequence_dir(tmp_path, box_scene):
    out = tmp_path / "seq"
    simulate_sequence(box_scene, out)
    return out
