from __future__ import annotations

import sys
from pathlib import Path

import pytest

# Repo is a collection of scripts plus the `tactile` package, not an installed distribution.
# Make project root importable for pytest.
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from dataset_forge import DatasetConfig, generate  # noqa: E402
from tactile.contact_mechanics import Indenter  # noqa: E402
from tactile.photometric_renderer import CameraModel, SensorInstance  # noqa: E402
from tactile.shell_geometry import ShellGeometry  # noqa: E402

SMALL = 64


@pytest.fixture(scope="session")
def geom() -> ShellGeometry:
    return ShellGeometry()


@pytest.fixture(scope="session")
def small_camera() -> CameraModel:
    return CameraModel(image_size=SMALL)


@pytest.fixture(scope="session")
def small_sensor(small_camera: CameraModel) -> SensorInstance:
    return SensorInstance.create("small", "RRRGGGBBB", markers=False, seed=0, perturb=False, camera=small_camera)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory: pytest.TempPathFactory, small_sensor: SensorInstance):
    """Two sphere sizes, 4 episodes each, 64 px images."""
    cfg = DatasetConfig(
        name="tiny",
        output_dir=tmp_path_factory.mktemp("tiny"),
        sensors=(small_sensor,),
        indenters=(Indenter.sphere(3.0), Indenter.sphere(5.0)),
        episodes_per_indenter=4,
        frames=4,
        seed=7,
    )
    return generate(cfg)
