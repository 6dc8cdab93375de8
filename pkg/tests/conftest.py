import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from occflow import geometry, synthbuild


@pytest.fixture(scope="session")
def cube_mesh() -> geometry.TriangleMesh:
    mesh = synthbuild.generate_building(synthbuild.BuildingSpec(1.0, 1.0, 1.0, roof="flat"))
    mesh.vertices = mesh.vertices - np.array([0.0, 0.0, 0.5])  # center at origin
    return mesh


@pytest.fixture(scope="session")
def gabled_mesh() -> geometry.TriangleMesh:
    spec = synthbuild.BuildingSpec(width=12.0, depth=8.0, height=5.0, roof="gabled", pitch_deg=40.0)
    return synthbuild.generate_building(spec)


@pytest.fixture(scope="session")
def gabled_normalized(gabled_mesh):
    mesh, tf = geometry.normalize_to_unit_cube(gabled_mesh)
    return mesh


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Sixteen procedural records shared by the fast module tests."""
    root = tmp_path_factory.mktemp("data16")
    return synthbuild.build_dataset(16, root, seed=21)
