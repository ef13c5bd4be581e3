import sys
from importlib.resources import files
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))

from make_meshes import lshape, periodic_cell  # noqa: E402

from csahomog.material import MaterialParams  # noqa: E402
from csahomog.mesh import load_mesh, match_periodic  # noqa: E402
from csahomog.micro import MicroProblem  # noqa: E402

DATA = files("csahomog") / "data"
MATRIX = MaterialParams(5.7e9, 1.35e9)
INCLUSION = MaterialParams(43.21e9, 28.46e9)
MATERIALS = {1: MATRIX, 2: INCLUSION}


def random_F(rng, n, scale=0.2):
    """Random in-plane deformation gradients with det F > 0."""
    F = np.eye(2) + scale * rng.standard_normal((n, 2, 2))
    bad = np.linalg.det(F) <= 0.2
    while bad.any():
        F[bad] = np.eye(2) + scale * rng.standard_normal((int(bad.sum()), 2, 2))
        bad = np.linalg.det(F) <= 0.2
    return F


@pytest.fixture(scope="session")
def small_problem():
    """6x6 two-phase cell, 70 reduced unknowns."""
    return MicroProblem(match_periodic(periodic_cell(6)), MATERIALS)


@pytest.fixture(scope="session")
def cell81_problem():
    return MicroProblem(match_periodic(load_mesh(DATA / "cell_81.mesh")), MATERIALS)


@pytest.fixture(scope="session")
def homogeneous_problem():
    return MicroProblem(match_periodic(periodic_cell(6, single_region=True)), {1: MATRIX})


@pytest.fixture(scope="session")
def lshape_mesh():
    return lshape()
