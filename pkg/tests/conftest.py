import pytest
import torch

from isoneural import case_path
from isoneural.geometry import load_geometry, model_from_dict
from isoneural.splinecore import make_patch

torch.set_num_threads(1)


def square(pid, x0, y0, sx=1.0, sy=1.0):
    return {"id": pid, "dim": 2, "degrees": [1, 1], "knots": [[0, 0, 1, 1], [0, 0, 1, 1]],
            "control_points": [[[x0, y0], [x0, y0 + sy]], [[x0 + sx, y0], [x0 + sx, y0 + sy]]]}


@pytest.fixture
def lshape():
    return load_geometry(case_path("lshape.json"))


@pytest.fixture
def identity2d():
    return make_patch([1, 1], [[-1, -1, 1, 1]] * 2, [[[-1, -1], [-1, 1]], [[1, -1], [1, 1]]])


@pytest.fixture
def affine2d():
    """Maps [-1, 1]^2 onto [0, 2] x [0, 1]."""
    return make_patch([1, 1], [[0, 0, 1, 1]] * 2, [[[0, 0], [0, 1]], [[2, 0], [2, 1]]])


@pytest.fixture
def annulus():
    return load_geometry(case_path("quarter_annulus.json")).patches[1]


def two_squares(dirichlet=()):
    return model_from_dict({"patches": [square(1, 0, 0), square(2, 1, 0)],
                            "boundaries": [{"patch_id": p, "facet": f, "type": "dirichlet", "value": 0}
                                           for p, f in dirichlet]})
