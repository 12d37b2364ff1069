"""Shared fixtures: cached preset geometries and assembled operators."""

from __future__ import annotations

import functools

import numpy as np
import pytest

from cywbench import geometry, operators
from cywbench.constants import DimensionConstants

CST = DimensionConstants(3)


@functools.lru_cache(maxsize=None)
def preset(preset_id: str, refinement: int):
    """Cached preset build; treat the result as read-only."""
    return geometry.build_preset(preset_id, refinement)


@functools.lru_cache(maxsize=None)
def assembled(preset_id: str, refinement: int, bc_mode: str = "closed"):
    mesh, geom = preset(preset_id, refinement)
    return operators.assemble(mesh, geom, CST, bc_mode=bc_mode)


@pytest.fixture(scope="session")
def constants():
    return CST


@pytest.fixture(scope="session")
def round_s3_r2():
    return preset("round-s3", 2)


@pytest.fixture(scope="session")
def flat_t3_r2():
    return preset("flat-t3", 2)


@pytest.fixture(scope="session")
def ball_negr_r2():
    return preset("ball-negR", 2)


def constant_field(mesh, value: float) -> geometry.ScalarField:
    return geometry.ScalarField(
        np.full(mesh.num_vertices, float(value)), mesh.mesh_id
    )


# TestFunctionParams is a library dataclass, not a test class
from cywbench.local_yamabe import TestFunctionParams  # noqa: E402

TestFunctionParams.__test__ = False
