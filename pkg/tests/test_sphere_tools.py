"""Stereographic charts, symmetry conditions, integral obstructions."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cywbench import sphere_tools as sph
from cywbench.geometry import ScalarField

from conftest import assembled, preset


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-1, max_value=1), min_size=4, max_size=4),
       st.sampled_from(["north", "south"]))
def test_stereo_roundtrip(raw, pole):
    v = np.asarray(raw)
    if np.linalg.norm(v) < 1e-3:
        v = np.array([1.0, 0.0, 0.0, 0.0])
    point = sph.SpherePoint(v / np.linalg.norm(v))
    tau_excluded = 1.0 if pole == "north" else -1.0
    if abs(point.tau - tau_excluded) < 1e-6:
        return
    x = sph.stereo_forward(point, pole)
    back = sph.stereo_inverse(x, pole)
    assert np.abs(back.ambient - point.ambient).max() < 1e-10


def test_stereo_forward_rejects_pole():
    north = sph.SpherePoint([0.0, 0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        sph.stereo_forward(north, "north")
    assert np.allclose(sph.stereo_forward(north, "south"), 0.0)


def test_conformal_factor_value_at_origin():
    # Phi(0) = 2^{1/2} for n = 3 ((n-2)/2 = 1/2)
    assert abs(sph.conformal_factor_phi(np.zeros(3)) - np.sqrt(2.0)) < 1e-14


def test_sphere_point_rejects_non_unit():
    with pytest.raises(ValueError):
        sph.SpherePoint([1.0, 1.0, 0.0, 0.0])


def test_condition_a_requires_antipodal_pairing():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(20, 4))
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    with pytest.raises(ValueError):
        sph.check_condition_a(pts, lambda p: 1.0)


def test_condition_b_explicit_pairs():
    a = sph.SpherePoint([0.0, 0.0, 0.0, 1.0])
    b = sph.SpherePoint([0.0, 0.0, 0.0, -1.0])
    verdict = sph.check_condition_b(lambda p: float(p[-1] ** 2), [(a, b)])
    assert verdict.verdict.startswith("pass")
    verdict2 = sph.check_condition_b(lambda p: float(p[-1]), [(a, b)])
    assert verdict2.verdict == "fail"
    assert len(verdict2.witnesses) >= 1


def test_kw_obstruction_zero_for_constant_targets():
    # gradients of constant fields vanish identically, so the integral is 0
    mesh, geom = preset("round-s3", 2)
    ops = assembled("round-s3", 2)
    const = ScalarField(np.full(mesh.num_vertices, 6.0), mesh.mesh_id)
    one = ScalarField(np.ones(mesh.num_vertices), mesh.mesh_id)
    for H in sph.coordinate_fields(mesh):
        assert sph.kw_obstruction(const, one, H, ops) == 0.0


def test_be_obstruction_rejects_zero_direction():
    mesh, geom = preset("round-s3", 1)
    ops = assembled("round-s3", 1)
    with pytest.raises(ValueError):
        sph.be_obstruction(geom.scalar_curvature, np.zeros(4), mesh, ops)


def test_be_obstruction_small_for_constant_curvature():
    mesh, geom = preset("round-s3", 2)
    ops = assembled("round-s3", 2)
    scale = sph.be_scale(
        geom.scalar_curvature, np.array([1.0, 0, 0, 0]), ops
    )
    for i in range(4):
        a = np.zeros(4)
        a[i] = 1.0
        val = sph.be_obstruction(geom.scalar_curvature, a, mesh, ops)
        assert abs(val) <= 1e-6 * max(scale, 1.0)


def test_obstruction_report_structure():
    mesh, geom = preset("round-s3", 1)
    ops = assembled("round-s3", 1)
    one = ScalarField(np.ones(mesh.num_vertices), mesh.mesh_id)
    const = ScalarField(np.full(mesh.num_vertices, 6.0), mesh.mesh_id)
    rep = sph.obstruction_report(const, one, geom.scalar_curvature, ops)
    assert set(rep.kw_values) == {"z0", "z1", "z2", "z3"}
    assert set(rep.be_values) == {"e0", "e1", "e2", "e3"}
    assert "basis_note" in rep.metadata
