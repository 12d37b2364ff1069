"""Energy gate, perturbed solves, continuation, punctured route."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cywbench import geometry, local_yamabe, operators
from cywbench.geometry import ScalarField
from cywbench.local_yamabe import TestFunctionParams

from conftest import CST, preset


def _ball_domain(radius=0.55):
    mesh, geom = preset("ball-negR", 2)
    dom = geometry.extract_subdomain(
        mesh, lambda v: np.einsum("ij,ij->i", v, v) < radius**2
    )
    return mesh, geom, dom


def _dirichlet_ops(mesh, geom, dom):
    return operators.assemble(mesh, geom, CST, bc_mode="dirichlet", domain=dom)


@pytest.fixture(scope="module")
def gate_setup():
    mesh, geom, dom = _ball_domain()
    ops = _dirichlet_ops(mesh, geom, dom)
    gate = local_yamabe.energy_gate(mesh, dom, geom, CST, 1.0, -0.1, ops=ops)
    return mesh, geom, dom, ops, gate


def test_test_function_shape(gate_setup):
    mesh, geom, dom, ops, gate = gate_setup
    center = gate.metadata["center"]
    tf = local_yamabe.test_function(
        mesh, dom, geom, TestFunctionParams(0.04, -0.1, center, 0.3)
    )
    assert np.all(tf.values[dom.frontier_set] == 0.0)
    assert np.all(tf.values[~dom.mask(mesh.num_vertices)] == 0.0)
    assert tf.values.min() >= 0.0
    # peak value at the center is eps^{-1/2}
    assert abs(tf.values[center] - 0.04**-0.5) < 1e-12


def test_test_function_rejects_exterior_center(gate_setup):
    mesh, geom, dom, ops, gate = gate_setup
    outside = int(np.flatnonzero(~dom.mask(mesh.num_vertices))[0])
    with pytest.raises(ValueError):
        local_yamabe.test_function(
            mesh, dom, geom, TestFunctionParams(0.1, -0.1, outside, 0.3)
        )


def test_energy_gate_validation(gate_setup):
    mesh, geom, dom, ops, gate = gate_setup
    with pytest.raises(ValueError):
        local_yamabe.energy_gate(mesh, dom, geom, CST, -1.0, -0.1, ops=ops)
    with pytest.raises(ValueError):
        local_yamabe.energy_gate(mesh, dom, geom, CST, 1.0, 0.5, ops=ops)


def test_energy_gate_passes_on_negative_curvature_ball(gate_setup):
    _, _, _, _, gate = gate_setup
    assert gate.gate_pass
    assert gate.Q_eps < gate.metadata["T_used"] < gate.T_est
    assert gate.T_est > gate.T_sharp  # discrete estimate sits above sharp


@settings(max_examples=20, deadline=None)
@given(b1=st.floats(min_value=-2.0, max_value=-1e-6),
       b2=st.floats(min_value=-2.0, max_value=-1e-6))
def test_quotient_monotone_in_beta(gate_setup, b1, b2):
    # at fixed epsilon the quotient is affine in beta with positive slope
    _, _, _, _, gate = gate_setup
    lo, hi = min(b1, b2), max(b1, b2)
    assert gate.quotient_at_beta(lo) <= gate.quotient_at_beta(hi) + 1e-12


def test_solve_perturbed_validation(gate_setup):
    mesh, geom, dom, ops, gate = gate_setup
    good = local_yamabe.test_function(
        mesh, dom, geom,
        TestFunctionParams(gate.metadata["eps_star"], -0.1,
                           gate.metadata["center"], gate.metadata["radius"]),
    )
    with pytest.raises(ValueError):
        local_yamabe.solve_perturbed(mesh, dom, geom, CST, 1.0, 0.0, good,
                                     ops=ops)
    bad = ScalarField(np.ones(mesh.num_vertices), mesh.mesh_id)
    with pytest.raises(ValueError):
        local_yamabe.solve_perturbed(mesh, dom, geom, CST, 1.0, -0.1, bad,
                                     ops=ops)


def test_solve_perturbed_positive_and_residual(gate_setup):
    mesh, geom, dom, ops, gate = gate_setup
    init = local_yamabe.test_function(
        mesh, dom, geom,
        TestFunctionParams(gate.metadata["eps_star"], -0.1,
                           gate.metadata["center"], gate.metadata["radius"]),
    )
    u = local_yamabe.solve_perturbed(mesh, dom, geom, CST, 1.0, -0.1, init,
                                     ops=ops, gate=gate)
    v = u.values
    assert v[dom.interior_set].min() > 0
    assert np.all(v[dom.frontier_set] == 0.0)
    # residual of the discrete optimality system
    free = dom.interior_set
    r = (CST.a * (ops.stiffness @ v) + (ops.curvature_mass @ v)
         + (-0.1) * (ops.mass @ v) - ops.nonlinear_load(v))
    rel = np.abs(r[free]).max() / max(np.abs(ops.nonlinear_load(v)[free]).max(),
                                      1e-300)
    assert rel < 1e-9


def test_beta_continuation_validation(gate_setup):
    mesh, geom, dom, ops, _ = gate_setup
    with pytest.raises(ValueError):
        local_yamabe.beta_continuation(mesh, dom, geom, CST, 1.0, 0.1, ops=ops)


def test_solve_flat_punctured_positive():
    # whole annulus: all vertices selected, frontier = both boundary shells
    mesh, geom = preset("annulus", 2)
    dom = geometry.extract_subdomain(mesh, lambda v: np.ones(len(v), bool))
    Q = ScalarField(np.ones(mesh.num_vertices), mesh.mesh_id)
    u = local_yamabe.solve_flat_punctured(mesh, dom, Q, geom, CST)
    assert u.values[dom.interior_set].min() > 0
    assert np.all(u.values[dom.frontier_set] == 0.0)
    assert u.metadata["curved_relative_residual"] < 1e-9


def test_trace_report_format(gate_setup):
    mesh, geom, dom, ops, _ = gate_setup
    trace = local_yamabe.beta_continuation(mesh, dom, geom, CST, 1.0, -0.2,
                                           ops=ops)
    text = local_yamabe.trace_to_report(trace)
    assert text.splitlines()[0].startswith("CYW")
    assert trace.converged
    assert all(b < 0 for b in trace.betas)
