from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import split_square
from shapeforge.geometry import generate
from shapeforge.mesh import DeformationField, rotor_nodes
from shapeforge.physics import Reluctivity, volume
from shapeforge.shape_calculus import (check_gradients, fd_shape_derivative, random_rotor_field,
                                       shape_derivative_volume)


def test_fd_is_exact_on_quadratic_objective():
    mesh, regions = split_square(4)
    rng = np.random.default_rng(0)
    field = DeformationField(rng.normal(size=(mesh.n_nodes, 2)) * 1e-3, mesh)
    res = fd_shape_derivative(lambda m: float(np.sum(m.nodes**2)), mesh, field)
    assert res.value == pytest.approx(2 * np.sum(mesh.nodes * field.values), rel=1e-9)
    assert res.steps == [1e-2, 1e-3, 1e-4]


def test_fd_shrinks_steps_that_invert_the_mesh():
    mesh, regions = split_square(4)
    values = np.zeros((mesh.n_nodes, 2))
    values[rotor_nodes(mesh, regions), 0] = np.linspace(0, 5, rotor_nodes(mesh, regions).size)
    res = fd_shape_derivative(lambda m: float(m.areas.sum()), mesh, DeformationField(values, mesh), (1.0, 0.1))
    assert res.steps[0] < 1.0
    assert all(b < a for a, b in zip(res.steps, res.steps[1:]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_volume_derivative_matches_finite_difference(seed):
    mesh, regions = split_square(6)
    field = random_rotor_field(mesh, regions, np.random.default_rng(seed), 1e-2)
    grad = shape_derivative_volume(mesh, regions)
    fd = fd_shape_derivative(lambda m: volume(m, regions), mesh, field, (1e-1, 1e-2))
    assert grad.pair(field) == pytest.approx(fd.value, rel=1e-9, abs=1e-15)


def test_volume_derivative_vanishes_inside_regions_and_outside_rotor():
    mesh, regions = split_square(8)
    grad = shape_derivative_volume(mesh, regions).covector
    inner = np.ones(mesh.n_nodes, bool)
    inner[np.unique(mesh.triangles[mesh.region_ids != 10])] = False
    inner[mesh.boundary_nodes()] = False
    assert inner.any()
    assert np.abs(grad[inner]).max() < 1e-15
    outside = np.ones(mesh.n_nodes, bool)
    outside[rotor_nodes(mesh, regions)] = False
    assert not np.any(grad[outside])


def test_random_field_is_rotor_supported():
    mesh, regions = split_square(8)
    field = random_rotor_field(mesh, regions, np.random.default_rng(1), 2e-3)
    outside = np.ones(mesh.n_nodes, bool)
    outside[rotor_nodes(mesh, regions)] = False
    assert not np.any(field.values[outside])
    assert np.abs(field.values).max() == pytest.approx(2e-3)


def test_gradient_scaling_and_pairing():
    mesh, regions = split_square(4)
    g = shape_derivative_volume(mesh, regions)
    v = np.ones((mesh.n_nodes, 2))
    assert g.scaled(3.0).pair(v) == pytest.approx(3.0 * g.pair(v))
    assert g.scaled(2.0, "w").tag == "w"


def test_torque_derivative_on_coarse_machine(desk_spec):
    m = generate(replace(desk_spec, mesh_size=0.003))
    rows = check_gradients(m.mesh, m.regions, Reluctivity(), m.excitation, m.torque, trials=3, seed=7)
    assert len(rows) == 6
    for r in rows:
        assert r.rel_error < (1e-3 if r.quantity == "torque" else 1e-6), r
