import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import split_square
from oracles import dense_mass, dense_stiffness, dual_projected_gradient
from shapeforge.descent import (ConstraintError, DescentMetric, QpProblem, boundary_normals,
                                buffer_regions, build_interface_qp, descent_bvp, harmonic_extension,
                                mesh_motion, metric_energy, metric_matrix, metric_product, solve_bi_descent_qp)
from shapeforge.fem import newton_solve
from shapeforge.mesh import DeformationField, interface_nodes, rotor_boundary_nodes, rotor_nodes
from shapeforge.physics import Reluctivity, solve_adjoint
from shapeforge.shape_calculus import ShapeGradient, shape_derivative_torque, shape_derivative_volume


def _random_gradient(mesh, regions, seed):
    cov = np.zeros((mesh.n_nodes, 2))
    nodes = rotor_nodes(mesh, regions)
    cov[nodes] = np.random.default_rng(seed).normal(size=(nodes.size, 2))
    return ShapeGradient(cov, mesh)


@pytest.fixture(scope="module")
def desk_gradient(desk):
    material = Reluctivity()
    u = newton_solve(desk.mesh, desk.regions, material, desk.excitation)
    p = solve_adjoint(u, desk.mesh, desk.regions, material, desk.torque)
    return shape_derivative_torque(u, p, desk.mesh, desk.regions, material)


def _circles(desk):
    r = np.hypot(*desk.mesh.nodes[rotor_boundary_nodes(desk.mesh, desk.regions)].T)
    return (float(r.max()), float(r.min()))


# --------------------------------------------------------------------------- metric and BVP

def test_metric_rejects_bad_parameters():
    with pytest.raises(ValueError):
        DescentMetric(kind="l2")
    with pytest.raises(ValueError):
        DescentMetric(boundary="free")
    with pytest.raises(ValueError):
        DescentMetric(lame_mu=0.0)


def test_metric_matrix_matches_dense_oracle():
    mesh, regions = split_square(4)
    mask = mesh.region_mask(regions.rotor)
    c = 0.3
    dense = np.kron(dense_stiffness(mesh.nodes, mesh.triangles, mask) + c * dense_mass(mesh.nodes, mesh.triangles, mask),
                    np.eye(2))
    got = metric_matrix(mesh, regions, DescentMetric(mass_coefficient=c)).toarray()
    assert np.allclose(got, dense, atol=1e-13)


def test_elasticity_metric_annihilates_rigid_motions():
    mesh, regions = split_square(4)
    b = metric_matrix(mesh, regions, DescentMetric("elasticity", 0.0, 2.0, 1.5))
    assert abs(b - b.T).max() < 1e-12
    for motion in (np.column_stack([-mesh.nodes[:, 1], mesh.nodes[:, 0]]),
                   np.tile([1.0, 0.0], (mesh.n_nodes, 1))):
        assert abs(motion.ravel() @ b @ motion.ravel()) < 1e-12


@pytest.mark.parametrize("metric", [DescentMetric(mass_coefficient=0.2),
                                    DescentMetric("elasticity", 0.2, 0.7, 1.3)])
def test_metric_energy_matches_matrix_form(metric):
    mesh, regions = split_square(6)
    w = np.random.default_rng(9).normal(size=(mesh.n_nodes, 2))
    assert metric_energy(mesh, regions, metric, w) == pytest.approx(
        metric_product(mesh, regions, metric, w, w), rel=1e-12)


def test_zero_gradient_gives_zero_field():
    mesh, regions = split_square(4)
    w = descent_bvp(ShapeGradient(np.zeros((mesh.n_nodes, 2)), mesh), DescentMetric(), mesh, regions)
    assert not np.any(w.values)


def test_clamped_solution_matches_dense_oracle():
    mesh, regions = split_square(8)
    metric = DescentMetric(mass_coefficient=0.01, boundary="clamped")
    grad = _random_gradient(mesh, regions, 4)
    w = descent_bvp(grad, metric, mesh, regions)
    mask = mesh.region_mask(regions.rotor)
    dense = np.kron(dense_stiffness(mesh.nodes, mesh.triangles, mask)
                    + 0.01 * dense_mass(mesh.nodes, mesh.triangles, mask), np.eye(2))
    free_nodes = np.setdiff1d(rotor_nodes(mesh, regions), rotor_boundary_nodes(mesh, regions))
    free = (2 * free_nodes[:, None] + np.arange(2)).ravel()
    expected = np.zeros(2 * mesh.n_nodes)
    expected[free] = np.linalg.solve(dense[np.ix_(free, free)], -grad.covector.ravel()[free])
    assert np.abs(w.values.ravel() - expected).max() <= 1e-9 * np.abs(expected).max()


@pytest.mark.parametrize("metric", [DescentMetric(), DescentMetric(boundary="clamped"),
                                    DescentMetric("elasticity", 0.01, 1.0, 1.0)])
def test_slip_solution_is_galerkin_and_tangential(metric):
    mesh, regions = split_square(8)
    grad = _random_gradient(mesh, regions, 2)
    w = descent_bvp(grad, metric, mesh, regions)
    bnodes, normals = boundary_normals(mesh, regions)
    if metric.boundary == "slip":
        assert np.abs(np.einsum("nd,nd->n", w.values[bnodes], normals)).max() < 1e-12
    else:
        assert not np.any(w.values[bnodes])
    outside = np.setdiff1d(np.arange(mesh.n_nodes), rotor_nodes(mesh, regions))
    assert not np.any(w.values[outside])
    # any admissible test field V: b(W, V) = -<G, V>
    rng = np.random.default_rng(5)
    v = np.zeros((mesh.n_nodes, 2))
    inner = np.setdiff1d(rotor_nodes(mesh, regions), bnodes)
    v[inner] = rng.normal(size=(inner.size, 2))
    if metric.boundary == "slip":
        v[bnodes] = rng.normal(size=(bnodes.size, 1)) * np.column_stack([-normals[:, 1], normals[:, 0]])
    lhs = metric_product(mesh, regions, metric, w, v)
    assert lhs == pytest.approx(-grad.pair(v), rel=1e-9)
    assert grad.pair(w) == pytest.approx(-metric_energy(mesh, regions, metric, w), rel=1e-10)


def test_desk_descent_identity_and_circle_normals(desk, desk_gradient):
    circles = _circles(desk)
    metric = DescentMetric(circles=circles)
    w = descent_bvp(desk_gradient, metric, desk.mesh, desk.regions)
    b = metric_energy(desk.mesh, desk.regions, metric, w)
    assert b > 0
    assert abs(desk_gradient.pair(w) + b) <= 1e-10 * b
    nodes, normals = boundary_normals(desk.mesh, desk.regions, circles)
    x = desk.mesh.nodes[nodes]
    radial = x / np.hypot(*x.T)[:, None]
    assert np.allclose(np.abs(np.einsum("nd,nd->n", radial, normals)), 1.0, atol=1e-12)
    assert np.abs(np.einsum("nd,nd->n", w.values[nodes], radial)).max() < 1e-12 * np.abs(w.values).max()


def test_elasticity_identity_with_admissible_rotation(desk, desk_gradient):
    # slip on the rotor circles admits a rigid rotation that only the mass term controls
    metric = DescentMetric("elasticity", 0.01, 1.0, 1.0, "slip", _circles(desk))
    w = descent_bvp(desk_gradient, metric, desk.mesh, desk.regions)
    b = metric_energy(desk.mesh, desk.regions, metric, w)
    assert abs(desk_gradient.pair(w) + b) <= 1e-12 * b


# --------------------------------------------------------------------------- QP

def test_qp_coincident_gradients():
    g = np.array([3.0, -4.0, 1.0])
    sol = solve_bi_descent_qp(QpProblem([g, g]))
    assert np.abs(sol.w + g).max() < 1e-12
    assert abs(sol.rho + g @ g) < 1e-12 * (g @ g)


def test_qp_orthogonal_gradients():
    a, b = 2.0, 3.0
    sol = solve_bi_descent_qp(QpProblem([[a, 0.0], [0.0, b]]))
    lam = np.array([b * b, a * a]) / (a * a + b * b)
    assert np.abs(sol.lam - lam).max() < 1e-12
    assert np.abs(sol.w + np.array([lam[0] * a, lam[1] * b])).max() < 1e-12
    assert abs(sol.rho + a * a * b * b / (a * a + b * b)) < 1e-12


def test_qp_opposing_gradients_are_pareto_critical():
    g = np.array([1.0, 2.0])
    sol = solve_bi_descent_qp(QpProblem([g, -2.5 * g]))
    assert np.abs(sol.w).max() < 1e-12
    assert abs(sol.rho) < 1e-12
    assert np.abs(sol.lam - [2.5 / 3.5, 1 / 3.5]).max() < 1e-12


def _random_qp(rng):
    n = int(rng.integers(2, 6))
    d = int(rng.integers(n, 201))
    g = rng.normal(size=(n, d))
    if rng.random() < 0.3:
        g[1] = g[0] * rng.uniform(0.5, 2) + 1e-3 * rng.normal(size=d)
    m = int(rng.integers(0, min(10, d - 1))) if rng.random() < 0.5 else 0
    return g, rng.normal(size=(m, d))


def test_qp_random_instances_against_dual_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        g, a = _random_qp(rng)
        sol = solve_bi_descent_qp(QpProblem(g, a))
        oracle, _ = dual_projected_gradient(g, a)
        assert sol.kkt_residual <= 1e-9
        assert sol.rho <= 1e-12
        assert abs(sol.objective - oracle) <= 1e-8 * max(1.0, abs(oracle))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_qp_direction_decreases_every_objective(n, d, seed):
    g = np.random.default_rng(seed).normal(size=(n, d))
    sol = solve_bi_descent_qp(QpProblem(g))
    assert np.all(g @ sol.w <= sol.rho + 1e-9)
    assert sol.rho <= 1e-12
    assert sol.lam.min() >= 0 and sol.lam.sum() == pytest.approx(1.0)
    assert sol.objective == pytest.approx(-0.5 * sol.w @ sol.w, abs=1e-9 * max(1, sol.w @ sol.w))


def test_qp_rejects_dependent_constraints():
    row = np.array([1.0, 2.0, 0.0])
    with pytest.raises(ConstraintError):
        solve_bi_descent_qp(QpProblem(np.eye(3)[:2], np.array([row, 2 * row])))


def test_qp_rejects_non_finite_gradients():
    with pytest.raises(ValueError):
        QpProblem([[1.0, np.nan]])


# --------------------------------------------------------------------------- interface QP and extension

def test_interface_qp_restriction_is_consistent(desk, desk_gradient):
    circles = _circles(desk)
    g2 = shape_derivative_volume(desk.mesh, desk.regions)
    qp = build_interface_qp([desk_gradient, g2], desk.mesh, desk.regions, circles)
    assert np.array_equal(qp.nodes, interface_nodes(desk.mesh, desk.regions))
    on_boundary = np.intersect1d(qp.nodes, rotor_boundary_nodes(desk.mesh, desk.regions))
    assert qp.equalities.shape == (on_boundary.size, 2 * qp.nodes.size)
    w = np.random.default_rng(0).normal(size=2 * qp.nodes.size)
    full = qp.scatter(w, desk.mesh)
    for row, grad in zip(qp.gradients, (desk_gradient, g2)):
        assert row @ w == pytest.approx(grad.pair(full), rel=1e-12)


def test_interface_qp_requires_an_interface():
    mesh, regions = split_square(4)
    from shapeforge.mesh import RegionMap
    single = RegionMap(iron=frozenset({10, 11}), air=frozenset({1}), coils={}, rotor=frozenset({10, 11}))
    with pytest.raises(ConstraintError):
        build_interface_qp([shape_derivative_volume(mesh, single)], mesh, single)


def test_extended_direction_is_tangential_on_rotor_boundary(desk, desk_gradient):
    circles = _circles(desk)
    g2 = shape_derivative_volume(desk.mesh, desk.regions).scaled(30.0)
    qp = build_interface_qp([desk_gradient, g2], desk.mesh, desk.regions, circles)
    sol = solve_bi_descent_qp(qp)
    assert sol.rho < 0
    w = harmonic_extension(sol.w.reshape(-1, 2), desk.mesh, desk.regions, qp.nodes)
    nodes, normals = boundary_normals(desk.mesh, desk.regions, circles)
    assert np.abs(np.einsum("nd,nd->n", w.values[nodes], normals)).max() <= 1e-10
    assert np.all(qp.gradients @ sol.w <= sol.rho + 1e-9)


def test_harmonic_extension_maximum_principle():
    mesh, regions = split_square(8)
    nodes = interface_nodes(mesh, regions)
    inner = np.setdiff1d(rotor_nodes(mesh, regions), np.union1d(nodes, rotor_boundary_nodes(mesh, regions)))
    assert inner.size
    rng = np.random.default_rng(11)
    for _ in range(100):
        data = rng.normal(size=(nodes.size, 2))
        w = harmonic_extension(data, mesh, regions, nodes).values
        for c in range(2):
            lo, hi = min(data[:, c].min(), 0.0), max(data[:, c].max(), 0.0)
            assert lo - 1e-12 <= w[inner, c].min() and w[inner, c].max() <= hi + 1e-12
        assert np.allclose(w[nodes], data)


def test_mesh_motion_moves_only_buffer_interior(desk, desk_gradient):
    circles = _circles(desk)
    w = descent_bvp(desk_gradient, DescentMetric(circles=circles), desk.mesh, desk.regions)
    buffer = buffer_regions(desk.mesh, desk.regions, desk.torque.band)
    assert buffer and not (buffer & desk.torque.band)
    moved = mesh_motion(w, desk.mesh, desk.regions, buffer)
    changed = np.flatnonzero(np.any(moved.values != w.values, axis=1))
    in_buffer = np.unique(desk.mesh.triangles[desk.mesh.region_mask(buffer)])
    assert np.all(np.isin(changed, in_buffer))
    band_nodes = np.unique(desk.mesh.triangles[desk.mesh.region_mask(desk.torque.band)])
    assert not np.any(moved.values[band_nodes])
    assert mesh_motion(DeformationField.zeros(desk.mesh), desk.mesh, desk.regions, buffer).values.max() == 0
