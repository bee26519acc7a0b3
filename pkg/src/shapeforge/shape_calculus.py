"""Volumetric shape derivatives and a finite-difference oracle for them."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .fem import ScalarField
from .mesh import DeformationField, DegenerateMeshError, Mesh, RegionMap, deform, rotor_nodes
from .physics import Reluctivity

__all__ = [
    "ShapeGradient",
    "FDResult",
    "shape_derivative_torque",
    "shape_derivative_volume",
    "fd_shape_derivative",
    "random_rotor_field",
    "GradientCheck",
    "check_gradients",
]


@dataclass(frozen=True, eq=False)
class ShapeGradient:
    """Per-node covector G with ``dJ(V) ~ sum_i G_i . V_i``."""

    covector: np.ndarray  # (N, 2)
    mesh: Mesh
    tag: str = ""

    def pair(self, field: DeformationField | np.ndarray) -> float:
        v = np.asarray(getattr(field, "values", field), dtype=float).reshape(-1, 2)
        return float(np.dot(self.covector.ravel(), v.ravel()))

    def scaled(self, factor: float, tag: str | None = None) -> "ShapeGradient":
        return ShapeGradient(factor * self.covector, self.mesh, self.tag if tag is None else tag)


def _restrict(mesh: Mesh, regions: RegionMap, cov: np.ndarray) -> np.ndarray:
    keep = np.zeros(mesh.n_nodes, bool)
    keep[rotor_nodes(mesh, regions)] = True
    cov[~keep] = 0.0
    return cov


def shape_derivative_torque(u: ScalarField, p: ScalarField, mesh: Mesh, regions: RegionMap,
                            material: Reluctivity) -> ShapeGradient:
    """Shape derivative of J = -T for rotor-supported perturbations.

    ``p`` solves the adjoint problem with right-hand side dT/du. Per basis
    field phi_a e_k the element integrand is

        nu [d_k phi_a (g.q) - g_k (grad phi_a . q) - q_k (grad phi_a . g)]
        - (nu'(s)/s) g_k (grad phi_a . g)(g.q)

    with g = grad u, q = grad p (both element-constant for P1).
    """
    g = u.gradient()
    q = p.gradient()
    s = np.linalg.norm(g, axis=1)
    iron = mesh.region_mask(regions.iron)
    nu = material.element_nu(iron, s)
    dnu_s = material.element_dnu_over_s(iron, s)
    dphi = mesh.gradients  # (M, 3, 2)
    gq = np.einsum("md,md->m", g, q)
    dphi_q = np.einsum("mad,md->ma", dphi, q)
    dphi_g = np.einsum("mad,md->ma", dphi, g)
    term1 = nu[:, None, None] * (dphi * gq[:, None, None]
                                 - g[:, None, :] * dphi_q[:, :, None]
                                 - q[:, None, :] * dphi_g[:, :, None])
    term2 = -(dnu_s * gq)[:, None, None] * g[:, None, :] * dphi_g[:, :, None]
    local = mesh.areas[:, None, None] * (term1 + term2)
    cov = np.zeros((mesh.n_nodes, 2))
    np.add.at(cov, mesh.triangles, local)
    return ShapeGradient(_restrict(mesh, regions, cov), mesh, "-torque")


def shape_derivative_volume(mesh: Mesh, regions: RegionMap) -> ShapeGradient:
    """Covector of ``V -> integral of div V`` over rotor iron (m^2 per m)."""
    mask = mesh.region_mask(regions.rotor_iron)
    local = mesh.areas[mask, None, None] * mesh.gradients[mask]
    cov = np.zeros((mesh.n_nodes, 2))
    np.add.at(cov, mesh.triangles[mask], local)
    return ShapeGradient(_restrict(mesh, regions, cov), mesh, "volume")


@dataclass
class FDResult:
    value: float
    steps: list[float]
    quotients: list[float]
    observed_order: float


def fd_shape_derivative(objective: Callable[[Mesh], float], mesh: Mesh, field: DeformationField,
                        steps: Sequence[float] = (1e-2, 1e-3, 1e-4), min_step: float = 1e-12) -> FDResult:
    """Central differences of ``t -> J((id + tV)(mesh))`` with Richardson extrapolation.

    Steps that produce an invalid mesh are divided by 10 until ``min_step``.
    ``observed_order`` is log10 of the ratio of successive quotient changes
    (about 2 for smooth problems, inf when the quotients agree exactly).
    """
    used, quot = [], []
    for t in steps:
        if used and t >= used[-1]:
            t = used[-1] / 10.0
        while True:
            try:
                plus = deform(mesh, field, t)
                minus = deform(mesh, -field, t)
                break
            except DegenerateMeshError:
                t /= 10.0
                if t < min_step:
                    raise
        used.append(t)
        quot.append((objective(plus) - objective(minus)) / (2.0 * t))
    if len(quot) == 1:
        return FDResult(quot[0], used, quot, math.nan)
    r = used[-2] / used[-1]
    value = (r * r * quot[-1] - quot[-2]) / (r * r - 1.0)
    order = math.nan
    if len(quot) >= 3:
        d1, d2 = abs(quot[-3] - quot[-2]), abs(quot[-2] - quot[-1])
        if d2 == 0.0:
            order = math.inf
        elif d1 > 0.0:
            order = math.log(d1 / d2) / math.log(used[-2] / used[-1])
    return FDResult(value, used, quot, order)


def random_rotor_field(mesh: Mesh, regions: RegionMap, rng: np.random.Generator,
                       amplitude: float = 1e-3, modes: int = 3) -> DeformationField:
    """Smooth random field (sum of plane sine waves) on rotor nodes, zero elsewhere."""
    nodes = rotor_nodes(mesh, regions)
    x = mesh.nodes[nodes]
    scale = float(np.abs(x).max()) or 1.0
    values = np.zeros((mesh.n_nodes, 2))
    for _ in range(modes):
        k = rng.normal(size=2) * np.pi / scale
        phase = rng.uniform(0, 2 * np.pi)
        coef = rng.normal(size=2)
        values[nodes] += np.sin(x @ k + phase)[:, None] * coef
    values *= amplitude / max(np.abs(values).max(), 1e-300)
    return DeformationField(values, mesh)


@dataclass
class GradientCheck:
    trial: int
    quantity: str
    assembled: float
    fd: float
    observed_order: float

    @property
    def rel_error(self) -> float:
        return abs(self.fd - self.assembled) / max(abs(self.fd), abs(self.assembled), 1e-300)


def check_gradients(mesh: Mesh, regions: RegionMap, material: Reluctivity, excitation, torque,
                    trials: int, seed: int = 0, amplitude: float = 1e-3,
                    steps: Sequence[float] = (1e-1, 1e-2, 1e-3), newton_tol: float = 1e-12,
                    linear_method: str = "direct") -> list[GradientCheck]:
    """Compare assembled torque/volume derivatives with central differences
    along ``trials`` seeded random rotor fields. Torque rows use J = -T."""
    from .fem import newton_iterate
    from .physics import solve_adjoint, torque_fem, volume

    rng = np.random.default_rng(seed)
    u = newton_iterate(mesh, regions, material, excitation, None, newton_tol,
                       linear_method=linear_method).u
    p = solve_adjoint(u, mesh, regions, material, torque, linear_method)
    g_t = shape_derivative_torque(u, p, mesh, regions, material)
    g_v = shape_derivative_volume(mesh, regions)

    def neg_torque(m: Mesh) -> float:
        v = newton_iterate(m, regions, material, excitation, u, newton_tol,
                           linear_method=linear_method).u
        return -torque_fem(v, torque)

    rows = []
    for k in range(trials):
        field = random_rotor_field(mesh, regions, rng, amplitude)
        fd = fd_shape_derivative(neg_torque, mesh, field, steps)
        rows.append(GradientCheck(k, "torque", g_t.pair(field), fd.value, fd.observed_order))
        fd = fd_shape_derivative(lambda m: volume(m, regions), mesh, field, steps)
        rows.append(GradientCheck(k, "volume", g_v.pair(field), fd.value, fd.observed_order))
    return rows
