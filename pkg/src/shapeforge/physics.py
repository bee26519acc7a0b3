"""Material laws, excitation, torque and volume functionals, adjoint solve, dq torque formulas."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .fem import (DEGREE4, ScalarField, apply_dirichlet, assemble_tensor_stiffness,
                  element_gradients, solve_matrix)
from .mesh import Mesh, RegionMap

MU0 = 4e-7 * math.pi
NU0 = 1.0 / MU0

__all__ = [
    "MU0",
    "NU0",
    "LinearIron",
    "BrauerIron",
    "Reluctivity",
    "CurrentExcitation",
    "TorqueFunctional",
    "DqParameters",
    "torque_dq_flux",
    "torque_dq_inductance",
    "torque_fem",
    "torque_du",
    "volume",
    "adjoint_tensor",
    "solve_adjoint",
    "excitation_sensitivity",
]


@dataclass(frozen=True)
class LinearIron:
    nu: float = NU0 / 5100.0

    def value(self, s):
        return np.full_like(np.asarray(s, dtype=float), self.nu)

    def derivative(self, s):
        return np.zeros_like(np.asarray(s, dtype=float))

    def derivative_over_s(self, s):
        return np.zeros_like(np.asarray(s, dtype=float))


@dataclass(frozen=True)
class BrauerIron:
    """``nu(s) = k1 exp(k2 s^2) + k3`` with s = |B| in tesla."""

    k1: float = 49.4
    k2: float = 1.46
    k3: float = 520.6

    def value(self, s):
        s = np.asarray(s, dtype=float)
        return self.k1 * np.exp(self.k2 * s * s) + self.k3

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        return 2.0 * self.k1 * self.k2 * s * np.exp(self.k2 * s * s)

    def derivative_over_s(self, s):
        # analytic form of nu'(s)/s, finite at s = 0
        s = np.asarray(s, dtype=float)
        return 2.0 * self.k1 * self.k2 * np.exp(self.k2 * s * s)


@dataclass(frozen=True)
class Reluctivity:
    """Piecewise reluctivity: ``nu0`` outside iron, ``iron.value(|grad u|)`` inside."""

    iron: LinearIron | BrauerIron = BrauerIron()
    nu0: float = NU0
    s_max: float = 2.5

    def element_nu(self, iron_mask: np.ndarray, s: np.ndarray) -> np.ndarray:
        nu = np.full(s.shape, self.nu0)
        nu[iron_mask] = self.iron.value(s[iron_mask])
        return nu

    def element_dnu_over_s(self, iron_mask: np.ndarray, s: np.ndarray) -> np.ndarray:
        out = np.zeros(s.shape)
        out[iron_mask] = self.iron.derivative_over_s(s[iron_mask])
        return out

    def element_tangent(self, iron_mask: np.ndarray, g: np.ndarray) -> np.ndarray:
        """``nu I + (nu'(s)/s) g (x) g`` per element, shape (M, 2, 2)."""
        s = np.linalg.norm(g, axis=1)
        nu = self.element_nu(iron_mask, s)
        dnu_s = self.element_dnu_over_s(iron_mask, s)
        return nu[:, None, None] * np.eye(2) + dnu_s[:, None, None] * np.einsum("md,me->mde", g, g)

    def admissibility(self, n: int = 10_000) -> tuple[bool, bool]:
        """Grid check on [0, s_max]: (0 < nu <= nu0, s -> nu(s) s strictly increasing)."""
        s = np.linspace(0.0, self.s_max, n)
        nu = self.iron.value(s)
        bounded = bool(np.all(nu > 0) and np.all(nu <= self.nu0))
        monotone = bool(np.all(np.diff(nu * s) > 0))
        return bounded, monotone


@dataclass(frozen=True)
class CurrentExcitation:
    """Signed current density (A/m^2) per coil region."""

    densities: Mapping[int, float]

    def __post_init__(self):
        d = {int(k): float(v) for k, v in dict(self.densities).items()}
        if not all(math.isfinite(v) for v in d.values()):
            raise ValueError("current densities must be finite")
        object.__setattr__(self, "densities", d)

    def element_density(self, mesh: Mesh) -> np.ndarray:
        out = np.zeros(mesh.n_triangles)
        for rid, j in self.densities.items():
            out[mesh.region_ids == rid] = j
        return out

    def scaled(self, factor: float) -> "CurrentExcitation":
        return CurrentExcitation({k: factor * v for k, v in self.densities.items()})

    @classmethod
    def from_phases(cls, slots: Mapping[int, tuple[int, int]], phase_currents, turns: int,
                    slot_areas: Mapping[int, float]) -> "CurrentExcitation":
        """``slots`` maps region id -> (phase index, +1/-1); J = sign * turns * I / area."""
        return cls({rid: sign * turns * phase_currents[ph] / slot_areas[rid]
                    for rid, (ph, sign) in slots.items()})

    def ampere_turns(self, mesh: Mesh) -> float:
        return float(np.sum(self.element_density(mesh) * mesh.areas))


@dataclass(frozen=True)
class TorqueFunctional:
    """Arkkio torque over the air-gap band ``r_in < r < r_out`` (regions ``band``)."""

    r_in: float
    r_out: float
    axial_length: float
    band: frozenset[int]
    nu0: float = NU0

    def __post_init__(self):
        if not 0 < self.r_in < self.r_out:
            raise ValueError("torque band needs 0 < r_in < r_out")
        object.__setattr__(self, "band", frozenset(int(b) for b in self.band))

    def check(self, mesh: Mesh, regions: RegionMap) -> None:
        if not self.band <= regions.air:
            raise ValueError("torque band must consist of air regions")
        if self.band & regions.rotor:
            raise ValueError("torque band must lie outside the design region")

    def band_tensors(self, mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
        """Band triangle indices and the tensors N_T with T = c * sum g^T N_T g."""
        idx = np.flatnonzero(mesh.region_mask(self.band))
        if idx.size == 0:
            raise ValueError("torque band contains no triangles")
        pts = np.einsum("qk,mkd->mqd", DEGREE4.points, mesh.nodes[mesh.triangles[idx]])
        x, y = pts[..., 0], pts[..., 1]
        r = np.hypot(x, y)
        # r B_r B_phi = (B.x)(B.x_perp)/r with x_perp = (-y, x); B = R grad u, R = [[0,1],[-1,0]]
        s = np.empty(pts.shape[:2] + (2, 2))
        s[..., 0, 0] = -x * y / r
        s[..., 1, 1] = x * y / r
        s[..., 0, 1] = s[..., 1, 0] = 0.5 * (x * x - y * y) / r
        rot = np.array([[0.0, 1.0], [-1.0, 0.0]])
        integ = np.einsum("q,mqde->mde", 2.0 * DEGREE4.weights, s) * mesh.areas[idx, None, None]
        return idx, np.einsum("ad,mde,eb->mab", rot.T, integ, rot)

    @property
    def factor(self) -> float:
        return self.axial_length * self.nu0 / (self.r_out - self.r_in)


def torque_fem(u: ScalarField, tf: TorqueFunctional) -> float:
    """Arkkio torque (N m), counterclockwise positive."""
    idx, n_t = tf.band_tensors(u.mesh)
    g = element_gradients(u.mesh, u.values)[idx]
    return float(tf.factor * np.einsum("md,mde,me->", g, n_t, g))


def torque_du(u: ScalarField, tf: TorqueFunctional) -> np.ndarray:
    """Nodal covector of the derivative of torque_fem at u."""
    mesh = u.mesh
    idx, n_t = tf.band_tensors(mesh)
    g = element_gradients(mesh, u.values)[idx]
    flux = 2.0 * tf.factor * np.einsum("mde,me->md", n_t, g)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.triangles[idx], np.einsum("mkd,md->mk", mesh.gradients[idx], flux))
    return out


def volume(mesh: Mesh, regions: RegionMap) -> float:
    """Area (m^2) of iron inside the design region."""
    return float(mesh.areas[mesh.region_mask(regions.rotor_iron)].sum())


def adjoint_tensor(u: ScalarField, regions: RegionMap, material: Reluctivity) -> np.ndarray:
    mesh = u.mesh
    return material.element_tangent(mesh.region_mask(regions.iron), u.gradient())


def solve_adjoint(u: ScalarField, mesh: Mesh, regions: RegionMap, material: Reluctivity,
                  tf: TorqueFunctional, method: str = "direct", rtol: float = 1e-10) -> ScalarField:
    """Solve ``-div(A(u) grad p) = dT/du`` with ``p = 0`` on the outer boundary."""
    a = assemble_tensor_stiffness(mesh, adjoint_tensor(u, regions, material))
    mask = np.zeros(mesh.n_nodes, bool)
    mask[mesh.boundary_nodes()] = True
    a, b = apply_dirichlet(a, torque_du(u, tf), mask, 0.0)
    p = solve_matrix(a, b, method, rtol)
    p[mask] = 0.0
    return ScalarField(p, mesh)


def excitation_sensitivity(u: ScalarField, mesh: Mesh, regions: RegionMap, material: Reluctivity,
                           excitation: CurrentExcitation, tf: TorqueFunctional,
                           method: str = "direct", rtol: float = 1e-10) -> float:
    """d torque / d a for the current densities scaled by a, at a = 1 (u solved for ``excitation``).

    With the adjoint p, the sensitivity is the load pairing ``p . f``.
    """
    p = solve_adjoint(u, mesh, regions, material, tf, method, rtol)
    load = np.zeros(mesh.n_nodes)
    np.add.at(load, mesh.triangles,
              np.repeat((excitation.element_density(mesh) * mesh.areas / 3.0)[:, None], 3, axis=1))
    return float(p.values @ load)


# --------------------------------------------------------------------------- dq model

@dataclass(frozen=True)
class DqParameters:
    pole_pairs: int
    l_d: float = 0.0
    l_q: float = 0.0
    i_s: float = 0.0
    beta: float = 0.0
    lambda_d: float = 0.0
    lambda_q: float = 0.0
    i_d: float = 0.0
    i_q: float = 0.0

    def __post_init__(self):
        if int(self.pole_pairs) != self.pole_pairs or self.pole_pairs < 1:
            raise ValueError("pole_pairs must be a positive integer")

    @classmethod
    def from_polar(cls, pole_pairs: int, l_d: float, l_q: float, i_s: float, beta: float) -> "DqParameters":
        i_d, i_q = i_s * math.cos(beta), i_s * math.sin(beta)
        return cls(pole_pairs, l_d, l_q, i_s, beta, l_d * i_d, l_q * i_q, i_d, i_q)

    def torque(self) -> float:
        return torque_dq_flux(self.pole_pairs, self.lambda_d, self.lambda_q, self.i_d, self.i_q)


def torque_dq_flux(pole_pairs, lambda_d, lambda_q, i_d, i_q):
    return 1.5 * pole_pairs * (lambda_d * i_q - lambda_q * i_d)


def torque_dq_inductance(pole_pairs, l_d, l_q, i_s, beta):
    return 0.75 * pole_pairs * (l_d - l_q) * i_s**2 * np.sin(2.0 * beta)
