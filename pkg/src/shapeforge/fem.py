"""P1 finite elements: quadrature, elliptic assembly, SPD solves and Newton's method."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, RegionMap

logger = logging.getLogger(__name__)

__all__ = [
    "QuadratureRule",
    "DEGREE2",
    "DEGREE4",
    "ScalarField",
    "SparseSystem",
    "SolverSettings",
    "SolverError",
    "NewtonError",
    "NewtonResult",
    "assemble_scalar_elliptic",
    "assemble_tensor_stiffness",
    "stiffness_matrix",
    "mass_matrix",
    "apply_dirichlet",
    "solve_spd",
    "solve_matrix",
    "pcg",
    "newton_iterate",
    "newton_solve",
    "nonlinear_residual",
    "element_gradients",
]


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points and weights; weights sum to the reference area 1/2."""

    points: np.ndarray  # (nq, 3) barycentric
    weights: np.ndarray  # (nq,)
    degree: int

    def physical_points(self, mesh: Mesh) -> np.ndarray:
        """Quadrature points of every triangle, shape (M, nq, 2)."""
        return np.einsum("qk,mkd->mqd", self.points, mesh.nodes[mesh.triangles])


DEGREE2 = QuadratureRule(
    np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
    np.full(3, 1 / 6),
    2,
)

_a, _b = 0.445948490915965, 0.091576213509771
_wa, _wb = 0.223381589678011, 0.109951743655322
DEGREE4 = QuadratureRule(
    np.array([[1 - 2 * _a, _a, _a], [_a, 1 - 2 * _a, _a], [_a, _a, 1 - 2 * _a],
              [1 - 2 * _b, _b, _b], [_b, 1 - 2 * _b, _b], [_b, _b, 1 - 2 * _b]]),
    0.5 * np.array([_wa, _wa, _wa, _wb, _wb, _wb]),
    4,
)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nodal P1 coefficients on a mesh (vector potential u or adjoint p, in Wb/m)."""

    values: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.shape[0] != self.mesh.n_nodes:
            raise ValueError("scalar field length does not match node count")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def gradient(self) -> np.ndarray:
        """Element-wise constant gradient, shape (M, 2)."""
        return element_gradients(self.mesh, self.values)


def element_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    return np.einsum("mkd,mk->md", mesh.gradients, values[mesh.triangles])


@dataclass
class SparseSystem:
    """Sparse symmetric system with Dirichlet rows/columns already eliminated."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_mask: np.ndarray
    dirichlet_values: np.ndarray
    mesh: Mesh | None = None


@dataclass(frozen=True)
class SolverSettings:
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    linear_method: str = "direct"
    linear_rtol: float = 1e-10


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = math.nan):
        super().__init__(message)
        self.residual = residual


class NewtonError(SolverError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message, history[-1] if history else math.nan)
        self.history = history


def _scatter(mesh: Mesh, local: np.ndarray, n: int | None = None) -> sp.csr_matrix:
    """Assemble element matrices (M, 3, 3) into a global CSR matrix."""
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes if n is None else n
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_tensor_stiffness(mesh: Mesh, tensors: np.ndarray, mask: np.ndarray | None = None) -> sp.csr_matrix:
    """Stiffness matrix for element-constant 2x2 coefficient tensors (M, 2, 2)."""
    g = mesh.gradients
    local = mesh.areas[:, None, None] * np.einsum("mid,mde,mje->mij", g, tensors, g)
    if mask is not None:
        local = local * mask[:, None, None]
    return _scatter(mesh, local)


def stiffness_matrix(mesh: Mesh, coefficient: np.ndarray | float = 1.0,
                     mask: np.ndarray | None = None) -> sp.csr_matrix:
    """Scalar-coefficient Laplace stiffness matrix; coefficient per triangle or scalar."""
    g = mesh.gradients
    c = np.broadcast_to(np.asarray(coefficient, dtype=float), (mesh.n_triangles,))
    local = (c * mesh.areas)[:, None, None] * np.einsum("mid,mjd->mij", g, g)
    if mask is not None:
        local = local * mask[:, None, None]
    return _scatter(mesh, local)


def mass_matrix(mesh: Mesh, mask: np.ndarray | None = None) -> sp.csr_matrix:
    phi = DEGREE2.points
    ref = np.einsum("q,qi,qj->ij", DEGREE2.weights, phi, phi) * 2.0  # normalized to unit area
    local = mesh.areas[:, None, None] * ref[None]
    if mask is not None:
        local = local * mask[:, None, None]
    return _scatter(mesh, local)


def _check_spd(tensors: np.ndarray) -> None:
    sym = np.abs(tensors[..., 0, 1] - tensors[..., 1, 0])
    scale = np.abs(tensors).max(axis=(-1, -2)) + 1e-300
    tr = tensors[..., 0, 0] + tensors[..., 1, 1]
    det = tensors[..., 0, 0] * tensors[..., 1, 1] - tensors[..., 0, 1] * tensors[..., 1, 0]
    bad = (sym > 1e-12 * scale) | (tr <= 0) | (det <= 0) | ~np.isfinite(det)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise ValueError(f"coefficient tensor is not symmetric positive definite on triangle {idx[0]}")


def apply_dirichlet(matrix: sp.spmatrix, rhs: np.ndarray, mask: np.ndarray,
                    values: np.ndarray | float = 0.0) -> tuple[sp.csr_matrix, np.ndarray]:
    """Symmetric elimination: constrained rows/columns become identity rows."""
    values = np.broadcast_to(np.asarray(values, dtype=float), mask.shape).copy()
    values[~mask] = 0.0
    a = sp.csr_matrix(matrix)
    b = rhs - a @ values
    keep = sp.diags((~mask).astype(float))
    a = (keep @ a @ keep + sp.diags(mask.astype(float))).tocsr()
    b[mask] = values[mask]
    return a, b


def _dirichlet_mask(mesh: Mesh, dirichlet) -> tuple[np.ndarray, np.ndarray]:
    mask = np.zeros(mesh.n_nodes, bool)
    values = np.zeros(mesh.n_nodes)
    if dirichlet is None:
        return mask, values
    if isinstance(dirichlet, Mapping):
        for marker, val in dirichlet.items():
            nodes = mesh.boundary_nodes([marker])
            mask[nodes] = True
            values[nodes] = val
        return mask, values
    nodes, vals = dirichlet
    mask[nodes] = True
    values[nodes] = vals
    return mask, values


def assemble_scalar_elliptic(
    mesh: Mesh,
    coefficient: Callable[[np.ndarray], np.ndarray] | np.ndarray | float = 1.0,
    source: Callable[[np.ndarray], np.ndarray] | np.ndarray | float = 0.0,
    dirichlet=None,
    quadrature: QuadratureRule = DEGREE2,
) -> SparseSystem:
    """Galerkin P1 system for ``-div(C grad v) = f``.

    ``coefficient`` is a scalar, an element array of 2x2 tensors (M, 2, 2), or a
    callback mapping quadrature points (M, nq, 2) to tensors (M, nq, 2, 2).
    ``source`` is a scalar, per-triangle array (M,), or a callback mapping points
    (M, nq, 2) to values (M, nq). ``dirichlet`` is a mapping boundary marker ->
    value, or a pair (node indices, values).
    """
    m = mesh.n_triangles
    if callable(coefficient):
        pts = quadrature.physical_points(mesh)
        c = np.asarray(coefficient(pts), dtype=float)
        _check_spd(c)
        tensors = 2.0 * np.einsum("q,mqde->mde", quadrature.weights, c)
    else:
        c = np.asarray(coefficient, dtype=float)
        if c.ndim == 0:
            tensors = np.broadcast_to(c * np.eye(2), (m, 2, 2))
        else:
            tensors = c.reshape(m, 2, 2)
        _check_spd(tensors)
    a = assemble_tensor_stiffness(mesh, tensors)

    phi = quadrature.points
    if callable(source):
        f_q = np.asarray(source(quadrature.physical_points(mesh)), dtype=float)
    else:
        f = np.asarray(source, dtype=float)
        f_q = np.broadcast_to(f.reshape(-1, 1) if f.ndim else f, (m, len(quadrature.weights)))
    local_f = 2.0 * mesh.areas[:, None] * np.einsum("q,mq,qi->mi", quadrature.weights, f_q, phi)
    b = np.zeros(mesh.n_nodes)
    np.add.at(b, mesh.triangles, local_f)

    mask, values = _dirichlet_mask(mesh, dirichlet)
    a, b = apply_dirichlet(a, b, mask, values)
    return SparseSystem(a, b, mask, values, mesh)


def pcg(a: sp.spmatrix, b: np.ndarray, rtol: float = 1e-10, max_iter: int | None = None,
        x0: np.ndarray | None = None) -> np.ndarray:
    """Conjugate gradients with a diagonal (Jacobi) preconditioner."""
    n = b.shape[0]
    max_iter = int(20 * math.sqrt(n)) + 10 if max_iter is None else max_iter
    d = a.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix has non-positive diagonal; not SPD")
    inv_d = 1.0 / d
    x = np.zeros(n) if x0 is None else x0.copy()
    r = b - a @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    for _ in range(max_iter):
        if np.linalg.norm(r) <= rtol * bnorm:
            return x
        ap = a @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(b - a @ x)
    if res <= rtol * bnorm:
        return x
    raise SolverError(f"PCG did not converge in {max_iter} iterations", res / bnorm)


def solve_matrix(a: sp.spmatrix, b: np.ndarray, method: str = "direct", rtol: float = 1e-10) -> np.ndarray:
    """Solve an SPD system and verify ``||b - Ax|| <= rtol ||b||``."""
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if method == "direct":
        x = spla.splu(sp.csc_matrix(a)).solve(b)
    elif method == "dense":
        x = np.linalg.solve(a.toarray() if sp.issparse(a) else a, b)
    elif method == "cg":
        x = pcg(sp.csr_matrix(a), b, rtol=rtol)
    else:
        raise ValueError(f"unknown linear solver method {method!r}")
    res = np.linalg.norm(b - a @ x) / bnorm
    if not np.isfinite(res) or res > rtol:
        # one step of iterative refinement before giving up
        x = x + solve_matrix(a, b - a @ x, "dense" if method == "dense" else "direct", 1.0)
        res = np.linalg.norm(b - a @ x) / bnorm
        if not np.isfinite(res) or res > rtol:
            raise SolverError(f"linear solve residual {res:.3e} above tolerance {rtol:.1e}", res)
    return x


def solve_spd(system: SparseSystem, method: str = "direct", rtol: float = 1e-10) -> ScalarField:
    x = solve_matrix(system.matrix, system.rhs, method, rtol)
    x[system.dirichlet_mask] = system.dirichlet_values[system.dirichlet_mask]
    return ScalarField(x, system.mesh)


# --------------------------------------------------------------------------- Newton

@dataclass
class NewtonResult:
    u: ScalarField
    residuals: list[float] = field(default_factory=list)
    iterations: int = 0


def _state_setup(mesh: Mesh, regions: RegionMap, excitation):
    iron = mesh.region_mask(regions.iron)
    load = np.zeros(mesh.n_nodes)
    dens = excitation.element_density(mesh)
    np.add.at(load, mesh.triangles, (dens * mesh.areas / 3.0)[:, None] * np.ones(3))
    free = np.ones(mesh.n_nodes, bool)
    free[mesh.boundary_nodes()] = False
    return iron, load, free


def nonlinear_residual(mesh: Mesh, regions: RegionMap, material, excitation, u: np.ndarray) -> np.ndarray:
    """Residual vector a(u; phi_i) - f(phi_i) on all nodes (Dirichlet rows included)."""
    iron, load, _ = _state_setup(mesh, regions, excitation)
    g = element_gradients(mesh, u)
    nu = material.element_nu(iron, np.linalg.norm(g, axis=1))
    flux = (nu * mesh.areas)[:, None] * g
    r = np.zeros(mesh.n_nodes)
    np.add.at(r, mesh.triangles, np.einsum("mkd,md->mk", mesh.gradients, flux))
    return r - load


def newton_iterate(mesh: Mesh, regions: RegionMap, material, excitation,
                   initial: ScalarField | np.ndarray | None = None,
                   tol: float = 1e-10, max_iter: int = 50,
                   linear_method: str = "direct", linear_rtol: float = 1e-10) -> NewtonResult:
    """Damped Newton for ``-div(nu(|grad u|) grad u) = J``, ``u = 0`` on the outer boundary.

    ``tol`` is relative to the load norm. The Newton matrix is assembled from
    ``nu I + (nu'(s)/s) grad u (x) grad u``; steps are halved until the residual
    norm decreases (floor 2**-20).
    """
    iron, load, free = _state_setup(mesh, regions, excitation)
    u = np.zeros(mesh.n_nodes) if initial is None else np.array(getattr(initial, "values", initial), float)
    u[~free] = 0.0
    scale = np.linalg.norm(load[free])
    if scale == 0.0:
        return NewtonResult(ScalarField(np.zeros(mesh.n_nodes), mesh), [0.0], 0)
    grads = mesh.gradients

    def residual(v):
        g = element_gradients(mesh, v)
        s = np.linalg.norm(g, axis=1)
        nu = material.element_nu(iron, s)
        r = np.zeros(mesh.n_nodes)
        np.add.at(r, mesh.triangles, np.einsum("mkd,md->mk", grads, (nu * mesh.areas)[:, None] * g))
        r -= load
        r[~free] = 0.0
        return r, g

    r, g = residual(u)
    history = [np.linalg.norm(r) / scale]
    it = 0
    while history[-1] > tol:
        if it >= max_iter:
            raise NewtonError(f"Newton did not converge in {max_iter} iterations "
                              f"(residual {history[-1]:.3e})", history)
        tensors = material.element_tangent(iron, g)
        jac = assemble_tensor_stiffness(mesh, tensors)
        jac, rhs = apply_dirichlet(jac, -r, ~free, 0.0)
        du = solve_matrix(jac, rhs, linear_method, linear_rtol)
        step = 1.0
        while True:
            trial = u + step * du
            r_new, g_new = residual(trial)
            res = np.linalg.norm(r_new) / scale
            if res < history[-1]:
                break
            step *= 0.5
            if step < 2.0 ** -20:
                raise NewtonError("Newton line search reached step floor 2**-20", history)
        u, r, g = trial, r_new, g_new
        history.append(res)
        it += 1
    smax = getattr(material, "s_max", None)
    if smax is not None and np.any(iron):
        bmax = float(np.linalg.norm(g[iron], axis=1).max())
        if bmax > smax:
            logger.warning("flux density %.2f T exceeds admissible material range %.2f T", bmax, smax)
    return NewtonResult(ScalarField(u, mesh), history, it)


def newton_solve(mesh: Mesh, regions: RegionMap, material, excitation,
                 initial: ScalarField | np.ndarray | None = None,
                 tol: float = 1e-10, max_iter: int = 50, **linear) -> ScalarField:
    return newton_iterate(mesh, regions, material, excitation, initial, tol, max_iter, **linear).u
