"""Descent deformation fields from shape gradients.

Single objective: solve ``b(W, V) = -dJ(V)`` on the rotor with a Hilbert-space
metric. Several objectives: the min-norm bi-descent QP on interface degrees of
freedom followed by harmonic extension into the rotor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .fem import SolverError, mass_matrix, solve_matrix, stiffness_matrix
from .mesh import (DeformationField, Mesh, RegionMap, interface_nodes, rotor_boundary_nodes,
                   rotor_nodes)
from .shape_calculus import ShapeGradient

logger = logging.getLogger(__name__)

__all__ = [
    "DescentMetric",
    "QpProblem",
    "QpSolution",
    "ConstraintError",
    "boundary_normals",
    "metric_matrix",
    "metric_product",
    "metric_energy",
    "descent_bvp",
    "solve_bi_descent_qp",
    "build_interface_qp",
    "harmonic_extension",
    "buffer_regions",
    "mesh_motion",
]


class ConstraintError(ValueError):
    """Equality constraints are rank deficient or the interface is empty."""


@dataclass(frozen=True)
class DescentMetric:
    """Bilinear form on rotor deformation fields.

    ``kind="h1"``: ``int grad W : grad V + c W.V``;
    ``kind="elasticity"``: ``int 2 mu eps(W):eps(V) + lam div W div V + c W.V``.
    ``boundary="slip"`` keeps only the tangential component on the rotor
    boundary (W.n = 0), ``"clamped"`` fixes it. Nodes lying on one of
    ``circles`` (radii about the origin) use the exact radial normal.
    """

    kind: str = "h1"
    mass_coefficient: float = 0.01
    lame_lambda: float = 1.0
    lame_mu: float = 1.0
    boundary: str = "slip"
    circles: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("h1", "elasticity"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.boundary not in ("slip", "clamped"):
            raise ValueError(f"unknown boundary condition {self.boundary!r}")
        if self.mass_coefficient < 0 or self.lame_mu <= 0 or self.lame_lambda < 0:
            raise ValueError("metric coefficients must be non-negative (mu positive)")


def boundary_normals(mesh: Mesh, regions: RegionMap, circles: Sequence[float] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Rotor boundary nodes and their unit outward normals.

    Nodes within 1e-9 relative of a listed circle get the radial direction;
    other nodes average the unit normals of their adjacent boundary edges.
    """
    nodes = rotor_boundary_nodes(mesh, regions)
    rotor = mesh.region_mask(regions.rotor)
    acc = np.zeros((mesh.n_nodes, 2))
    for (i, j), tris in mesh.edge_triangles.items():
        inside = [t for t in tris if rotor[t]]
        if len(inside) != 1 or (len(tris) == 2 and rotor[tris[0]] == rotor[tris[1]]):
            continue
        t = inside[0]
        d = mesh.nodes[j] - mesh.nodes[i]
        n = np.array([d[1], -d[0]]) / np.hypot(*d)
        if np.dot(n, mesh.centroids[t] - mesh.nodes[i]) > 0:
            n = -n
        acc[i] += n
        acc[j] += n
    normals = acc[nodes]
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    x = mesh.nodes[nodes]
    r = np.hypot(x[:, 0], x[:, 1])
    for radius in circles:
        on = np.abs(r - radius) <= 1e-9 * radius
        radial = x[on] / r[on, None]
        sign = np.sign(np.einsum("nd,nd->n", radial, normals[on]))
        sign[sign == 0] = 1.0
        normals[on] = radial * sign[:, None]
    return nodes, normals


def _vector_element_matrices(mesh: Mesh, metric: DescentMetric) -> np.ndarray:
    g = mesh.gradients
    area = mesh.areas
    m = mesh.n_triangles
    ke = np.zeros((m, 3, 2, 3, 2))
    gg = np.einsum("mad,mbd->mab", g, g)
    if metric.kind == "h1":
        for k in range(2):
            ke[:, :, k, :, k] = gg
    else:
        mu, lam = metric.lame_mu, metric.lame_lambda
        for k in range(2):
            ke[:, :, k, :, k] += mu * gg
        # mu d_l phi_a d_k phi_b + lam d_k phi_a d_l phi_b for (a,k),(b,l)
        ke += mu * np.einsum("mal,mbk->makbl", g, g) + lam * np.einsum("mak,mbl->makbl", g, g)
    ke *= area[:, None, None, None, None]
    return ke.reshape(m, 6, 6)


def metric_matrix(mesh: Mesh, regions: RegionMap, metric: DescentMetric) -> sp.csr_matrix:
    """Full 2N x 2N matrix of b on interleaved dofs (2 i + k), rotor triangles only."""
    mask = mesh.region_mask(regions.rotor)
    ke = _vector_element_matrices(mesh, metric)[mask]
    dofs = (2 * mesh.triangles[mask][:, :, None] + np.arange(2)).reshape(-1, 6)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n2 = 2 * mesh.n_nodes
    b = sp.csr_matrix((ke.ravel(), (rows, cols)), shape=(n2, n2))
    if metric.mass_coefficient:
        mm = mass_matrix(mesh, mask)
        b = b + metric.mass_coefficient * sp.kron(mm, sp.eye(2), format="csr")
    return b.tocsr()


def metric_product(mesh: Mesh, regions: RegionMap, metric: DescentMetric,
                   w: DeformationField | np.ndarray, v: DeformationField | np.ndarray) -> float:
    wv = np.asarray(getattr(w, "values", w)).ravel()
    vv = np.asarray(getattr(v, "values", v)).ravel()
    return float(wv @ (metric_matrix(mesh, regions, metric) @ vv))


def metric_energy(mesh: Mesh, regions: RegionMap, metric: DescentMetric,
                  w: DeformationField | np.ndarray) -> float:
    """``b(W, W)`` summed element by element from the displacement gradient.

    Agrees with ``metric_product(w, w)`` but rigid motions contribute only
    second-order rounding, which keeps the value accurate when W is dominated
    by a near-kernel mode of the metric.
    """
    wv = np.asarray(getattr(w, "values", w), dtype=float).reshape(-1, 2)
    mask = mesh.region_mask(regions.rotor)
    tris = mesh.triangles[mask]
    grad = np.einsum("mak,mad->mkd", wv[tris], mesh.gradients[mask])  # grad[k, d] = d_d w_k
    if metric.kind == "h1":
        dens = np.einsum("mkd,mkd->m", grad, grad)
    else:
        sym = 0.5 * (grad + grad.transpose(0, 2, 1))
        div = grad[:, 0, 0] + grad[:, 1, 1]
        dens = 2.0 * metric.lame_mu * np.einsum("mkd,mkd->m", sym, sym) + metric.lame_lambda * div**2
    energy = float(np.dot(mesh.areas[mask], dens))
    if metric.mass_coefficient:
        mm = mass_matrix(mesh, mask)
        energy += metric.mass_coefficient * float(np.einsum("nk,nk->", wv, mm @ wv))
    return energy


def _reduction(mesh: Mesh, regions: RegionMap, metric: DescentMetric) -> sp.csr_matrix:
    """Map reduced coefficients to interleaved nodal displacements."""
    nodes = rotor_nodes(mesh, regions)
    bnodes, normals = boundary_normals(mesh, regions, metric.circles)
    is_bnd = np.zeros(mesh.n_nodes, bool)
    is_bnd[bnodes] = True
    rows, cols, vals = [], [], []
    col = 0
    for i in nodes[~is_bnd[nodes]]:
        rows += [2 * i, 2 * i + 1]
        cols += [col, col + 1]
        vals += [1.0, 1.0]
        col += 2
    if metric.boundary == "slip":
        for i, n in zip(bnodes, normals):
            rows += [2 * i, 2 * i + 1]
            cols += [col, col]
            vals += [-n[1], n[0]]
            col += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * mesh.n_nodes, col))


def _rotation_mode(mesh: Mesh, regions: RegionMap, metric: DescentMetric,
                   p: sp.csr_matrix) -> tuple[np.ndarray, np.ndarray] | None:
    """Reduced rigid rotation about the origin and its image under the reduced matrix.

    The rotation has zero strain energy, so under the elasticity metric only
    the mass term controls it and the reduced matrix is nearly singular. Its
    image is formed from the mass term alone, which is exact and avoids the
    rounding of a full matrix-vector product. None when the rotation is not
    admissible or there is no mass term.
    """
    if metric.kind != "elasticity" or not metric.mass_coefficient:
        return None
    rot = np.zeros((mesh.n_nodes, 2))
    nodes = rotor_nodes(mesh, regions)
    rot[nodes, 0] = -mesh.nodes[nodes, 1]
    rot[nodes, 1] = mesh.nodes[nodes, 0]
    full = rot.ravel()
    red = p.T @ full  # columns of p are orthonormal
    if np.linalg.norm(p @ red - full) > 1e-12 * np.linalg.norm(full):
        return None
    mm = mass_matrix(mesh, mesh.region_mask(regions.rotor))
    image = metric.mass_coefficient * (p.T @ (mm @ rot).ravel())
    return red, image


def _deflated_solve(a: sp.csr_matrix, rhs: np.ndarray, mode, method: str, rtol: float) -> np.ndarray:
    """Solve ``a x = rhs`` with the component along a near-kernel ``mode = (v, a v)`` split off."""
    if mode is None:
        return solve_matrix(a, rhs, method, rtol)
    v, av = mode
    s = float(v @ av)
    beta = float(v @ rhs) / s
    rest = rhs - beta * av
    z = solve_matrix(a, rest, method, rtol) if np.any(rest) else np.zeros_like(rhs)
    z -= (float(av @ z) / s) * v  # the exact z is a-orthogonal to v
    return beta * v + z


def descent_bvp(gradient: ShapeGradient, metric: DescentMetric, mesh: Mesh, regions: RegionMap,
                method: str = "direct", rtol: float = 1e-10) -> DeformationField:
    """Solve ``b(W, V) = -<G, V>`` for all admissible V; zero outside the rotor.

    The result satisfies ``<G, W> = -b(W, W)``; a relative mismatch above
    1e-10 raises SolverError.
    """
    g = gradient.covector.ravel()
    if not np.any(g):
        return DeformationField.zeros(mesh)
    b = metric_matrix(mesh, regions, metric)
    p = _reduction(mesh, regions, metric)
    a = (p.T @ b @ p).tocsr()
    rhs = -(p.T @ g)
    alpha = _deflated_solve(a, rhs, _rotation_mode(mesh, regions, metric, p), method, rtol)
    w = p @ alpha
    bww = metric_energy(mesh, regions, metric, w)
    gw = float(g @ w)
    if bww > 0 and abs(gw + bww) > 1e-10 * bww:
        raise SolverError(f"descent identity violated: <G,W>={gw:.6e}, b(W,W)={bww:.6e}, "
                          f"relative {abs(gw + bww) / bww:.1e}")
    return DeformationField(w.reshape(-1, 2), mesh)


# --------------------------------------------------------------------------- QP

@dataclass
class QpProblem:
    """``min rho + 1/2 |W|^2`` s.t. ``g_i . W <= rho`` and ``A W = 0``."""

    gradients: np.ndarray  # (N, d)
    equalities: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    nodes: np.ndarray | None = None  # interface node per coordinate pair, if built from a mesh

    def __post_init__(self):
        self.gradients = np.atleast_2d(np.asarray(self.gradients, dtype=float))
        d = self.gradients.shape[1]
        eq = np.asarray(self.equalities, dtype=float)
        self.equalities = eq.reshape(-1, d) if eq.size else np.zeros((0, d))
        if not np.all(np.isfinite(self.gradients)):
            raise ValueError("gradient rows must be finite")

    def scatter(self, w: np.ndarray, mesh: Mesh) -> np.ndarray:
        out = np.zeros((mesh.n_nodes, 2))
        out[self.nodes] = np.asarray(w).reshape(-1, 2)
        return out


@dataclass
class QpSolution:
    rho: float
    w: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    kkt_residual: float

    @property
    def objective(self) -> float:
        return self.rho + 0.5 * float(self.w @ self.w)


def _null_projector(a: np.ndarray):
    if a.shape[0] == 0:
        return lambda v: v
    q, r = la.qr(a.T, mode="economic")
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= 1e-10 * max(diag.max(), 1e-300):
        raise ConstraintError("equality constraint rows are linearly dependent")
    return lambda v: v - (v @ q) @ q.T


def _affine_min_norm(h: np.ndarray) -> np.ndarray:
    """Weights y (sum 1) minimizing y^T h y, without sign constraints."""
    k = h.shape[0]
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = h
    kkt[:k, k] = kkt[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:k]


def _simplex_min_norm(h: np.ndarray, tol: float = 1e-14) -> np.ndarray:
    """Min of ``lam^T H lam`` over the simplex by Wolfe's active-set method."""
    n = h.shape[0]
    if n == 1:
        return np.ones(1)
    if n == 2:
        den = h[0, 0] - 2 * h[0, 1] + h[1, 1]
        l2 = 0.5 if den <= 0 else min(max((h[0, 0] - h[0, 1]) / den, 0.0), 1.0)
        return np.array([1.0 - l2, l2])
    scale = max(np.abs(np.diag(h)).max(), 1e-300)
    active = [int(np.argmin(np.diag(h)))]
    lam = np.ones(1)
    for _ in range(50 * n):
        hx = h[:, active] @ lam
        xx = float(lam @ hx[active])
        j = int(np.argmin(hx))
        if hx[j] >= xx - tol * scale or j in active:
            break
        active.append(j)
        lam = np.append(lam, 0.0)
        while True:
            y = _affine_min_norm(h[np.ix_(active, active)])
            if np.all(y > tol):
                lam = y
                break
            neg = y <= tol
            steps = lam[neg] / (lam[neg] - y[neg])
            theta = float(np.min(steps)) if steps.size else 0.0
            lam = lam + theta * (y - lam)
            keep = lam > tol
            if keep.all():
                keep[np.argmin(lam)] = False
            active = [a for a, k in zip(active, keep) if k]
            lam = lam[keep]
            lam /= lam.sum()
    out = np.zeros(n)
    out[active] = lam
    return out


def solve_bi_descent_qp(qp: QpProblem) -> QpSolution:
    """Solve the bi-descent QP through its dual: W is minus the min-norm
    convex combination of the gradients projected onto ``ker A``."""
    g, a = qp.gradients, qp.equalities
    proj = _null_projector(a)
    gp = proj(g)
    h = gp @ gp.T
    lam = _simplex_min_norm(h) if np.any(gp) else np.full(g.shape[0], 1.0 / g.shape[0])
    w = -(lam @ gp)
    slopes = g @ w
    rho = float(slopes.max())
    if a.shape[0]:
        mu = np.linalg.lstsq(a.T, -(w + lam @ g), rcond=None)[0]
        stat = w + lam @ g + mu @ a
        feas = np.abs(a @ w).max()
    else:
        mu, stat, feas = np.zeros(0), w + lam @ g, 0.0
    kkt = max(np.abs(stat).max(initial=0.0), abs(lam.sum() - 1.0), max(0.0, -lam.min()),
              np.abs(lam * (slopes - rho)).max(), float(feas))
    return QpSolution(rho, w, lam, mu, float(kkt))


def build_interface_qp(gradients: Sequence[ShapeGradient], mesh: Mesh, regions: RegionMap,
                       circles: Sequence[float] = ()) -> QpProblem:
    """Restrict gradients to interface-node coordinates; add W.n = 0 rows for
    interface nodes on the rotor boundary."""
    nodes = interface_nodes(mesh, regions)
    if nodes.size == 0:
        raise ConstraintError("design region has no iron/air interface")
    if any(gr.mesh is not mesh for gr in gradients):
        raise ValueError("all gradients must live on the given mesh")
    rows = np.array([gr.covector[nodes].ravel() for gr in gradients])
    bnodes, normals = boundary_normals(mesh, regions, circles)
    pos = {int(n): k for k, n in enumerate(nodes)}
    eq = []
    for node, n in zip(bnodes, normals):
        if int(node) in pos:
            row = np.zeros(2 * nodes.size)
            row[2 * pos[int(node)]: 2 * pos[int(node)] + 2] = n
            eq.append(row)
    return QpProblem(rows, np.array(eq).reshape(-1, 2 * nodes.size), nodes)


def harmonic_extension(w_interface: np.ndarray, mesh: Mesh, regions: RegionMap,
                       nodes: np.ndarray | None = None) -> DeformationField:
    """Componentwise discrete Laplace extension into the rotor.

    Dirichlet data: ``w_interface`` on interface nodes, zero on the remaining
    rotor boundary; zero outside the rotor.
    """
    nodes = interface_nodes(mesh, regions) if nodes is None else np.asarray(nodes)
    vals = np.asarray(w_interface, dtype=float).reshape(-1, 2)
    out = np.zeros((mesh.n_nodes, 2))
    if not np.any(vals):
        return DeformationField(out, mesh)
    rotor = mesh.region_mask(regions.rotor)
    dir_mask = np.zeros(mesh.n_nodes, bool)
    dir_mask[rotor_boundary_nodes(mesh, regions)] = True
    dir_mask[nodes] = True
    out[nodes] = vals
    inner = np.zeros(mesh.n_nodes, bool)
    inner[rotor_nodes(mesh, regions)] = True
    inner &= ~dir_mask
    if np.any(inner):
        k = stiffness_matrix(mesh, 1.0, rotor)
        free = np.flatnonzero(inner)
        k_ff = k[free][:, free]
        rhs = -(k[free] @ out)
        for c in range(2):
            out[free, c] = solve_matrix(k_ff, rhs[:, c], "direct", 1e-12)
    return DeformationField(out, mesh)


def buffer_regions(mesh: Mesh, regions: RegionMap, exclude: frozenset[int] = frozenset()) -> frozenset[int]:
    """Non-design air regions sharing an edge with the rotor, minus ``exclude``."""
    rotor = mesh.region_mask(regions.rotor)
    found = set()
    for tris in mesh.edge_triangles.values():
        if len(tris) == 2 and rotor[tris[0]] != rotor[tris[1]]:
            outside = tris[1] if rotor[tris[0]] else tris[0]
            found.add(int(mesh.region_ids[outside]))
    allowed = set(regions.air) - set(regions.rotor) - set(regions.coils) - set(exclude)
    return frozenset(found & allowed)


def mesh_motion(field_: DeformationField, mesh: Mesh, regions: RegionMap,
                buffer: frozenset[int]) -> DeformationField:
    """Carry a rotor field into ``buffer`` regions by harmonic extension.

    Buffer nodes shared with the rotor take the field's values; other buffer
    boundary nodes stay fixed. Only interior buffer nodes change, so the
    buffer geometry is preserved when the rotor boundary is.
    """
    if not buffer or not np.any(field_.values):
        return field_
    mask = mesh.region_mask(buffer)
    bnodes = np.unique(mesh.triangles[mask])
    touched = np.zeros(mesh.n_nodes, bool)
    touched[np.unique(mesh.triangles[~mask])] = True
    touched[mesh.boundary_nodes()] = True
    free = bnodes[~touched[bnodes]]
    out = np.array(field_.values)
    if free.size:
        k = stiffness_matrix(mesh, 1.0, mask)
        rhs = -(k[free] @ out)
        k_ff = k[free][:, free]
        for c in range(2):
            out[free, c] = solve_matrix(k_ff, rhs[:, c], "direct", 1e-12)
    return DeformationField(out, mesh)
