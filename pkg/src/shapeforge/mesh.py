"""Triangular meshes with region labels, deformation and plain-text / VTK I/O.

Coordinates are in meters. Triangles are stored counterclockwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Mesh",
    "RegionMap",
    "DeformationField",
    "MeshError",
    "DegenerateMeshError",
    "deform",
    "min_quality",
    "triangle_quality",
    "signed_areas",
    "interface_nodes",
    "rotor_nodes",
    "rotor_boundary_nodes",
    "refine_uniform",
    "read_mesh",
    "write_mesh",
    "write_vtk",
    "read_vtk_counts",
]


class MeshError(ValueError):
    """Raised when a mesh violates one of its structural invariants."""


class DegenerateMeshError(MeshError):
    """Raised when a deformation produces a triangle with non-positive area."""

    def __init__(self, message: str, triangles: np.ndarray):
        super().__init__(message)
        self.triangles = triangles


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming P1 triangulation.

    ``boundary_edges`` lie on the outer boundary of the computational domain
    (one adjacent triangle); ``interface_edges`` separate two triangles with
    different region ids. Arrays are read-only; derived quantities are cached.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    region_ids: np.ndarray
    boundary_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    boundary_markers: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    interface_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    interface_markers: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    check: bool = True

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes, float).reshape(-1, 2))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "region_ids", _frozen(self.region_ids, np.int64).reshape(-1))
        for name, width in (("boundary_edges", 2), ("interface_edges", 2)):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int64).reshape(-1, width))
        for name in ("boundary_markers", "interface_markers"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int64).reshape(-1))
        if self.check:
            self.validate()

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def validate(self) -> None:
        n = self.n_nodes
        if len(self.region_ids) != self.n_triangles:
            raise MeshError("region_ids length does not match triangle count")
        if len(self.boundary_markers) != len(self.boundary_edges):
            raise MeshError("boundary marker count does not match boundary edges")
        if len(self.interface_markers) != len(self.interface_edges):
            raise MeshError("interface marker count does not match interface edges")
        for name in ("triangles", "boundary_edges", "interface_edges"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise MeshError(f"{name} reference node indices out of range")
        if not np.all(np.isfinite(self.nodes)):
            raise MeshError("non-finite node coordinates")
        bad = np.flatnonzero(self.areas <= 0.0)
        if bad.size:
            raise DegenerateMeshError(
                f"{bad.size} triangle(s) with non-positive signed area (first: {bad[0]})", bad)
        adj = self.edge_triangles
        for k, (i, j) in enumerate(self.boundary_edges):
            tris = adj.get((min(i, j), max(i, j)), ())
            if len(tris) != 1:
                raise MeshError(f"boundary edge {k} ({i},{j}) is shared by {len(tris)} triangles")
        for k, (i, j) in enumerate(self.interface_edges):
            tris = adj.get((min(i, j), max(i, j)), ())
            if len(tris) != 2 or self.region_ids[tris[0]] == self.region_ids[tris[1]]:
                raise MeshError(f"interface edge {k} ({i},{j}) does not separate two regions")

    @cached_property
    def areas(self) -> np.ndarray:
        return signed_areas(self.nodes, self.triangles)

    @cached_property
    def gradients(self) -> np.ndarray:
        """Gradients of the three barycentric basis functions, shape (M, 3, 2)."""
        p = self.nodes[self.triangles]
        # grad(lambda_i) = rot90(edge opposite to i) / (2A)
        e0 = p[:, 2] - p[:, 1]
        e1 = p[:, 0] - p[:, 2]
        e2 = p[:, 1] - p[:, 0]
        g = np.stack([e0, e1, e2], axis=1)
        grads = np.stack([-g[..., 1], g[..., 0]], axis=-1)
        return grads / (2.0 * self.areas)[:, None, None]

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def edge_triangles(self) -> dict[tuple[int, int], tuple[int, ...]]:
        """Map sorted node pair -> adjacent triangle indices."""
        out: dict[tuple[int, int], list[int]] = {}
        for t, (a, b, c) in enumerate(self.triangles.tolist()):
            for i, j in ((a, b), (b, c), (c, a)):
                key = (i, j) if i < j else (j, i)
                out.setdefault(key, []).append(t)
        return {k: tuple(v) for k, v in out.items()}

    def with_nodes(self, nodes: np.ndarray, check: bool = True) -> "Mesh":
        return Mesh(nodes, self.triangles, self.region_ids, self.boundary_edges,
                    self.boundary_markers, self.interface_edges, self.interface_markers,
                    check=check)

    def boundary_nodes(self, markers: Iterable[int] | None = None) -> np.ndarray:
        edges = self.boundary_edges
        if markers is not None:
            edges = edges[np.isin(self.boundary_markers, list(markers))]
        return np.unique(edges)

    def region_mask(self, ids: Iterable[int]) -> np.ndarray:
        return np.isin(self.region_ids, np.fromiter(ids, dtype=np.int64))


@dataclass(frozen=True)
class RegionMap:
    """Material and design role of every region id.

    ``iron``, ``air`` and ``coils`` classify the material (coils are
    non-magnetic); ``rotor`` marks the design region and every other id is
    fixed. ``coils`` maps region id to its signed current-density multiplier.
    """

    iron: frozenset[int]
    air: frozenset[int]
    coils: Mapping[int, float]
    rotor: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "iron", frozenset(int(i) for i in self.iron))
        object.__setattr__(self, "air", frozenset(int(i) for i in self.air))
        object.__setattr__(self, "rotor", frozenset(int(i) for i in self.rotor))
        object.__setattr__(self, "coils", {int(k): float(v) for k, v in dict(self.coils).items()})
        coil_ids = frozenset(self.coils)
        if self.iron & self.air or self.iron & coil_ids or self.air & coil_ids:
            raise MeshError("iron, air and coil regions must be disjoint")
        if not self.rotor <= (self.iron | self.air):
            raise MeshError("rotor regions must be iron or air regions")

    @property
    def all_ids(self) -> frozenset[int]:
        return self.iron | self.air | frozenset(self.coils)

    @property
    def fixed(self) -> frozenset[int]:
        return self.all_ids - self.rotor

    @property
    def rotor_iron(self) -> frozenset[int]:
        return self.iron & self.rotor

    @property
    def rotor_air(self) -> frozenset[int]:
        return self.air & self.rotor

    def check_mesh(self, mesh: Mesh) -> None:
        present = set(np.unique(mesh.region_ids).tolist())
        missing = present - self.all_ids
        if missing:
            raise MeshError(f"region ids {sorted(missing)} are not classified")


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-node displacement field (meters) on a mesh."""

    values: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1, 2)
        if vals.shape[0] != self.mesh.n_nodes:
            raise ValueError("deformation field length does not match node count")
        if not np.all(np.isfinite(vals)):
            raise ValueError("deformation field has non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __neg__(self) -> "DeformationField":
        return DeformationField(-self.values, self.mesh)

    def scaled(self, a: float) -> "DeformationField":
        return DeformationField(a * self.values, self.mesh)

    @classmethod
    def zeros(cls, mesh: Mesh) -> "DeformationField":
        return cls(np.zeros((mesh.n_nodes, 2)), mesh)


def deform(mesh: Mesh, field: DeformationField, t: float) -> Mesh:
    """Return the mesh mapped by ``x -> x + t * V(x)``.

    Raises DegenerateMeshError if any image triangle has non-positive area.
    """
    if t < 0:
        raise ValueError("step t must be non-negative")
    if field.values.shape[0] != mesh.n_nodes:
        raise ValueError("deformation field is not defined on this mesh")
    if t == 0:
        return mesh
    new_nodes = mesh.nodes + t * field.values
    areas = signed_areas(new_nodes, mesh.triangles)
    bad = np.flatnonzero(areas <= 0.0)
    if bad.size:
        raise DegenerateMeshError(
            f"deformation with t={t:g} collapses {bad.size} triangle(s)", bad)
    # Connectivity and markers were validated on the source mesh.
    out = mesh.with_nodes(new_nodes, check=False)
    out.__dict__["areas"] = areas
    if "edge_triangles" in mesh.__dict__:
        out.__dict__["edge_triangles"] = mesh.edge_triangles
    return out


def triangle_quality(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Radius ratio 2r/R per triangle (1 for equilateral, 0 for degenerate)."""
    p = nodes[triangles]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    area = np.abs(signed_areas(nodes, triangles))
    # r = 2A/(a+b+c), R = abc/(4A)
    return 16.0 * area**2 / ((a + b + c) * a * b * c)


def min_quality(mesh: Mesh) -> float:
    return float(triangle_quality(mesh.nodes, mesh.triangles).min())


def _region_edge_pairs(mesh: Mesh):
    """Yield (i, j, region_a, region_b) for every edge separating two regions."""
    rid = mesh.region_ids
    for (i, j), tris in mesh.edge_triangles.items():
        if len(tris) == 2 and rid[tris[0]] != rid[tris[1]]:
            yield i, j, int(rid[tris[0]]), int(rid[tris[1]])


def interface_nodes(mesh: Mesh, regions: RegionMap) -> np.ndarray:
    """Sorted node indices on an edge between a rotor iron and a rotor air region.

    An empty result means the rotor has no material interface.
    """
    iron, air = regions.rotor_iron, regions.rotor_air
    out = set()
    for i, j, a, b in _region_edge_pairs(mesh):
        if (a in iron and b in air) or (a in air and b in iron):
            out.add(i)
            out.add(j)
    return np.array(sorted(out), dtype=np.int64)


def rotor_nodes(mesh: Mesh, regions: RegionMap) -> np.ndarray:
    """Nodes in the closure of the design region."""
    mask = mesh.region_mask(regions.rotor)
    return np.unique(mesh.triangles[mask])


def rotor_boundary_nodes(mesh: Mesh, regions: RegionMap) -> np.ndarray:
    """Nodes shared by a rotor triangle and a non-rotor triangle (or on the outer boundary)."""
    mask = mesh.region_mask(regions.rotor)
    inside = np.zeros(mesh.n_nodes, bool)
    inside[mesh.triangles[mask]] = True
    outside = np.zeros(mesh.n_nodes, bool)
    outside[mesh.triangles[~mask]] = True
    on_bnd = np.zeros(mesh.n_nodes, bool)
    on_bnd[mesh.boundary_nodes()] = True
    return np.flatnonzero(inside & (outside | on_bnd))


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four by edge midpoints; markers are inherited."""
    nodes = [*mesh.nodes]
    mid: dict[tuple[int, int], int] = {}

    def midpoint(i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        if key not in mid:
            mid[key] = len(nodes)
            nodes.append(0.5 * (mesh.nodes[i] + mesh.nodes[j]))
        return mid[key]

    tris, rids = [], []
    for (a, b, c), r in zip(mesh.triangles.tolist(), mesh.region_ids.tolist()):
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        tris += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        rids += [r] * 4

    def split(edges, markers):
        e_out, m_out = [], []
        for (i, j), m in zip(edges.tolist(), markers.tolist()):
            k = midpoint(i, j)
            e_out += [(i, k), (k, j)]
            m_out += [m, m]
        return np.array(e_out, dtype=np.int64).reshape(-1, 2), np.array(m_out, dtype=np.int64)

    be, bm = split(mesh.boundary_edges, mesh.boundary_markers)
    ie, im = split(mesh.interface_edges, mesh.interface_markers)
    return Mesh(np.array(nodes), np.array(tris), np.array(rids), be, bm, ie, im)


# --------------------------------------------------------------------------- I/O

def write_mesh(mesh: Mesh, path: str | Path) -> None:
    """Write the plain-text node/triangle/edge listing."""
    lines = [f"nodes {mesh.n_nodes} triangles {mesh.n_triangles} "
             f"boundary_edges {len(mesh.boundary_edges)} interface_edges {len(mesh.interface_edges)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    lines += [f"{i} {j} {k} {r}" for (i, j, k), r in zip(mesh.triangles.tolist(), mesh.region_ids.tolist())]
    lines += [f"{i} {j} {m}" for (i, j), m in zip(mesh.boundary_edges.tolist(), mesh.boundary_markers.tolist())]
    lines += [f"{i} {j} {m}" for (i, j), m in zip(mesh.interface_edges.tolist(), mesh.interface_markers.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path: str | Path) -> Mesh:
    text = Path(path).read_text().split("\n")
    head = text[0].split()
    if len(head) != 8 or head[0::2] != ["nodes", "triangles", "boundary_edges", "interface_edges"]:
        raise MeshError(f"{path}: malformed header line")
    n, m, b, i = (int(v) for v in head[1::2])
    body = [ln.split() for ln in text[1:] if ln.strip()]
    if len(body) != n + m + b + i:
        raise MeshError(f"{path}: expected {n + m + b + i} data lines, found {len(body)}")
    nodes = np.array(body[:n], dtype=float).reshape(-1, 2)
    tri = np.array(body[n:n + m], dtype=np.int64).reshape(-1, 4)
    bnd = np.array(body[n + m:n + m + b], dtype=np.int64).reshape(-1, 3)
    itf = np.array(body[n + m + b:], dtype=np.int64).reshape(-1, 3)
    return Mesh(nodes, tri[:, :3], tri[:, 3], bnd[:, :2], bnd[:, 2], itf[:, :2], itf[:, 2])


def write_vtk(mesh: Mesh, fields: Sequence[tuple[str, object]] | Mapping[str, object],
              path: str | Path, title: str = "shapeforge") -> None:
    """Legacy ASCII VTK unstructured grid; fields are per-node scalars or 2-vectors.

    ``fields`` holds (name, values) pairs; values may be arrays or objects with
    a ``values`` attribute (ScalarField, DeformationField).
    """
    items = list(fields.items()) if isinstance(fields, Mapping) else list(fields)
    n, m = mesh.n_nodes, mesh.n_triangles
    out = ["# vtk DataFile Version 2.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {n} double"]
    out += [f"{x!r} {y!r} 0.0" for x, y in mesh.nodes.tolist()]
    out.append(f"CELLS {m} {4 * m}")
    out += [f"3 {i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    out.append(f"CELL_TYPES {m}")
    out += ["5"] * m
    out += [f"CELL_DATA {m}", "SCALARS region int 1", "LOOKUP_TABLE default"]
    out += [str(r) for r in mesh.region_ids.tolist()]
    if items:
        out.append(f"POINT_DATA {n}")
    for name, obj in items:
        vals = np.asarray(getattr(obj, "values", obj), dtype=float)
        if vals.shape == (n,):
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [repr(v) for v in vals.tolist()]
        elif vals.shape == (n, 2):
            out.append(f"VECTORS {name} double")
            out += [f"{x!r} {y!r} 0.0" for x, y in vals.tolist()]
        else:
            raise ValueError(f"field {name!r} has shape {vals.shape}, expected ({n},) or ({n}, 2)")
    Path(path).write_text("\n".join(out) + "\n")


def read_vtk_counts(path: str | Path) -> dict[str, object]:
    """Parse the structural counts of a legacy VTK file written by write_vtk."""
    counts: dict[str, object] = {"scalars": [], "vectors": []}
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "POINTS":
            counts["points"] = int(tok[1])
        elif tok[0] == "CELLS":
            counts["cells"] = int(tok[1])
        elif tok[0] == "POINT_DATA":
            counts["point_data"] = int(tok[1])
        elif tok[0] == "SCALARS" and tok[1] != "region":
            counts["scalars"].append(tok[1])
        elif tok[0] == "VECTORS":
            counts["vectors"].append(tok[1])
    return counts
