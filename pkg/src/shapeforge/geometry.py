"""Parametric SynRM cross-sections: layered rotor, air gap, slotted three-phase stator."""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import triangle

from .mesh import Mesh, MeshError, RegionMap, signed_areas
from .physics import CurrentExcitation, TorqueFunctional

__all__ = [
    "MachineSpec",
    "MachineModel",
    "GeometryError",
    "generate",
    "desk_preset",
    "layer_bounds",
    "analytic_layer_areas",
    "slot_layout",
    "OUTER_AIR", "STATOR", "GAP_OUTER", "BAND", "GAP_INNER", "SHAFT", "LAYER0", "SLOT0",
    "IFACE_ROTOR_LAYER", "IFACE_ROTOR_OUTER", "IFACE_SHAFT", "IFACE_OTHER",
]

OUTER_AIR, STATOR, GAP_OUTER, BAND, GAP_INNER, SHAFT = 1, 2, 3, 4, 5, 6
LAYER0 = 10
SLOT0 = 100

IFACE_ROTOR_LAYER, IFACE_ROTOR_OUTER, IFACE_SHAFT, IFACE_OTHER = 1, 2, 3, 4

# phase belts around one pole pair: (phase, sign) for U+, W-, V+, U-, W+, V-
_BELTS = ((0, 1), (2, -1), (1, 1), (0, -1), (2, 1), (1, -1))


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class MachineSpec:
    """Geometry, winding and meshing parameters (SI units, angles in radians).

    ``rotor_angle=None`` rotates the rotor so the stator current vector leads
    the rotor d-axis by ``current_angle``.
    """

    stator_inner_radius: float = 0.0265
    stator_outer_radius: float = 0.0475
    rotor_outer_radius: float = 0.0185
    shaft_radius: float = 0.001
    outer_air_radius: float = 0.052
    slots: int = 24
    pole_pairs: int = 1
    layers: int = 9
    layer_thicknesses: tuple[float, ...] = ()
    axial_length: float = 0.05
    torque_band: tuple[float, float] = (0.0205, 0.0245)
    slot_depth: float = 0.010
    slot_fraction: float = 0.5
    mesh_size: float = 0.0015
    mesh_grading: float = 2.0
    phase_currents: tuple[float, float, float] = (12.0, -6.0, -6.0)
    turns_per_slot: int = 64
    current_angle: float = math.pi / 4
    rotor_angle: float | None = None

    def validate(self) -> None:
        r_sh, r_ro = self.shaft_radius, self.rotor_outer_radius
        r_si, r_so = self.stator_inner_radius, self.stator_outer_radius
        if not 0 < r_sh < r_ro < r_si < r_so:
            raise GeometryError("radii must satisfy 0 < shaft < rotor outer < stator inner < stator outer")
        if self.outer_air_radius <= r_so:
            raise GeometryError("outer air radius must exceed stator outer radius")
        lo, hi = self.torque_band
        if not r_ro < lo < hi < r_si:
            raise GeometryError("torque band must lie strictly inside the air gap")
        if self.slot_depth <= 0 or r_si + self.slot_depth >= r_so:
            raise GeometryError("slot depth must leave a stator yoke")
        if not 0 < self.slot_fraction < 1:
            raise GeometryError("slot_fraction must be in (0, 1)")
        if self.pole_pairs < 1 or self.slots % (6 * self.pole_pairs):
            raise GeometryError("slot count must be divisible by 3 * 2 * pole_pairs")
        if self.layers < 1 or self.layers % 2 == 0:
            raise GeometryError("layer count must be odd (iron layers on both outer ends)")
        th = self.thicknesses()
        if len(th) != self.layers or min(th) <= 0:
            raise GeometryError("need one positive thickness per layer")
        if sum(th) > 2 * r_ro * (1 + 1e-12):
            raise GeometryError("layer stack exceeds rotor diameter along the q-axis")
        if self.mesh_size <= 0:
            raise GeometryError("mesh_size must be positive")
        bounds = layer_bounds(self)
        centre = self.layers // 2
        if not (bounds[centre] < -r_sh and bounds[centre + 1] > r_sh):
            raise GeometryError("shaft must lie inside the central iron layer")
        if self.turns_per_slot < 1 or len(self.phase_currents) != 3:
            raise GeometryError("need three phase currents and positive turns")

    def thicknesses(self) -> tuple[float, ...]:
        if self.layer_thicknesses:
            return tuple(self.layer_thicknesses)
        return (2 * self.rotor_outer_radius / self.layers,) * self.layers

    def resolved_rotor_angle(self) -> float:
        if self.rotor_angle is not None:
            return self.rotor_angle
        return current_axis_angle(self) - self.current_angle / self.pole_pairs


class MachineModel(NamedTuple):
    mesh: Mesh
    regions: RegionMap
    excitation: CurrentExcitation
    torque: TorqueFunctional


def desk_preset() -> MachineSpec:
    """Desk-scale machine: reference radii, 24 slots, 9 rotor layers, 1.5 mm mesh."""
    return MachineSpec()


def layer_bounds(spec: MachineSpec) -> np.ndarray:
    """q-axis coordinates of layer boundaries, centred stack (layers + 1 values)."""
    th = np.array(spec.thicknesses())
    return np.concatenate([[0.0], np.cumsum(th)]) - th.sum() / 2


def slot_layout(spec: MachineSpec) -> list[tuple[float, int, int]]:
    """(centre angle, phase index, sign) for each slot of a single-layer winding."""
    q = spec.slots // (6 * spec.pole_pairs)
    pitch = 2 * math.pi / spec.slots
    return [((s + 0.5) * pitch, *_BELTS[(s // q) % 6]) for s in range(spec.slots)]


def current_axis_angle(spec: MachineSpec) -> float:
    """Mechanical angle of the stator MMF axis for the configured phase currents."""
    q = spec.slots // (6 * spec.pole_pairs)
    theta_u = q * math.pi / spec.slots  # centre of the first U+ belt
    i_u, i_v, i_w = spec.phase_currents
    a = cmath.exp(2j * math.pi / 3)
    vec = i_u + i_v * a + i_w * a * a
    gamma = cmath.phase(vec) if abs(vec) > 0 else 0.0
    # a +z current belt centred at theta drives flux along theta - 90 deg (electrical)
    return theta_u + (gamma - math.pi / 2) / spec.pole_pairs


def _strip_area(r: float, y: float) -> float:
    y = min(max(y, -r), r)
    return y * math.sqrt(r * r - y * y) + r * r * math.asin(y / r)


def analytic_layer_areas(spec: MachineSpec) -> list[float]:
    """Exact areas of the rotor layers (central layer minus the shaft bore)."""
    b = layer_bounds(spec)
    r = spec.rotor_outer_radius
    areas = [_strip_area(r, b[k + 1]) - _strip_area(r, b[k]) for k in range(spec.layers)]
    areas[spec.layers // 2] -= math.pi * spec.shaft_radius**2
    return areas


class _Pslg:
    def __init__(self):
        self.points: list[tuple[float, float]] = []
        self.markers: list[int] = []
        self.index: dict[tuple[int, int], int] = {}
        self.segments: list[tuple[int, int]] = []
        self.segment_markers: list[int] = []

    def vertex(self, p, marker=0) -> int:
        key = (round(p[0] * 1e10), round(p[1] * 1e10))
        if key not in self.index:
            self.index[key] = len(self.points)
            self.points.append((float(p[0]), float(p[1])))
            self.markers.append(marker)
        return self.index[key]

    def polyline(self, pts, marker=0, closed=False):
        ids = [self.vertex(p, marker) for p in pts]
        if closed:
            ids.append(ids[0])
        for i, j in zip(ids[:-1], ids[1:]):
            if i != j:
                self.segments.append((i, j))
                self.segment_markers.append(marker)


def _circle_points(radius, h, breaks=(), min_segments=12):
    """Closed polygon on a circle through the given break points, edges <= h."""
    if breaks:
        pts = sorted(breaks, key=lambda p: math.atan2(p[1], p[0]) % (2 * math.pi))
        ang = [math.atan2(p[1], p[0]) % (2 * math.pi) for p in pts]
    else:
        pts, ang = [(radius, 0.0)], [0.0]
    out = []
    for k, (p, a0) in enumerate(zip(pts, ang)):
        a1 = ang[(k + 1) % len(ang)]
        gap = (a1 - a0) % (2 * math.pi) or 2 * math.pi
        n = max(1, math.ceil(gap * radius / h), math.ceil(gap / (2 * math.pi) * min_segments))
        out.append(p)
        out += [(radius * math.cos(a0 + gap * i / n), radius * math.sin(a0 + gap * i / n)) for i in range(1, n)]
    return out


def _line_points(p, q, h):
    n = max(1, math.ceil(math.dist(p, q) / h))
    return [(p[0] + (q[0] - p[0]) * i / n, p[1] + (q[1] - p[1]) * i / n) for i in range(n + 1)]


def _arc_points(radius, a0, a1, h):
    n = max(1, math.ceil(abs(a1 - a0) * radius / h))
    return [(radius * math.cos(a0 + (a1 - a0) * i / n), radius * math.sin(a0 + (a1 - a0) * i / n))
            for i in range(n + 1)]


def _rotate(p, angle):
    c, s = math.cos(angle), math.sin(angle)
    return (c * p[0] - s * p[1], s * p[0] + c * p[1])


def generate(spec: MachineSpec) -> MachineModel:
    """Mesh the full cross-section and build regions, excitation and torque band."""
    spec.validate()
    h = spec.mesh_size
    hc = h * spec.mesh_grading
    r_sh, r_ro = spec.shaft_radius, spec.rotor_outer_radius
    r_in, r_out = spec.torque_band
    r_si, r_so, r_d = spec.stator_inner_radius, spec.stator_outer_radius, spec.outer_air_radius
    r_sb = r_si + spec.slot_depth
    rot = spec.resolved_rotor_angle()
    circle_marker = {"shaft": 10, "rotor": 11, "band_in": 12, "band_out": 13,
                     "stator_in": 14, "slot_bottom": 15, "stator_out": 16, "outer": 17}
    radius_of = {10: r_sh, 11: r_ro, 12: r_in, 13: r_out, 14: r_si, 15: r_sb, 16: r_so, 17: r_d}

    g = _Pslg()
    # rotor layer chords (rotor frame: d-axis = x, layers stacked along y)
    bounds = layer_bounds(spec)
    chord_ends = []
    for y in bounds[1:-1]:
        x = math.sqrt(r_ro**2 - y**2)
        pts = [_rotate(p, rot) for p in _line_points((-x, y), (x, y), h)]
        g.polyline(pts)
        chord_ends += [pts[0], pts[-1]]
    g.polyline(_circle_points(r_ro, h, chord_ends), circle_marker["rotor"], closed=True)
    g.polyline(_circle_points(r_sh, h), circle_marker["shaft"], closed=True)
    g.polyline(_circle_points(r_in, h), circle_marker["band_in"], closed=True)
    g.polyline(_circle_points(r_out, h), circle_marker["band_out"], closed=True)

    layout = slot_layout(spec)
    half = 0.5 * spec.slot_fraction * 2 * math.pi / spec.slots
    mouth = []
    for centre, _, _ in layout:
        a0, a1 = centre - half, centre + half
        p0, p1 = (r_si * math.cos(a0), r_si * math.sin(a0)), (r_si * math.cos(a1), r_si * math.sin(a1))
        mouth += [p0, p1]
        q0, q1 = (r_sb * math.cos(a0), r_sb * math.sin(a0)), (r_sb * math.cos(a1), r_sb * math.sin(a1))
        g.polyline(_line_points(p0, q0, hc))
        g.polyline(_line_points(p1, q1, hc))
        g.polyline(_arc_points(r_sb, a0, a1, hc), circle_marker["slot_bottom"])
    g.polyline(_circle_points(r_si, h, mouth), circle_marker["stator_in"], closed=True)
    g.polyline(_circle_points(r_so, hc), circle_marker["stator_out"], closed=True)
    g.polyline(_circle_points(r_d, hc), circle_marker["outer"], closed=True)

    amax, amax_c = math.sqrt(3) / 4 * h * h, math.sqrt(3) / 4 * hc * hc
    seeds = [
        ((0.5 * (r_so + r_d), 0.0), OUTER_AIR, amax_c),
        ((0.5 * (r_sb + r_so), 0.0), STATOR, amax_c),
        ((0.5 * (r_out + r_si), 0.0), GAP_OUTER, amax),
        ((0.5 * (r_in + r_out), 0.0), BAND, amax),
        ((0.5 * (r_ro + r_in), 0.0), GAP_INNER, amax),
        ((0.0, 0.0), SHAFT, amax),
    ]
    for k in range(spec.layers):
        mid = 0.5 * (bounds[k] + bounds[k + 1])
        if abs(mid) < r_sh:
            mid = 0.5 * (r_sh + bounds[k + 1])
        seeds.append((_rotate((0.0, mid), rot), LAYER0 + k, amax))
    for s, (centre, _, _) in enumerate(layout):
        rm = 0.5 * (r_si + r_sb)
        seeds.append(((rm * math.cos(centre), rm * math.sin(centre)), SLOT0 + s, amax_c))

    data = {
        "vertices": np.array(g.points),
        "vertex_markers": np.array(g.markers, dtype=np.int32)[:, None],
        "segments": np.array(g.segments, dtype=np.int32),
        "segment_markers": np.array(g.segment_markers, dtype=np.int32)[:, None],
        "regions": np.array([[p[0], p[1], rid, a] for p, rid, a in seeds]),
    }
    try:
        out = triangle.triangulate(data, "pq30aAQ")
    except Exception as exc:  # triangle raises bare RuntimeError
        raise GeometryError(f"meshing failed at h={h}: {exc}") from exc
    nodes = out["vertices"].copy()
    tris = out["triangles"].astype(np.int64)
    rids = out["triangle_attributes"][:, 0].round().astype(np.int64)
    vmark = out["vertex_markers"].ravel()
    # Steiner points on circular segments are projected onto the circle
    for marker, radius in radius_of.items():
        sel = vmark == marker
        r = np.hypot(nodes[sel, 0], nodes[sel, 1])
        nodes[sel] *= (radius / r)[:, None]
    areas = signed_areas(nodes, tris)
    flip = areas < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    mesh = _assemble_mesh(nodes, tris, rids, spec)

    iron = {STATOR} | {LAYER0 + k for k in range(0, spec.layers, 2)}
    coils_sign = {SLOT0 + s: float(sign) for s, (_, _, sign) in enumerate(layout)}
    air = {OUTER_AIR, GAP_OUTER, BAND, GAP_INNER, SHAFT} | {LAYER0 + k for k in range(1, spec.layers, 2)}
    regions = RegionMap(iron, air, coils_sign, {LAYER0 + k for k in range(spec.layers)})
    regions.check_mesh(mesh)

    slot_areas = {SLOT0 + s: float(mesh.areas[mesh.region_ids == SLOT0 + s].sum()) for s in range(spec.slots)}
    excitation = CurrentExcitation.from_phases(
        {SLOT0 + s: (ph, sign) for s, (_, ph, sign) in enumerate(layout)},
        spec.phase_currents, spec.turns_per_slot, slot_areas)
    tf = TorqueFunctional(r_in, r_out, spec.axial_length, frozenset({BAND}))
    tf.check(mesh, regions)
    band_nodes = np.unique(mesh.triangles[mesh.region_ids == BAND])
    rotor_nodes = np.unique(mesh.triangles[mesh.region_mask(regions.rotor)])
    if np.intersect1d(band_nodes, rotor_nodes).size:
        raise GeometryError("torque band touches the rotor; refine the mesh or widen the gap")
    return MachineModel(mesh, regions, excitation, tf)


def _assemble_mesh(nodes, tris, rids, spec: MachineSpec) -> Mesh:
    edges: dict[tuple[int, int], list[int]] = {}
    for t, (a, b, c) in enumerate(tris.tolist()):
        for i, j in ((a, b), (b, c), (c, a)):
            edges.setdefault((min(i, j), max(i, j)), []).append(t)
    layer_ids = range(LAYER0, LAYER0 + spec.layers)
    bnd, itf, imark = [], [], []
    for key, ts in edges.items():
        if len(ts) == 1:
            bnd.append(key)
        elif len(ts) == 2:
            ra, rb = rids[ts[0]], rids[ts[1]]
            if ra == rb:
                continue
            pair = {int(ra), int(rb)}
            if pair <= set(layer_ids):
                mark = IFACE_ROTOR_LAYER
            elif GAP_INNER in pair and pair & set(layer_ids):
                mark = IFACE_ROTOR_OUTER
            elif SHAFT in pair:
                mark = IFACE_SHAFT
            else:
                mark = IFACE_OTHER
            itf.append(key)
            imark.append(mark)
        else:
            raise MeshError(f"non-manifold edge {key}")
    return Mesh(nodes, tris, rids, np.array(bnd), np.ones(len(bnd), int), np.array(itf), np.array(imark))
