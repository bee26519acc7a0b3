"""Line-search shape descent drivers: single objective, weighted bi-objective, and weight sweeps."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .descent import (DescentMetric, buffer_regions, build_interface_qp, descent_bvp,
                      harmonic_extension, mesh_motion, solve_bi_descent_qp)
from .fem import NewtonError, ScalarField, SolverSettings, newton_iterate
from .mesh import (DeformationField, DegenerateMeshError, Mesh, RegionMap, deform, min_quality,
                   rotor_nodes, write_mesh, write_vtk)
from .physics import CurrentExcitation, Reluctivity, TorqueFunctional, solve_adjoint, torque_fem, volume
from .shape_calculus import shape_derivative_torque, shape_derivative_volume

logger = logging.getLogger(__name__)

__all__ = [
    "ShapeProblem",
    "IterationRecord",
    "RunHistory",
    "ParetoRecord",
    "OptimizationAborted",
    "optimize_single",
    "optimize_bi",
    "pareto_sweep",
    "dominated_flags",
    "write_pareto_csv",
    "SnapshotWriter",
]

STEP_FLOOR = 2.0 ** -30
HISTORY_COLUMNS = ("iter", "J1", "J2", "t", "normW", "min_quality", "seconds")
PARETO_COLUMNS = ("w", "torque_Nm", "volume_m3", "iters", "status", "snapshot")


class OptimizationAborted(RuntimeError):
    """State or adjoint solve failed on an accepted design."""

    def __init__(self, message: str, history: "RunHistory"):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class ShapeProblem:
    """Everything a descent run needs besides its budget.

    ``volume_scale`` converts iron volume in m^3 into the unit used by the
    weighted volume objective (1e6: cm^3). ``min_quality_ratio`` rejects line
    search trials whose worst triangle quality drops below that fraction of
    the initial design's. ``move_buffer`` lets the air annulus between rotor
    and torque band follow the rotor boundary (mesh motion only).
    """

    mesh: Mesh
    regions: RegionMap
    excitation: CurrentExcitation
    torque: TorqueFunctional
    material: Reluctivity = Reluctivity()
    metric: DescentMetric = DescentMetric()
    solver: SolverSettings = SolverSettings()
    volume_scale: float = 1e6
    min_quality_ratio: float = 0.2
    move_buffer: bool = True

    def with_mesh(self, mesh: Mesh) -> "ShapeProblem":
        return replace(self, mesh=mesh)

    def motion(self, direction: DeformationField, mesh: Mesh) -> DeformationField:
        if not self.move_buffer:
            return direction
        buffer = buffer_regions(mesh, self.regions, self.torque.band)
        return mesh_motion(direction, mesh, self.regions, buffer)

    def volume_m3(self, mesh: Mesh) -> float:
        return volume(mesh, self.regions) * self.torque.axial_length


@dataclass
class IterationRecord:
    """State of design k: objectives, accepted step from it (0 when none), ``|W|``."""

    iter: int
    J1: float
    J2: float
    t: float
    normW: float
    min_quality: float
    seconds: float
    rho: float = math.nan
    slopes: tuple[float, ...] = ()

    def row(self) -> list:
        return [self.iter, repr(self.J1), repr(self.J2), repr(self.t), repr(self.normW),
                repr(self.min_quality), f"{self.seconds:.3f}"]


@dataclass
class RunHistory:
    records: list[IterationRecord] = field(default_factory=list)
    status: str = "running"
    weight: float | None = None

    @property
    def iterations(self) -> int:
        """Number of accepted steps."""
        return sum(1 for r in self.records if r.t > 0)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow(r.row())


@dataclass
class ParetoRecord:
    w: float
    torque: float
    volume: float  # m^3
    iterations: int
    status: str
    snapshot: str = ""
    dominated: bool = False
    history: RunHistory | None = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


class SnapshotWriter:
    """Writes VTK snapshots every ``every`` accepted iterations plus the final design."""

    def __init__(self, directory: str | Path, every: int = 10, prefix: str = "design"):
        self.directory = Path(directory)
        self.every = every
        self.prefix = prefix
        self.directory.mkdir(parents=True, exist_ok=True)

    def __call__(self, k: int, mesh: Mesh, u: ScalarField, final: bool = False) -> Path | None:
        if not final and (self.every <= 0 or k % self.every):
            return None
        name = f"{self.prefix}_final.vtk" if final else f"{self.prefix}_{k:04d}.vtk"
        path = self.directory / name
        write_vtk(mesh, [("u", u.values)], path)
        if final:
            write_mesh(mesh, self.directory / f"{self.prefix}_final.mesh")
        return path


# --------------------------------------------------------------------------- helpers

class _Circles:
    """Rotor nodes that sit on the analytic boundary circles, kept there exactly."""

    def __init__(self, problem: ShapeProblem):
        mesh = problem.mesh
        nodes = rotor_nodes(mesh, problem.regions)
        r = np.hypot(*mesh.nodes[nodes].T)
        self.sets = []
        for radius in problem.metric.circles:
            on = nodes[np.abs(r - radius) <= 1e-9 * radius]
            if on.size:
                self.sets.append((radius, on))

    def retract(self, mesh: Mesh) -> Mesh:
        if not self.sets:
            return mesh
        x = np.array(mesh.nodes)
        for radius, on in self.sets:
            x[on] *= (radius / np.hypot(x[on, 0], x[on, 1]))[:, None]
        out = mesh.with_nodes(x, check=False)
        if np.any(out.areas <= 0):
            raise DegenerateMeshError("retraction inverted a triangle", np.flatnonzero(out.areas <= 0))
        return out


def _solve_state(problem: ShapeProblem, mesh: Mesh, initial=None) -> ScalarField:
    s = problem.solver
    return newton_iterate(mesh, problem.regions, problem.material, problem.excitation, initial,
                          s.newton_tol, s.newton_max_iter, s.linear_method, s.linear_rtol).u


def _adjoint_gradient(problem: ShapeProblem, mesh: Mesh, u: ScalarField):
    s = problem.solver
    tf = problem.torque
    p = solve_adjoint(u, mesh, problem.regions, problem.material, tf, s.linear_method, s.linear_rtol)
    return shape_derivative_torque(u, p, mesh, problem.regions, problem.material)


def _line_search(problem: ShapeProblem, mesh: Mesh, u: ScalarField, direction: DeformationField,
                 circles: _Circles, q_min: float, accept: Callable[[Mesh, ScalarField], bool]):
    """Halving search; returns (t, mesh, u, reason) with t = 0 on failure."""
    t = 1.0
    evaluated = False
    while t >= STEP_FLOOR:
        try:
            trial = circles.retract(deform(mesh, direction, t))
        except DegenerateMeshError:
            t *= 0.5
            continue
        if min_quality(trial) < q_min:
            t *= 0.5
            continue
        try:
            u_t = _solve_state(problem, trial, u)
        except NewtonError as exc:
            logger.warning("state solve failed on trial step t=%g (%s); halving", t, exc)
            t *= 0.5
            continue
        evaluated = True
        if accept(trial, u_t):
            return t, trial, u_t, ""
        t *= 0.5
    return 0.0, mesh, u, ("no_decrease" if evaluated else "mesh_invalid")


def _checked_state(problem, mesh, initial, history):
    try:
        return _solve_state(problem, mesh, initial)
    except NewtonError as exc:
        history.status = "solver_failure"
        raise OptimizationAborted(f"state solve failed: {exc}", history) from exc


# --------------------------------------------------------------------------- drivers

def optimize_single(problem: ShapeProblem, max_iter: int = 70, tol: float = 1e-8,
                    snapshot: Callable | None = None) -> tuple[Mesh, RunHistory]:
    """Maximize torque by metric-gradient descent on J = -T with a halving line search.

    Stops with status ``converged`` when ``sqrt(b(W, W)) < tol``, ``max_iter``,
    ``step_floor`` (no decrease down to t = 2**-30) or ``mesh_degenerate`` (no
    trial step gave a valid mesh).
    """
    start = time.perf_counter()
    history = RunHistory()
    mesh = problem.mesh
    circles = _Circles(problem)
    q_min = problem.min_quality_ratio * min_quality(mesh)
    u = _checked_state(problem, mesh, None, history)
    j = -torque_fem(u, problem.torque)
    k = 0
    while True:
        vol = problem.volume_m3(mesh)
        quality = min_quality(mesh)
        if not math.isfinite(tol):
            history.records.append(IterationRecord(k, j, vol, 0.0, math.nan, quality,
                                                   time.perf_counter() - start))
            history.status = "converged"
            break
        grad = _adjoint_gradient(problem, mesh, u)
        w = descent_bvp(grad, problem.metric, mesh, problem.regions, problem.solver.linear_method,
                        problem.solver.linear_rtol)
        norm_w = math.sqrt(max(-grad.pair(w), 0.0))
        rec = IterationRecord(k, j, vol, 0.0, norm_w, quality, 0.0, slopes=(grad.pair(w),))
        history.records.append(rec)
        if norm_w < tol:
            history.status = "converged"
        elif k >= max_iter:
            history.status = "max_iter"
        else:
            j_old = j
            t, new_mesh, new_u, reason = _line_search(
                problem, mesh, u, problem.motion(w, mesh), circles, q_min,
                lambda m, v: -torque_fem(v, problem.torque) < j_old)
            if t == 0.0:
                history.status = "step_floor" if reason == "no_decrease" else "mesh_degenerate"
            else:
                rec.t = t
                mesh, u = new_mesh, new_u
                j = -torque_fem(u, problem.torque)
        rec.seconds = time.perf_counter() - start
        logger.info("iter %d  T=%.6f  |W|=%.3e  t=%.3g  q=%.3f", k, -rec.J1, norm_w, rec.t, quality)
        if history.status != "running":
            break
        k += 1
        if snapshot is not None:
            snapshot(k, mesh, u)
    if snapshot is not None:
        snapshot(k, mesh, u, final=True)
    return mesh, history


def optimize_bi(problem: ShapeProblem, weight: float, max_iter: int = 70, tol: float = 1e-8,
                snapshot: Callable | None = None) -> tuple[Mesh, RunHistory]:
    """Common descent for J1 = -T and J2 = w * volume_scale * Vol.

    Directions come from the min-norm bi-descent QP on interface coordinates,
    extended harmonically into the rotor. A step is accepted only if it
    strictly decreases both objectives. Statuses: ``initial_stationary``
    (``|W| < tol`` at the start), ``converged``, ``max_iter``,
    ``pareto_critical`` (no bi-decreasing step above the floor),
    ``mesh_degenerate``.
    """
    if not weight > 0:
        raise ValueError("weight must be positive")
    start = time.perf_counter()
    history = RunHistory(weight=weight)
    mesh = problem.mesh
    circles = _Circles(problem)
    q_min = problem.min_quality_ratio * min_quality(mesh)
    scale = weight * problem.volume_scale * problem.torque.axial_length

    def objectives(m: Mesh, v: ScalarField) -> tuple[float, float]:
        return -torque_fem(v, problem.torque), scale * volume(m, problem.regions)

    u = _checked_state(problem, mesh, None, history)
    j1, j2 = objectives(mesh, u)
    k = 0
    while True:
        quality = min_quality(mesh)
        if not math.isfinite(tol):
            history.records.append(IterationRecord(k, j1, j2, 0.0, math.nan, quality,
                                                   time.perf_counter() - start))
            history.status = "initial_stationary"
            break
        g1 = _adjoint_gradient(problem, mesh, u)
        g2 = shape_derivative_volume(mesh, problem.regions).scaled(scale, "weighted volume")
        qp = build_interface_qp([g1, g2], mesh, problem.regions, problem.metric.circles)
        sol = solve_bi_descent_qp(qp)
        norm_w = float(np.linalg.norm(sol.w))
        slopes = tuple(float(s) for s in qp.gradients @ sol.w)
        rec = IterationRecord(k, j1, j2, 0.0, norm_w, quality, 0.0, rho=sol.rho, slopes=slopes)
        history.records.append(rec)
        if norm_w < tol:
            history.status = "initial_stationary" if k == 0 else "converged"
        elif k >= max_iter:
            history.status = "max_iter"
        else:
            direction = harmonic_extension(sol.w.reshape(-1, 2), mesh, problem.regions, qp.nodes)
            direction = problem.motion(direction, mesh)
            old = (j1, j2)
            t, new_mesh, new_u, reason = _line_search(
                problem, mesh, u, direction, circles, q_min,
                lambda m, v: all(a < b for a, b in zip(objectives(m, v), old)))
            if t == 0.0:
                history.status = "pareto_critical" if reason == "no_decrease" else "mesh_degenerate"
            else:
                rec.t = t
                mesh, u = new_mesh, new_u
                j1, j2 = objectives(mesh, u)
        rec.seconds = time.perf_counter() - start
        logger.info("w=%g iter %d  T=%.6f  J2=%.6f  rho=%.3e  t=%.3g", weight, k, -rec.J1, rec.J2,
                    sol.rho, rec.t)
        if history.status != "running":
            break
        k += 1
        if snapshot is not None:
            snapshot(k, mesh, u)
    if snapshot is not None:
        snapshot(k, mesh, u, final=True)
    return mesh, history


# --------------------------------------------------------------------------- sweep

def dominated_flags(points: Sequence[tuple[float, float]]) -> list[bool]:
    """Flag points dominated by another (all coordinates <=, one strictly <); minimization."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    flags = []
    for i, p in enumerate(pts):
        others = np.delete(pts, i, axis=0)
        dom = np.all(others <= p, axis=1) & np.any(others < p, axis=1)
        flags.append(bool(np.any(dom)))
    return flags


def write_pareto_csv(records: Iterable[ParetoRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARETO_COLUMNS)
        for r in records:
            w.writerow([repr(r.w), repr(r.torque), repr(r.volume), r.iterations, r.status, r.snapshot])


def pareto_sweep(problem: ShapeProblem, weights: Iterable[float], max_iter: int = 70, tol: float = 1e-8,
                 out_dir: str | Path | None = None, jobs: int = 1,
                 snapshot_every: int = 10) -> list[ParetoRecord]:
    """One bi-objective run per distinct weight, all from the same initial design.

    Records are sorted by weight and flagged when dominated in
    (volume, -torque). Failures are recorded per weight without stopping the
    sweep. With ``out_dir`` the Pareto CSV and per-weight snapshots are written.
    """
    ws = [float(w) for w in weights]
    unique = sorted(set(ws))
    if len(unique) < len(ws):
        logger.warning("duplicate weights removed: %d -> %d", len(ws), len(unique))
    if not unique:
        raise ValueError("at least one weight is required")
    out = Path(out_dir) if out_dir is not None else None

    def run(w: float) -> ParetoRecord:
        snap = None
        if out is not None:
            snap = SnapshotWriter(out / f"w_{w:g}", snapshot_every)
        try:
            mesh, hist = optimize_bi(problem, w, max_iter, tol, snap)
        except Exception as exc:  # recorded per weight, the sweep continues
            logger.error("weight %g failed: %s", w, exc)
            return ParetoRecord(w, math.nan, math.nan, 0, "failed", error=str(exc))
        u = _solve_state(problem, mesh)
        path = str(out / f"w_{w:g}" / "design_final.vtk") if out is not None else ""
        return ParetoRecord(w, torque_fem(u, problem.torque), problem.volume_m3(mesh),
                            hist.iterations, hist.status, path, history=hist)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run, unique))
    else:
        records = [run(w) for w in unique]
    good = [r for r in records if r.ok]
    for r, flag in zip(good, dominated_flags([(r.volume, -r.torque) for r in good])):
        r.dominated = flag
    if out is not None:
        write_pareto_csv(records, out / "pareto.csv")
    return records
