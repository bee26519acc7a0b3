"""Command-line entry point: ``shapeforge <command> [options]``.

Exit codes: 0 success, 1 validation or optimization-quality failure,
2 usage or configuration error, 3 line search hit the step floor,
4 no valid deformed mesh, 5 state solver failure, 6 every Pareto run failed.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

from .config import Config, ConfigError, build_problem, load_config, serialize_config
from .geometry import GeometryError, generate
from .mesh import write_mesh, write_vtk
from .optimizer import (OptimizationAborted, SnapshotWriter, optimize_bi, optimize_single,
                        pareto_sweep)
from .shape_calculus import check_gradients

logger = logging.getLogger("shapeforge")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_CODES = {
    "converged": EXIT_OK,
    "max_iter": EXIT_OK,
    "pareto_critical": EXIT_OK,
    "initial_stationary": EXIT_OK,
    "step_floor": 3,
    "mesh_degenerate": 4,
    "solver_failure": 5,
}
EXIT_ALL_FAILED = 6


def _setup_logging() -> None:
    level = os.environ.get("SHAPEFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _out_dir(args, cfg: Config) -> Path:
    out = Path(args.out if args.out else cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate_mesh(args, cfg: Config) -> int:
    out = _out_dir(args, cfg)
    model = generate(cfg.machine)
    mesh = model.mesh
    write_mesh(mesh, out / "machine.mesh")
    write_vtk(mesh, {}, out / "machine.vtk")
    (out / "config.txt").write_text(serialize_config(cfg))
    logger.info("mesh: %d nodes, %d triangles", mesh.n_nodes, mesh.n_triangles)
    print(f"nodes {mesh.n_nodes} triangles {mesh.n_triangles} -> {out / 'machine.mesh'}")
    return EXIT_OK


def cmd_optimize(args, cfg: Config) -> int:
    if args.mode == "bi" and args.weight is None:
        raise _Usage("--weight is required with --mode bi")
    if args.weight is not None and not args.weight > 0:
        raise _Usage("--weight must be positive")
    out = _out_dir(args, cfg)
    model, problem = build_problem(cfg)
    snap = SnapshotWriter(out / "snapshots", cfg.output.snapshot_every)
    d = cfg.descent
    try:
        if args.mode == "single":
            mesh, history = optimize_single(problem, d.max_iter, d.tol, snap)
        else:
            mesh, history = optimize_bi(problem, args.weight, d.max_iter, d.tol, snap)
    except OptimizationAborted as exc:
        exc.history.write_csv(out / "history.csv")
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_CODES["solver_failure"]
    history.write_csv(out / "history.csv")
    write_mesh(mesh, out / "final.mesh")
    t0 = -history.records[0].J1
    t1 = -history.records[-1].J1
    gain = 100.0 * (t1 / t0 - 1.0) if t0 else math.nan
    print(f"{t0:.6f} {t1:.6f} {gain:.2f}% {history.iterations} {history.status}")
    return EXIT_CODES.get(history.status, EXIT_FAILED)


def cmd_pareto(args, cfg: Config) -> int:
    out = _out_dir(args, cfg)
    model, problem = build_problem(cfg)
    d = cfg.descent
    records = pareto_sweep(problem, cfg.pareto.weights, d.max_iter, d.tol, out,
                           jobs=args.jobs, snapshot_every=cfg.output.snapshot_every)
    for r in records:
        if not r.ok:
            print(f"w={r.w:g} failed: {r.error}", file=sys.stderr)
    front = [r for r in records if r.ok and not r.dominated]
    for a in front:
        for b in front:
            if a is not b:
                assert not (b.volume <= a.volume and b.torque >= a.torque
                            and (b.volume < a.volume or b.torque > a.torque)), "front is not an antichain"
    print(f"{'w':>10} {'torque_Nm':>12} {'volume_m3':>12} {'iters':>6}  status")
    for r in front:
        print(f"{r.w:10.4g} {r.torque:12.6f} {r.volume:12.5e} {r.iterations:6d}  {r.status}")
    dominated = [r.w for r in records if r.ok and r.dominated]
    if dominated:
        print("dominated: " + ", ".join(f"{w:g}" for w in dominated))
    return EXIT_OK if any(r.ok for r in records) else EXIT_ALL_FAILED


def cmd_validate_gradient(args, cfg: Config) -> int:
    if args.trials < 0:
        raise _Usage("--trials must be >= 0")
    if args.trials == 0:
        logger.warning("no trials requested; nothing validated")
        print("0 trials: vacuous pass")
        return EXIT_OK
    model = generate(cfg.machine)
    v = cfg.validate
    rows = check_gradients(model.mesh, model.regions, cfg.material.reluctivity(), model.excitation,
                           model.torque, args.trials, args.seed, v.amplitude, v.steps, v.newton_tol,
                           cfg.solver.linear_method)
    limits = {"torque": v.torque_rtol, "volume": v.volume_rtol}
    print(f"{'trial':>5} {'quantity':>8} {'assembled':>16} {'finite diff':>16} {'rel err':>10} {'order':>6}")
    for r in rows:
        print(f"{r.trial:5d} {r.quantity:>8} {r.assembled:16.9e} {r.fd:16.9e} {r.rel_error:10.2e} "
              f"{r.observed_order:6.2f}")
    bad = [r for r in rows if not r.rel_error <= limits[r.quantity]]
    if bad:
        worst = max(bad, key=lambda r: r.rel_error / limits[r.quantity])
        print(f"FAIL: {len(bad)} checks above threshold; worst trial {worst.trial} {worst.quantity} "
              f"rel err {worst.rel_error:.3e} > {limits[worst.quantity]:.0e}")
        return EXIT_FAILED
    print(f"PASS: {len(rows)} checks within thresholds")
    return EXIT_OK


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file (section.key = value lines)")
    common.add_argument("--out", help="output directory (overrides output.directory)")
    parser = argparse.ArgumentParser(prog="shapeforge",
                                     description="Free-form shape optimization of a reluctance machine rotor.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-mesh", parents=[common], help="mesh the configured machine")
    p = sub.add_parser("optimize", parents=[common], help="run one descent optimization")
    p.add_argument("--mode", choices=("single", "bi"), default="single")
    p.add_argument("--weight", type=float, help="volume weight w (bi mode)")
    p = sub.add_parser("pareto", parents=[common], help="bi-objective runs over the configured weights")
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("validate-gradient", parents=[common], help="compare shape derivatives with finite differences")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {
    "generate-mesh": cmd_generate_mesh,
    "optimize": cmd_optimize,
    "pareto": cmd_pareto,
    "validate-gradient": cmd_validate_gradient,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
