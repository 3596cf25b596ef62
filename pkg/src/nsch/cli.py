"""Command line entry points: ``nsch validate|run|analyze``.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, io
from .config import ConfigError, parse_config, preset
from .constitutive import validate_A1, validate_A2, validate_A3
from .linsolve import SolverFailure

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
TRUNCATION_LEVELS = range(1, 9)


def _load_config(arg):
    if arg.startswith("preset:"):
        return preset(arg.split(":", 1)[1])
    return parse_config(arg)


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("NSCH_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"NSCH_THREADS must be an integer, got {env!r}") from None
        return n
    return None


def _with_threads(n, fn):
    if n is None:
        return fn()
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        return fn()


def cmd_validate(cfg, out=None):
    out = out or sys.stdout
    """Run the assumption validators and grid self-tests; returns True when all pass."""
    params = cfg.params
    ok = True
    reports = [
        ("A1", validate_A1(params.potential())),
        ("A2", validate_A2(params)),
        ("A3", validate_A3(params.density_law())),
    ]
    for name, rep in reports:
        print(f"[{name}] {'PASS' if rep.passed else 'FAIL'}", file=out)
        print(rep.as_keyvalue(), file=out)
        ok &= bool(rep.passed)
    print(f"alpha = {params.alpha!r}", file=out)

    grid = cfg.grid
    rng = np.random.default_rng(0)
    phi = rng.standard_normal(grid.shape)
    w = rng.standard_normal(grid.nfaces)
    adj = abs(grid.inner(grid.G @ phi.ravel(), w) + np.sum(phi * grid.div(w)) * grid.cell_area)
    adj /= grid.norm(w) * np.sqrt(np.sum(phi**2) * grid.cell_area)
    proj = grid.helmholtz_project(w, cfg.elliptic)
    div_res = float(np.sqrt(np.sum(grid.div(proj) ** 2) * grid.cell_area) / grid.norm(w))
    checks = {"grid_adjoint_defect": adj, "projection_divergence": div_res}
    for k, v in checks.items():
        good = v < 1e-9
        ok &= good
        print(f"[grid] {k} = {v:.3e} {'PASS' if good else 'FAIL'}", file=out)
    print("RESULT " + ("PASS" if ok else "FAIL"), file=out)
    return ok


def cmd_run(cfg, output_dir, binary=False, out=None):
    out = out or sys.stdout
    from .coupled import run

    t0 = time.perf_counter()
    nsteps = cfg.nsteps
    every = max(1, nsteps // 10)

    def progress(k, rec):
        if k % every == 0 or k == nsteps:
            print(f"step {k}/{nsteps} t={rec.t:.6g} E={rec.E_total:.10g} mass={rec.mass:.3e}", file=out)

    res = run(cfg, output_dir=output_dir, binary=binary, progress=progress)
    print(f"finished {nsteps} steps in {time.perf_counter() - t0:.2f} s; output in {output_dir}", file=out)
    return res


def load_trajectory(directory):
    """(grid, [(time, fields), ...]) from the snapshots in a run directory, in time order."""
    directory = Path(directory)
    paths = sorted(directory.glob("snap_*.nsch"))
    if not paths:
        raise FileNotFoundError(f"no snapshots in {directory}")
    snaps = [io.read_snapshot(p) for p in paths]
    grid = io.grid_from_header(snaps[0][0])
    traj = sorted(((h["time"], f) for h, f in snaps), key=lambda x: x[0])
    return grid, traj


def _tensor_from_fields(fields):
    keys = ("H11", "H22", "H12", "H21")
    if all(k in fields for k in keys):
        return analysis.StaggeredTensor(*(fields[k] for k in keys))
    return None


def cmd_analyze(directory, mode, out=None):
    out = out or sys.stdout
    """Post-process a run directory; returns the report dict."""
    grid, traj = load_trajectory(directory)
    if mode == "truncation":
        report = {"mode": "truncation", "levels": {}}
        for L in TRUNCATION_LEVELS:
            cs = []
            for _, f in traj:
                q = grid.face_to_cell(grid.join(f["u"], f["v"]))
                cs.append(analysis.truncation_gradient_bound(q, L, (grid.dx, grid.dy))[0])
            report["levels"][L] = max(cs)
            print(f"L = {L}: measured_c = {max(cs):.6e}", file=out)
        report["max_measured_c"] = max(report["levels"].values())
        print(f"max_measured_c = {report['max_measured_c']:.6e}", file=out)
        return report

    if mode != "pressure":
        raise ConfigError(f"unknown analysis mode {mode!r}")
    if grid.periodic:
        raise ConfigError("pressure analysis needs a run with bc = physical")
    times = [t for t, _ in traj]
    tensors = [_tensor_from_fields(f) for _, f in traj]
    if all(H is not None for H in tensors):
        u_traj = [grid.join(f["u"], f["v"]) for _, f in traj]
    else:
        cfg = parse_config(Path(directory) / "config.txt")
        params = cfg.params
        u_traj, tensors = [], []
        for _, f in traj:
            v = grid.join(f["u"], f["v"])
            u_traj.append(analysis.face_density(f["phi"], params, grid) * v)
            tensors.append(analysis.momentum_flux_tensor(_FieldState(f["phi"], v), params, grid))
    dec = analysis.pressure_decompose(u_traj, tensors, grid, times, check=False)
    report = {"mode": "pressure", **dec.report}
    print(dec.as_keyvalue(), file=out)
    return report


class _FieldState:
    def __init__(self, phi, v):
        self.phi, self.v = phi, v


def build_parser():
    ap = argparse.ArgumentParser(prog="nsch", description="Cahn-Hilliard / power-law Navier-Stokes solver")
    sub = ap.add_subparsers(dest="command", required=True)
    cfg_help = "config file, or preset:NAME (smoke, spinodal_64, shear_powerlaw, density_contrast)"
    p = sub.add_parser("validate", help="check assumptions (A1)-(A3) and grid operators")
    p.add_argument("--config", required=True, help=cfg_help)
    p = sub.add_parser("run", help="run the coupled solver")
    p.add_argument("--config", required=True, help=cfg_help)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--binary-snapshots", action="store_true")
    p.add_argument("--threads", type=int, default=None, help="thread limit (default: $NSCH_THREADS)")
    p = sub.add_parser("analyze", help="post-process a run directory")
    p.add_argument("--input", required=True)
    p.add_argument("--mode", required=True, choices=("truncation", "pressure"))
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return EXIT_OK if cmd_validate(_load_config(args.config)) else EXIT_CONFIG
        if args.command == "run":
            cfg = _load_config(args.config)
            n = _threads(args.threads)
            _with_threads(n, lambda: cmd_run(cfg, args.output_dir, binary=args.binary_snapshots))
            return EXIT_OK
        report = cmd_analyze(args.input, args.mode, out=sys.stderr if args.json else sys.stdout)
        if args.json:
            print(json.dumps(report, indent=2, default=float))
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"error: solver: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, io.SnapshotError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
