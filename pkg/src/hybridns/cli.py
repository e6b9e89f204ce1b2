"""Command line entry point.

Modes::

    hybridns --mode single --k 1 --nu 1 --structured 8      # JSON lines
    hybridns --mode study --k 2 --levels 4,8,16,32          # CSV
    hybridns --mode verify --k 1 --structured 4 --seed 7    # pass/fail

The configuration is echoed to stderr as one JSON object before any work
starts.  ``NS_THREADS`` caps the threads used to build element data.

Exit codes: 0 success, 1 a verify check failed, 2 invalid arguments,
3 solver failure (partial results are still written).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from contextlib import contextmanager

from . import kernels
from .mesh import MeshError, build_structured_mesh, read_mesh
from .mms import ManufacturedSolution, eoc_study, solve_level
from .solver import SchemeConfig, StepFailure
from .verify import run_suite

log = logging.getLogger("hybridns")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2, 3


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hybridns",
        description="Hybrid finite elements for 2D unsteady incompressible Navier-Stokes "
                    "on the unit square with a manufactured solution.")
    p.add_argument("--mode", choices=("single", "study", "verify"), default="single")
    p.add_argument("--k", type=int, default=1, help="polynomial degree (0, 1 or 2)")
    p.add_argument("--nu", type=float, default=1.0, help="viscosity")
    p.add_argument("--tF", type=float, default=1.0, help="final time")
    p.add_argument("--structured", type=int, default=None, metavar="N",
                   help="structured mesh with N cells per side")
    p.add_argument("--pattern", choices=("diagonal", "crisscross"), default="diagonal",
                   help="split of the structured cells")
    p.add_argument("--mesh-file", default=None, help="mesh in the 'ns-mesh 2d' text format")
    p.add_argument("--levels", default="4,8,16,32", help="comma separated N for study mode")
    p.add_argument("--stab", choices=("hho", "dofi"), default="hho")
    p.add_argument("--cs", type=float, default=1e-4, help="safeguard in beta_T")
    p.add_argument("--newton-tol", type=float, default=1e-8)
    p.add_argument("--ntf", type=int, default=None,
                   help="number of time steps (default: max(10, ceil(h^-(k+1)/2)))")
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--seed", type=int, default=0, help="seed for the verify suite")
    p.add_argument("--verbose", action="store_true")
    return p


def _levels(text):
    try:
        levels = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--levels: {exc}") from exc
    if len(levels) < 2 or min(levels) < 1:
        raise UsageError("--levels needs at least two positive integers")
    return sorted(set(levels))


def make_config(args) -> SchemeConfig:
    try:
        return SchemeConfig(k=args.k, nu=args.nu, t_final=args.tF, cs=args.cs,
                            stabilization=args.stab, n_steps=args.ntf,
                            newton_tol=args.newton_tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def validate(args):
    if args.structured is not None and args.mesh_file is not None:
        raise UsageError("--structured and --mesh-file are mutually exclusive")
    if args.mode == "study" and args.mesh_file is not None:
        raise UsageError("study mode refines structured meshes; --mesh-file is not allowed")
    if args.structured is not None and args.structured < 1:
        raise UsageError("--structured must be positive")


def load_mesh(args, default_n):
    if args.mesh_file is not None:
        try:
            return read_mesh(args.mesh_file)
        except (OSError, MeshError) as exc:
            raise UsageError(f"cannot read mesh: {exc}") from exc
    return build_structured_mesh(args.structured or default_n, args.pattern)


@contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _json(obj) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        return v
    return json.dumps({k: clean(v) for k, v in obj.items()}, sort_keys=True)


def run_single(args, config, out) -> int:
    mesh = load_mesh(args, 8)
    n_steps = config.steps_for(mesh.h)
    log.info("mesh: %d elements, h=%.6g; N_tF=%d", mesh.n_elements, mesh.h, n_steps)
    try:
        traj, acc = solve_level(config, mesh)
        failure = None
    except StepFailure as exc:
        traj, acc, failure = exc.trajectory, None, str(exc)
    for d in traj.diagnostics:
        out.write(_json({"event": "step", **d}) + "\n")
    summary = {"event": "summary", "k": config.k, "nu": config.nu, "h": mesh.h,
               "n_elements": mesh.n_elements, "Ntf": n_steps,
               "newton_avg_iters": traj.mean_newton_iterations(),
               "divergence_free": all(d["divergence_free"] for d in traj.diagnostics
                                      if d["step"] > 0)}
    if acc is not None:
        summary.update(tnorm_err=acc.tnorm, E_err=acc.reconstruction,
                       max_ReT=acc.max_reynolds)
    if failure:
        summary["failure"] = failure
    out.write(_json(summary) + "\n")
    return EXIT_SOLVER if failure else EXIT_OK


def run_study(args, config, out) -> int:
    levels = _levels(args.levels)
    report = eoc_study(config, levels, pattern=args.pattern, exact=ManufacturedSolution())
    out.write(report.to_csv())
    if report.failure:
        log.error("study aborted: %s", report.failure)
        return EXIT_SOLVER
    return EXIT_OK


def run_verify(args, config, out) -> int:
    mesh = load_mesh(args, 4)
    results = run_suite(mesh=mesh, seed=args.seed, config=config)
    for r in results:
        out.write(r.line() + "\n")
    failed = [r.name for r in results if not r.passed]
    out.write(f"{len(results) - len(failed)}/{len(results)} checks passed\n")
    return EXIT_CHECK if failed else EXIT_OK


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        validate(args)
        config = make_config(args)
        echo = dict(vars(args), backend=kernels.BACKEND,
                    threads=os.environ.get("NS_THREADS", "1"))
        print("config: " + json.dumps(echo, sort_keys=True), file=sys.stderr)
        handler = {"single": run_single, "study": run_study, "verify": run_verify}[args.mode]
        with _output(args.out) as out:
            return handler(args, config, out)
    except UsageError as exc:
        print(f"hybridns: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
