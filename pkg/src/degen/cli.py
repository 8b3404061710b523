"""Command-line driver: ``degen check|solve|grid|chart|convergence <problem>``.

Exit codes: 0 success/pass, 1 usage or file error, 2 check or estimate
failure, 3 inconclusive.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import chart as chart_mod
from . import sde_mc
from .problem import Problem, ProblemError, load_problem
from .vf_algebra import (GeometryError, classify_K, noncharacteristic_check, subcritical_fit,
                         thm2_checks)

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_INCONCLUSIVE = 0, 1, 2, 3

log = logging.getLogger("degen")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers

def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    except OSError as err:
        raise UsageError(f"cannot write {path}: {err.strerror}") from None
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as err:
        Path(tmp).unlink(missing_ok=True)
        raise UsageError(f"cannot write {path}: {err.strerror}") from None


def _value_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_value_text(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def report_text(report: dict) -> str:
    return "".join(f"{k} = {_value_text(v)}\n" for k, v in report.items())


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return _json_safe(v.item())
    return v


def emit_report(report: dict, out: str | None) -> None:
    text = report_text(report)
    sys.stdout.write(text)
    if out:
        path = Path(out)
        text_path = path.with_suffix(".txt") if path.suffix == ".report" else path
        write_atomic(text_path, text)
        payload = {k: _json_safe(v) for k, v in report.items()}
        write_atomic(path.with_suffix(".report"), json.dumps(payload, indent=2, sort_keys=False) + "\n")


def parse_vector(text: str, d: int, what: str = "--point") -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers") from None
    if len(vals) != d:
        raise UsageError(f"{what} needs {d} coordinates, got {len(vals)}")
    return np.array(vals)


def parse_list(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers") from None


# ---------------------------------------------------------------------------
# commands

def _surface_bases(problem: Problem, res: int, count: int = 8) -> np.ndarray:
    S = problem.surface
    pts = problem.lattice(res)
    pts = pts[problem.in_closure(pts)]
    with np.errstate(all="ignore"):
        proj = S.project(pts)
        ok = np.all(np.isfinite(proj), axis=1) & (np.abs(S.value(proj)) <= 1e-10)
        proj = proj[ok]
        proj = proj[problem.in_closure(proj)]
    if len(proj) == 0:
        return proj
    proj = np.unique(np.round(proj, 9), axis=0)
    if len(proj) > count:
        proj = proj[np.linspace(0, len(proj) - 1, count).astype(int)]
    return proj


def cmd_check(problem: Problem, args) -> int:
    k_max = 3 if args.kmax is None else args.kmax
    res = args.res or 32
    grid = problem.closure_grid(res)
    report: dict = {"problem": problem.name, "dim": problem.dim, "n": problem.n,
                    "grid.res": res, "grid.points": int(len(grid))}
    statuses: dict[str, str] = {}

    deg = classify_K(problem, grid, k_max, args.tol_k)
    for key, v in deg.summary().items():
        report[f"K.{key}"] = v
    K = np.array(deg.K).reshape(-1, problem.dim)

    # non-characteristic at K (against S) and along the boundary (against dD)
    S = problem.surface
    nc_fail = 0
    nc_total = 0
    if len(K):
        if S is None:
            statuses["noncharacteristic.K"] = "inconclusive"
            report["noncharacteristic.K.note"] = "K is nonempty but no surface.psi was given"
        else:
            with np.errstate(all="ignore"):
                proj = S.project(K)
            proj = proj[np.all(np.isfinite(proj), axis=1) & (np.abs(S.value(proj)) <= 1e-10)]
            try:
                res_k = noncharacteristic_check(problem.diffusion_fields, S, proj, args.theta)
            except GeometryError as err:
                statuses["noncharacteristic.K"] = "fail"
                report["noncharacteristic.K.error"] = str(err)
                res_k = []
            bad = [r for r in res_k if not r.passed]
            report["noncharacteristic.K.points"] = len(res_k)
            report["noncharacteristic.K.failures"] = len(bad)
            statuses.setdefault("noncharacteristic.K", "fail" if bad else "pass")
    bnd = problem.boundary_samples(max(8, 4 * res))
    try:
        res_b = noncharacteristic_check(problem.diffusion_fields, problem.boundary, bnd, args.theta)
        bad_b = [r for r in res_b if not r.passed]
        report["noncharacteristic.boundary.points"] = len(res_b)
        report["noncharacteristic.boundary.failures"] = len(bad_b)
        if bad_b:
            report["noncharacteristic.boundary.first_failure"] = list(bad_b[0].point)
        if res_b:
            report["noncharacteristic.boundary.min_inner"] = min(r.max_inner for r in res_b)
        statuses["noncharacteristic.boundary"] = "fail" if bad_b else "pass"
    except GeometryError as err:
        report["noncharacteristic.boundary.error"] = str(err)
        statuses["noncharacteristic.boundary"] = "fail"

    # subcriticality of S
    if S is not None:
        bases = _surface_bases(problem, res)
        report["subcritical.base_points"] = int(len(bases))
        if len(bases) == 0:
            statuses["subcritical"] = "inconclusive"
        else:
            fits = [subcritical_fit(problem.fields, S, k, bases, margin=args.margin,
                                    inside=problem.in_closure) for k in range(k_max + 1)]
            for fit in fits:
                report[f"subcritical.k{fit.k}.status"] = fit.status
                report[f"subcritical.k{fit.k}.p_hat"] = fit.slope
                report[f"subcritical.k{fit.k}.p_stderr"] = fit.stderr
                report[f"subcritical.k{fit.k}.n_used"] = int(fit.rho.size)
            passing = [f for f in fits if f.passed]
            if passing:
                statuses["subcritical"] = "pass"
                report["subcritical.k"] = passing[0].k
                report["subcritical.p_hat"] = passing[0].slope
            elif all(f.status == "inconclusive" for f in fits):
                statuses["subcritical"] = "inconclusive"
            else:
                statuses["subcritical"] = "fail"
    elif len(K):
        statuses["subcritical"] = "inconclusive"
        report["subcritical.note"] = "K is nonempty but no surface.psi was given"

    thm = thm2_checks(problem, grid)
    for key, v in thm.summary().items():
        report[f"thm2.{key}"] = v
    statuses["thm2.a"] = "pass" if thm.c_pass else "fail"
    statuses["thm2.b"] = "pass" if thm.b_pass else "fail"

    for key, v in statuses.items():
        report[f"status.{key}"] = v
    if "fail" in statuses.values():
        code, overall = EXIT_FAIL, "fail"
    elif "inconclusive" in statuses.values():
        code, overall = EXIT_INCONCLUSIVE, "inconclusive"
    else:
        code, overall = EXIT_OK, "pass"
    report["status"] = overall
    emit_report(report, args.out)
    return code


def _path_config(args, problem: Problem, n_paths: int) -> sde_mc.PathConfig:
    workers = max(1, args.workers)
    chunk = sde_mc.PathConfig.chunk_size
    if workers > 1:
        chunk = max(1, math.ceil(n_paths / workers))
    return sde_mc.PathConfig(dt=args.dt, t_max=args.tmax, seed=args.seed, bridge=args.bridge,
                             workers=workers, chunk_size=chunk)


def _require_inside(problem: Problem, point: np.ndarray) -> None:
    if not problem.inside(point)[0]:
        raise UsageError(f"point {point.tolist()} is not inside D (phi <= 0)")


def cmd_solve(problem: Problem, args) -> int:
    if args.point is None:
        raise UsageError("solve needs --point")
    x = parse_vector(args.point, problem.dim)
    _require_inside(problem, x)
    cfg = _path_config(args, problem, args.paths)
    code = EXIT_OK
    try:
        est = sde_mc.estimate_point(problem, x, args.paths, cfg)
    except sde_mc.EstimateRejected as err:
        est, code = err.estimate, EXIT_FAIL
        print(f"error: {err}", file=sys.stderr)
    report = {
        "problem": problem.name,
        "point": list(est.point),
        "u_hat": est.value,
        "stderr": est.stderr,
        "n_paths": est.n_paths,
        "n_total": est.n_total,
        "unexited_frac": est.unexited_frac,
        "n_invalid": est.n_invalid,
        "mean_tau": est.mean_tau,
        "dt": cfg.dt,
        "seed": cfg.seed,
        "bridge": cfg.bridge,
        "status": "rejected" if est.rejected else "ok",
    }
    emit_report(report, args.out)
    return code


def cmd_grid(problem: Problem, args) -> int:
    box = None
    if args.box:
        box = parse_vector(args.box, 2 * problem.dim, "--box").reshape(problem.dim, 2)
    pts = problem.lattice(args.res or 32, box)
    pts = pts[problem.inside(pts)]
    cfg = _path_config(args, problem, args.paths)
    ests = sde_mc.estimate_grid(problem, pts, args.paths, cfg, reject=False)
    text = sde_mc.estimates_csv(ests, problem.dim)
    if args.out:
        write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    rejected = sum(e.rejected for e in ests)
    if rejected:
        print(f"error: {rejected} grid estimate(s) rejected (too many unexited paths)", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_convergence(problem: Problem, args) -> int:
    if args.point is None:
        raise UsageError("convergence needs --point")
    x = parse_vector(args.point, problem.dim)
    _require_inside(problem, x)
    dts = parse_list(args.dts, "--dts")
    if not dts:
        raise UsageError("--dts is empty")
    try:
        rows = sde_mc.convergence_study(problem, x, dts, args.paths,
                                        _path_config(args, problem, args.paths), args.reference)
    except ValueError as err:
        raise UsageError(str(err)) from None
    except sde_mc.EstimateRejected as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    text = sde_mc.table_csv(rows)
    if args.out:
        write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_chart(problem: Problem, args) -> int:
    if args.point is None:
        raise UsageError("chart needs --point (a boundary point)")
    x0 = parse_vector(args.point, problem.dim)
    x0 = problem.boundary.project(x0)[0]
    try:
        ch = chart_mod.build_chart(problem, x0, args.field, args.radius)
    except chart_mod.ChartError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    k = 0 if args.kmax is None else args.kmax
    rep = chart_mod.verify_chart(ch, problem, k=k)
    report = {"problem": problem.name, "base_point": x0.tolist()}
    report.update(rep.summary())
    ok = (rep.round_trip <= chart_mod.ROUND_TRIP_TOL and rep.boundary_phi <= 1e-8
          and rep.boundary_F1 <= 1e-8 and rep.transversal_residual <= 1e-6 and rep.interior_inside)
    report["status"] = "pass" if ok else "fail"
    emit_report(report, args.out)
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "check": cmd_check,
    "solve": cmd_solve,
    "grid": cmd_grid,
    "chart": cmd_chart,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="degen", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("problem", help="problem file (.prob)")
    p.add_argument("--point", help="comma-separated coordinates")
    p.add_argument("--paths", type=int, default=20000, help="Monte Carlo paths (default 20000)")
    p.add_argument("--dt", type=float, default=1e-4, help="time step (default 1e-4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kmax", type=int, default=None, help="bracket order (check: 3, chart: 0)")
    p.add_argument("--bridge", action="store_true", help="Brownian-bridge exit correction")
    p.add_argument("--out", help="output path")
    p.add_argument("--res", type=int, default=None, help="lattice points per axis (default 32)")
    p.add_argument("--box", help="grid box lo1,hi1,lo2,hi2,...")
    p.add_argument("--tmax", type=float, default=None, help="path time limit")
    p.add_argument("--workers", type=int, default=1, help="worker threads for path simulation")
    p.add_argument("--dts", default="4e-4,1e-4,2.5e-5", help="decreasing time steps")
    p.add_argument("--reference", type=float, default=None, help="exact value for convergence")
    p.add_argument("--tol-k", type=float, default=1e-12, dest="tol_k")
    p.add_argument("--theta", type=float, default=1e-8, help="transversality threshold")
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--field", type=int, default=None, help="chart: transversal field index")
    p.add_argument("--radius", type=float, default=None, help="chart: initial box radius")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


VECTOR_FLAGS = ("--point", "--box", "--dts")


def _attach_vectors(argv: list[str]) -> list[str]:
    # let "--point -0.5,0.2" through: argparse would read "-0.5,0.2" as an option
    out, i = [], 0
    while i < len(argv):
        if argv[i] in VECTOR_FLAGS and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _attach_vectors(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.paths < 1:
            raise UsageError("--paths must be >= 1")
        if args.kmax is not None and not 0 <= args.kmax <= 6:
            raise UsageError("--kmax must be in 0..6")
        problem = load_problem(args.problem)
        return COMMANDS[args.command](problem, args)
    except (UsageError, ProblemError, sde_mc.DomainError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
