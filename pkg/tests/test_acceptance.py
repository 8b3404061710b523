"""One test per acceptance criterion, each at its stated tolerance."""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from _oracles import INV_I0_1, fd_bracket, random_poly_field
from degen.chart import build_chart, verify_chart
from degen.problem import Problem, fixture_path, load_problem
from degen.sde_mc import PathConfig, WeightViolation, estimate_point
from degen.vf_algebra import VectorField, classify_K, lambda_k, lie_bracket, subcritical_fit

N, DT = 20000, 1e-4


def _within(est, ref, floor=0.02):
    tol = max(3 * est.stderr, floor)
    return abs(est.value - ref) <= tol, tol


def test_poisson_disk(criterion):
    P = load_problem(fixture_path("poisson_disk"))
    t0 = time.perf_counter()
    est = estimate_point(P, [0.0, 0.0], N, PathConfig(dt=DT, workers=1))
    elapsed = time.perf_counter() - t0
    ok, tol = _within(est, -0.25)
    ok = ok and elapsed < 60
    assert criterion(1, ok, f"u(0) = {est.value:.5f} vs -0.25 (tol {tol:.4f}), {elapsed:.1f} s")


def test_harmonic_boundary_data(criterion):
    P = load_problem(fixture_path("harmonic_disk"))
    est = estimate_point(P, [0.3, 0.2], N, PathConfig(dt=DT))
    ok, tol = _within(est, 0.3)
    assert criterion(2, ok, f"u(0.3, 0.2) = {est.value:.5f} vs 0.3 (tol {tol:.4f})")


_screened = {}


def _screened_run():
    # criterion 9 asserts the weight invariants on every path of this same run
    if "est" not in _screened:
        P = load_problem(fixture_path("screened_disk"))
        try:
            _screened["est"] = estimate_point(P, [0.0, 0.0], N, PathConfig(dt=DT, check_weights=True))
            _screened["violation"] = None
        except WeightViolation as err:
            _screened["est"], _screened["violation"] = None, str(err)
    return _screened["est"], _screened["violation"]


def test_screened_problem(criterion):
    est, violation = _screened_run()
    assert violation is None, violation
    ok, tol = _within(est, INV_I0_1)
    assert criterion(3, ok, f"u(0) = {est.value:.5f} vs 1/I0(1) = {INV_I0_1:.5f} (tol {tol:.4f})")


def test_kusuoka_stroock(criterion):
    bases = np.array([[0.0, 0.0, 0.0], [0.0, 0.3, 0.2]])
    details, ok = [], True
    for name, p, should_pass in (("p05", -0.5, True), ("p09", -0.9, True), ("p15", -1.5, False)):
        P = load_problem(fixture_path(f"kusuoka_stroock_{name}"))
        fit = subcritical_fit(P.fields, P.surface, 0, bases, inside=P.in_closure)
        good = fit.passed == should_pass
        if should_pass:
            good = good and abs(fit.slope - p) <= 0.05
        ok &= good
        details.append(f"p={p}: p_hat={fit.slope:.4f} {fit.status}")
        worst = 0.0
        for t in np.geomspace(1e-4, 0.5, 50):
            lam = lambda_k(P.fields, 0, [t, 0.0, 0.0])[0]
            ref = math.exp(-t ** p)
            err = abs(lam - ref) / ref if ref > 0 else abs(lam)
            worst = max(worst, err)
        ok &= worst <= 1e-12
        details.append(f"lambda0 rel err {worst:.1e}")
    assert criterion(4, ok, "; ".join(details))


def test_grushin_ladder(criterion):
    P = load_problem(fixture_path("grushin_disk"))
    lam0 = lambda_k(P.fields, 0, [0.0, 0.5])[0]
    lam1 = lambda_k(P.fields, 1, [0.0, 0.5])[0]
    ok = abs(lam0) <= 1e-10 and abs(lam1 - 1) <= 1e-10
    K_empty = classify_K(P, P.closure_grid(32), k_max=1).empty
    # brute force: eigenvalues of M M^T with the hand-built Grushin columns
    worst = 0.0
    for x in np.linspace(-1, 1, 41):
        for y in (-0.5, 0.0, 0.5):
            for k in (0, 1):
                cols = [(0, 0), (1, 0), (0, x)]
                if k:
                    cols += [(0, 0)] * 5 + [(0, 1), (0, 0), (0, -1), (0, 0)]
                M = np.array(cols, dtype=float).T
                ref = np.linalg.eigvalsh(M @ M.T).min()
                worst = max(worst, abs(lambda_k(P.fields, k, [x, y])[0] - ref))
    ok = ok and K_empty and worst <= 1e-12
    assert criterion(5, ok, f"lambda0={lam0:.1e} lambda1={lam1:.12f} K empty={K_empty} "
                            f"eigen-oracle max diff {worst:.1e}")


def test_bracket_oracle(criterion):
    rng = np.random.default_rng(20240601)
    worst_fd = worst_anti = worst_jac = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 4))
        X, Y, Z = (VectorField.parse(random_poly_field(rng, d), d) for _ in range(3))
        B, Bt = lie_bracket(X, Y), lie_bracket(Y, X)
        J = [lie_bracket(X, lie_bracket(Y, Z)), lie_bracket(Y, lie_bracket(Z, X)),
             lie_bracket(Z, lie_bracket(X, Y))]
        for p in rng.uniform(-1, 1, size=(10, d)):
            exact = B(p)
            rel = np.linalg.norm(exact - fd_bracket(X, Y, p)) / max(1.0, np.linalg.norm(exact))
            worst_fd = max(worst_fd, rel)
            worst_anti = max(worst_anti, float(np.max(np.abs(exact + Bt(p)))))
            worst_jac = max(worst_jac, float(np.max(np.abs(sum(f(p) for f in J)))))
    ok = worst_fd <= 1e-6 and worst_anti <= 1e-8 and worst_jac <= 1e-8
    assert criterion(6, ok, f"FD rel {worst_fd:.1e}, antisymmetry {worst_anti:.1e}, Jacobi {worst_jac:.1e}")


def test_charts(criterion):
    half = load_problem(fixture_path("half_space"))
    rep_h = verify_chart(build_chart(half, np.array([0.0, 0.3])))
    ident = (rep_h.round_trip <= 1e-12 and rep_h.boundary_phi == 0 and rep_h.boundary_F1 == 0
             and rep_h.transversal_residual == 0)
    disk = load_problem(fixture_path("disk_radial"))
    ch = build_chart(disk, np.array([1.0, 0.0]))
    rng = np.random.default_rng(7)
    lo, hi = ch.box().T
    z = rng.uniform(lo, hi, size=(100, 2))
    rep_d = verify_chart(ch, samples=z)
    radial = (rep_d.round_trip <= 1e-8 and rep_d.boundary_phi <= 1e-8 and rep_d.boundary_F1 <= 1e-8
              and rep_d.transversal_residual <= 1e-6)
    assert criterion(7, ident and radial,
                     f"half-space round trip {rep_h.round_trip:.1e}, transversal {rep_h.transversal_residual:.1e}; "
                     f"disk round trip {rep_d.round_trip:.1e}, boundary {max(rep_d.boundary_phi, rep_d.boundary_F1):.1e}, "
                     f"transversal {rep_d.transversal_residual:.1e}")


def test_solve_determinism(criterion):
    cmd = [sys.executable, "-m", "degen.cli", "solve", str(fixture_path("poisson_disk")),
           "--point", "0.2,-0.1", "--seed", "11"]
    runs = [subprocess.run(cmd + extra, capture_output=True, check=True).stdout
            for extra in ([], [], ["--workers", "1"], ["--workers", "8"])]
    ok = all(r == runs[0] for r in runs) and b"u_hat" in runs[0]
    assert criterion(8, ok, f"{len(runs)} runs of degen solve, {len(runs[0])} bytes each, identical={ok}")


def test_estimator_invariants(criterion):
    disk = dict(phi="1 - x^2 - y^2", box=[-1, 1, -1, 1])
    lap = [["0", "0"], ["1", "0"], ["0", "1"]]
    const = estimate_point(Problem.from_sources(2, lap, g="5", **disk), [0.4, -0.3], 2000, PathConfig())
    zero_var = const.value == 5.0 and const.stderr == 0.0
    cfg = PathConfig(seed=5)
    a = estimate_point(Problem.from_sources(2, lap, f="1 + x^2*y", **disk), [0.1, 0.2], 2000, cfg)
    b = estimate_point(Problem.from_sources(2, lap, f="2*(1 + x^2*y)", **disk), [0.1, 0.2], 2000, cfg)
    linear = b.value == 2 * a.value
    _, violation = _screened_run()
    weights = violation is None
    assert criterion(9, zero_var and linear and weights,
                     f"constant g exact={zero_var}, linear in f={linear}, weights monotone on "
                     f"{N} paths={weights}")
