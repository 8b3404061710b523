import math
from dataclasses import replace

import numpy as np
import pytest

from _oracles import INV_I0_1
from degen.problem import Problem, fixture_path, load_problem
from degen.sde_mc import (DomainError, EstimateRejected, PathConfig, convergence_study,
                          estimate_grid, estimate_point, estimates_csv, ito_drift, simulate_paths,
                          simulate_to_exit)
from degen.vf_algebra import VectorField

DISK = dict(phi="1 - x^2 - y^2", box=[-1, 1, -1, 1])
LAPLACE = [["0", "0"], ["1", "0"], ["0", "1"]]
DRIFT = [["1", "0"], ["0", "0"]]


def disk(fields=LAPLACE, **kw):
    return Problem.from_sources(2, fields, **{**DISK, **kw})


def test_config_validation():
    with pytest.raises(ValueError):
        PathConfig(dt=0)
    with pytest.raises(ValueError):
        PathConfig(dt=1e-2, t_max=0.5)
    with pytest.raises(ValueError):
        PathConfig(tol_b=0)
    assert PathConfig().resolved(disk()).t_max == pytest.approx(50 * disk().diameter() ** 2)


def test_ito_drift_examples():
    const = [VectorField.parse(c, 2) for c in (["0.5", "-1"], ["1", "0"], ["0", "2"])]
    assert np.array_equal(ito_drift(const)([0.3, 0.1]), [0.5, -1.0])
    one_d = [VectorField.parse(["0"], 1), VectorField.parse(["x"], 1)]
    assert ito_drift(one_d)([0.7]) == pytest.approx([0.7], rel=1e-15)
    grushin = [VectorField.parse(c, 2) for c in (["0", "0"], ["1", "0"], ["0", "x"])]
    assert np.array_equal(ito_drift(grushin)([0.4, -0.2]), [0.0, 0.0])
    # rotation field: J X = -(x, y)
    rot = [VectorField.parse(["0", "0"], 2), VectorField.parse(["-y", "x"], 2)]
    assert ito_drift(rot)([0.3, 0.4]) == pytest.approx([-0.3, -0.4], rel=1e-15)


def test_pure_drift_exits_at_one():
    P = disk(DRIFT, f="1")
    for dt in (1e-2, 1e-3, 1e-4):
        rec = simulate_to_exit(P, [0.0, 0.0], PathConfig(dt=dt), 0)
        assert rec.exited and abs(rec.tau - 1.0) <= dt
        assert np.allclose(rec.exit_point, [1.0, 0.0], atol=1e-9)
        assert abs(P.phi_values(rec.exit_point[None])[0]) <= 1e-10
        # trapezoid of a constant integrand is exact
        assert rec.f_integral == rec.tau
        assert rec.weight == 1.0


def test_weight_is_exp_of_c_integral():
    P = disk(DRIFT, c="-1", g="1")
    rec = simulate_to_exit(P, [0.0, 0.0], PathConfig(dt=1e-3), 0)
    assert rec.weight == pytest.approx(math.exp(-rec.tau), rel=1e-6)


def test_exit_points_on_boundary_and_weights_monotone():
    P = disk(c="-1 - x^2", g="1", f="y")
    cfg = PathConfig(dt=1e-3, check_weights=True)
    out = simulate_paths(P, [0.2, -0.1], 500, cfg)
    assert out["exited"].all()
    assert np.all(np.abs(P.phi_values(out["exit_point"])) <= cfg.tol_b)
    assert np.all((out["weight"] > 0) & (out["weight"] <= 1))


def test_constant_g_has_zero_variance():
    est = estimate_point(disk(g="5"), [0.3, 0.1], 300, PathConfig(dt=1e-3))
    assert est.value == 5.0 and est.stderr == 0.0


def test_linearity_in_f():
    cfg = PathConfig(dt=1e-3, seed=9)
    a = estimate_point(disk(f="1 + x*y"), [0.1, 0.2], 400, cfg)
    b = estimate_point(disk(f="2*(1 + x*y)"), [0.1, 0.2], 400, cfg)
    assert b.value == 2 * a.value


def test_determinism_across_workers_and_chunks():
    P = load_problem(fixture_path("screened_disk"))
    base = PathConfig(dt=1e-3, seed=3)
    ref = estimate_point(P, [0.1, 0.0], 300, base)
    for cfg in (replace(base, chunk_size=64), replace(base, chunk_size=37, workers=4)):
        other = estimate_point(P, [0.1, 0.0], 300, cfg)
        assert other.value == ref.value and other.stderr == ref.stderr
    # a single path reproduces its slot in the batch
    out = simulate_paths(P, [0.1, 0.0], 20, base)
    rec = simulate_to_exit(P, [0.1, 0.0], base, 17)
    assert rec.tau == out["tau"][17] and np.array_equal(rec.exit_point, out["exit_point"][17])


def test_seed_changes_result():
    P = load_problem(fixture_path("poisson_disk"))
    a = estimate_point(P, [0.0, 0.0], 300, PathConfig(dt=1e-3, seed=1))
    b = estimate_point(P, [0.0, 0.0], 300, PathConfig(dt=1e-3, seed=2))
    assert a.value != b.value


def test_grid_matches_point_estimates():
    P = load_problem(fixture_path("harmonic_disk"))
    cfg = PathConfig(dt=1e-3)
    pts = np.array([[0.0, 0.0], [0.5, 0.0]])
    grid = estimate_grid(P, pts, 300, cfg)
    assert grid[0].value == estimate_point(P, pts[0], 300, cfg, stream=0).value
    assert grid[1].value == estimate_point(P, pts[1], 300, cfg, stream=1).value
    single = estimate_grid(P, pts[1:], 300, cfg)
    assert single[0].value == estimate_point(P, pts[1], 300, cfg).value
    assert estimate_grid(P, np.zeros((0, 2)), 300, cfg) == []


def test_harmonic_along_radius():
    P = load_problem(fixture_path("harmonic_disk"))
    pts = np.array([[r, 0.0] for r in (-0.6, 0.0, 0.6)])
    for est in estimate_grid(P, pts, 4000, PathConfig(dt=1e-4)):
        assert abs(est.value - est.point[0]) <= max(3 * est.stderr, 0.02)


def test_mean_exit_time_normalization():
    # E tau = (1 - |x|^2) / (2 d) for the generator sum of squares of e_i
    P = load_problem(fixture_path("poisson_disk"))
    est = estimate_point(P, [0.0, 0.0], 4000, PathConfig(dt=1e-4))
    assert abs(est.mean_tau - 0.25) <= max(3 * est.stderr, 0.01)
    assert est.mean_tau == -est.value


def test_screened_against_bessel():
    P = load_problem(fixture_path("screened_disk"))
    est = estimate_point(P, [0.0, 0.0], 4000, PathConfig(dt=1e-4))
    assert abs(est.value - INV_I0_1) <= max(3 * est.stderr, 0.02)


def test_rejection_and_domain_errors():
    P = load_problem(fixture_path("poisson_disk"))
    with pytest.raises(EstimateRejected) as info:
        estimate_point(P, [0.0, 0.0], 100, PathConfig(dt=1e-3, t_max=0.1))
    assert info.value.estimate.unexited_frac > 0.5
    est = estimate_point(P, [0.0, 0.0], 100, PathConfig(dt=1e-3, t_max=0.1), reject=False)
    assert est.rejected and 0 <= est.unexited_frac <= 1
    with pytest.raises(DomainError):
        estimate_point(P, [1.5, 0.0], 10, PathConfig())
    with pytest.raises(ValueError):
        simulate_to_exit(P, [0.0, 0.0], PathConfig(), -1)


def test_stderr_definition():
    P = load_problem(fixture_path("poisson_disk"))
    cfg = PathConfig(dt=1e-3)
    out = simulate_paths(P, [0.3, 0.3], 200, cfg)
    samples = -out["f_integral"]
    est = estimate_point(P, [0.3, 0.3], 200, cfg)
    assert est.value == pytest.approx(samples.mean(), rel=1e-14)
    assert est.stderr == pytest.approx(samples.std(ddof=1) / math.sqrt(200), rel=1e-12)


def test_convergence_study():
    P = load_problem(fixture_path("poisson_disk"))
    rows = convergence_study(P, [0.0, 0.0], [4e-3, 1e-3, 2.5e-4], 2000, PathConfig(), reference=-0.25)
    errs = [r["abs_err"] for r in rows]
    # exit-time overshoot bias shrinks with dt; common random numbers keep noise small
    assert errs[0] > errs[1] > errs[2]
    const = convergence_study(disk(g="2"), [0.0, 0.0], [1e-2, 1e-3], 50, PathConfig(), reference=2.0)
    assert all(r["abs_err"] == 0 for r in const)
    drift = convergence_study(disk(DRIFT, f="1"), [0.0, 0.0], [1e-2, 1e-3, 1e-4], 3, PathConfig())
    assert all(abs(r["mean_tau"] - 1) <= r["dt"] for r in drift)
    with pytest.raises(ValueError):
        convergence_study(P, [0.0, 0.0], [1e-3, 1e-2], 10, PathConfig())


def test_bridge_reduces_bias():
    P = load_problem(fixture_path("poisson_disk"))
    cfg = PathConfig(dt=4e-3)
    plain = estimate_point(P, [0.0, 0.0], 4000, cfg)
    bridged = estimate_point(P, [0.0, 0.0], 4000, replace(cfg, bridge=True))
    assert abs(bridged.value + 0.25) < abs(plain.value + 0.25)
    assert abs(bridged.value + 0.25) <= max(3 * bridged.stderr, 0.02)


def test_csv_format():
    P = load_problem(fixture_path("poisson_disk"))
    ests = estimate_grid(P, np.array([[0.0, 0.0], [0.25, -0.5]]), 50, PathConfig(dt=1e-3))
    text = estimates_csv(ests, 2)
    lines = text.splitlines()
    assert lines[0] == "x1,x2,u_hat,stderr,n_paths,unexited_frac"
    assert len(lines) == 3
    assert lines[2].startswith("0.25,-0.5,")
    assert float(lines[1].split(",")[2]) == ests[0].value
