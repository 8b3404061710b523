"""Exit-time Monte Carlo for the Dirichlet problem L u = f in D, u = g on dD.

Paths follow the diffusion whose generator is sum_i X_i^2 + X_0, i.e. the
Stratonovich equation driven by the fields sqrt(2) X_i, stepped with
Euler-Maruyama in Ito form.  Each exited path contributes

    g(xi_tau) W(tau) - int_0^tau f(xi_t) W(t) dt,   W(t) = exp(int_0^t c(xi_s) ds)

and u(x) is the mean over paths.  All randomness is keyed by
(seed, stream, path, step), so estimates do not depend on batching or on the
number of worker threads.
"""

from __future__ import annotations

import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import expr as ex
from .problem import Problem
from .rng import CounterRNG
from .vf_algebra import VectorField

log = logging.getLogger(__name__)

MAX_UNEXITED = 1e-2
NEWTON_ITERS = 30


class DomainError(ValueError):
    """Start point not inside D."""


class EstimateRejected(RuntimeError):
    def __init__(self, estimate: "Estimate", message: str):
        self.estimate = estimate
        super().__init__(message)


class WeightViolation(AssertionError):
    pass


@dataclass(frozen=True)
class PathConfig:
    dt: float = 1e-4
    t_max: float | None = None  # None: 50 * diameter**2
    seed: int = 0
    bridge: bool = False
    tol_b: float = 1e-10
    bisect_iters: int = 12
    check_weights: bool = False
    workers: int = 1
    chunk_size: int = 1 << 15

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_max is not None and self.t_max < 100 * self.dt:
            raise ValueError("t_max must be at least 100 * dt")
        if not self.tol_b > 0:
            raise ValueError("tol_b must be positive")
        if self.workers < 1 or self.chunk_size < 1:
            raise ValueError("workers and chunk_size must be >= 1")

    def resolved(self, problem: Problem) -> "PathConfig":
        if self.t_max is not None:
            return self
        return replace(self, t_max=max(50.0 * problem.diameter() ** 2, 100 * self.dt))


@dataclass
class ExitRecord:
    exited: bool
    tau: float
    exit_point: np.ndarray
    weight: float
    f_integral: float
    valid: bool = True


@dataclass
class Estimate:
    point: tuple[float, ...]
    value: float
    stderr: float
    n_paths: int  # paths entering the mean
    n_total: int
    n_unexited: int
    n_invalid: int
    mean_tau: float
    config: dict = field(default_factory=dict)
    rejected: bool = False

    @property
    def unexited_frac(self) -> float:
        return self.n_unexited / self.n_total if self.n_total else 0.0

    def as_dict(self) -> dict:
        out = asdict(self)
        out["point"] = list(self.point)
        out["unexited_frac"] = self.unexited_frac
        return out


def ito_drift(fields: Sequence[VectorField]) -> VectorField:
    """Ito drift X0 + (1/2) sum_i D(sqrt2 X_i) (sqrt2 X_i) of the simulated SDE.

    The factor 1/2 cancels the two sqrt(2)s, so the correction is formed
    directly as sum_i DX_i X_i, which avoids rounding the constants.
    """
    X0, rest = fields[0], fields[1:]
    d = X0.dim
    comps = list(X0.components)
    for X in rest:
        J = X.jacobian
        for r in range(d):
            for c in range(d):
                comps[r] = ex.add(comps[r], ex.mul(J[r][c], X.components[c]))
    return VectorField(tuple(comps), 0, "b")


def _scalar_fn(e):
    f = e._compiled

    def run(cols, m):
        out = f(cols)
        return np.full(m, out) if np.ndim(out) == 0 else out
    return run


def _field_fn(vf: VectorField):
    """Evaluate a field on coordinate-major input; returns (d, m)."""
    comps = [_scalar_fn(c) for c in vf.components]
    if all(isinstance(c, ex.Const) for c in vf.components):
        const = np.array([c.value for c in vf.components])[:, None]
        return lambda cols, m: np.broadcast_to(const, (len(comps), m))
    return lambda cols, m: np.stack([c(cols, m) for c in comps])


class _Model:
    """Compiled pieces of a problem used inside the stepping loop.

    States are stored coordinate-major, shape (d, m).
    """

    def __init__(self, problem: Problem):
        self.d = problem.dim
        self.n = problem.n
        self.drift_field = ito_drift(problem.fields)
        self.drift = _field_fn(self.drift_field)
        self.diffusion = [_field_fn(X) for X in problem.diffusion_fields]
        self.c, self.f, self.g, self.phi = (_scalar_fn(e) for e in (problem.c, problem.f,
                                                                    problem.g, problem.phi))
        self.grad_phi = _field_fn(problem.boundary.gradient)


def _project(model: _Model, y: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Newton steps along grad(phi) onto {phi = 0}; returns (points, converged)."""
    y = y.copy()
    val = model.phi(y, y.shape[1])
    for _ in range(NEWTON_ITERS):
        todo = ~(np.abs(val) <= tol)
        if not todo.any():
            break
        yt = y[:, todo]
        g = model.grad_phi(yt, yt.shape[1])
        yt = yt - (val[todo] / np.sum(g * g, axis=0)) * g
        y[:, todo] = yt
        val[todo] = model.phi(yt, yt.shape[1])
    return y, np.abs(val) <= tol


def _simulate(model: _Model, x0: np.ndarray, paths: np.ndarray, cfg: PathConfig,
              rng: CounterRNG) -> dict:
    """Run a batch of paths (indices ``paths``) from ``x0`` to exit or t_max."""
    N, d, n = len(paths), model.d, model.n
    dt = cfg.dt
    noise_scale = math.sqrt(2.0 * dt)
    max_steps = int(math.ceil(cfg.t_max / dt))

    exited = np.zeros(N, dtype=bool)
    valid = np.ones(N, dtype=bool)
    tau = np.full(N, np.nan)
    exit_pt = np.full((d, N), np.nan)
    weight = np.full(N, np.nan)
    f_int = np.full(N, np.nan)

    active = np.arange(N)
    x = np.repeat(np.asarray(x0, dtype=np.float64)[:, None], N, axis=1)
    t = np.zeros(N)
    ic = np.zeros(N)
    W = np.ones(N)
    F = np.zeros(N)
    cx = model.c(x, N)
    fx = model.f(x, N)

    with np.errstate(all="ignore"):
        for step in range(max_steps):
            m = active.size
            if m == 0:
                break
            z = rng.normals(paths[active], step, n)
            xn = x + model.drift(x, m) * dt
            for i, X in enumerate(model.diffusion):
                xn += X(x, m) * (noise_scale * z[:, i])
            phin = model.phi(xn, m)
            bad = ~np.isfinite(phin) | ~np.all(np.isfinite(xn), axis=0)
            crossed = (phin <= 0) & ~bad
            s_cross = None

            if cfg.bridge:
                cand = ~crossed & ~bad
                if cand.any():
                    hit, frac = _bridge_crossing(model, x[:, cand], xn[:, cand], phin[cand], dt,
                                                 rng, paths[active[cand]], step)
                    idx = np.nonzero(cand)[0][hit]
                    crossed[idx] = True
                    s_cross = np.ones(m)
                    s_cross[idx] = frac[hit]

            stopping = crossed | bad
            if stopping.any():
                # exits: locate the crossing on the step, then snap onto the boundary
                if crossed.any():
                    ci = np.nonzero(crossed)[0]
                    xa, xb = x[:, ci], xn[:, ci]
                    s = np.ones(ci.size) if s_cross is None else s_cross[ci]
                    linear = phin[ci] <= 0
                    if linear.any():
                        s[linear] = _bisect(model, xa[:, linear], xb[:, linear], cfg.bisect_iters)
                    pe, ok = _project(model, xa + s * (xb - xa), cfg.tol_b)
                    h = s * dt
                    k = ci.size
                    We = np.exp(ic[ci] + 0.5 * (cx[ci] + model.c(pe, k)) * h)
                    if cfg.check_weights:
                        _assert_weights(W[ci], We)
                    Fe = F[ci] + 0.5 * (fx[ci] * W[ci] + model.f(pe, k) * We) * h
                    ok &= np.isfinite(Fe) & np.isfinite(We)
                    gi = active[ci]
                    exited[gi] = True
                    valid[gi] = ok
                    tau[gi] = t[ci] + h
                    exit_pt[:, gi] = pe
                    weight[gi] = We
                    f_int[gi] = Fe
                if bad.any():
                    valid[active[bad]] = False
                keep = ~stopping
                active = active[keep]
                m = active.size
                x, xn, t, ic, W, F, cx, fx = (x[:, keep], xn[:, keep], t[keep], ic[keep], W[keep],
                                              F[keep], cx[keep], fx[keep])

            # interior continuation (trapezoid rule for both integrals)
            cn = model.c(xn, m)
            fn = model.f(xn, m)
            ic_n = ic + 0.5 * (cx + cn) * dt
            Wn = np.exp(ic_n)
            if cfg.check_weights:
                _assert_weights(W, Wn)
            F = F + 0.5 * (fx * W + fn * Wn) * dt
            t = t + dt
            x, ic, W, cx, fx = xn, ic_n, Wn, cn, fn

            lost = ~(np.isfinite(F) & np.isfinite(W))
            if lost.any():
                valid[active[lost]] = False
                keep = ~lost
                active = active[keep]
                x, t, ic, W, F, cx, fx = (x[:, keep], t[keep], ic[keep], W[keep], F[keep],
                                          cx[keep], fx[keep])

    return {"exited": exited, "valid": valid, "tau": tau, "exit_point": exit_pt.T.copy(),
            "weight": weight, "f_integral": f_int}


def _assert_weights(w_old: np.ndarray, w_new: np.ndarray) -> None:
    if np.any(~(w_new > 0)) or np.any(w_new > w_old) or np.any(w_new > 1):
        raise WeightViolation("Feynman-Kac weight left (0, 1] or increased along a path")


def _bisect(model: _Model, xa: np.ndarray, xb: np.ndarray, iters: int) -> np.ndarray:
    m = xa.shape[1]
    lo = np.zeros(m)
    hi = np.ones(m)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = model.phi(xa + mid * (xb - xa), m) > 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return 0.5 * (lo + hi)


def _bridge_crossing(model: _Model, xa, xb, phib, dt, rng: CounterRNG, paths, step):
    """Probability that the continuous path left D between two interior points.

    One-dimensional Brownian-bridge approximation along the boundary normal at
    the step start.  Returns (hit mask, crossing fraction of the step).
    """
    m = xa.shape[1]
    ga = model.grad_phi(xa, m)
    gb = model.grad_phi(xb, m)
    na = np.linalg.norm(ga, axis=0)
    da = model.phi(xa, m) / na
    db = phib / np.linalg.norm(gb, axis=0)
    nu = ga / na
    var = np.zeros(m)
    for X in model.diffusion:
        var += 2.0 * np.sum(X(xa, m) * nu, axis=0) ** 2
    p = np.where(var > 0, np.exp(-2.0 * da * db / (var * dt)), 0.0)
    u = rng.uniforms(paths, step, 1)[:, 0]
    return u < p, da / (da + db)


# ---------------------------------------------------------------------------
# public operations

def _check_start(problem: Problem, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape != (problem.dim,):
        raise DomainError(f"point has {x.size} coordinates, problem dimension is {problem.dim}")
    if not problem.inside(x)[0]:
        raise DomainError(f"start point {x.tolist()} is not inside D (phi <= 0)")
    return x


def simulate_to_exit(problem: Problem, x, cfg: PathConfig, path_index: int,
                     stream: int = 0) -> ExitRecord:
    """Simulate a single path; identical to the same path inside a batch."""
    if path_index < 0:
        raise ValueError("path index must be >= 0")
    x = _check_start(problem, x)
    cfg = cfg.resolved(problem)
    out = _simulate(_Model(problem), x, np.array([path_index], dtype=np.uint64), cfg,
                    CounterRNG(cfg.seed, stream))
    return ExitRecord(bool(out["exited"][0]), float(out["tau"][0]), out["exit_point"][0],
                      float(out["weight"][0]), float(out["f_integral"][0]), bool(out["valid"][0]))


def simulate_paths(problem: Problem, x, N: int, cfg: PathConfig, stream: int = 0,
                   model: _Model | None = None) -> dict:
    """Per-path outcomes for paths 0..N-1, in path order."""
    x = _check_start(problem, x)
    cfg = cfg.resolved(problem)
    model = model or _Model(problem)
    rng = CounterRNG(cfg.seed, stream)
    starts = list(range(0, N, cfg.chunk_size))

    def run(start):
        idx = np.arange(start, min(start + cfg.chunk_size, N), dtype=np.uint64)
        return _simulate(model, x, idx, cfg, rng)

    if cfg.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        return {"exited": np.zeros(0, bool), "valid": np.zeros(0, bool), "tau": np.zeros(0),
                "exit_point": np.zeros((0, problem.dim)), "weight": np.zeros(0),
                "f_integral": np.zeros(0)}
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def path_samples(problem: Problem, out: dict) -> tuple[np.ndarray, np.ndarray]:
    """(mask of paths used, g(exit) W - f-integral for those paths)."""
    use = out["exited"] & out["valid"]
    pts = out["exit_point"][use]
    g = np.broadcast_to(ex.evaluate_batch(problem.g, pts), (len(pts),))
    return use, g * out["weight"][use] - out["f_integral"][use]


def estimate_point(problem: Problem, x, N: int, cfg: PathConfig, stream: int = 0,
                   max_unexited: float = MAX_UNEXITED, reject: bool = True) -> Estimate:
    """Monte Carlo estimate of u(x) from N paths."""
    if N < 1:
        raise ValueError("need at least one path")
    x = _check_start(problem, x)
    cfg = cfg.resolved(problem)
    cval = ex.evaluate(problem.c, x)
    if cval > 0:
        log.warning("c(x) = %g > 0 at the start point; the representation assumes c <= 0", cval)
    out = simulate_paths(problem, x, N, cfg, stream)
    use, samples = path_samples(problem, out)
    n_used = int(samples.size)
    n_unexited = int((~out["exited"]).sum())
    n_invalid = int((~out["valid"]).sum())
    if n_used:
        value = float(np.mean(samples))
        stderr = float(np.std(samples, ddof=1) / math.sqrt(n_used)) if n_used > 1 else float("nan")
        mean_tau = float(np.mean(out["tau"][use]))
    else:
        value = stderr = mean_tau = float("nan")
    echo = {"dt": cfg.dt, "t_max": cfg.t_max, "seed": cfg.seed, "bridge": cfg.bridge,
            "tol_b": cfg.tol_b, "stream": stream}
    est = Estimate(tuple(float(v) for v in x), value, stderr, n_used, N, n_unexited, n_invalid,
                   mean_tau, echo)
    if n_invalid:
        log.warning("%d of %d paths hit non-finite states and were discarded", n_invalid, N)
    if est.unexited_frac > max_unexited or n_used == 0:
        est.rejected = True
        if reject:
            raise EstimateRejected(est, (
                f"{est.unexited_frac:.3%} of paths did not exit before t_max = {cfg.t_max:g}; "
                "increase t_max or check that some coordinate direction is uniformly "
                "reached by the diffusion fields"))
    return est


def estimate_grid(problem: Problem, points, N: int, cfg: PathConfig,
                  reject: bool = True) -> list[Estimate]:
    """estimate_point at each grid point; point i uses random stream i."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, problem.dim)
    return [estimate_point(problem, p, N, cfg, stream=i, reject=reject) for i, p in enumerate(pts)]


def convergence_study(problem: Problem, x, dts: Sequence[float], N: int, cfg: PathConfig,
                      reference: float | None = None) -> list[dict]:
    """Estimate u(x) for a decreasing list of time steps."""
    dts = [float(h) for h in dts]
    if any(b >= a for a, b in zip(dts, dts[1:])):
        raise ValueError("dt list must be strictly decreasing")
    rows = []
    for h in dts:
        est = estimate_point(problem, x, N, replace(cfg, dt=h))
        row = {"dt": h, "u_hat": est.value, "stderr": est.stderr, "mean_tau": est.mean_tau}
        if reference is not None:
            row["abs_err"] = abs(est.value - reference)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# CSV

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def estimates_csv(estimates: Sequence[Estimate], d: int) -> str:
    buf = io.StringIO()
    cols = [f"x{i}" for i in range(1, d + 1)] + ["u_hat", "stderr", "n_paths", "unexited_frac"]
    buf.write(",".join(cols) + "\n")
    for e in estimates:
        vals = list(e.point) + [e.value, e.stderr, e.n_paths, e.unexited_frac]
        buf.write(",".join(_fmt(v) for v in vals) + "\n")
    return buf.getvalue()


def table_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [",".join(keys)] + [",".join(_fmt(r.get(k, float("nan"))) for k in keys) for r in rows]
    return "\n".join(lines) + "\n"
