"""Flow-box charts that flatten the boundary near a non-characteristic point.

Given x0 on dD and a diffusion field X_i transversal to dD there, the chart
inverse is

    F^{-1}(t, s) = flow of (sign * X_i) for time t, started at sigma(s),

where sigma parameterises dD as a graph over its tangent plane at x0.  Then
F maps dD to {z1 = 0}, D to {z1 > 0}, and pushes sign * X_i forward to e1.
F itself is evaluated by Newton inversion of F^{-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .problem import Problem
from .vf_algebra import (VectorField, column_count, fit_subcritical_samples)
from .linalg import smallest_singular_value

FD_STEP = 1e-6
FLOW_STEPS = 256
GRAPH_NEWTON_ITERS = 5
GRAPH_TOL = 1e-12
INVERT_ITERS = 50
ROUND_TRIP_TOL = 1e-8


class ChartError(ValueError):
    pass


def select_transversal(fields: Sequence[VectorField], x0, normal, theta: float = 1e-8) -> tuple[int, float]:
    """Index (1-based into X1..Xn) of the field most transversal to ``normal`` at x0.

    ``normal`` is taken to point into D; the returned sign makes
    ``sign * X_i`` enter D.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    nu = np.asarray(normal, dtype=np.float64)
    nu = nu / np.linalg.norm(nu)
    inner = np.array([float(np.dot(X(x0), nu)) for X in fields])
    inner = np.where(np.isfinite(inner), inner, 0.0)
    j = int(np.argmax(np.abs(inner)))
    if abs(inner[j]) < theta:
        raise ChartError(f"characteristic point {x0.tolist()}: no field is transversal to the boundary")
    return j + 1, 1.0 if inner[j] > 0 else -1.0


def _tangent_basis(nu: np.ndarray) -> np.ndarray:
    """Orthonormal basis of nu's complement, built from the standard axes (d x (d-1))."""
    d = len(nu)
    basis = [nu]
    for j in range(d):
        v = np.eye(d)[j]
        for b in basis:
            v = v - np.dot(v, b) * b
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            basis.append(v / norm)
        if len(basis) == d:
            break
    return np.array(basis[1:]).T.reshape(d, d - 1)


@dataclass
class BoundaryChart:
    problem: Problem
    x0: np.ndarray
    index: int  # transversal field, 1-based into X1..Xn
    sign: float
    normal: np.ndarray  # inward unit normal at x0
    tangent: np.ndarray  # d x (d-1)
    radius: float
    _field: VectorField = field(init=False, repr=False)

    def __post_init__(self):
        self._field = self.problem.fields[self.index]
        self._grad = self.problem.boundary.gradient

    @property
    def dim(self) -> int:
        return self.problem.dim

    def box(self, radius: float | None = None) -> np.ndarray:
        r = self.radius if radius is None else radius
        return np.array([[0.0, r]] + [[-r, r]] * (self.dim - 1))

    def validity_grid(self, per_axis: int = 10, radius: float | None = None) -> np.ndarray:
        box = self.box(radius)
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in box]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    # -- the maps -----------------------------------------------------------

    def sigma(self, s: np.ndarray) -> np.ndarray:
        """Boundary points over the tangent plane: x0 + T s + h nu with phi = 0."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        base = self.x0[None, :] + s @ self.tangent.T
        h = np.zeros(len(s))
        phi = self.problem.phi
        with np.errstate(all="ignore"):
            for _ in range(GRAPH_NEWTON_ITERS):
                y = base + h[:, None] * self.normal[None, :]
                val = phi(*y.T) * np.ones(len(s))
                if np.all(np.abs(val) <= GRAPH_TOL):
                    break
                slope = self._grad.batch(y) @ self.normal
                h = h - val / slope
        return base + h[:, None] * self.normal[None, :]

    def _flow(self, y: np.ndarray, t: np.ndarray) -> np.ndarray:
        X, sgn = self._field, self.sign
        step = (t / FLOW_STEPS)[:, None]
        with np.errstate(all="ignore"):
            for _ in range(FLOW_STEPS):
                k1 = sgn * X.batch(y)
                k2 = sgn * X.batch(y + 0.5 * step * k1)
                k3 = sgn * X.batch(y + 0.5 * step * k2)
                k4 = sgn * X.batch(y + step * k3)
                y = y + step * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        return y

    def inverse(self, z) -> np.ndarray:
        """F^{-1}(z) for chart coordinates z = (t, s) of shape (P, d)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return self._flow(self.sigma(z[:, 1:]), z[:, 0])

    def inverse_jacobian(self, z) -> np.ndarray:
        """D F^{-1}(z), shape (P, d, d).

        The t-column is the flowing field itself, sign * X_i(F^{-1}(z)); the
        tangential columns use central differences.
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        P, d = z.shape
        shifted = [z]
        for j in range(1, d):
            e = np.zeros(d)
            e[j] = FD_STEP
            shifted.extend([z + e, z - e])
        vals = self.inverse(np.concatenate(shifted)).reshape(2 * d - 1, P, d)
        J = np.empty((P, d, d))
        with np.errstate(all="ignore"):
            J[:, :, 0] = self.sign * self._field.batch(vals[0])
        for j in range(1, d):
            J[:, :, j] = (vals[2 * j - 1] - vals[2 * j]) / (2 * FD_STEP)
        return J

    def forward(self, x, strict: bool = True) -> np.ndarray:
        """F(x) by Newton iteration on F^{-1}(z) = x."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        lin = np.column_stack([self.sign * self._field(self.x0), self.tangent])
        z = np.linalg.solve(lin, (x - self.x0).T).T
        done = np.zeros(len(x), dtype=bool)
        for _ in range(INVERT_ITERS):
            todo = ~done
            if not todo.any():
                break
            zt = z[todo]
            res = self.inverse(zt) - x[todo]
            small = np.all(np.abs(res) <= 1e-13 * (1 + np.abs(x[todo])), axis=1)
            J = self.inverse_jacobian(zt)
            with np.errstate(all="ignore"):
                try:
                    delta = np.linalg.solve(J, res[..., None])[..., 0]
                except np.linalg.LinAlgError:
                    delta = np.full_like(zt, np.nan)
            zt = zt - delta
            z[todo] = zt
            idx = np.nonzero(todo)[0]
            done[idx[small | (np.max(np.abs(delta), axis=1) <= 1e-15 * (1 + np.max(np.abs(zt), axis=1)))]] = True
            bad = ~np.all(np.isfinite(zt), axis=1)
            if bad.any():
                z[idx[bad]] = np.nan
                done[idx[bad]] = True
        ok = done & np.all(np.isfinite(z), axis=1)
        if strict and not ok.all():
            j = int(np.nonzero(~ok)[0][0])
            raise ChartError(f"chart inversion failed to converge at {x[j].tolist()}")
        z[~ok] = np.nan
        return z

    def round_trip_residual(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        back = self.forward(self.inverse(z), strict=False)
        res = np.max(np.abs(back - z), axis=1)
        return np.where(np.isfinite(res), res, np.inf)

    def pushforward_at_chart(self, X: VectorField, z) -> np.ndarray:
        """F^*(X) evaluated at chart points z: DF^{-1}(z)^{-1} X(F^{-1}(z))."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        J = self.inverse_jacobian(z)
        vals = X.batch(self.inverse(z))
        with np.errstate(all="ignore"):
            return np.linalg.solve(J, vals[..., None])[..., 0]


def pushforward(chart: BoundaryChart, X: VectorField, x) -> np.ndarray:
    """F^*(X)(F(x)) = DF(x) X(x) for points x in the chart domain."""
    return chart.pushforward_at_chart(X, chart.forward(x))


def build_chart(problem: Problem, x0, index: int | None = None, radius: float | None = None,
                theta: float = 1e-8, adapt: bool = True) -> BoundaryChart:
    """Boundary chart at x0 using diffusion field ``index`` (chosen if None)."""
    x0 = np.asarray(x0, dtype=np.float64)
    phi0 = float(problem.phi(*x0))
    if abs(phi0) > 1e-10:
        raise ChartError(f"base point {x0.tolist()} is not on the boundary (phi = {phi0:.3g})")
    grad = problem.boundary.gradient(x0)
    gnorm = float(np.linalg.norm(grad))
    if not gnorm >= 1e-8:
        raise ChartError(f"degenerate boundary at {x0.tolist()}: |grad phi| = {gnorm:.3g}")
    nu = grad / gnorm
    fields = problem.diffusion_fields
    if index is None:
        index, sign = select_transversal(fields, x0, nu, theta)
    else:
        if not 1 <= index <= problem.n:
            raise ChartError(f"field index {index} outside 1..{problem.n}")
        inner = float(np.dot(fields[index - 1](x0), nu))
        if not abs(inner) >= theta:
            raise ChartError(f"X{index} is not transversal to the boundary at {x0.tolist()}")
        sign = 1.0 if inner > 0 else -1.0
    r0 = radius if radius is not None else 0.25 * problem.diameter()
    chart = BoundaryChart(problem, x0, index, sign, nu, _tangent_basis(nu), r0)
    if adapt:
        chart.radius = _adapt_radius(chart, r0)
    return chart


def _chart_ok(chart: BoundaryChart, r: float) -> bool:
    grid = chart.validity_grid(5, r)
    with np.errstate(all="ignore"):
        res = chart.round_trip_residual(grid)
        on_bnd = np.abs(chart.problem.phi_values(chart.sigma(grid[:, 1:])))
    return bool(np.all(res <= ROUND_TRIP_TOL) and np.all(on_bnd <= ROUND_TRIP_TOL))


def _adapt_radius(chart: BoundaryChart, r0: float, refine: int = 6) -> float:
    """Largest radius (by halving, then bisection) with round-trip residual <= 1e-8."""
    good, bad = None, None
    r = r0
    while r > 1e-6:
        if _chart_ok(chart, r):
            good = r
            break
        bad, r = r, r / 2
    if good is None:
        raise ChartError("no chart radius down to 1e-6 passes the round-trip test")
    if bad is None:
        return good
    for _ in range(refine):
        mid = 0.5 * (good + bad)
        if _chart_ok(chart, mid):
            good = mid
        else:
            bad = mid
    return good


# ---------------------------------------------------------------------------
# verification

def _numeric_bracket(A: Callable, B: Callable, h: float = 1e-5) -> Callable:
    """[A, B](z) = DB(z) A(z) - DA(z) B(z) with central-difference Jacobians."""

    def jac_times(F, z, v):
        return (F(z + h * v) - F(z - h * v)) / (2 * h)

    def bracket(z):
        a, b = A(z), B(z)
        return jac_times(B, z, a) - jac_times(A, z, b)
    return bracket


def pushed_fields(chart: BoundaryChart) -> list[Callable]:
    """F^*(X_j) for j = 0..n as callables on chart coordinates."""
    return [(lambda z, X=X: chart.pushforward_at_chart(X, z)) for X in chart.problem.fields]


def pushed_columns(chart: BoundaryChart, k: int) -> list[Callable]:
    base = pushed_fields(chart)
    cols = list(base)
    level = base
    for _ in range(k):
        level = [_numeric_bracket(A, W) for A in base for W in level]
        cols.extend(level)
    return cols


@dataclass
class ChartReport:
    radius: float
    index: int
    sign: float
    round_trip: float
    boundary_phi: float
    boundary_F1: float
    interior_min_F1: float
    interior_inside: bool
    transversal_residual: float
    first_components: dict[str, float]
    subcritical: dict | None = None

    def summary(self) -> dict:
        out = {
            "chart.radius": self.radius,
            "chart.field": f"X{self.index}",
            "chart.sign": self.sign,
            "i.round_trip_max": self.round_trip,
            "i.boundary_phi_max": self.boundary_phi,
            "i.boundary_F1_max": self.boundary_F1,
            "i.interior_min_F1": self.interior_min_F1,
            "i.interior_inside": self.interior_inside,
            "ii.transversal_max": self.transversal_residual,
        }
        for name, v in self.first_components.items():
            out[f"iii.first_component.{name}"] = v
        if self.subcritical is not None:
            for key, v in self.subcritical.items():
                out[f"iv.{key}"] = v
        return out


def verify_chart(chart: BoundaryChart, problem: Problem | None = None, samples=None, k: int = 0,
                 rho_min: float = 1e-4, n_rho: int = 30, margin: float = 0.05) -> ChartReport:
    """Measure the chart properties on sample chart coordinates.

    Boundary mapping, round trip and the transversal pushforward are checked;
    the first components of the other pushed-forward fields are reported but
    not enforced.  The subcriticality fit of the transformed operator against
    {z1 = 0} uses finite-difference brackets of the pushed-forward fields.
    """
    problem = problem or chart.problem
    z = chart.validity_grid(10) if samples is None else np.atleast_2d(np.asarray(samples, dtype=np.float64))
    with np.errstate(all="ignore"):
        rt = chart.round_trip_residual(z)
        xs = chart.inverse(z)
        zb = z.copy()
        zb[:, 0] = 0.0
        xb = chart.inverse(zb)
        bnd_phi = np.abs(problem.phi_values(xb))
        bnd_F1 = np.abs(chart.forward(xb, strict=False)[:, 0])
        interior = z[:, 0] > 0
        F1 = chart.forward(xs[interior], strict=False)[:, 0] if interior.any() else np.zeros(0)
        inside = bool(np.all(problem.inside(xs[interior]))) if interior.any() else True

        e1 = np.zeros(chart.dim)
        e1[0] = 1.0
        pushed = chart.pushforward_at_chart(problem.fields[chart.index], z) * chart.sign
        trans = float(np.max(np.abs(pushed - e1)))
        firsts = {}
        for j, X in enumerate(problem.fields):
            if j == chart.index:
                continue
            firsts[f"X{j}"] = float(np.max(np.abs(chart.pushforward_at_chart(X, z)[:, 0])))

        sub = None
        if chart.radius > rho_min:
            sub = _chart_subcritical(chart, z, k, rho_min, n_rho, margin)

    return ChartReport(chart.radius, chart.index, chart.sign, float(np.max(rt)),
                       float(np.max(bnd_phi)), float(np.max(bnd_F1)),
                       float(np.min(F1)) if F1.size else float("nan"), inside, trans, firsts, sub)


def _chart_subcritical(chart: BoundaryChart, z: np.ndarray, k: int, rho_min: float, n_rho: int,
                       margin: float) -> dict:
    rho = np.geomspace(rho_min, min(1e-1, chart.radius), n_rho)
    tangential = np.unique(np.round(z[:, 1:], 12), axis=0)
    central = np.all(np.abs(tangential) <= 0.5 * chart.radius, axis=1)
    if central.any():
        tangential = tangential[central]
    if len(tangential) > 4:
        tangential = tangential[np.linspace(0, len(tangential) - 1, 4).astype(int)]
    pts = np.concatenate([np.column_stack([rho, np.repeat(s[None, :], len(rho), axis=0)])
                          for s in tangential])
    dist = np.tile(rho, len(tangential))
    cols = pushed_columns(chart, k)
    m = column_count(len(chart.problem.fields), k)
    mats = np.stack([c(pts) for c in cols[:m]], axis=-1)
    with np.errstate(divide="ignore"):
        log_lam = 2.0 * np.log(smallest_singular_value(mats))
    fit = fit_subcritical_samples(dist, log_lam, k, margin)
    return fit.summary()
