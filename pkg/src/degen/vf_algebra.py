"""Lie-bracket calculus and quantitative Hörmander diagnostics.

Vector fields are tuples of symbolic expressions.  The bracket matrix at
order k collects X0..Xn and every left-nested bracket with at most k bracket
operations; ``lambda^(k)`` is the smallest eigenvalue of M M^T, computed as
the squared smallest singular value of M.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import expr as ex
from .expr import Expression
from .linalg import smallest_singular_value

log = logging.getLogger(__name__)

MAX_BRACKET_ORDER = 6
LOG_UNDERFLOW = math.log(1e-300)


class DimensionError(ValueError):
    pass


class NonFiniteFieldError(ArithmeticError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class VectorField:
    """A symbolic vector field with its bracket order and word label."""

    components: tuple[Expression, ...]
    order: int = 0
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if any(c.max_var() > len(self.components) for c in self.components):
            raise DimensionError(f"field {self.label or '?'} uses a variable beyond its dimension")

    @classmethod
    def parse(cls, sources: Sequence[str], d: int, label: str = "") -> "VectorField":
        if len(sources) != d:
            raise DimensionError(f"field {label or '?'} has {len(sources)} components, expected {d}")
        return cls(tuple(ex.parse(s, d) for s in sources), 0, label)

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def is_zero(self) -> bool:
        return all(ex.is_zero(c) for c in self.components)

    @cached_property
    def jacobian(self) -> tuple[tuple[Expression, ...], ...]:
        """J[r][c] = d(component r)/d(x_c), symbolic."""
        d = self.dim
        return tuple(tuple(ex.diff(comp, c + 1) for c in range(d)) for comp in self.components)

    def __call__(self, point: Sequence[float]) -> np.ndarray:
        coords = [np.float64(p) for p in point]
        return np.array([float(c(*coords)) for c in self.components])

    def batch(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at (P, d) points; returns (P, d)."""
        points = np.asarray(points, dtype=np.float64)
        out = np.empty(points.shape)
        cols = points.T
        for r, comp in enumerate(self.components):
            out[:, r] = comp(*cols)
        return out

    def scaled(self, factor: float) -> "VectorField":
        return VectorField(tuple(ex.mul(ex.const(factor), c) for c in self.components),
                           self.order, self.label)

    def __str__(self) -> str:
        body = ", ".join(str(c) for c in self.components)
        return f"{self.label}=({body})" if self.label else f"({body})"


def lie_bracket(X: VectorField, Y: VectorField) -> VectorField:
    """[X, Y] = DY X - DX Y."""
    if X.dim != Y.dim:
        raise DimensionError(f"cannot bracket fields of dimension {X.dim} and {Y.dim}")
    d = X.dim
    label = f"[{X.label},{Y.label}]"
    if X.components == Y.components:
        return VectorField(tuple(ex.const(0.0) for _ in range(d)), X.order + Y.order + 1, label)
    JX, JY = X.jacobian, Y.jacobian
    comps = []
    for r in range(d):
        acc: Expression = ex.const(0.0)
        for c in range(d):
            acc = ex.add(acc, ex.sub(ex.mul(JY[r][c], X.components[c]),
                                     ex.mul(JX[r][c], Y.components[c])))
        comps.append(acc)
    return VectorField(tuple(comps), X.order + Y.order + 1, label)


def enumerate_brackets(fields: Sequence[VectorField], k: int) -> list[VectorField]:
    """X0..Xn followed by all left-nested brackets with 1..k bracket operations.

    Words of the same order are grouped, so the first ``column_count(n+1, j)``
    entries form the bracket matrix of order j.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > MAX_BRACKET_ORDER:
        raise ValueError(f"bracket order {k} exceeds the guard of {MAX_BRACKET_ORDER}")
    base = list(fields)
    out = list(base)
    level = base
    for _ in range(k):
        level = [lie_bracket(Xi, W) for Xi in base for W in level]
        out.extend(level)
    return out


def column_count(n_fields: int, k: int) -> int:
    return sum(n_fields ** j for j in range(1, k + 2))


@dataclass
class FieldMatrix:
    point: np.ndarray
    fields: list[VectorField]
    matrix: np.ndarray  # d x m
    k: int


def evaluate_columns(fields: Sequence[VectorField], points: np.ndarray) -> np.ndarray:
    """Stack field evaluations into a (P, d, m) batch of matrices."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.stack([f.batch(points) for f in fields], axis=-1)


def lambda_k(fields: Sequence[VectorField], k: int, x: Sequence[float]) -> tuple[float, FieldMatrix]:
    """Smallest eigenvalue of X^(k) X^(k)^T at ``x`` together with X^(k)."""
    cols = enumerate_brackets(fields, k)
    point = np.asarray(x, dtype=np.float64)
    mat = evaluate_columns(cols, point[None])[0]
    if not np.all(np.isfinite(mat)):
        bad = [c.label for j, c in enumerate(cols) if not np.all(np.isfinite(mat[:, j]))]
        raise NonFiniteFieldError(f"non-finite field values at {point.tolist()}: {bad[:5]}")
    sigma = float(smallest_singular_value(mat[None])[0])
    return sigma * sigma, FieldMatrix(point, cols, mat, k)


def log_lambda_ladder(columns: Sequence[VectorField], n_fields: int, k_max: int,
                      points: np.ndarray) -> np.ndarray:
    """log lambda^(k) for k = 0..k_max at each point, shape (P, k_max + 1).

    ``columns`` must come from :func:`enumerate_brackets` with order >= k_max.
    Non-finite evaluations give NaN.  A running maximum over k removes
    round-off inversions of the (exactly) nondecreasing ladder.
    """
    mats = evaluate_columns(columns, points)
    out = np.empty((mats.shape[0], k_max + 1))
    with np.errstate(divide="ignore"):
        for k in range(k_max + 1):
            sigma = smallest_singular_value(mats[:, :, : column_count(n_fields, k)])
            out[:, k] = 2.0 * np.log(sigma)
    finite = ~np.isnan(out).any(axis=1)
    out[finite] = np.maximum.accumulate(out[finite], axis=1)
    return out


# ---------------------------------------------------------------------------
# degeneracy set K

@dataclass
class PointRecord:
    point: tuple[float, ...]
    lambdas: tuple[float, ...]
    hormander: bool
    nonfinite: bool = False


@dataclass
class DegeneracyReport:
    records: list[PointRecord]
    tol: float
    k_max: int

    @property
    def K(self) -> list[tuple[float, ...]]:
        return [r.point for r in self.records if not r.hormander]

    @property
    def empty(self) -> bool:
        return all(r.hormander for r in self.records)

    def summary(self) -> dict:
        lam = np.array([r.lambdas[-1] for r in self.records]) if self.records else np.zeros(0)
        finite = lam[np.isfinite(lam)]
        return {
            "k_max": self.k_max,
            "tol_K": self.tol,
            "n_points": len(self.records),
            "n_K": len(self.K),
            "n_nonfinite": sum(r.nonfinite for r in self.records),
            "min_lambda": float(finite.min()) if finite.size else float("nan"),
        }


def classify_K(problem, grid: np.ndarray, k_max: int = 3, tol_K: float = 1e-12) -> DegeneracyReport:
    """Flag grid points where lambda^(k_max) < tol_K (Hörmander fails numerically).

    Points where some bracket evaluates to a non-finite value cannot be
    certified and are counted in K.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if grid.shape[0] == 0:
        return DegeneracyReport([], tol_K, k_max)
    cols = problem.brackets(k_max)
    logs = log_lambda_ladder(cols, problem.n + 1, k_max, grid)
    records = []
    for p, row in zip(grid, logs):
        nonfinite = bool(np.isnan(row).any())
        lam = tuple(float(v) for v in np.exp(row))
        ok = (not nonfinite) and lam[-1] >= tol_K
        records.append(PointRecord(tuple(p.tolist()), lam, ok, nonfinite))
    return DegeneracyReport(records, tol_K, k_max)


# ---------------------------------------------------------------------------
# hypersurfaces

@dataclass(frozen=True)
class Hypersurface:
    """S = {psi = 0} with unit normal grad(psi)/|grad(psi)|."""

    psi: Expression
    dim: int

    @cached_property
    def gradient(self) -> VectorField:
        return VectorField(tuple(ex.diff(self.psi, i + 1) for i in range(self.dim)), 0, "grad")

    def value(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return ex.evaluate_batch(self.psi, points)

    def normal(self, points: np.ndarray, min_grad: float = 1e-8) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = self.gradient.batch(points)
        norm = np.linalg.norm(g, axis=1)
        if np.any(~(norm >= min_grad)):
            j = int(np.argmin(np.where(np.isfinite(norm), norm, -1.0)))
            raise GeometryError(f"|grad psi| = {norm[j]:.3g} < {min_grad:g} at {points[j].tolist()}")
        return g / norm[:, None]

    def distance_estimate(self, points: np.ndarray) -> np.ndarray:
        """|psi| / |grad psi|, a first-order distance to S."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.abs(self.value(points)) / np.linalg.norm(self.gradient.batch(points), axis=1)

    def project(self, points: np.ndarray, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
        """Newton projection onto S along the gradient."""
        y = np.array(np.atleast_2d(points), dtype=np.float64)
        with np.errstate(all="ignore"):
            for _ in range(max_iter):
                val = self.value(y)
                if np.all(np.abs(val) <= tol):
                    break
                g = self.gradient.batch(y)
                y -= (val / np.sum(g * g, axis=1))[:, None] * g
        return y


# ---------------------------------------------------------------------------
# subcriticality

@dataclass
class SubcriticalFit:
    rho: np.ndarray
    log_lambda: np.ndarray
    slope: float
    stderr: float
    status: str  # "pass" | "fail" | "inconclusive"
    k: int
    trivial: bool = False
    n_samples: int = 0
    n_underflow: int = 0
    n_discarded: int = 0
    margin: float = 0.05

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def summary(self) -> dict:
        return {
            "k": self.k,
            "status": self.status,
            "p_hat": self.slope,
            "p_stderr": self.stderr,
            "trivial": self.trivial,
            "n_samples": self.n_samples,
            "n_used": int(self.rho.size),
            "n_underflow": self.n_underflow,
            "n_discarded": self.n_discarded,
            "margin": self.margin,
        }


def fit_subcritical_samples(rho, log_lambda, k: int, margin: float = 0.05,
                            floor: float = 0.5, min_samples: int = 4) -> SubcriticalFit:
    """Regress log(-log lambda) on log rho over the degenerate samples."""
    rho = np.asarray(rho, dtype=np.float64)
    log_lambda = np.asarray(log_lambda, dtype=np.float64)
    ok = np.isfinite(log_lambda) & (rho > 0)
    degenerate = ok & (log_lambda < math.log(floor))
    underflow = degenerate & (log_lambda < LOG_UNDERFLOW)
    n_under = int(underflow.sum())
    if n_under:
        log.warning("dropping %d samples with lambda < 1e-300 from the regression", n_under)
    use = degenerate & ~underflow
    if not degenerate.any():
        return SubcriticalFit(rho[:0], log_lambda[:0], float("nan"), float("nan"), "pass", k,
                              trivial=True, n_samples=int(rho.size), margin=margin)
    r, ll = rho[use], log_lambda[use]
    if r.size < min_samples or np.ptp(np.log(r)) == 0:
        return SubcriticalFit(r, ll, float("nan"), float("nan"), "inconclusive", k,
                              n_samples=int(rho.size), n_underflow=n_under, margin=margin)
    res = stats.linregress(np.log(r), np.log(-ll))
    slope, se = float(res.slope), float(res.stderr)
    status = "pass" if (slope + margin < 0 and slope - margin > -1) else "fail"
    return SubcriticalFit(r, ll, slope, se, status, k, n_samples=int(rho.size),
                          n_underflow=n_under, margin=margin)


def sample_offsets(S: Hypersurface, base_points: np.ndarray, rho: np.ndarray,
                   inside: Callable[[np.ndarray], np.ndarray] | None = None,
                   both_sides: bool = True, curvature_tol: float = 0.05):
    """Points s + rho * nu(s) (and s - rho * nu(s)) with their constructed distances.

    Samples outside the closure (``inside`` false) or whose |psi|/|grad psi|
    estimate disagrees with rho by more than ``curvature_tol`` are dropped.
    Returns (points, rho, n_discarded).
    """
    base = np.atleast_2d(np.asarray(base_points, dtype=np.float64))
    nu = S.normal(base)
    signs = (1.0, -1.0) if both_sides else (1.0,)
    pts, dist = [], []
    for sgn in signs:
        for b, n in zip(base, nu):
            pts.append(b[None, :] + sgn * rho[:, None] * n[None, :])
            dist.append(rho)
    pts = np.concatenate(pts)
    dist = np.concatenate(dist)
    keep = np.ones(len(pts), dtype=bool)
    if inside is not None:
        keep &= inside(pts)
    with np.errstate(all="ignore"):
        est = S.distance_estimate(pts)
    keep &= np.abs(est - dist) <= curvature_tol * dist
    return pts[keep], dist[keep], int((~keep).sum())


def subcritical_fit(fields: Sequence[VectorField], S: Hypersurface, k: int, base_points: np.ndarray,
                    rho_min: float = 1e-4, rho_max: float = 1e-1, n_rho: int = 40,
                    margin: float = 0.05, floor: float = 0.5,
                    inside: Callable[[np.ndarray], np.ndarray] | None = None) -> SubcriticalFit:
    """Estimate the exponent p in lambda^(k)(y) ~ exp(-rho(y, S)^p) near S."""
    if rho_min < 1e-4:
        raise ValueError("rho_min must be >= 1e-4")
    rho = np.geomspace(rho_min, rho_max, n_rho)
    pts, dist, discarded = sample_offsets(S, base_points, rho, inside)
    cols = enumerate_brackets(fields, k)
    if len(pts) == 0:
        return SubcriticalFit(dist, dist, float("nan"), float("nan"), "inconclusive", k,
                              n_discarded=discarded, margin=margin)
    logs = log_lambda_ladder(cols, len(fields), k, pts)[:, k]
    fit = fit_subcritical_samples(dist, logs, k, margin, floor)
    fit.n_discarded = discarded
    return fit


# ---------------------------------------------------------------------------
# transversality and the solver hypotheses (c <= 0, a uniformly reached direction)

@dataclass
class NoncharacteristicResult:
    point: tuple[float, ...]
    max_inner: float
    best_field: int  # 1-based index into X1..Xn
    passed: bool


def noncharacteristic_check(fields: Sequence[VectorField], S: Hypersurface, points: np.ndarray,
                            theta: float = 1e-8, on_surface_tol: float = 1e-10
                            ) -> list[NoncharacteristicResult]:
    """Transversality of the diffusion fields X1..Xn to S at each point."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0:
        return []
    off = np.abs(S.value(points))
    if np.any(off > on_surface_tol):
        j = int(np.argmax(off))
        raise GeometryError(f"point {points[j].tolist()} is off the surface (|psi| = {off[j]:.3g})")
    nu = S.normal(points)
    inner = np.stack([np.abs(np.sum(f.batch(points) * nu, axis=1)) for f in fields], axis=1)
    inner = np.where(np.isfinite(inner), inner, 0.0)
    best = np.argmax(inner, axis=1)
    top = inner[np.arange(len(points)), best]
    return [NoncharacteristicResult(tuple(p.tolist()), float(v), int(b) + 1, bool(v >= theta))
            for p, v, b in zip(points, top, best)]


@dataclass
class Thm2Report:
    c_pass: bool
    worst_point: tuple[float, ...] | None
    worst_c: float
    a_est: list[float] = field(default_factory=list)  # per coordinate e_1..e_d
    best_k: int = 0  # 1-based
    b_pass: bool = False

    def summary(self) -> dict:
        out = {
            "a.pass": self.c_pass,
            "a.max_c": self.worst_c,
            "a.worst_point": list(self.worst_point) if self.worst_point else None,
            "b.pass": self.b_pass,
            "b.best_k": self.best_k,
        }
        for i, a in enumerate(self.a_est, start=1):
            out[f"b.a_est.{i}"] = a
        return out


def thm2_checks(problem, grid: np.ndarray, a_tol: float = 1e-10) -> Thm2Report:
    """(a) c <= 0 on the grid; (b) a coordinate direction uniformly reached by X1..Xn."""
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    c = ex.evaluate_batch(problem.c, grid)
    j = int(np.nanargmax(c))
    worst_c = float(c[j])
    c_pass = bool(np.all(c <= 0))
    total = np.zeros(grid.shape)
    for f in problem.diffusion_fields:
        total += f.batch(grid) ** 2
    a_est = [float(v) for v in np.min(total, axis=0)]
    best = int(np.argmax(a_est))
    return Thm2Report(c_pass, tuple(grid[j].tolist()), worst_c, a_est, best + 1,
                      bool(a_est[best] > a_tol))
