"""Dirichlet problem description and the ``.prob`` file format.

A problem file is line oriented::

    # comment
    dim = 2
    [fields]
    X0 = "0", "0"
    X1 = "1", "0"
    X2 = "0", "1"
    [coeff]
    c = "0"
    [data]
    f = "1"
    g = "0"
    [domain]
    phi = "1 - x^2 - y^2"
    box = -1, 1, -1, 1        # optional bounding box, lo/hi per axis
    [surface]
    psi = "x"                 # optional
    [meta]
    name = poisson_disk

Keys may also be written fully qualified (``fields.X1 = ...``) outside any
section.  D is the open set {phi > 0}.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expr as ex
from .expr import Expression, ExprError
from .vf_algebra import Hypersurface, VectorField, enumerate_brackets


class ProblemError(ValueError):
    """Invalid problem definition; carries a 1-based line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 path: str | None = None):
        self.line, self.column, self.path = line, column, path
        where = ""
        if line is not None:
            where = f"{path or '<problem>'}:{line}:{column or 1}: "
        super().__init__(where + message)


@dataclass
class Problem:
    dim: int
    fields: tuple[VectorField, ...]  # X0, X1, ..., Xn
    c: Expression
    f: Expression
    g: Expression
    phi: Expression
    psi: Expression | None = None
    box: np.ndarray | None = None  # shape (d, 2)
    name: str = ""
    notes: str = ""
    _brackets: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.fields = tuple(self.fields)
        if self.dim < 1:
            raise ProblemError("dim must be >= 1")
        if len(self.fields) < 2:
            raise ProblemError("need X0 and at least one diffusion field X1")
        for f in self.fields:
            if f.dim != self.dim:
                raise ProblemError(f"field {f.label} has {f.dim} components, expected {self.dim}")
        for label, e in self.scalars().items():
            if e.max_var() > self.dim:
                raise ProblemError(f"{label} uses x{e.max_var()} but dim = {self.dim}")
        if isinstance(self.phi, ex.Const):
            raise ProblemError("domain.phi must not be constant")
        if self.box is not None:
            self.box = np.asarray(self.box, dtype=np.float64).reshape(self.dim, 2)
            if np.any(self.box[:, 0] >= self.box[:, 1]):
                raise ProblemError("domain.box needs lo < hi on every axis")

    @classmethod
    def from_sources(cls, dim: int, fields: Sequence[Sequence[str]], *, c: str = "0", f: str = "0",
                     g: str = "0", phi: str, psi: str | None = None, box=None,
                     name: str = "") -> "Problem":
        vfs = tuple(VectorField.parse(comps, dim, f"X{i}") for i, comps in enumerate(fields))
        return cls(dim, vfs, ex.parse(c, dim), ex.parse(f, dim), ex.parse(g, dim),
                   ex.parse(phi, dim), ex.parse(psi, dim) if psi else None, box, name)

    def scalars(self) -> dict[str, Expression]:
        out = {"coeff.c": self.c, "data.f": self.f, "data.g": self.g, "domain.phi": self.phi}
        if self.psi is not None:
            out["surface.psi"] = self.psi
        return out

    def replace(self, **changes) -> "Problem":
        kw = dict(dim=self.dim, fields=self.fields, c=self.c, f=self.f, g=self.g, phi=self.phi,
                  psi=self.psi, box=self.box, name=self.name, notes=self.notes)
        kw.update(changes)
        return Problem(**kw)

    @property
    def n(self) -> int:
        return len(self.fields) - 1

    @property
    def drift(self) -> VectorField:
        return self.fields[0]

    @property
    def diffusion_fields(self) -> tuple[VectorField, ...]:
        return self.fields[1:]

    def brackets(self, k: int) -> list[VectorField]:
        if k not in self._brackets:
            self._brackets[k] = enumerate_brackets(self.fields, k)
        return self._brackets[k]

    @property
    def boundary(self) -> Hypersurface:
        return Hypersurface(self.phi, self.dim)

    @property
    def surface(self) -> Hypersurface | None:
        return None if self.psi is None else Hypersurface(self.psi, self.dim)

    def phi_values(self, points) -> np.ndarray:
        return ex.evaluate_batch(self.phi, np.atleast_2d(points))

    def inside(self, points) -> np.ndarray:
        return self.phi_values(points) > 0

    def in_closure(self, points, tol: float = 1e-12) -> np.ndarray:
        return self.phi_values(points) >= -tol

    # -- geometry helpers ---------------------------------------------------

    def bounding_box(self) -> np.ndarray:
        """The declared box, or one found by marching rays out of the origin."""
        if self.box is not None:
            return self.box
        seed = np.zeros(self.dim)
        if not self.inside(seed)[0]:
            raise ProblemError("domain.box is required when the origin is not inside D")
        hits = _ray_hits(self, seed, _directions(self.dim, 64), reach=1e3)
        if len(hits) == 0:
            raise ProblemError("could not bound the domain; set domain.box")
        lo, hi = hits.min(axis=0), hits.max(axis=0)
        pad = 0.05 * (hi - lo)
        self.box = np.stack([lo - pad, hi + pad], axis=1)
        return self.box

    def diameter(self) -> float:
        box = self.bounding_box()
        return float(np.linalg.norm(box[:, 1] - box[:, 0]))

    def lattice(self, res: int, box=None) -> np.ndarray:
        """All res**d lattice points of the box (endpoints included)."""
        box = self.bounding_box() if box is None else np.asarray(box, dtype=np.float64).reshape(self.dim, 2)
        axes = [np.linspace(lo, hi, res) for lo, hi in box]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def closure_grid(self, res: int) -> np.ndarray:
        """Lattice points in the closure of D plus samples of the boundary."""
        pts = self.lattice(res)
        pts = pts[self.in_closure(pts)]
        bnd = self.boundary_samples(max(8, 4 * res))
        return np.concatenate([pts, bnd]) if len(bnd) else pts

    def interior_center(self) -> np.ndarray:
        box = self.bounding_box()
        centre = box.mean(axis=1)
        if self.inside(centre)[0]:
            return centre
        pts = self.lattice(9)
        pts = pts[self.inside(pts)]
        if len(pts) == 0:
            raise ProblemError("no interior point found in the bounding box")
        return pts[np.argmin(np.linalg.norm(pts - centre, axis=1))]

    def boundary_samples(self, count: int) -> np.ndarray:
        """Points of the boundary hit by rays from an interior point, |phi| <= 1e-12."""
        box = self.bounding_box()
        seed = self.interior_center()
        reach = float(np.linalg.norm(box[:, 1] - box[:, 0]))
        hits = _ray_hits(self, seed, _directions(self.dim, count), reach)
        if len(hits) == 0:
            return hits.reshape(0, self.dim)
        hits = self.boundary.project(hits)
        ok = np.abs(self.phi_values(hits)) <= 1e-12
        return hits[ok]


def _directions(d: int, count: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        a = 2 * np.pi * (np.arange(count) + 0.5) / count
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    # Fibonacci points on the sphere, padded with zeros beyond the third axis
    i = np.arange(count) + 0.5
    zc = 1 - 2 * i / count
    r = np.sqrt(1 - zc * zc)
    th = np.pi * (1 + 5 ** 0.5) * i
    dirs = np.zeros((count, d))
    dirs[:, :3] = np.stack([r * np.cos(th), r * np.sin(th), zc], axis=1)
    return dirs


def _ray_hits(problem: Problem, seed: np.ndarray, dirs: np.ndarray, reach: float) -> np.ndarray:
    """First sign change of phi along each ray, located by bisection."""
    hits = []
    for u in dirs:
        lo, hi, step = 0.0, None, reach / 256
        t = step
        while t <= reach * (1 + 1e-12):
            if problem.phi_values(seed + t * u)[0] <= 0:
                hi = t
                break
            lo, t = t, t + step
        if hi is None:
            continue
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if problem.phi_values(seed + mid * u)[0] > 0:
                lo = mid
            else:
                hi = mid
        hits.append(seed + 0.5 * (lo + hi) * u)
    return np.array(hits).reshape(-1, len(seed))


# ---------------------------------------------------------------------------
# file format

_QUOTED = re.compile(r'"([^"]*)"')
_REQUIRED = ("dim", "fields.X0", "fields.X1", "coeff.c", "data.f", "data.g", "domain.phi")


@dataclass
class _Entry:
    value: str
    line: int
    column: int  # 1-based column where value starts


def _strip_comment(line: str) -> str:
    out, quoted = [], False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _read_entries(text: str, path: str | None) -> tuple[dict[str, _Entry], str]:
    entries: dict[str, _Entry] = {}
    header: list[str] = []
    section = ""
    seen_content = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith("#") and not seen_content:
            header.append(stripped.lstrip("#").strip())
        line = _strip_comment(raw)
        if not line.strip():
            continue
        seen_content = True
        s = line.strip()
        if s.startswith("["):
            if not s.endswith("]") or len(s) < 3:
                raise ProblemError("malformed section header", lineno, raw.index("[") + 1, path)
            section = s[1:-1].strip()
            continue
        if "=" not in line:
            raise ProblemError("expected 'key = value'", lineno, len(raw) - len(raw.lstrip()) + 1, path)
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        if not key:
            raise ProblemError("empty key", lineno, 1, path)
        if "." not in key and section:
            key = f"{section}.{key}"
        lead = len(value_part) - len(value_part.lstrip())
        column = len(key_part) + 1 + lead + 1
        if key in entries:
            raise ProblemError(f"duplicate key {key!r}", lineno, 1, path)
        entries[key] = _Entry(value_part.strip(), lineno, column)
    return entries, "\n".join(header)


def _expr_list(entry: _Entry, d: int, key: str, path) -> list[Expression]:
    items = list(_QUOTED.finditer(entry.value))
    rest = _QUOTED.sub("", entry.value).replace(",", "").strip()
    if not items or rest:
        raise ProblemError(f"{key} must be a comma-separated list of quoted expressions",
                           entry.line, entry.column, path)
    out = []
    for m in items:
        out.append(_parse_at(m.group(1), d, entry, entry.column + m.start(1), key, path))
    return out


def _parse_at(source: str, d: int, entry: _Entry, column: int, key: str, path) -> Expression:
    try:
        return ex.parse(source, d)
    except ExprError as err:
        col = column + (err.offset or 0)
        raise ProblemError(f"{key}: {err}", entry.line, col, path) from None


def _scalar_expr(entry: _Entry, d: int, key: str, path) -> Expression:
    m = _QUOTED.fullmatch(entry.value)
    if m:
        return _parse_at(m.group(1), d, entry, entry.column + 1, key, path)
    return _parse_at(entry.value, d, entry, entry.column, key, path)


def parse_problem(text: str, path: str | None = None) -> Problem:
    entries, header = _read_entries(text, path)
    for key in _REQUIRED:
        if key not in entries:
            raise ProblemError(f"missing required key {key!r}", path=path)
    dim_entry = entries["dim"]
    try:
        d = int(dim_entry.value)
    except ValueError:
        raise ProblemError("dim must be an integer", dim_entry.line, dim_entry.column, path) from None
    if d < 1:
        raise ProblemError("dim must be >= 1", dim_entry.line, dim_entry.column, path)

    fields = []
    i = 0
    while f"fields.X{i}" in entries:
        key = f"fields.X{i}"
        e = entries[key]
        comps = _expr_list(e, d, key, path)
        if len(comps) != d:
            raise ProblemError(f"dimension mismatch: {key} has {len(comps)} components but dim = {d}",
                               e.line, e.column, path)
        fields.append(VectorField(tuple(comps), 0, f"X{i}"))
        i += 1
    stray = [k for k in entries if k.startswith("fields.") and k not in {f"fields.X{j}" for j in range(i)}]
    if stray:
        e = entries[stray[0]]
        raise ProblemError(f"unexpected field key {stray[0]!r} (fields must be X0..Xn without gaps)",
                           e.line, 1, path)

    scal = {k: _scalar_expr(entries[k], d, k, path) for k in ("coeff.c", "data.f", "data.g", "domain.phi")}
    psi = _scalar_expr(entries["surface.psi"], d, "surface.psi", path) if "surface.psi" in entries else None

    box = None
    if "domain.box" in entries:
        e = entries["domain.box"]
        try:
            vals = [float(v) for v in e.value.split(",")]
        except ValueError:
            raise ProblemError("domain.box must be numbers", e.line, e.column, path) from None
        if len(vals) != 2 * d or not all(math.isfinite(v) for v in vals):
            raise ProblemError(f"domain.box needs {2 * d} finite numbers", e.line, e.column, path)
        box = np.array(vals).reshape(d, 2)

    name = entries["meta.name"].value.strip('"') if "meta.name" in entries else ""
    if "meta.notes" in entries:
        header = (header + "\n" + entries["meta.notes"].value.strip('"')).strip()
    try:
        return Problem(d, tuple(fields), scal["coeff.c"], scal["data.f"], scal["data.g"],
                       scal["domain.phi"], psi, box, name, header)
    except ProblemError as err:
        raise ProblemError(str(err), path=path) from None


def load_problem(path) -> Problem:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ProblemError(f"cannot read {path}: {err.strerror}") from None
    prob = parse_problem(text, str(path))
    if not prob.name:
        prob.name = path.stem
    return prob


def fixture_path(name: str) -> Path:
    """Path of a bundled problem file, e.g. ``fixture_path("poisson_disk")``."""
    if not name.endswith(".prob"):
        name += ".prob"
    return Path(str(resources.files("degen") / "problems" / name))


def list_fixtures() -> list[str]:
    root = resources.files("degen") / "problems"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".prob"))
