"""Problem data: coefficients, domain geometry, and standing-assumption checks.

A problem is (domain, a, b, optional b1, g, ellipticity bounds, equilibria)
with all coefficients given as :mod:`quasipot.expressions` ASTs in the
variables ``x1..xd`` and ``u``.  The assumptions the asymptotic theory needs
(ellipticity, symmetry of a, inward boundary drift, equilibria, attraction)
are checked by lattice sampling, never proven; downstream solvers refuse
specs whose report has failures.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .expressions import (
    Expression,
    evaluate,
    parse_expression,
    to_source,
    variables_of,
)

__all__ = [
    "Interval",
    "Ball",
    "Box",
    "ProblemSpec",
    "GRange",
    "CheckResult",
    "ValidationReport",
    "InvalidProblemError",
    "validate_problem",
    "require_valid",
    "g_range",
    "problem_from_dict",
    "problem_to_dict",
    "load_problem",
]


class InvalidProblemError(ValueError):
    """A downstream operation was handed a spec whose validation report fails."""


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    @property
    def dimension(self):
        return 1

    @property
    def diameter(self):
        return self.hi - self.lo

    def contains(self, pts, tol=0.0):
        pts = np.atleast_2d(pts)
        return (pts[:, 0] >= self.lo - tol) & (pts[:, 0] <= self.hi + tol)

    def clamp(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.clip(pts, self.lo, self.hi)

    def interior_lattice(self, n):
        x = self.lo + (np.arange(n) + 0.5) * (self.hi - self.lo) / n
        return x[:, None]

    def boundary_lattice(self, n=2):
        return np.array([[self.lo], [self.hi]])

    def boundary_normals(self, pts):
        pts = np.atleast_2d(pts)
        return np.where(np.abs(pts - self.lo) < np.abs(pts - self.hi), -1.0, 1.0)

    def boundary_distance(self, p, q):
        return abs(float(np.atleast_1d(p)[0]) - float(np.atleast_1d(q)[0]))


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    @property
    def dimension(self):
        return len(self.center)

    @property
    def diameter(self):
        return 2.0 * self.radius

    def contains(self, pts, tol=0.0):
        pts = np.atleast_2d(pts)
        return np.linalg.norm(pts - np.asarray(self.center), axis=1) <= self.radius + tol

    def clamp(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float)).copy()
        c = np.asarray(self.center)
        r = np.linalg.norm(pts - c, axis=1)
        out = r > self.radius
        if np.any(out):
            pts[out] = c + (pts[out] - c) * (self.radius / r[out])[:, None]
        return pts

    def interior_lattice(self, n):
        c = np.asarray(self.center)
        axes = [c[i] - self.radius + (np.arange(n) + 0.5) * self.diameter / n
                for i in range(self.dimension)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dimension)
        return grid[self.contains(grid)]

    def boundary_lattice(self, n=256):
        if self.dimension != 2:
            raise NotImplementedError("ball boundary lattices are implemented for d=2 only")
        th = 2 * np.pi * np.arange(n) / n
        c = np.asarray(self.center)
        return c + self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)

    def boundary_point(self, params):
        th = np.atleast_1d(params)
        c = np.asarray(self.center)
        return c + self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)

    def boundary_normals(self, pts):
        pts = np.atleast_2d(pts)
        v = pts - np.asarray(self.center)
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def boundary_distance(self, p, q):
        # arc distance along the sphere surface (d=2: circle)
        c = np.asarray(self.center)
        a = (np.asarray(p) - c) / self.radius
        b = (np.asarray(q) - c) / self.radius
        cs = float(np.clip(np.dot(a, b), -1.0, 1.0))
        return self.radius * float(np.arccos(cs))


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    @property
    def dimension(self):
        return len(self.lower)

    @property
    def diameter(self):
        return float(np.linalg.norm(np.asarray(self.upper) - np.asarray(self.lower)))

    def contains(self, pts, tol=0.0):
        pts = np.atleast_2d(pts)
        lo = np.asarray(self.lower) - tol
        hi = np.asarray(self.upper) + tol
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def clamp(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return np.clip(pts, np.asarray(self.lower), np.asarray(self.upper))

    def interior_lattice(self, n):
        axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n
                for lo, hi in zip(self.lower, self.upper)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dimension)

    def boundary_lattice(self, n=256):
        d = self.dimension
        per_face = max(2, int(np.ceil((n / (2 * d)) ** (1.0 / max(1, d - 1)))))
        pts = []
        for axis in range(d):
            others = [i for i in range(d) if i != axis]
            axes = [np.linspace(self.lower[i], self.upper[i], per_face) for i in others]
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d - 1) \
                if d > 1 else np.zeros((1, 0))
            for value in (self.lower[axis], self.upper[axis]):
                face = np.empty((grid.shape[0], d))
                face[:, axis] = value
                for j, i in enumerate(others):
                    face[:, i] = grid[:, j]
                pts.append(face)
        return np.unique(np.concatenate(pts, axis=0), axis=0)

    def boundary_normals(self, pts):
        pts = np.atleast_2d(pts)
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        normals = np.zeros_like(pts, dtype=float)
        gaps = np.concatenate([np.abs(pts - lo), np.abs(pts - hi)], axis=1)
        which = np.argmin(gaps, axis=1)
        d = pts.shape[1]
        for row, w in enumerate(which):
            axis, side = w % d, w // d
            normals[row, axis] = -1.0 if side == 0 else 1.0
        return normals

    def boundary_distance(self, p, q):
        return float(np.linalg.norm(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)))


def _as_domain(obj):
    if isinstance(obj, (Interval, Ball, Box)):
        return obj
    raise TypeError(f"not a domain: {obj!r}")


# ---------------------------------------------------------------------------
# the problem record


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable problem data; all evaluation clamps x to the closed domain."""

    dimension: int
    domain: object
    a: tuple  # d x d tuple of Expressions in (x, u)
    b: tuple  # d tuple of Expressions in (x, u)
    g: Expression
    k: float
    K: float
    equilibria: tuple  # tuple of d-tuples
    b1: tuple | None = None

    def __post_init__(self):
        _as_domain(self.domain)
        d = self.dimension
        if self.domain.dimension != d:
            raise ValueError("domain dimension mismatch")
        if len(self.a) != d or any(len(row) != d for row in self.a):
            raise ValueError("a must be a d x d matrix of expressions")
        if len(self.b) != d:
            raise ValueError("b must have d components")
        if self.b1 is not None and len(self.b1) != d:
            raise ValueError("b1 must have d components")
        if not self.equilibria:
            raise ValueError("at least one equilibrium point is required")
        for p in self.equilibria:
            if len(p) != d:
                raise ValueError("equilibrium dimension mismatch")
        if not (0 < self.k <= self.K):
            raise ValueError("ellipticity bounds must satisfy 0 < k <= K")
        bad = variables_of(self.g) - self._x_names()
        if bad:
            raise ValueError(f"g may depend on x only; found {sorted(bad)}")

    def _x_names(self):
        return {f"x{i + 1}" for i in range(self.dimension)}

    def _env(self, pts, u=None):
        pts = self.domain.clamp(pts)
        env = {f"x{i + 1}": pts[:, i] for i in range(self.dimension)}
        if u is not None:
            env["u"] = np.broadcast_to(np.asarray(u, dtype=float), pts.shape[:1]).astype(float) \
                if np.ndim(u) == 0 else np.asarray(u, dtype=float)
        return env

    def eval_a(self, pts, u):
        """a(x, u) at m points -> (m, d, d); x clamped to the closed domain."""
        pts = np.atleast_2d(pts)
        env = self._env(pts, u)
        m, d = pts.shape[0], self.dimension
        out = np.empty((m, d, d))
        for i in range(d):
            for j in range(d):
                out[:, i, j] = np.broadcast_to(evaluate(self.a[i][j], env), (m,))
        return out

    def eval_b(self, pts, u, eps=None):
        """Drift at m points -> (m, d); adds eps*b1 when eps given and b1 present."""
        pts = np.atleast_2d(pts)
        env = self._env(pts, u)
        m, d = pts.shape[0], self.dimension
        out = np.empty((m, d))
        for i in range(d):
            out[:, i] = np.broadcast_to(evaluate(self.b[i], env), (m,))
        if eps is not None and self.b1 is not None:
            for i in range(d):
                out[:, i] += eps * np.broadcast_to(evaluate(self.b1[i], env), (m,))
        return out

    def eval_g(self, pts):
        pts = np.atleast_2d(pts)
        env = self._env(pts)
        return np.broadcast_to(evaluate(self.g, env), (pts.shape[0],)).astype(float).copy()

    @property
    def x0(self):
        return np.asarray(self.equilibria[0], dtype=float)

    def drift_is_autonomous(self):
        names = set()
        for e in self.b:
            names |= variables_of(e)
        return "u" not in names

    def a_is_level_free(self):
        names = set()
        for row in self.a:
            for e in row:
                names |= variables_of(e)
        return "u" not in names


@dataclass(frozen=True)
class GRange:
    g_min: float
    g_max: float
    g1: float
    g2: float


# ---------------------------------------------------------------------------
# g extrema


def g_range(spec: ProblemSpec, lattice: int = 256, refine_tol: float = 1e-8) -> GRange:
    """Extrema of g over the closed domain and over the boundary.

    Lattice scan refined by local search from the best lattice points; the
    refinement is iterated until doubling the local resolution moves each
    extremum by less than ``refine_tol``.
    """
    interior = spec.domain.interior_lattice(lattice)
    boundary = spec.domain.boundary_lattice(max(lattice, 256) if spec.dimension > 1 else 2)
    all_pts = np.concatenate([interior, boundary], axis=0)
    g_all = spec.eval_g(all_pts)
    g_bnd = spec.eval_g(boundary)

    g_min = _refine_extremum(spec, all_pts[np.argmin(g_all)], sign=+1, tol=refine_tol)
    g_max = -_refine_extremum(spec, all_pts[np.argmax(g_all)], sign=-1, tol=refine_tol)
    g1 = _refine_boundary_extremum(spec, boundary, g_bnd, sign=+1, tol=refine_tol)
    g2 = -_refine_boundary_extremum(spec, boundary, -g_bnd, sign=-1, tol=refine_tol)
    # the four extrema are coupled; enforce the provable orderings exactly
    g_min = min(g_min, g1)
    g_max = max(g_max, g2)
    return GRange(g_min=g_min, g_max=g_max, g1=g1, g2=g2)


def _refine_extremum(spec, start, sign, tol):
    from scipy.optimize import minimize

    def fn(x):
        return sign * float(spec.eval_g(x[None, :])[0])

    res = minimize(fn, np.asarray(start, dtype=float), method="Nelder-Mead",
                   options={"xatol": tol * 1e-2, "fatol": tol * 1e-2, "maxiter": 400})
    best = min(fn(np.asarray(start, dtype=float)), float(res.fun))
    return sign * best


def _refine_boundary_extremum(spec, boundary, values, sign, tol):
    # values must equal sign * g at the boundary lattice; returns refined min(sign * g)
    i = int(np.argmin(values))
    if spec.dimension == 1:
        return float(values[i])
    dom = spec.domain
    if isinstance(dom, Ball):
        from scipy.optimize import minimize_scalar

        c = np.asarray(dom.center)
        v = boundary[i] - c
        th0 = float(np.arctan2(v[1], v[0]))
        width = 2 * np.pi / len(boundary)

        def fn(th):
            return sign * float(spec.eval_g(dom.boundary_point([th]))[0])

        res = minimize_scalar(fn, bounds=(th0 - 2 * width, th0 + 2 * width), method="bounded",
                              options={"xatol": tol * 1e-2})
        return min(float(values[i]), float(res.fun))
    # box faces: refine over the face of the best lattice point, clamped to the box
    from scipy.optimize import minimize

    start = boundary[i]
    fixed = int(np.argmin(np.minimum(np.abs(start - np.asarray(dom.lower)),
                                     np.abs(start - np.asarray(dom.upper)))))

    def fn(x):
        p = dom.clamp(x[None, :])[0].copy()
        p[fixed] = start[fixed]
        return sign * float(spec.eval_g(p[None, :])[0])

    res = minimize(fn, start, method="Nelder-Mead",
                   options={"xatol": tol * 1e-2, "fatol": tol * 1e-2, "maxiter": 200})
    return min(float(values[i]), float(res.fun))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    witness: tuple | None = None
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def ok(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        lines = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            extra = f" witness={c.witness}" if (c.witness is not None and not c.passed) else ""
            lines.append(f"[{status}] {c.name}: {c.detail}{extra}")
        return "\n".join(lines)


def validate_problem(spec: ProblemSpec, lattice: int = 64, n_u: int = 9,
                     flow_time: float = 80.0, ball_radius: float = None) -> ValidationReport:
    """Sampled checks of the standing assumptions; failures are report entries."""
    checks = []
    gr = g_range(spec, lattice=max(lattice, 64))
    u_samples = np.linspace(gr.g_min, gr.g_max, n_u) if gr.g_max > gr.g_min \
        else np.array([gr.g_min])
    pts = spec.domain.interior_lattice(min(lattice, 64 if spec.dimension == 1 else 24))
    bpts = spec.domain.boundary_lattice(128 if spec.dimension > 1 else 2)

    checks.append(_check_symmetry(spec, pts, u_samples))
    checks.append(_check_ellipticity(spec, np.concatenate([pts, bpts]), u_samples))
    checks.append(_check_inward_drift(spec, bpts, u_samples))
    checks.append(_check_equilibria(spec, u_samples))
    checks.append(_check_attraction(spec, pts, u_samples, flow_time, ball_radius))
    return ValidationReport(checks=tuple(checks))


def _check_symmetry(spec, pts, u_samples):
    worst = 0.0
    witness = None
    for u in u_samples:
        a = spec.eval_a(pts, u)
        dev = np.abs(a - np.transpose(a, (0, 2, 1))).max(axis=(1, 2))
        i = int(np.argmax(dev))
        if dev[i] > worst:
            worst = float(dev[i])
            witness = (tuple(pts[i]), float(u))
    return CheckResult("a_symmetric", worst <= 1e-12, witness,
                       f"max |a_ij - a_ji| = {worst:.3e}")


def _check_ellipticity(spec, pts, u_samples):
    rng = np.random.default_rng(0)
    d = spec.dimension
    xis = np.eye(d)
    if d > 1:
        extra = rng.normal(size=(8, d))
        extra /= np.linalg.norm(extra, axis=1, keepdims=True)
        xis = np.concatenate([xis, extra])
    lo_worst, hi_worst = np.inf, -np.inf
    witness = None
    for u in u_samples:
        a = spec.eval_a(pts, u)
        for xi in xis:
            q = np.einsum("i,mij,j->m", xi, a, xi)
            i_lo, i_hi = int(np.argmin(q)), int(np.argmax(q))
            if q[i_lo] < lo_worst:
                lo_worst = float(q[i_lo])
                witness = (tuple(pts[i_lo]), float(u))
            hi_worst = max(hi_worst, float(q[i_hi]))
    ok = lo_worst >= spec.k * (1 - 1e-12) and hi_worst <= spec.K * (1 + 1e-12)
    return CheckResult("ellipticity", bool(ok), witness,
                       f"sampled quadratic form in [{lo_worst:.6g}, {hi_worst:.6g}], "
                       f"declared [k, K] = [{spec.k:.6g}, {spec.K:.6g}]")


def _check_inward_drift(spec, bpts, u_samples):
    normals = spec.domain.boundary_normals(bpts)
    worst = -np.inf
    witness = None
    for u in u_samples:
        b = spec.eval_b(bpts, u)
        dot = np.sum(b * normals, axis=1)
        i = int(np.argmax(dot))
        if dot[i] > worst:
            worst = float(dot[i])
            witness = (tuple(bpts[i]), float(u))
    return CheckResult("inward_drift", worst < 0, witness,
                       f"max boundary (b, n) = {worst:.6g}")


def _check_equilibria(spec, u_samples):
    worst = 0.0
    witness = None
    for p in spec.equilibria:
        pt = np.asarray(p, dtype=float)[None, :]
        for u in u_samples:
            r = float(np.linalg.norm(spec.eval_b(pt, u)))
            if r > worst:
                worst = r
                witness = (tuple(p), float(u))
    return CheckResult("equilibrium_drift", worst <= 1e-9, witness,
                       f"max |b(x_eq, u)| = {worst:.3e}")


def _check_attraction(spec, pts, u_samples, flow_time, ball_radius):
    if ball_radius is None:
        ball_radius = 0.02 * spec.domain.diameter
    eq = np.asarray(spec.equilibria, dtype=float)
    n_steps = 400
    witness = None
    for u in u_samples:
        x = pts.copy()
        dt = flow_time / n_steps
        captured = np.zeros(len(x), dtype=bool)
        for _ in range(n_steps):
            # RK4 on the clamped vector field
            k1 = spec.eval_b(x, u)
            k2 = spec.eval_b(spec.domain.clamp(x + 0.5 * dt * k1), u)
            k3 = spec.eval_b(spec.domain.clamp(x + 0.5 * dt * k2), u)
            k4 = spec.eval_b(spec.domain.clamp(x + dt * k3), u)
            x = spec.domain.clamp(x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
            dist = np.min(np.linalg.norm(x[:, None, :] - eq[None, :, :], axis=2), axis=1)
            captured |= dist <= ball_radius
            if np.all(captured):
                break
        if not np.all(captured):
            i = int(np.argmin(captured))
            witness = (tuple(pts[i]), float(u))
            return CheckResult("attraction", False, witness,
                               f"{int((~captured).sum())} lattice points not captured "
                               f"within t={flow_time}")
    return CheckResult("attraction", True, witness,
                       f"all lattice flows reach an equilibrium ball (r={ball_radius:.3g})")


@lru_cache(maxsize=64)
def _cached_report(spec: ProblemSpec) -> ValidationReport:
    return validate_problem(spec)


def require_valid(spec: ProblemSpec) -> ValidationReport:
    """Validate (cached) and raise InvalidProblemError on any failed check."""
    report = _cached_report(spec)
    if not report.ok:
        names = ", ".join(c.name for c in report.failures())
        raise InvalidProblemError(f"problem fails validation checks: {names}\n{report}")
    return report


# ---------------------------------------------------------------------------
# JSON problem files

_ALLOWED_KEYS = {"dimension", "domain", "a", "b", "b1", "g", "k", "K", "equilibria"}


def problem_from_dict(doc: dict) -> ProblemSpec:
    unknown = set(doc) - _ALLOWED_KEYS
    if unknown:
        raise ValueError(f"unknown problem keys: {sorted(unknown)}")
    missing = _ALLOWED_KEYS - {"b1"} - set(doc)
    if missing:
        raise ValueError(f"missing problem keys: {sorted(missing)}")
    d = int(doc["dimension"])
    dom = doc["domain"]
    kind = dom.get("kind")
    if kind == "interval":
        lo, hi = dom["bounds"]
        domain = Interval(float(lo), float(hi))
    elif kind == "ball":
        domain = Ball(tuple(float(v) for v in dom["center"]), float(dom["radius"]))
    elif kind == "box":
        domain = Box(tuple(float(v) for v in dom["lower"]),
                     tuple(float(v) for v in dom["upper"]))
    else:
        raise ValueError(f"unknown domain kind {kind!r}")
    a = tuple(tuple(parse_expression(e) for e in row) for row in doc["a"])
    b = tuple(parse_expression(e) for e in doc["b"])
    b1 = tuple(parse_expression(e) for e in doc["b1"]) if doc.get("b1") else None
    return ProblemSpec(
        dimension=d,
        domain=domain,
        a=a,
        b=b,
        b1=b1,
        g=parse_expression(doc["g"]),
        k=float(doc["k"]),
        K=float(doc["K"]),
        equilibria=tuple(tuple(float(v) for v in p) for p in doc["equilibria"]),
    )


def problem_to_dict(spec: ProblemSpec) -> dict:
    if isinstance(spec.domain, Interval):
        dom = {"kind": "interval", "bounds": [spec.domain.lo, spec.domain.hi]}
    elif isinstance(spec.domain, Ball):
        dom = {"kind": "ball", "center": list(spec.domain.center),
               "radius": spec.domain.radius}
    else:
        dom = {"kind": "box", "lower": list(spec.domain.lower),
               "upper": list(spec.domain.upper)}
    out = {
        "dimension": spec.dimension,
        "domain": dom,
        "a": [[to_source(e) for e in row] for row in spec.a],
        "b": [to_source(e) for e in spec.b],
        "g": to_source(spec.g),
        "k": spec.k,
        "K": spec.K,
        "equilibria": [list(p) for p in spec.equilibria],
    }
    if spec.b1 is not None:
        out["b1"] = [to_source(e) for e in spec.b1]
    return out


def load_problem(path) -> ProblemSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return problem_from_dict(json.load(fh))
