"""The exit-value map G, the terminal level, and the exponential-scale limit curve.

For each frozen level c the boundary minimization yields the exit exponent
M(c), the exit location x*(c) and the acquired level G(c) = g(x*(c)).  The
limit of the solution at times exp(lambda/eps^2) is the piecewise curve
c(lambda) built from M by root-scanning between the initial level c0 = g(x0)
and the first diagonal crossing c1 of G.  All inf/sup/min-root definitions
are realized by grid scans with bisection; discontinuities are localized to
intervals, never guessed pointwise.
"""

from __future__ import annotations

import bisect as _bisect
from dataclasses import dataclass, field

import numpy as np

from .problem import GRange, ProblemSpec, g_range, require_valid
from .quasipotential import BoundaryOpts, min_boundary_quasipotential

__all__ = [
    "Discontinuity",
    "GCurve",
    "CLambdaCurve",
    "GenericityError",
    "GenericityReport",
    "LimitValue",
    "compute_g_curve",
    "find_c1",
    "check_genericity",
    "compute_c_lambda",
    "theorem1_limit",
    "LimitCurves",
    "build_limit_curves",
]


class GenericityError(ValueError):
    """The sampled quasi-potential violates the genericity assumptions."""


@dataclass(frozen=True)
class Discontinuity:
    c: float
    bracket: tuple          # (c_lo, c_hi), width <= localization tolerance
    x1: np.ndarray          # exit point just left of c
    x2: np.ndarray          # exit point just right of c
    G1: float
    G2: float
    M_left: float = 0.0
    M_right: float = 0.0


@dataclass(frozen=True)
class GCurve:
    c_grid: np.ndarray
    M: np.ndarray
    xstar: np.ndarray               # (n, d)
    G: np.ndarray
    discontinuities: tuple
    grange: GRange
    gx: object = None               # g evaluator, kept for pushforwards

    def __post_init__(self):
        segs = self._build_segments()
        object.__setattr__(self, "_segs", segs)
        cs, ms = [], []
        for seg in segs:
            cs.extend(seg["c"])
            ms.extend(seg["M"])
        order = np.argsort(cs)
        object.__setattr__(self, "_mc", np.asarray(cs)[order])
        object.__setattr__(self, "_mv", np.asarray(ms)[order])

    def _build_segments(self):
        jumps = sorted(self.discontinuities, key=lambda d: d.c)
        edges = [self.c_grid[0]] + [d.c for d in jumps] + [self.c_grid[-1]]
        segs = []
        for i in range(len(edges) - 1):
            lo, hi = edges[i], edges[i + 1]
            mask = (self.c_grid >= lo) & (self.c_grid <= hi)
            c = list(self.c_grid[mask])
            G = list(self.G[mask])
            M = list(self.M[mask])
            X = list(self.xstar[mask])
            if i > 0:  # left edge carries the right-sided jump values
                d = jumps[i - 1]
                c.insert(0, d.c)
                G.insert(0, d.G2)
                M.insert(0, d.M_right)
                X.insert(0, d.x2)
            if i < len(jumps):  # right edge carries the left-sided values
                d = jumps[i]
                c.append(d.c)
                G.append(d.G1)
                M.append(d.M_left)
                X.append(d.x1)
            arr = np.asarray(c)
            order = np.argsort(arr, kind="stable")
            segs.append({
                "lo": lo, "hi": hi,
                "c": arr[order],
                "G": np.asarray(G)[order],
                "M": np.asarray(M)[order],
                "X": np.asarray(X)[order],
            })
        return segs

    def _segment_for(self, c, side="left"):
        # at an interior jump point the "left" segment wins unless side="right"
        segs = self._segs
        for i, seg in enumerate(segs):
            if seg["lo"] <= c <= seg["hi"]:
                if side == "right" and c == seg["hi"] and i + 1 < len(segs):
                    return segs[i + 1]
                return seg
        return segs[0] if c < segs[0]["lo"] else segs[-1]

    def G_at(self, c, side="left"):
        """Piecewise interpolation of G; at a jump the left value by convention."""
        seg = self._segment_for(float(c), side=side)
        return float(np.interp(c, seg["c"], seg["G"]))

    def M_at(self, c):
        return float(np.interp(c, self._mc, self._mv))

    def xstar_at(self, c, side="left"):
        seg = self._segment_for(float(c), side=side)
        out = np.empty(seg["X"].shape[1])
        for k in range(seg["X"].shape[1]):
            out[k] = np.interp(c, seg["c"], seg["X"][:, k])
        return out

    def segment_bounds(self):
        return [(s["lo"], s["hi"]) for s in self._segs]


# ---------------------------------------------------------------------------
# building the curve


@dataclass(frozen=True)
class GCurveOpts:
    resolution: int = 129
    boundary: BoundaryOpts = field(default_factory=BoundaryOpts)
    jump_rel: float = 0.02          # x* jump threshold, relative to domain diameter
    localize_rel: float = 1e-6      # bracket width, relative to the c-range
    max_discontinuities: int = 32
    tie_distance_rel: float = 1e-5  # x1* != x2* tolerance, relative to diameter


def compute_g_curve(spec: ProblemSpec, opts: GCurveOpts = GCurveOpts()) -> GCurve:
    """Sample M(c), x*(c), G(c) on a level grid and localize x* jumps."""
    require_valid(spec)
    gr = g_range(spec)
    if not gr.g_max > gr.g_min:
        raise ValueError("g must not be constant")
    grid = np.linspace(gr.g_min, gr.g_max, opts.resolution)
    diam = spec.domain.diameter
    jump_tol = opts.jump_rel * diam

    results = [min_boundary_quasipotential(spec, c, opts.boundary) for c in grid]
    for c, bm in zip(grid, results):
        if bm.degenerate:
            raise GenericityError(
                f"degenerate boundary minimum at c={c}: {len(bm.argmins)} tied points")

    def xstar_of(bm):
        return np.asarray(bm.argmins[0], dtype=float)

    M = np.array([bm.M for bm in results])
    xs = np.stack([xstar_of(bm) for bm in results])
    G = spec.eval_g(xs)

    jumps = []
    # grid points that are themselves two-point ties are jump locations
    tie_idx = [i for i, bm in enumerate(results) if len(bm.argmins) == 2]
    for i in tie_idx:
        jumps.append(_jump_from_tie(spec, grid, i, results[i], opts))
    for i in range(len(grid) - 1):
        if i in tie_idx or (i + 1) in tie_idx:
            continue
        if spec.domain.boundary_distance(xs[i], xs[i + 1]) > jump_tol:
            jumps.append(_localize_jump(spec, grid[i], grid[i + 1], xs[i], xs[i + 1],
                                        opts, gr.g_max - gr.g_min))
    jumps.sort(key=lambda d: d.c)
    if len(jumps) > opts.max_discontinuities:
        raise GenericityError(f"{len(jumps)} discontinuities exceed the cap "
                              f"{opts.max_discontinuities}")
    for d in jumps:
        if spec.domain.boundary_distance(d.x1, d.x2) <= opts.tie_distance_rel * diam:
            raise GenericityError(f"coincident one-sided exit points at c={d.c}")
    return GCurve(c_grid=grid, M=M, xstar=xs, G=G, discontinuities=tuple(jumps),
                  grange=gr, gx=spec.eval_g)


def _localize_jump(spec, c_lo, c_hi, x_lo, x_hi, opts, c_range):
    # bisection on which side of the jump the midpoint's exit location falls
    lo, hi = float(c_lo), float(c_hi)
    x_left, x_right = x_lo, x_hi
    goal = opts.localize_rel * c_range
    while hi - lo > goal:
        mid = 0.5 * (lo + hi)
        bm = min_boundary_quasipotential(spec, mid, opts.boundary)
        if len(bm.argmins) == 2:
            return _jump_from_tie_values(spec, mid, bm, x_left, x_right)
        x_mid = np.asarray(bm.argmins[0], dtype=float)
        if spec.domain.boundary_distance(x_mid, x_left) <= \
                spec.domain.boundary_distance(x_mid, x_right):
            lo, x_left = mid, x_mid
        else:
            hi, x_right = mid, x_mid
    c_star = 0.5 * (lo + hi)
    bm_lo = min_boundary_quasipotential(spec, lo, opts.boundary)
    bm_hi = min_boundary_quasipotential(spec, hi, opts.boundary)
    g_lo = float(spec.eval_g(np.asarray(bm_lo.argmins[0])[None, :])[0])
    g_hi = float(spec.eval_g(np.asarray(bm_hi.argmins[0])[None, :])[0])
    return Discontinuity(
        c=c_star, bracket=(lo, hi),
        x1=np.asarray(bm_lo.argmins[0], dtype=float),
        x2=np.asarray(bm_hi.argmins[0], dtype=float),
        G1=g_lo, G2=g_hi, M_left=bm_lo.M, M_right=bm_hi.M)


def _jump_from_tie(spec, grid, i, bm, opts):
    # a grid point whose minimum is attained at exactly two boundary points
    c = float(grid[i])
    x_prev = None
    if i > 0:
        x_prev = min_boundary_quasipotential(spec, grid[i - 1], opts.boundary).argmins[0]
    x_next = None
    if i + 1 < len(grid):
        x_next = min_boundary_quasipotential(spec, grid[i + 1], opts.boundary).argmins[0]
    p, q = (np.asarray(bm.argmins[0], dtype=float), np.asarray(bm.argmins[1], dtype=float))
    if x_prev is not None:
        if spec.domain.boundary_distance(q, np.asarray(x_prev)) < \
                spec.domain.boundary_distance(p, np.asarray(x_prev)):
            p, q = q, p
    elif x_next is not None:
        if spec.domain.boundary_distance(p, np.asarray(x_next)) < \
                spec.domain.boundary_distance(q, np.asarray(x_next)):
            p, q = q, p
    g_p = float(spec.eval_g(p[None, :])[0])
    g_q = float(spec.eval_g(q[None, :])[0])
    return Discontinuity(c=c, bracket=(c, c), x1=p, x2=q, G1=g_p, G2=g_q,
                         M_left=bm.M, M_right=bm.M)


def _jump_from_tie_values(spec, c, bm, x_left, x_right):
    p, q = (np.asarray(bm.argmins[0], dtype=float), np.asarray(bm.argmins[1], dtype=float))
    if spec.domain.boundary_distance(q, x_left) < spec.domain.boundary_distance(p, x_left):
        p, q = q, p
    return Discontinuity(
        c=float(c), bracket=(float(c), float(c)), x1=p, x2=q,
        G1=float(spec.eval_g(p[None, :])[0]), G2=float(spec.eval_g(q[None, :])[0]),
        M_left=bm.M, M_right=bm.M)


# ---------------------------------------------------------------------------
# c1 and genericity


def find_c1(curve: GCurve, c0: float, tol: float = 1e-12) -> float:
    """First diagonal crossing of G starting from c0, per the two-case rule."""
    gr = curve.grange
    if not (gr.g_min - 1e-12 <= c0 <= gr.g_max + 1e-12):
        raise ValueError("c0 outside the level range")
    f0 = curve.G_at(c0) - c0
    if f0 >= 0:
        c1 = _first_crossing(curve, c0, direction=+1, tol=tol)
    else:
        c1 = _first_crossing(curve, c0, direction=-1, tol=tol)
    return float(np.clip(c1, gr.g1 - 1e-9, gr.g2 + 1e-9))


def _first_crossing(curve, c0, direction, tol):
    # walk the continuity segments in the given direction, looking for the
    # first sign change of f = G - c (for direction=+1; mirrored otherwise)
    def f(c, side):
        val = curve.G_at(c, side=side) - c
        return val if direction > 0 else -val

    if f(c0, "right" if direction > 0 else "left") <= 0:
        return c0
    lo = c0
    end = curve.c_grid[-1] if direction > 0 else curve.c_grid[0]
    knots = [d.c for d in curve.discontinuities]
    knots = [k for k in knots if (k > c0 if direction > 0 else k < c0)]
    knots.sort(reverse=(direction < 0))
    checkpoints = knots + [end]
    prev = c0
    for kc in checkpoints:
        side_in = "left" if direction > 0 else "right"
        # value approaching the checkpoint from inside the segment
        f_in = f(kc, side_in)
        if f_in <= 0:
            root = _bisect_sign(lambda c: f(c, side_in), prev, kc, tol)
            return root
        if kc != end:
            side_out = "right" if direction > 0 else "left"
            if f(kc, side_out) <= 0:
                return kc  # crossing happens by the jump itself
        prev = kc
    return end


def _bisect_sign(fn, lo, hi, tol):
    f_lo = fn(lo)
    f_hi = fn(hi)
    if f_lo <= 0:
        return lo
    if f_hi > 0:
        return hi
    while abs(hi - lo) > tol * max(1.0, abs(hi), abs(lo)):
        mid = 0.5 * (lo + hi)
        if fn(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class GenericityCheck:
    name: str
    passed: bool
    detail: str = ""
    witness: object = None


@dataclass(frozen=True)
class GenericityReport:
    checks: tuple

    @property
    def ok(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        return "\n".join(f"[{'pass' if c.passed else 'FAIL'}] {c.name}: {c.detail}"
                         for c in self.checks)


def check_genericity(curve: GCurve, c0: float, c1: float,
                     n_ladder: int = 12, cap: int = 32) -> GenericityReport:
    """Sampled checks of the crossing and discontinuity-placement assumptions."""
    gr = curve.grange
    checks = []

    delta0 = max((gr.g_max - gr.g_min) * 1e-2,
                 4 * (curve.c_grid[1] - curve.c_grid[0]))
    deltas = delta0 * 0.5 ** np.arange(n_ladder)
    if c1 > gr.g_min + 1e-12:
        sat = [d for d in deltas if c1 - d >= gr.g_min - 1e-12
               and curve.G_at(c1 - d, side="left") > c1 - d]
        ok_left = any(d <= deltas[-4] for d in sat) if len(deltas) >= 4 else bool(sat)
        checks.append(GenericityCheck(
            "crossing_left", ok_left,
            f"G above diagonal at {len(sat)}/{n_ladder} sampled deltas left of c1"))
    if c1 < gr.g_max - 1e-12:
        sat = [d for d in deltas if c1 + d <= gr.g_max + 1e-12
               and curve.G_at(c1 + d, side="right") < c1 + d]
        ok_right = any(d <= deltas[-4] for d in sat) if len(deltas) >= 4 else bool(sat)
        checks.append(GenericityCheck(
            "crossing_right", ok_right,
            f"G below diagonal at {len(sat)}/{n_ladder} sampled deltas right of c1"))

    grid_w = curve.c_grid[1] - curve.c_grid[0]
    bad = [d for d in curve.discontinuities
           if d.G1 <= d.c <= d.G2 and abs(c0 - d.c) <= max(1e-9, 1e-3 * grid_w)]
    checks.append(GenericityCheck(
        "c0_off_forbidden_jumps", not bad,
        f"{len(bad)} forbidden jump(s) coincide with c0",
        witness=[d.c for d in bad] or None))

    coincident = [d for d in curve.discontinuities
                  if np.allclose(d.x1, d.x2, atol=1e-9)]
    checks.append(GenericityCheck(
        "distinct_one_sided_exits", not coincident,
        f"{len(coincident)} jump(s) with coincident one-sided exit points"))

    checks.append(GenericityCheck(
        "finitely_many_jumps", len(curve.discontinuities) <= cap,
        f"{len(curve.discontinuities)} jump(s), cap {cap}"))
    return GenericityReport(checks=tuple(checks))


# ---------------------------------------------------------------------------
# the limit curve


@dataclass(frozen=True)
class CLambdaCurve:
    lambdas: np.ndarray
    values: np.ndarray
    c0: float
    c1: float
    lambda_max: float
    M_c0: float
    direction: int                  # +1 (c1>c0), -1 (c1<c0), 0 (equal)
    discontinuities: tuple          # intervals (lam_lo, lam_hi, c_left, c_right)
    curve: GCurve

    def value_at(self, lam: float) -> float:
        return _c_of_lambda(self.curve, self.c0, self.c1, self.M_c0, float(lam))


def _m_roots(curve, lo, hi, lam):
    """All roots of M(c) = lam on [lo, hi] of the piecewise-linear sampled M."""
    cs = curve._mc
    ms = curve._mv
    mask = (cs >= lo - 1e-15) & (cs <= hi + 1e-15)
    cs_in = np.concatenate([[lo], cs[mask], [hi]])
    ms_in = np.concatenate([[curve.M_at(lo)], ms[mask], [curve.M_at(hi)]])
    order = np.argsort(cs_in, kind="stable")
    cs_in, ms_in = cs_in[order], ms_in[order]
    roots = []
    f = ms_in - lam
    for i in range(len(cs_in) - 1):
        if f[i] == 0.0:
            roots.append(float(cs_in[i]))
        if f[i] * f[i + 1] < 0:
            t = f[i] / (f[i] - f[i + 1])
            roots.append(float(cs_in[i] + t * (cs_in[i + 1] - cs_in[i])))
    if f[-1] == 0.0:
        roots.append(float(cs_in[-1]))
    return roots


def _c_of_lambda(curve, c0, c1, m_c0, lam):
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if lam < m_c0 or c1 == c0:
        return c0
    if c1 > c0:
        roots = _m_roots(curve, c0, c1, lam)
        root = min(roots) if roots else np.inf
        return min(c1, root)
    roots = _m_roots(curve, c1, c0, lam)
    root = max(roots) if roots else -np.inf
    return max(c1, root)


def compute_c_lambda(curve: GCurve, c0: float, c1: float,
                     lambdas=None) -> CLambdaCurve:
    """Evaluate the four-case limit-level definition on a lambda grid."""
    m_c0 = curve.M_at(c0)
    lo, hi = min(c0, c1), max(c0, c1)
    mask = (curve._mc >= lo) & (curve._mc <= hi)
    m_on = np.concatenate([[curve.M_at(lo), curve.M_at(hi)], curve._mv[mask]])
    lambda_max = float(np.max(m_on)) if len(m_on) else m_c0
    if lambdas is None:
        top = max(lambda_max * 1.5, m_c0 * 1.5, 1e-6)
        lambdas = np.linspace(top / 512, top, 512)
    lambdas = np.asarray(lambdas, dtype=float)
    values = np.array([_c_of_lambda(curve, c0, c1, m_c0, lam) for lam in lambdas])

    discs = []
    if len(lambdas) > 1:
        span = abs(c1 - c0)
        dc = np.abs(np.diff(values))
        lam_w = np.diff(lambdas)
        thresh = max(5 * (curve.c_grid[1] - curve.c_grid[0]), 0.05 * max(span, 1e-12))
        for i in np.where(dc > thresh)[0]:
            discs.append((float(lambdas[i]), float(lambdas[i + 1]),
                          float(values[i]), float(values[i + 1])))
    direction = 0 if c1 == c0 else (1 if c1 > c0 else -1)
    return CLambdaCurve(lambdas=lambdas, values=values, c0=float(c0), c1=float(c1),
                        lambda_max=lambda_max, M_c0=float(m_c0), direction=direction,
                        discontinuities=tuple(discs), curve=curve)


@dataclass(frozen=True)
class LimitValue:
    value: float | None
    at_discontinuity: bool = False
    left: float | None = None
    right: float | None = None


def theorem1_limit(cl: CLambdaCurve, lam: float) -> LimitValue:
    """Limit level at exp(lam/eps^2); refuses a single value at a jump of c."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    grid_w = float(np.min(np.diff(cl.lambdas))) if len(cl.lambdas) > 1 else 0.0
    for (l_lo, l_hi, c_left, c_right) in cl.discontinuities:
        if l_lo - grid_w <= lam <= l_hi + grid_w:
            return LimitValue(value=None, at_discontinuity=True, left=c_left, right=c_right)
    return LimitValue(value=cl.value_at(lam))


# ---------------------------------------------------------------------------
# pipeline bundle


@dataclass(frozen=True)
class LimitCurves:
    spec: ProblemSpec
    grange: GRange
    gcurve: GCurve
    c0: float
    c1: float
    genericity: GenericityReport
    clambda: CLambdaCurve


def build_limit_curves(spec: ProblemSpec, gcurve_opts: GCurveOpts = GCurveOpts(),
                       lambdas=None, require_generic: bool = True) -> LimitCurves:
    require_valid(spec)
    curve = compute_g_curve(spec, gcurve_opts)
    c0 = float(spec.eval_g(spec.x0[None, :])[0])
    c1 = find_c1(curve, c0)
    report = check_genericity(curve, c0, c1)
    if require_generic and not report.ok:
        raise GenericityError(f"genericity checks failed:\n{report}")
    cl = compute_c_lambda(curve, c0, c1, lambdas)
    return LimitCurves(spec=spec, grange=curve.grange, gcurve=curve, c0=c0, c1=c1,
                       genericity=report, clambda=cl)
