"""Metastable distributions for drifts with two stable equilibria.

The solution level freezes to a separate constant in each basin of
attraction (their average on the separatrix), the well-to-well exit
exponents M12/M21 drive a pair of level curves c1(lam) rising and c2(lam)
falling until they meet at lam*, and past the meeting the long-time law of
the process is a two-atom mixture whose weights solve the level equation
a1*g(x1) + a2*g(x2) = level.

Right-to-left transitions are computed on the reflected problem so both
directions share one deterministic code path; for mirror-symmetric problems
this makes M21(c) bitwise equal to M12(-c), and the level where the curves
meet exactly solves M12(c) = M21(c).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .expressions import BinOp, Expression, Neg, Num, Var
from .problem import Interval, ProblemSpec, g_range, require_valid
from .quasipotential import (
    NumericOpts,
    minimize_action_path,
    quasipotential_1d_running,
)

__all__ = [
    "TwoWellSpec",
    "TwoLevelField",
    "TransitionLevels",
    "TwoWellCurves",
    "MetastableDistribution",
    "TwoWellError",
    "frozen_two_level_coefficients",
    "transition_levels",
    "compute_two_well_curves",
    "metastable_distribution",
]


class TwoWellError(ValueError):
    pass


# ---------------------------------------------------------------------------
# basins


@dataclass(frozen=True)
class TwoWellSpec:
    """Problem with two attracting equilibria, ordered so g(x1) <= g(x2)."""

    spec: ProblemSpec
    separatrix_tol: float = 1e-9
    capture_radius_rel: float = 0.02
    flow_time: float = 120.0

    def __post_init__(self):
        if len(self.spec.equilibria) != 2:
            raise TwoWellError("exactly two equilibria are required")
        if not self.spec.drift_is_autonomous():
            raise TwoWellError("two-well analysis requires a level-independent drift")
        require_valid(self.spec)
        g_at = self.spec.eval_g(np.asarray(self.spec.equilibria, dtype=float))
        order = (0, 1) if g_at[0] <= g_at[1] else (1, 0)
        object.__setattr__(self, "_order", order)
        object.__setattr__(self, "_cache", {})

    @property
    def x1(self):
        return np.asarray(self.spec.equilibria[self._order[0]], dtype=float)

    @property
    def x2(self):
        return np.asarray(self.spec.equilibria[self._order[1]], dtype=float)

    @property
    def c1(self):
        return float(self.spec.eval_g(self.x1[None, :])[0])

    @property
    def c2(self):
        return float(self.spec.eval_g(self.x2[None, :])[0])

    def basin_of(self, pts):
        """1 / 2 for the basins of x1 / x2, 0 for separatrix points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.spec.dimension == 1:
            return self._basin_1d(pts)
        out = np.empty(len(pts), dtype=np.int64)
        todo = []
        key_scale = max(self.spec.domain.diameter, 1.0)
        keys = [tuple(np.round(p / key_scale, 12)) for p in pts]
        for i, key in enumerate(keys):
            hit = self._cache.get(key)
            if hit is None:
                todo.append(i)
            else:
                out[i] = hit
        if todo:
            flowed = self._flow_assign(pts[todo])
            for i, lab in zip(todo, flowed):
                self._cache[keys[i]] = int(lab)
                out[i] = lab
        return out

    def _basin_1d(self, pts):
        # basins are the intervals between unstable drift zeros; membership is
        # a searchsorted, with the flow integration kept as the defining oracle
        seps = self._cache.get("_seps_1d")
        if seps is None:
            seps = np.asarray(self.separatrix_points_1d(), dtype=float)
            self._cache["_seps_1d"] = seps
        x = pts[:, 0]
        cell = np.searchsorted(seps, x)
        cell1 = int(np.searchsorted(seps, float(self.x1[0])))
        cell2 = int(np.searchsorted(seps, float(self.x2[0])))
        out = np.zeros(len(x), dtype=np.int64)
        out[cell == cell1] = 1
        out[cell == cell2] = 2
        if len(seps):
            on_sep = np.min(np.abs(x[:, None] - seps[None, :]), axis=1) <= self.separatrix_tol
            out[on_sep] = 0
        return out

    def _flow_assign(self, pts):
        dom = self.spec.domain
        r = self.capture_radius_rel * dom.diameter
        targets = np.stack([self.x1, self.x2])
        x = pts.copy()
        labels = np.zeros(len(pts), dtype=np.int64)
        n_steps = 600
        dt = self.flow_time / n_steps
        active = np.ones(len(pts), dtype=bool)
        for _ in range(n_steps):
            if not np.any(active):
                break
            xa = x[active]
            k1 = self.spec.eval_b(xa, 0.0)
            k2 = self.spec.eval_b(dom.clamp(xa + 0.5 * dt * k1), 0.0)
            k3 = self.spec.eval_b(dom.clamp(xa + 0.5 * dt * k2), 0.0)
            k4 = self.spec.eval_b(dom.clamp(xa + dt * k3), 0.0)
            x[active] = dom.clamp(xa + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
            d = np.linalg.norm(x[:, None, :] - targets[None, :, :], axis=2)
            hit1 = active & (d[:, 0] <= r)
            hit2 = active & (d[:, 1] <= r)
            labels[hit1] = 1
            labels[hit2] = 2
            active &= ~(hit1 | hit2)
        return labels

    def separatrix_points_1d(self):
        """Unstable drift zeros between the wells (quadrature breakpoints)."""
        if self.spec.dimension != 1:
            return ()
        from .quasipotential import FrozenCoefficients, _b_zeros_1d

        co = FrozenCoefficients(self.spec, 0.0)
        zeros = _b_zeros_1d(co, self.spec.domain.lo, self.spec.domain.hi)
        wells = {float(self.x1[0]), float(self.x2[0])}
        return tuple(z for z in zeros
                     if min(abs(z - w) for w in wells) > 1e-8 * self.spec.domain.diameter)


@dataclass(frozen=True)
class TwoLevelField:
    """Coefficient field frozen at level c_a on basin 1, c_b on basin 2."""

    wells: TwoWellSpec
    c_a: float
    c_b: float

    @property
    def dimension(self):
        return self.wells.spec.dimension

    @property
    def domain(self):
        return self.wells.spec.domain

    def levels_at(self, pts):
        basin = self.wells.basin_of(pts)
        levels = np.where(basin == 1, self.c_a,
                          np.where(basin == 2, self.c_b, 0.5 * (self.c_a + self.c_b)))
        return levels, basin == 0

    def a_at(self, pts):
        pts = np.atleast_2d(pts)
        levels, _ = self.levels_at(pts)
        return self.wells.spec.eval_a(pts, levels)

    def b_at(self, pts):
        pts = np.atleast_2d(pts)
        return self.wells.spec.eval_b(pts, 0.0)

    def quad_breakpoints(self):
        return self.wells.separatrix_points_1d()


def frozen_two_level_coefficients(wells: TwoWellSpec, c1: float, c2: float) -> TwoLevelField:
    return TwoLevelField(wells=wells, c_a=float(c1), c_b=float(c2))


# ---------------------------------------------------------------------------
# reflected problems (canonical orientation for transitions)


def _reflect_expression(e: Expression, mid: float) -> Expression:
    """Substitute x1 -> 2*mid - x1 (one-dimensional problems only)."""
    if isinstance(e, Num):
        return e
    if isinstance(e, Var):
        if e.name == "x1":
            return BinOp(op="-", left=Num(value=2.0 * mid), right=Var(name="x1"))
        return e
    if isinstance(e, Neg):
        return Neg(arg=_reflect_expression(e.arg, mid))
    if isinstance(e, BinOp):
        return BinOp(op=e.op, left=_reflect_expression(e.left, mid),
                     right=_reflect_expression(e.right, mid))
    from .expressions import Call

    if isinstance(e, Call):
        return Call(func=e.func, args=tuple(_reflect_expression(a, mid) for a in e.args))
    raise TypeError(f"not an expression node: {e!r}")


def _reflect_problem_1d(spec: ProblemSpec) -> ProblemSpec:
    dom = spec.domain
    if not isinstance(dom, Interval):
        raise TwoWellError("reflection is only defined for interval domains")
    mid = 0.5 * (dom.lo + dom.hi)
    a = ((_reflect_expression(spec.a[0][0], mid),),)
    b = (Neg(arg=_reflect_expression(spec.b[0], mid)),)
    b1 = (Neg(arg=_reflect_expression(spec.b1[0], mid)),) if spec.b1 else None
    g = _reflect_expression(spec.g, mid)
    eq = tuple((2.0 * mid - p[0],) for p in spec.equilibria)
    return replace(spec, a=a, b=b, b1=b1, g=g, equilibria=eq)


from functools import lru_cache


@lru_cache(maxsize=16)
def _reflected_wells(wells: TwoWellSpec) -> TwoWellSpec:
    return TwoWellSpec(spec=_reflect_problem_1d(wells.spec),
                       separatrix_tol=wells.separatrix_tol,
                       capture_radius_rel=wells.capture_radius_rel,
                       flow_time=wells.flow_time)


# ---------------------------------------------------------------------------
# transition levels


@dataclass
class TransitionLevels:
    wells: TwoWellSpec
    c_grid: np.ndarray
    M12: np.ndarray
    M21: np.ndarray
    M_boundary: float
    independence_spread_12: float
    independence_spread_21: float
    opts: NumericOpts

    def M12_at(self, c):
        return float(np.interp(c, self.c_grid, self.M12))

    def M21_at(self, c):
        return float(np.interp(c, self.c_grid, self.M21))

    def M12_exact(self, c):
        return _well_transition(self.wells, 1, float(c), self.opts)

    def M21_exact(self, c):
        return _well_transition(self.wells, 2, float(c), self.opts)


def _well_transition(wells: TwoWellSpec, source_well: int, c: float,
                     opts: NumericOpts, other_level: float = None) -> float:
    """Quasi-potential from one well to the other; the source-basin level is c.

    In one dimension the computation is canonically oriented left-to-right:
    a right-to-left transition runs on the reflected problem, which shares
    the same code path and seeds.
    """
    spec = wells.spec
    src = wells.x1 if source_well == 1 else wells.x2
    dst = wells.x2 if source_well == 1 else wells.x1
    if other_level is None:
        other_level = c
    if spec.dimension == 1 and float(src[0]) > float(dst[0]):
        rwells = _reflected_wells(wells)
        mid = 0.5 * (spec.domain.lo + spec.domain.hi)
        r_src = 2.0 * mid - float(src[0])
        r_basin = int(rwells.basin_of(np.array([[r_src]]))[0])
        if r_basin == 1:
            fld = TwoLevelField(rwells, c_a=c, c_b=other_level)
        else:
            fld = TwoLevelField(rwells, c_a=other_level, c_b=c)
        res = minimize_action_path(fld, np.array([r_src]),
                                   np.array([2.0 * mid - float(dst[0])]), opts)
        return float(res.value)
    if source_well == 1:
        fld = TwoLevelField(wells, c_a=c, c_b=other_level)
    else:
        fld = TwoLevelField(wells, c_a=other_level, c_b=c)
    res = minimize_action_path(fld, src, dst, opts)
    return float(res.value)


def _well_to_boundary(wells: TwoWellSpec, source_well: int, c_a: float, c_b: float,
                      opts: NumericOpts) -> float:
    spec = wells.spec
    src = wells.x1 if source_well == 1 else wells.x2
    fld = TwoLevelField(wells, c_a=c_a, c_b=c_b)
    if spec.dimension == 1:
        return min(quasipotential_1d_running(fld, float(src[0]), spec.domain.lo),
                   quasipotential_1d_running(fld, float(src[0]), spec.domain.hi))
    pts = spec.domain.boundary_lattice(32)
    return min(minimize_action_path(fld, src, p, opts).value for p in pts)


def transition_levels(wells: TwoWellSpec, c_grid=None,
                      opts: NumericOpts = NumericOpts(),
                      boundary_level_grid: int = 3,
                      independence_tol: float = 1e-3) -> TransitionLevels:
    """Sample the four exit exponents and check the standing assumptions.

    Raises TwoWellError when a well-to-boundary transition is not strictly
    more expensive than every well-to-well transition.
    """
    spec = wells.spec
    gr = g_range(spec)
    if c_grid is None:
        c_grid = np.linspace(gr.g_min, gr.g_max, 17)
    c_grid = np.asarray(c_grid, dtype=float)

    M12 = np.array([_well_transition(wells, 1, c, opts) for c in c_grid])
    M21 = np.array([_well_transition(wells, 2, c, opts) for c in c_grid])

    c_mid = float(0.5 * (gr.g_min + gr.g_max))
    others = np.linspace(gr.g_min, gr.g_max, 3)
    probe12 = [_well_transition(wells, 1, c_mid, opts, other_level=o) for o in others]
    probe21 = [_well_transition(wells, 2, c_mid, opts, other_level=o) for o in others]
    spread12 = float(max(probe12) - min(probe12))
    spread21 = float(max(probe21) - min(probe21))

    levels = np.linspace(gr.g_min, gr.g_max, boundary_level_grid)
    m_bnd = np.inf
    for ca in levels:
        for cb in levels:
            m_bnd = min(m_bnd,
                        _well_to_boundary(wells, 1, ca, cb, opts),
                        _well_to_boundary(wells, 2, ca, cb, opts))
    sup_ww = float(max(M12.max(), M21.max()))
    if sup_ww >= m_bnd:
        raise TwoWellError(
            f"well-to-boundary exponent {m_bnd:.6g} does not dominate the "
            f"well-to-well exponents (sup = {sup_ww:.6g}); the metastable "
            "analysis does not apply")
    return TransitionLevels(wells=wells, c_grid=c_grid, M12=M12, M21=M21,
                            M_boundary=float(m_bnd),
                            independence_spread_12=spread12,
                            independence_spread_21=spread21, opts=opts)


# ---------------------------------------------------------------------------
# the level curves and lam*


def _roots_on(c_grid, M, lam, lo, hi):
    roots = []
    f = M - lam
    for i in range(len(c_grid) - 1):
        a_c, b_c = c_grid[i], c_grid[i + 1]
        if b_c < lo or a_c > hi:
            continue
        if f[i] == 0.0 and lo <= a_c <= hi:
            roots.append(float(a_c))
        if f[i] * f[i + 1] < 0:
            t = f[i] / (f[i] - f[i + 1])
            r = a_c + t * (b_c - a_c)
            if lo - 1e-15 <= r <= hi + 1e-15:
                roots.append(float(r))
    if f[-1] == 0.0 and lo <= c_grid[-1] <= hi:
        roots.append(float(c_grid[-1]))
    return roots


def _c1_of_lambda(levels: TransitionLevels, c1, c2, lam):
    m_at_c1 = levels.M12_at(c1)
    if lam < m_at_c1:
        return c1
    roots = _roots_on(levels.c_grid, levels.M12, lam, c1, c2)
    root = min(roots) if roots else np.inf
    return min(c2, root)


def _c2_of_lambda(levels: TransitionLevels, c1, c2, lam):
    m_at_c2 = levels.M21_at(c2)
    if lam < m_at_c2:
        return c2
    roots = _roots_on(levels.c_grid, levels.M21, lam, c1, c2)
    root = max(roots) if roots else -np.inf
    return max(c1, root)


@dataclass
class TwoWellCurves:
    levels: TransitionLevels
    c1: float
    c2: float
    lambdas: np.ndarray
    curve1: np.ndarray
    curve2: np.ndarray
    lambda_star: float
    lambda_star_bracket: tuple
    c_star: float
    cont1_at_star: bool
    cont2_at_star: bool

    def c1_at(self, lam):
        return _c1_of_lambda(self.levels, self.c1, self.c2, lam)

    def c2_at(self, lam):
        return _c2_of_lambda(self.levels, self.c1, self.c2, lam)

    def cbar1_at(self, lam):
        return min(self.c1_at(lam), self.c_star)

    def cbar2_at(self, lam):
        return max(self.c2_at(lam), self.c_star)

    @property
    def M_boundary(self):
        return self.levels.M_boundary


def compute_two_well_curves(levels: TransitionLevels, lambda_grid=None,
                            star_width: float = 1e-3,
                            jump_tol: float = None) -> TwoWellCurves:
    """Build c1(lam), c2(lam), locate their meeting and the common level."""
    wells = levels.wells
    c1, c2 = wells.c1, wells.c2
    if not c1 < c2 and not np.isclose(c1, c2):
        raise TwoWellError("well levels must satisfy c1 <= c2")
    if lambda_grid is None:
        lambda_grid = np.linspace(levels.M_boundary / 512, levels.M_boundary * 0.999, 512)
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    v1 = np.array([_c1_of_lambda(levels, c1, c2, lam) for lam in lambda_grid])
    v2 = np.array([_c2_of_lambda(levels, c1, c2, lam) for lam in lambda_grid])

    # lam* = first lambda with c1(lam) >= c2(lam), bisected to the target width
    meet = v1 >= v2
    if not meet.any():
        raise TwoWellError("the level curves do not meet below the boundary exponent")
    i = int(np.argmax(meet))
    if i == 0:
        lo, hi = float(lambda_grid[0]) * 0.5, float(lambda_grid[0])
    else:
        lo, hi = float(lambda_grid[i - 1]), float(lambda_grid[i])
    while hi - lo > star_width:
        mid = 0.5 * (lo + hi)
        if _c1_of_lambda(levels, c1, c2, mid) >= _c2_of_lambda(levels, c1, c2, mid):
            hi = mid
        else:
            lo = mid
    lam_star = 0.5 * (lo + hi)

    if jump_tol is None:
        jump_tol = 0.02 * max(c2 - c1, 1e-12)
    d1 = abs(_c1_of_lambda(levels, c1, c2, hi) - _c1_of_lambda(levels, c1, c2, lo))
    d2 = abs(_c2_of_lambda(levels, c1, c2, hi) - _c2_of_lambda(levels, c1, c2, lo))
    cont1 = d1 <= jump_tol
    cont2 = d2 <= jump_tol
    if not cont1 and not cont2:
        raise TwoWellError("both level curves jump at their meeting point; the "
                           "common level is undetermined")
    if cont1:
        c_star = _c1_of_lambda(levels, c1, c2, lam_star)
    else:
        c_star = _c2_of_lambda(levels, c1, c2, lam_star)
    if cont1 and cont2:
        c_star = _refine_c_star(levels, c1, c2, c_star)
    return TwoWellCurves(levels=levels, c1=c1, c2=c2, lambdas=lambda_grid,
                         curve1=v1, curve2=v2, lambda_star=float(lam_star),
                         lambda_star_bracket=(lo, hi), c_star=float(c_star),
                         cont1_at_star=cont1, cont2_at_star=cont2)


def _refine_c_star(levels, c1, c2, c_star_guess, max_iter=24):
    """When both curves glide through the meeting, the common level solves
    M12(c) = M21(c); bisection on direct evaluations sharpens the sampled
    estimate (and lands exactly on symmetric crossings)."""

    def f(c):
        return levels.M12_exact(c) - levels.M21_exact(c)

    lo, hi = c1, c2
    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo < 0 < f_hi):
        return c_star_guess
    width_goal = max(1e-12, 1e-6 * (c2 - c1))
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid == 0.0:
            return mid
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= width_goal:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# the metastable law


@dataclass(frozen=True)
class MetastableDistribution:
    a1: float
    a2: float
    level: float
    x1: tuple
    x2: tuple


def metastable_distribution(curves: TwoWellCurves, lam: float,
                            start_basin) -> MetastableDistribution:
    """Two-atom limit law of the process at scale exp(lam/eps^2)."""
    c1, c2 = curves.c1, curves.c2
    if np.isclose(c1, c2):
        raise TwoWellError("equal well levels leave the weights undetermined")
    if not 0 < lam < curves.M_boundary:
        raise TwoWellError(f"lambda must lie in (0, M_boundary = {curves.M_boundary})")
    if start_basin in (1, 2):
        # continuity of the relevant clamped curve at lam
        eps_l = 1e-6 * max(lam, 1.0)
        fn = curves.cbar1_at if start_basin == 1 else curves.cbar2_at
        if abs(fn(lam + eps_l) - fn(lam - eps_l)) > 0.02 * (c2 - c1):
            raise TwoWellError(f"the level curve jumps at lambda = {lam}")
        level = fn(lam)
    elif start_basin == "any":
        if lam <= curves.lambda_star:
            raise TwoWellError("basin-independent law requires lambda > lambda_star")
        level = curves.c_star
    else:
        raise ValueError("start_basin must be 1, 2 or 'any'")
    a2 = (level - c1) / (c2 - c1)
    a1 = 1.0 - a2
    if not (-1e-9 <= a1 <= 1 + 1e-9 and -1e-9 <= a2 <= 1 + 1e-9):
        raise TwoWellError(f"weights ({a1}, {a2}) escape [0,1]; level {level} "
                           f"outside [{c1}, {c2}]")
    return MetastableDistribution(a1=float(np.clip(a1, 0, 1)),
                                  a2=float(np.clip(a2, 0, 1)),
                                  level=float(level),
                                  x1=tuple(curves.levels.wells.x1),
                                  x2=tuple(curves.levels.wells.x2))
