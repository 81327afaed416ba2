"""Limiting exit measures across the three time-scale regimes.

Below the first exit exponent nothing leaves; far above the last one the
exit law sits on the minimizers at the terminal level; in between, the exit
probability profile alpha solves  alpha' = (alpha - 1)/(G(c) - c)  with
alpha = 0 at the current limit level, and the boundary law is the
pushforward of the induced level measure nu by the exit-location map x*.
The mirrored case (terminal level below the initial one) is handled by
reflecting levels and g, computing in the standard orientation, and
un-reflecting the outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad, solve_ivp

from .asymptotics import (
    CLambdaCurve,
    Discontinuity,
    GCurve,
    LimitCurves,
    compute_c_lambda,
    theorem1_limit,
)
from .problem import GRange
from .quasipotential import BoundaryOpts, min_boundary_quasipotential

__all__ = [
    "AlphaFunction",
    "ExitMeasure",
    "BoundaryProfile",
    "RegimeBoundaryError",
    "DiagonalContactError",
    "TwoAtomError",
    "alpha_closed_form",
    "alpha_ode",
    "exit_measure",
    "corollary_limit",
    "classify_regime",
]


class RegimeBoundaryError(ValueError):
    """lambda sits on a regime boundary or a jump of the limit curve."""


class DiagonalContactError(ArithmeticError):
    """G touches the diagonal inside the integration range."""


class TwoAtomError(ValueError):
    """Two-minimizer exit with equal one-sided g values (hypothesis fails)."""


# ---------------------------------------------------------------------------
# alpha


@dataclass(frozen=True)
class AlphaFunction:
    c_grid: np.ndarray
    values: np.ndarray
    c_lambda: float
    c0: float

    def at(self, c):
        return float(np.interp(c, self.c_grid, self.values))


def _pieces(curve: GCurve, lo, hi):
    cuts = sorted(d.c for d in curve.discontinuities if lo < d.c < hi)
    edges = [lo] + cuts + [hi]
    return list(zip(edges[:-1], edges[1:]))


def _check_above_diagonal(curve: GCurve, lo, hi, tol=1e-12):
    zs = np.linspace(lo, hi, 257)
    gap = np.array([curve.G_at(z) - z for z in zs])
    if np.min(gap) <= tol:
        z_bad = zs[int(np.argmin(gap))]
        raise DiagonalContactError(
            f"G(z) - z = {np.min(gap):.3e} at z = {z_bad}; the exit profile "
            "integrand is singular")


def alpha_closed_form(curve: GCurve, c_lambda: float, c: float,
                      abs_tol: float = 1e-10) -> float:
    """alpha(c) = 1 - exp(int_c^{c_lambda} dz / (z - G(z))), piecewise in G."""
    if not c <= c_lambda:
        raise ValueError("requires c <= c_lambda")
    if c == c_lambda:
        return 0.0
    _check_above_diagonal(curve, c, c_lambda)
    total = 0.0
    for lo, hi in _pieces(curve, c, c_lambda):
        mid_side = "right" if lo in [d.c for d in curve.discontinuities] else "left"

        def integrand(z):
            return 1.0 / (z - curve.G_at(z, side=mid_side))

        val, _ = quad(integrand, lo, hi, epsabs=abs_tol, limit=400)
        total += val
    return 1.0 - float(np.exp(total))


def alpha_ode(curve: GCurve, c_lambda: float, c_grid=None,
              rtol: float = 1e-11, atol: float = 1e-13) -> AlphaFunction:
    """Integrate alpha' = (alpha-1)/(G-c) from the terminal condition
    alpha(c_lambda) = 0 down the level axis, restarting at each jump of G."""
    if c_grid is None:
        c_grid = np.linspace(curve.c_grid[0], c_lambda, 513)
    c_grid = np.asarray(c_grid, dtype=float)
    lo = float(np.min(c_grid))
    _check_above_diagonal(curve, lo, c_lambda)
    pieces = _pieces(curve, lo, c_lambda)[::-1]  # integrate downward
    sols = []
    alpha_hi = 0.0
    for p_lo, p_hi in pieces:
        side = "right" if p_lo in [d.c for d in curve.discontinuities] else "left"

        def rhs(cc, y):
            return [(y[0] - 1.0) / (curve.G_at(cc, side=side) - cc)]

        sol = solve_ivp(rhs, (p_hi, p_lo), [alpha_hi], method="RK45",
                        rtol=rtol, atol=atol, dense_output=True)
        if not sol.success:
            raise DiagonalContactError(f"alpha integration failed: {sol.message}")
        sols.append((p_lo, p_hi, sol.sol))
        alpha_hi = float(sol.y[0, -1])

    def eval_alpha(cc):
        if cc >= c_lambda:
            return 0.0
        for p_lo, p_hi, dense in sols:
            if p_lo <= cc <= p_hi:
                return float(dense(cc)[0])
        return alpha_hi

    values = np.array([eval_alpha(cc) for cc in c_grid])
    values = np.clip(values, 0.0, 1.0 - 1e-16)
    return AlphaFunction(c_grid=c_grid, values=values, c_lambda=float(c_lambda),
                         c0=float(lo))


# ---------------------------------------------------------------------------
# measures


@dataclass(frozen=True)
class BoundaryProfile:
    """Continuous boundary part, carried as (level, alpha, exit point) samples."""

    levels: np.ndarray
    alpha: np.ndarray
    points: np.ndarray  # (n, d)

    def mass(self):
        return float(abs(self.alpha[0] - self.alpha[-1]))


@dataclass(frozen=True)
class ExitMeasure:
    atoms: tuple               # ((point, mass), ...)
    profile: BoundaryProfile | None = None

    @property
    def total_mass(self):
        tot = sum(m for _, m in self.atoms)
        if self.profile is not None:
            tot += self.profile.mass()
        return float(tot)

    def atom_mass_at(self, point, radius=1e-9):
        p = np.atleast_1d(np.asarray(point, dtype=float))
        return float(sum(m for q, m in self.atoms
                         if np.linalg.norm(np.atleast_1d(q) - p) <= radius))

    def mass_near(self, point, radius):
        p = np.atleast_1d(np.asarray(point, dtype=float))
        total = self.atom_mass_at(point, radius)
        if self.profile is not None:
            pts = self.profile.points
            inside = np.linalg.norm(pts - p[None, :], axis=1) <= radius
            a = self.profile.alpha
            for i in range(len(pts) - 1):
                if inside[i] and inside[i + 1]:
                    total += abs(a[i] - a[i + 1])
        return float(total)

    def boundary_mass(self, domain):
        tot = self.profile.mass() if self.profile is not None else 0.0
        for q, m in self.atoms:
            if not domain.contains(np.atleast_1d(q)[None, :], tol=-1e-9)[0]:
                tot += m
            elif _on_boundary(domain, q):
                tot += m
        return float(tot)

    def to_dict(self):
        out = {"atoms": [{"point": list(np.atleast_1d(p)), "mass": m}
                         for p, m in self.atoms]}
        if self.profile is not None:
            out["boundary_cdf"] = [
                {"c": float(c), "alpha": float(a), "xstar": list(np.atleast_1d(x))}
                for c, a, x in zip(self.profile.levels, self.profile.alpha,
                                   self.profile.points)]
        return out


def _on_boundary(domain, q, tol=1e-9):
    q = np.atleast_1d(np.asarray(q, dtype=float))
    inside = domain.contains(q[None, :], tol=tol)[0]
    clamped = domain.clamp(q[None, :] * (1 + 1e-12) + 1e-12)[0]
    # a point is boundary if clamping a slight outward push keeps it fixed
    from .problem import Ball, Box, Interval

    if isinstance(domain, Interval):
        return abs(q[0] - domain.lo) <= tol or abs(q[0] - domain.hi) <= tol
    if isinstance(domain, Ball):
        return abs(np.linalg.norm(q - np.asarray(domain.center)) - domain.radius) <= tol
    if isinstance(domain, Box):
        lo = np.asarray(domain.lower)
        hi = np.asarray(domain.upper)
        return bool(np.any(np.abs(q - lo) <= tol) or np.any(np.abs(q - hi) <= tol))
    return not inside


# ---------------------------------------------------------------------------
# regime classification and the theorem


def classify_regime(curves: LimitCurves, lam: float, margin: float = None) -> str:
    cl = curves.clambda
    if margin is None:
        margin = float(np.median(np.diff(cl.lambdas))) if len(cl.lambdas) > 1 else 1e-9
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if abs(lam - cl.M_c0) <= margin or abs(lam - cl.lambda_max) <= margin:
        raise RegimeBoundaryError(
            f"lambda = {lam} within one grid step of a regime boundary "
            f"(M(c0) = {cl.M_c0}, lambda_max = {cl.lambda_max})")
    if lam < cl.M_c0:
        return "below"
    if lam > cl.lambda_max:
        return "above"
    if cl.c1 == cl.c0:
        return "above"
    res = theorem1_limit(cl, lam)
    if res.at_discontinuity:
        raise RegimeBoundaryError(f"lambda = {lam} sits on a jump of the limit curve")
    return "intermediate"


def _reflect_gcurve(curve: GCurve) -> GCurve:
    discs = tuple(sorted((Discontinuity(
        c=-d.c, bracket=(-d.bracket[1], -d.bracket[0]),
        x1=d.x2, x2=d.x1, G1=-d.G2, G2=-d.G1,
        M_left=d.M_right, M_right=d.M_left) for d in curve.discontinuities),
        key=lambda d: d.c))
    gr = curve.grange
    gx = curve.gx
    return GCurve(
        c_grid=-curve.c_grid[::-1],
        M=curve.M[::-1].copy(),
        xstar=curve.xstar[::-1].copy(),
        G=-curve.G[::-1],
        discontinuities=discs,
        grange=GRange(g_min=-gr.g_max, g_max=-gr.g_min, g1=-gr.g2, g2=-gr.g1),
        gx=(lambda pts: -gx(pts)) if gx is not None else None,
    )


def _two_atom_masses(c1, G1, G2, x1, x2):
    if abs(G1 - G2) <= 1e-12:
        raise TwoAtomError(
            f"two exit minimizers with equal g values (G1 = G2 = {G1}); the "
            "two-atom law is undetermined")
    m1 = (c1 - G2) / (G1 - G2)
    m2 = 1.0 - m1
    if not (-1e-9 <= m1 <= 1 + 1e-9):
        raise TwoAtomError(
            f"terminal level c1 = {c1} outside [min(G1,G2), max(G1,G2)] = "
            f"[{min(G1, G2)}, {max(G1, G2)}]; masses ({m1}, {m2}) invalid")
    m1 = float(np.clip(m1, 0.0, 1.0))
    return ((np.atleast_1d(x1), m1), (np.atleast_1d(x2), 1.0 - m1))


def exit_measure(curves: LimitCurves, lam: float, margin: float = None,
                 boundary_opts: BoundaryOpts = None, profile_points: int = 513):
    """Limiting (rho, mu) at time scale exp(lam/eps^2).

    rho is the full law of the stopped process (interior atom included); mu
    is its boundary restriction.
    """
    if not curves.genericity.ok:
        raise RegimeBoundaryError("genericity report has failures; refusing")
    regime = classify_regime(curves, lam, margin)
    cl = curves.clambda
    spec = curves.spec
    x0 = spec.x0

    if regime == "below":
        rho = ExitMeasure(atoms=((x0, 1.0),))
        mu = ExitMeasure(atoms=())
        return rho, mu

    if regime == "above":
        c1 = cl.c1
        near = [d for d in curves.gcurve.discontinuities
                if abs(d.c - c1) <= max(2e-6 * (curves.grange.g_max - curves.grange.g_min),
                                        1e-9)]
        if near:
            d = near[0]
            atoms = _two_atom_masses(c1, d.G1, d.G2, d.x1, d.x2)
        else:
            bopts = boundary_opts or BoundaryOpts()
            bm = min_boundary_quasipotential(spec, c1, bopts)
            if bm.degenerate:
                raise RegimeBoundaryError("degenerate minimizer set at the terminal level")
            if len(bm.argmins) == 2:
                g1 = float(spec.eval_g(np.asarray(bm.argmins[0])[None, :])[0])
                g2 = float(spec.eval_g(np.asarray(bm.argmins[1])[None, :])[0])
                atoms = _two_atom_masses(c1, g1, g2, bm.argmins[0], bm.argmins[1])
            else:
                atoms = ((np.asarray(bm.argmins[0], dtype=float), 1.0),)
        mu = ExitMeasure(atoms=atoms)
        return ExitMeasure(atoms=atoms), mu

    # intermediate regime: reflect when the terminal level lies below c0
    mirrored = cl.c1 < cl.c0
    if mirrored:
        rcurve = _reflect_gcurve(curves.gcurve)
        c0, c_lam = -cl.c0, -float(cl.value_at(lam))
        curve = rcurve
    else:
        curve = curves.gcurve
        c0, c_lam = cl.c0, float(cl.value_at(lam))

    grid = np.unique(np.concatenate([
        np.linspace(c0, c_lam, profile_points),
        [d.c for d in curve.discontinuities if c0 < d.c < c_lam]]))
    af = alpha_ode(curve, c_lam, grid)
    alpha0 = af.at(c0)
    if not 0.0 < alpha0 < 1.0:
        raise RegimeBoundaryError(
            f"alpha(c0) = {alpha0} inconsistent with the intermediate regime")

    atoms, profile = _pushforward(curve, af, spec.domain, mirrored)
    mu = ExitMeasure(atoms=atoms, profile=profile)
    rho = ExitMeasure(atoms=((x0, 1.0 - alpha0),) + atoms, profile=profile)
    return rho, mu


def _pushforward(curve: GCurve, af: AlphaFunction, domain, mirrored):
    """Split the level measure into exit-point atoms (x* locally constant)
    and a continuous boundary part (x* moving)."""
    cs = af.c_grid
    alphas = af.values
    pts = np.stack([curve.xstar_at(c) for c in cs])
    move_tol = 1e-7 * domain.diameter
    atoms = []
    prof_levels, prof_alpha, prof_pts = [], [], []
    i = 0
    n = len(cs)
    while i < n - 1:
        j = i
        while j + 1 < n and np.linalg.norm(pts[j + 1] - pts[i]) <= move_tol:
            j += 1
        if j > i:  # constant run [i, j]
            mass = abs(alphas[i] - alphas[j])
            if mass > 0:
                atoms.append((pts[i].copy(), float(mass)))
            i = j
        else:
            k = i
            while k + 1 < n and np.linalg.norm(pts[k + 1] - pts[k]) > move_tol:
                k += 1
            sl = slice(i, k + 1)
            prof_levels.extend(cs[sl])
            prof_alpha.extend(alphas[sl])
            prof_pts.extend(pts[sl])
            i = k
    profile = None
    if prof_levels:
        levels = np.asarray(prof_levels)
        if mirrored:
            levels = -levels
        profile = BoundaryProfile(levels=levels, alpha=np.asarray(prof_alpha),
                                  points=np.asarray(prof_pts))
    # merge atoms at coinciding points
    merged = {}
    for p, m in atoms:
        key = tuple(np.round(p / max(domain.diameter, 1.0), 9))
        if key in merged:
            merged[key] = (merged[key][0], merged[key][1] + m)
        else:
            merged[key] = (p, m)
    return tuple(merged.values()), profile


def corollary_limit(curves: LimitCurves, lam: float, margin: float = None) -> float:
    """int g(x*(c)) d nu(c) + g(x0) (1 - nu-total), by quadrature against the
    exit-profile density; an independent route to the limit level."""
    regime = classify_regime(curves, lam, margin)
    if regime != "intermediate":
        raise RegimeBoundaryError("the integral form applies to the intermediate regime")
    cl = curves.clambda
    mirrored = cl.c1 < cl.c0
    curve = _reflect_gcurve(curves.gcurve) if mirrored else curves.gcurve
    c0 = -cl.c0 if mirrored else cl.c0
    c_lam = float(cl.value_at(lam))
    if mirrored:
        c_lam = -c_lam
    grid = np.unique(np.concatenate([
        np.linspace(c0, c_lam, 1025),
        [d.c for d in curve.discontinuities if c0 < d.c < c_lam]]))
    af = alpha_ode(curve, c_lam, grid)
    total = 0.0
    for lo, hi in _pieces(curve, c0, c_lam):
        side = "right" if lo in [d.c for d in curve.discontinuities] else "left"

        def integrand(z):
            g_z = curve.G_at(z, side=side)
            return g_z * (1.0 - af.at(z)) / (g_z - z)

        val, _ = quad(integrand, lo, hi, epsabs=1e-12, limit=400)
        total += val
    alpha0 = af.at(c0)
    value = total + c0 * (1.0 - alpha0)
    return -value if mirrored else float(value)
