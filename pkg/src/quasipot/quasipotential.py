"""Action functionals and quasi-potentials for frozen-level coefficient fields.

The quasi-potential from x to y is the infimum over horizons T and paths
phi in the closed domain of the normalized action

    S(phi) = 1/2 * int_0^T (phi' - b)^T a(phi)^{-1} (phi' - b) dt.

Three backends compute it: an exact 1d quadrature (single-well drift, or the
running-ascent form for multiwell fields), a Lyapunov-equation solve for
linear drift with x-independent diffusion, and direct minimization of the
midpoint-rule discretization over a horizon grid with multi-start descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import quad
from scipy.linalg import solve_continuous_lyapunov
from scipy.optimize import brentq, minimize_scalar

from .problem import Ball, Box, Interval, ProblemSpec, require_valid

__all__ = [
    "FrozenCoefficients",
    "PathDiscretization",
    "QuasiPotentialValue",
    "BoundaryMinimum",
    "NumericOpts",
    "ActionError",
    "UnstableDriftError",
    "action",
    "quasipotential_1d",
    "quasipotential_1d_running",
    "quasipotential_gaussian",
    "lyapunov_integral_check",
    "detect_linear_gaussian",
    "quasipotential_numeric",
    "minimize_action_path",
    "min_boundary_quasipotential",
]


class ActionError(ArithmeticError):
    pass


class UnstableDriftError(ValueError):
    pass


# ---------------------------------------------------------------------------
# frozen coefficient fields


@dataclass(frozen=True)
class FrozenCoefficients:
    """The linear field obtained by freezing the solution level at ``c``."""

    spec: ProblemSpec
    c: float

    @property
    def dimension(self):
        return self.spec.dimension

    @property
    def domain(self):
        return self.spec.domain

    def a_at(self, pts):
        return self.spec.eval_a(pts, self.c)

    def b_at(self, pts):
        return self.spec.eval_b(pts, self.c)

    def a_inv_at(self, pts):
        return np.linalg.inv(self.a_at(pts))

    def quad_breakpoints(self):
        return ()


@dataclass(frozen=True)
class PathDiscretization:
    """Uniform time mesh carrier of a candidate path; endpoints are pinned."""

    horizon: float
    nodes: np.ndarray  # (N+1, d)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[0] < 2:
            raise ValueError("nodes must be an (N+1, d) array with N >= 1")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "nodes", nodes)

    @property
    def n_segments(self):
        return self.nodes.shape[0] - 1

    @property
    def h(self):
        return self.horizon / self.n_segments

    @staticmethod
    def straight_line(source, target, horizon, n_segments):
        s = np.linspace(0.0, 1.0, n_segments + 1)[:, None]
        nodes = np.asarray(source, dtype=float)[None, :] * (1 - s) \
            + np.asarray(target, dtype=float)[None, :] * s
        return PathDiscretization(horizon=horizon, nodes=nodes)


@dataclass(frozen=True)
class Diagnostics:
    iterations: int = 0
    grad_norm: float = 0.0
    horizon: float = 0.0
    converged: bool = True
    clamped_nodes: int = 0
    residual: float = 0.0
    starts: int = 0


@dataclass(frozen=True)
class QuasiPotentialValue:
    value: float
    backend: str
    path: PathDiscretization | None = None
    diagnostics: Diagnostics = field(default_factory=Diagnostics)


# ---------------------------------------------------------------------------
# the discretized action


def _segment_costs(field_obj, left, right, h):
    """Midpoint-rule cost of each segment, vectorized over segments."""
    mid = field_obj.domain.clamp(0.5 * (left + right))
    vel = (right - left) / h
    r = vel - field_obj.b_at(mid)
    a = field_obj.a_at(mid)
    d = r.shape[1]
    if d == 1:
        a00 = a[:, 0, 0]
        if np.any(a00 == 0):
            i = int(np.argmax(a00 == 0))
            raise ActionError(f"singular diffusion coefficient at {mid[i]}")
        return 0.5 * h * r[:, 0] ** 2 / a00
    try:
        sol = np.linalg.solve(a, r[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError as exc:
        raise ActionError(f"singular diffusion matrix along the path: {exc}") from exc
    return 0.5 * h * np.einsum("md,md->m", r, sol)


def action(path: PathDiscretization, coeffs) -> float:
    """Midpoint-rule action of a discretized path under a coefficient field."""
    return float(np.sum(_segment_costs(coeffs, path.nodes[:-1], path.nodes[1:], path.h)))


# ---------------------------------------------------------------------------
# closed-form 1d backends


def _b_zeros_1d(field_obj, lo, hi, n_scan=512):
    xs = np.linspace(lo, hi, n_scan)[:, None]
    bv = field_obj.b_at(xs)[:, 0]
    zeros = []
    for i in range(len(xs) - 1):
        if bv[i] == 0.0:
            zeros.append(float(xs[i, 0]))
        elif bv[i] * bv[i + 1] < 0:
            z = brentq(lambda y: float(field_obj.b_at(np.array([[y]]))[0, 0]),
                       float(xs[i, 0]), float(xs[i + 1, 0]), xtol=1e-14)
            zeros.append(z)
    if bv[-1] == 0.0:
        zeros.append(float(xs[-1, 0]))
    return zeros


def _integral_w(field_obj, x_from, x_to, abs_tol):
    """-2 int b/a over [x_from, x_to], split at field breakpoints."""

    def integrand(y):
        p = np.array([[y]])
        return -2.0 * float(field_obj.b_at(p)[0, 0]) / float(field_obj.a_at(p)[0, 0, 0])

    cuts = sorted(p for p in field_obj.quad_breakpoints()
                  if min(x_from, x_to) < p < max(x_from, x_to))
    pieces = [x_from] + (cuts if x_from <= x_to else cuts[::-1]) + [x_to]
    total = 0.0
    for lo, hi in zip(pieces[:-1], pieces[1:]):
        val, _ = quad(integrand, lo, hi, epsabs=abs_tol, limit=400)
        total += val
    return total


def quasipotential_1d(spec: ProblemSpec, c: float, x: float,
                      abs_tol: float = 1e-10) -> QuasiPotentialValue:
    """Exact 1d value via quadrature of -2 b/a; requires single-well drift."""
    require_valid(spec)
    if spec.dimension != 1:
        raise ValueError("quasipotential_1d requires a one-dimensional problem")
    dom = spec.domain
    if not (dom.lo <= x <= dom.hi):
        raise ValueError(f"target {x} outside the closed domain")
    coeffs = FrozenCoefficients(spec, c)
    zeros = _b_zeros_1d(coeffs, dom.lo, dom.hi)
    x0 = float(spec.x0[0])
    if len(zeros) != 1 or abs(zeros[0] - x0) > 1e-6 * dom.diameter:
        raise ValueError(
            f"frozen drift must vanish only at the equilibrium; zeros found at {zeros}")
    h = 1e-7 * dom.diameter
    slope = (float(coeffs.b_at(np.array([[x0 + h]]))[0, 0])
             - float(coeffs.b_at(np.array([[x0 - h]]))[0, 0])) / (2 * h)
    if slope >= 0:
        raise ValueError("frozen drift must be decreasing through its zero")
    value = _integral_w(coeffs, x0, x, abs_tol)
    if value < -1e-9:
        raise ActionError(f"negative quasi-potential value {value}")
    return QuasiPotentialValue(value=max(value, 0.0), backend="closed1d",
                               diagnostics=Diagnostics(horizon=np.inf))


def quasipotential_1d_running(field_obj, source: float, target: float,
                              abs_tol: float = 1e-10) -> float:
    """1d quasi-potential for general drift: largest running ascent of
    W(x) = -2 int_source^x b/a on the way to the target.

    The maximum of W over [source, target] is attained at a drift zero or at
    the target, so only those candidates are evaluated.
    """
    if source == target:
        return 0.0
    lo, hi = min(source, target), max(source, target)
    candidates = [z for z in _b_zeros_1d(field_obj, lo, hi) if lo < z < hi]
    candidates.append(target)
    best = 0.0
    for cand in candidates:
        w = _integral_w(field_obj, source, cand, abs_tol)
        best = max(best, w)
    return best


# ---------------------------------------------------------------------------
# Gaussian / Lyapunov backend


def quasipotential_gaussian(A, a, x, residual_tol: float = 1e-8) -> QuasiPotentialValue:
    """Quadratic quasi-potential for dX = A X dt + noise with covariance a.

    Solves the continuous Lyapunov equation A B + B A^T + a = 0 (the dense
    direct equivalent of the stationary-covariance integral) and returns
    1/2 x^T B^{-1} x.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    eigs = np.linalg.eigvals(A)
    if np.any(eigs.real >= 0):
        raise UnstableDriftError(f"drift matrix must be Hurwitz; eigenvalues {eigs}")
    if not np.allclose(a, a.T, atol=1e-12):
        raise ValueError("diffusion matrix must be symmetric")
    B = solve_continuous_lyapunov(A, -a)
    residual = float(np.abs(A @ B + B @ A.T + a).max())
    if residual > residual_tol:
        raise ActionError(f"Lyapunov residual {residual} exceeds {residual_tol}")
    try:
        y = np.linalg.solve(B, x)
    except np.linalg.LinAlgError as exc:
        raise ActionError(f"singular stationary covariance: {exc}") from exc
    value = 0.5 * float(x @ y)
    return QuasiPotentialValue(value=value, backend="gaussian",
                               diagnostics=Diagnostics(horizon=np.inf, residual=residual))


def lyapunov_integral_check(A, a, horizon: float = 40.0, n: int = 4000):
    """Coarse quadrature of int_0^T e^{At} a e^{A^T t} dt as a cross-check."""
    from scipy.linalg import expm

    A = np.atleast_2d(np.asarray(A, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    ts = np.linspace(0.0, horizon, n + 1)
    dt = ts[1] - ts[0]
    total = np.zeros_like(a)
    for i, t in enumerate(ts):
        e = expm(A * t)
        term = e @ a @ e.T
        w = 0.5 if i in (0, n) else 1.0
        total += w * term * dt
    return total


def detect_linear_gaussian(spec: ProblemSpec, c: float, rel_tol: float = 1e-9):
    """Return (A, a0) when the frozen field is linear drift with constant
    diffusion about the first equilibrium, else None."""
    coeffs = FrozenCoefficients(spec, c)
    d = spec.dimension
    x0 = spec.x0
    dom = spec.domain
    # constant diffusion?
    probes = dom.interior_lattice(5 if d > 1 else 17)
    a_vals = coeffs.a_at(probes)
    a0 = coeffs.a_at(x0[None, :])[0]
    scale = max(1.0, float(np.abs(a0).max()))
    if float(np.abs(a_vals - a0[None, :, :]).max()) > rel_tol * scale:
        return None
    # linear drift?  central differences are exact for affine fields
    h = 1e-5 * dom.diameter
    A = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        A[:, j] = (coeffs.b_at((x0 + e)[None, :])[0] - coeffs.b_at((x0 - e)[None, :])[0]) / (2 * h)
    pred = (probes - x0[None, :]) @ A.T
    actual = coeffs.b_at(probes)
    b_scale = max(1.0, float(np.abs(actual).max()))
    if float(np.abs(pred - actual).max()) > 1e-7 * b_scale:
        return None
    if np.any(np.linalg.eigvals(A).real >= 0):
        return None
    return A, a0


# ---------------------------------------------------------------------------
# direct path-space minimization


@dataclass(frozen=True)
class NumericOpts:
    n_nodes: int = 96
    t_min: float = 2.0
    n_horizons: int = 4
    n_starts: int = 3
    seed: int = 0
    max_iters: int = 400
    grad_tol: float = 1e-7
    fd_step_rel: float = 1e-6
    perturb_rel: float = 0.08
    armijo: float = 1e-4
    max_backtracks: int = 40
    refine_passes: int = 1

    def horizons(self):
        return tuple(self.t_min * 2.0 ** j for j in range(self.n_horizons))


def _action_of_nodes(field_obj, nodes, h):
    return float(np.sum(_segment_costs(field_obj, nodes[:-1], nodes[1:], h)))


def _gradient(field_obj, nodes, h, delta):
    """Central-difference gradient w.r.t. interior node coordinates.

    A node perturbation only changes its two adjacent segments, so each
    coordinate needs four vectorized segment sweeps rather than full action
    re-evaluations.
    """
    n_seg, d = nodes.shape[0] - 1, nodes.shape[1]
    grad = np.zeros_like(nodes)
    left, right = nodes[:-1], nodes[1:]
    for k in range(d):
        e = np.zeros(d)
        e[k] = delta
        c_lp = _segment_costs(field_obj, left + e, right, h)
        c_lm = _segment_costs(field_obj, left - e, right, h)
        c_rp = _segment_costs(field_obj, left, right + e, h)
        c_rm = _segment_costs(field_obj, left, right - e, h)
        dleft = (c_lp - c_lm) / (2 * delta)   # d cost_m / d node_m coord k
        dright = (c_rp - c_rm) / (2 * delta)  # d cost_m / d node_{m+1} coord k
        grad[:-1, k] += dleft
        grad[1:, k] += dright
    grad[0] = 0.0
    grad[-1] = 0.0
    return grad


def _descend(field_obj, nodes, horizon, opts):
    """Projected gradient descent with backtracking; BB-seeded step sizes."""
    h = horizon / (nodes.shape[0] - 1)
    delta = opts.fd_step_rel * field_obj.domain.diameter
    dom = field_obj.domain
    f = _action_of_nodes(field_obj, nodes, h)
    grad = _gradient(field_obj, nodes, h, delta)
    step = 1.0 / max(1e-12, float(np.abs(grad).max()))
    iters = 0
    for iters in range(1, opts.max_iters + 1):
        gnorm2 = float(np.sum(grad * grad))
        if np.sqrt(gnorm2) <= opts.grad_tol * max(1.0, abs(f)) * np.sqrt(grad.size):
            break
        t = step
        accepted = False
        for _ in range(opts.max_backtracks):
            trial = nodes - t * grad
            trial[0], trial[-1] = nodes[0], nodes[-1]
            trial = dom.clamp(trial)
            f_trial = _action_of_nodes(field_obj, trial, h)
            if f_trial <= f - opts.armijo * t * gnorm2:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        new_grad = _gradient(field_obj, trial, h, delta)
        s = (trial - nodes).ravel()
        y = (new_grad - grad).ravel()
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 1e-16 else t * 2.0
        nodes, f, grad = trial, f_trial, new_grad
    gnorm = float(np.linalg.norm(grad))
    converged = gnorm <= opts.grad_tol * max(1.0, abs(f)) * np.sqrt(grad.size) * 10
    return nodes, f, gnorm, iters, converged


def _initial_paths(source, target, horizon, opts, dom, rng):
    base = PathDiscretization.straight_line(source, target, horizon, opts.n_nodes).nodes
    yield base
    n1 = base.shape[0]
    s = np.linspace(0.0, 1.0, n1)[:, None]
    amp = opts.perturb_rel * dom.diameter
    for _ in range(opts.n_starts - 1):
        bump = np.zeros_like(base)
        for k in range(1, 4):
            coeff = rng.normal(size=(1, base.shape[1])) * amp / k
            bump += np.sin(np.pi * k * s) * coeff
        yield dom.clamp(base + bump)


def minimize_action_path(field_obj, source, target, opts: NumericOpts = NumericOpts()):
    """Minimize the discretized action over horizons and starts; deterministic
    given ``opts.seed``."""
    source = np.atleast_1d(np.asarray(source, dtype=float))
    target = np.atleast_1d(np.asarray(target, dtype=float))
    if np.array_equal(source, target):
        nodes = np.repeat(source[None, :], 2, axis=0)
        return QuasiPotentialValue(
            value=0.0, backend="numeric",
            path=PathDiscretization(horizon=opts.t_min, nodes=nodes),
            diagnostics=Diagnostics(horizon=opts.t_min, converged=True))
    best = None
    total_iters = 0
    n_starts = 0
    for horizon in opts.horizons():
        rng = np.random.default_rng(opts.seed)
        for nodes0 in _initial_paths(source, target, horizon, opts, field_obj.domain, rng):
            nodes, f, gnorm, iters, conv = _descend(field_obj, nodes0.copy(), horizon, opts)
            total_iters += iters
            n_starts += 1
            if best is None or f < best[1]:
                best = (nodes, f, gnorm, horizon, conv)
    nodes, f, gnorm, horizon, conv = best
    for _ in range(opts.refine_passes):
        fine = _interp_refine(nodes)
        fine_opts = replace(opts, max_iters=opts.max_iters)
        nodes2, f2, gnorm2, iters2, conv2 = _descend(field_obj, fine, horizon, fine_opts)
        total_iters += iters2
        if f2 <= f:
            nodes, f, gnorm, conv = nodes2, f2, gnorm2, conv2
    on_boundary = int(np.sum(~field_obj.domain.contains(nodes, tol=-1e-12)))
    path = PathDiscretization(horizon=horizon, nodes=nodes)
    return QuasiPotentialValue(
        value=f, backend="numeric", path=path,
        diagnostics=Diagnostics(iterations=total_iters, grad_norm=gnorm, horizon=horizon,
                                converged=conv, clamped_nodes=on_boundary, starts=n_starts))


def _interp_refine(nodes):
    n1 = nodes.shape[0]
    s = np.linspace(0.0, 1.0, n1)
    s2 = np.linspace(0.0, 1.0, 2 * (n1 - 1) + 1)
    out = np.empty((len(s2), nodes.shape[1]))
    for k in range(nodes.shape[1]):
        out[:, k] = np.interp(s2, s, nodes[:, k])
    return out


def quasipotential_numeric(spec: ProblemSpec, c: float, source, target,
                           opts: NumericOpts = NumericOpts()) -> QuasiPotentialValue:
    require_valid(spec)
    return minimize_action_path(FrozenCoefficients(spec, c), source, target, opts)


# ---------------------------------------------------------------------------
# boundary minimization


@dataclass(frozen=True)
class BoundaryMinimum:
    M: float
    argmins: tuple          # tuple of d-vectors (refined cluster representatives)
    values: tuple           # V at each argmin
    degenerate: bool
    backend: str
    n_tied_lattice: int = 0


@dataclass(frozen=True)
class BoundaryOpts:
    backend: str = "auto"   # auto | closed1d | gaussian | numeric
    lattice: int = 256
    tie_tol_abs: float = 1e-6
    numeric: NumericOpts = field(default_factory=NumericOpts)


def _boundary_value_fn(spec, c, opts):
    """Pick a backend; return (name, V(points)->array, refine(theta)->value or None)."""
    backend = opts.backend
    lin = detect_linear_gaussian(spec, c) if backend in ("auto", "gaussian") else None
    if backend == "gaussian" and lin is None:
        raise ValueError("gaussian backend requested but the frozen field is not "
                         "linear with constant diffusion")
    if backend in ("auto", "closed1d") and spec.dimension == 1:
        coeffs = FrozenCoefficients(spec, c)
        x0 = float(spec.x0[0])

        def v1(pts):
            return np.array([quasipotential_1d_running(coeffs, x0, float(p[0]))
                             for p in np.atleast_2d(pts)])

        return "closed1d", v1
    if lin is not None:
        A, a0 = lin
        B = solve_continuous_lyapunov(A, -a0)
        Binv = np.linalg.inv(B)
        x0 = spec.x0

        def vg(pts):
            y = np.atleast_2d(pts) - x0[None, :]
            return 0.5 * np.einsum("mi,ij,mj->m", y, Binv, y)

        return "gaussian", vg
    if backend == "closed1d":
        raise ValueError("closed1d backend requires a one-dimensional problem")

    numeric_opts = opts.numeric

    def vn(pts):
        coeffs = FrozenCoefficients(spec, c)
        return np.array([minimize_action_path(coeffs, spec.x0, p, numeric_opts).value
                         for p in np.atleast_2d(pts)])

    return "numeric", vn


def min_boundary_quasipotential(spec: ProblemSpec, c: float,
                                opts: BoundaryOpts = BoundaryOpts()) -> BoundaryMinimum:
    """Global minimum of V(x0, .) over the boundary with tie detection.

    Evaluates a boundary lattice, refines each local minimum cluster by a
    bounded scalar search over the boundary parameter, and reports every
    cluster within tie tolerance of the global minimum.  More than two tied
    clusters (or a tie smeared over a large boundary fraction) is flagged
    degenerate rather than resolved.
    """
    require_valid(spec)
    dom = spec.domain
    n_lat = 2 if spec.dimension == 1 else (opts.lattice if opts.backend != "numeric"
                                           else min(opts.lattice, 32))
    pts = dom.boundary_lattice(n_lat)
    backend, vfn = _boundary_value_fn(spec, c, opts)
    vals = np.asarray(vfn(pts), dtype=float)
    m0 = float(np.min(vals))
    tie_tol = opts.tie_tol_abs * max(1.0, abs(m0))
    tied = np.where(vals <= m0 + tie_tol)[0]

    clusters = _cluster_boundary(dom, pts, tied)
    reps, rep_vals = [], []
    for idx_cluster in clusters:
        best_i = idx_cluster[int(np.argmin(vals[idx_cluster]))]
        point, value = _refine_boundary_min(dom, vfn, pts, best_i, n_lat)
        reps.append(point)
        rep_vals.append(value)
    order = np.argsort(rep_vals)
    reps = [reps[i] for i in order]
    rep_vals = [rep_vals[i] for i in order]
    m_ref = rep_vals[0]
    keep = [i for i, v in enumerate(rep_vals) if v <= m_ref + tie_tol * max(1.0, abs(m_ref))]
    reps = [reps[i] for i in keep]
    rep_vals = [rep_vals[i] for i in keep]

    degenerate = len(reps) > 2 or len(tied) > max(4, 0.25 * len(pts))
    if degenerate and len(tied) > len(reps):
        reps = [pts[i] for i in tied]
        rep_vals = [float(vals[i]) for i in tied]
    return BoundaryMinimum(
        M=float(min(rep_vals)),
        argmins=tuple(np.asarray(r, dtype=float) for r in reps),
        values=tuple(float(v) for v in rep_vals),
        degenerate=bool(degenerate),
        backend=backend,
        n_tied_lattice=int(len(tied)),
    )


def _cluster_boundary(dom, pts, tied_idx):
    if len(tied_idx) == 0:
        return []
    if isinstance(dom, Interval):
        return [[i] for i in tied_idx]
    # group indices whose boundary distance is within 3 lattice spacings
    if isinstance(dom, Ball):
        spacing = 2 * np.pi * dom.radius / len(pts)
    else:
        spacing = dom.diameter / np.sqrt(len(pts))
    clusters = []
    remaining = list(tied_idx)
    while remaining:
        seed = remaining.pop(0)
        group = [seed]
        changed = True
        while changed:
            changed = False
            for j in list(remaining):
                if any(dom.boundary_distance(pts[j], pts[g]) <= 3.0 * spacing for g in group):
                    group.append(j)
                    remaining.remove(j)
                    changed = True
        clusters.append(group)
    return clusters


def _refine_boundary_min(dom, vfn, pts, i, n_lat):
    point = pts[i]
    value = float(vfn(point[None, :])[0])
    if isinstance(dom, Ball) and dom.dimension == 2:
        c = np.asarray(dom.center)
        v = point - c
        th0 = float(np.arctan2(v[1], v[0]))
        w = 2 * np.pi / n_lat

        def fn(th):
            return float(vfn(dom.boundary_point([th]))[0])

        res = minimize_scalar(fn, bounds=(th0 - 1.5 * w, th0 + 1.5 * w), method="bounded",
                              options={"xatol": 1e-10})
        if res.fun < value:
            return dom.boundary_point([float(res.x)])[0], float(res.fun)
    return point, value
