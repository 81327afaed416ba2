"""Direct implicit solver for the small-diffusion quasi-linear problem.

Backward-Euler time stepping with Picard lagging of the level-dependent
coefficients, second-order centered diffusion and first-order upwind drift
(an M-matrix, so the discrete maximum principle holds step by step), and a
geometrically growing time step once the solution is quasi-stationary --
the only way to reach horizons of order exp(lambda/eps^2).

d=1 on intervals is the primary configuration; d=2 is supported on boxes
with diagonal diffusion via alternating-direction sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .problem import Box, Interval, ProblemSpec, g_range, require_valid

__all__ = ["PdeOpts", "PdeSolution", "PicardError", "MaxPrincipleError",
           "solve_pde", "extract_center_trace"]


class PicardError(ArithmeticError):
    pass


class MaxPrincipleError(ArithmeticError):
    pass


@dataclass(frozen=True)
class PdeOpts:
    mesh: int = 801
    dt0: float = 1e-3
    growth: float = 1.05
    picard_tol: float = 1e-10
    picard_cap: int = 50
    max_halvings: int = 10
    change_cap_rel: float = 0.01     # per-step |du| budget, fraction of data range
    quasi_threshold: float = 1e-6    # |du|/dt below which the step may grow
    max_principle_tol: float = 1e-8
    store_every: int = 1


@dataclass
class PdeSolution:
    spec: ProblemSpec
    eps: float
    mesh: np.ndarray            # (m,) for d=1; (m1, m2) grids for d=2 via meshes
    times: np.ndarray           # accepted step times (snapshot schedule)
    u: np.ndarray               # (n_times, m) or (n_times, m1, m2)
    g_min: float
    g_max: float
    steps: int
    picard_iterations: int
    max_picard_per_step: int
    halvings: int
    max_principle_ok: bool = True
    meshes: tuple = ()

    def u_at(self, t, x):
        """Bilinear interpolation in (log-time, space); d=1 only."""
        s = np.log1p(np.maximum(np.asarray(t, dtype=float), 0.0))
        s_grid = np.log1p(self.times)
        i = np.clip(np.searchsorted(s_grid, s) - 1, 0, len(s_grid) - 2)
        w = np.where(s_grid[i + 1] > s_grid[i],
                     (s - s_grid[i]) / (s_grid[i + 1] - s_grid[i]), 0.0)
        w = np.clip(w, 0.0, 1.0)
        row_lo = self._interp_space(self.u[i], x)
        row_hi = self._interp_space(self.u[i + 1], x)
        return (1 - w) * row_lo + w * row_hi

    def _interp_space(self, row, x):
        if row.ndim == 1:
            return np.interp(x, self.mesh, row)
        raise NotImplementedError("space interpolation is 1d only")

    def feedback_tables(self):
        """(log1p times, mesh, u) arrays for jitted coefficient lookup."""
        return np.log1p(self.times), np.asarray(self.mesh, dtype=float), \
            np.asarray(self.u, dtype=float)


def solve_pde(spec: ProblemSpec, eps: float, horizon: float,
              opts: PdeOpts = PdeOpts()) -> PdeSolution:
    require_valid(spec)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if spec.dimension == 1:
        return _solve_1d(spec, eps, horizon, opts)
    if spec.dimension == 2 and isinstance(spec.domain, Box):
        return _solve_2d_box(spec, eps, horizon, opts)
    raise NotImplementedError("PDE solves cover d=1 intervals and d=2 boxes")


def _solve_1d(spec, eps, horizon, opts):
    dom = spec.domain
    assert isinstance(dom, Interval)
    m = opts.mesh
    x = np.linspace(dom.lo, dom.hi, m)
    h = x[1] - x[0]
    pts = x[:, None]
    g = spec.eval_g(pts)
    gr = g_range(spec)
    rng_scale = max(gr.g_max - gr.g_min, 1.0)
    u = g.copy()

    times = [0.0]
    frames = [u.copy()]
    t = 0.0
    dt = opts.dt0
    steps = 0
    picard_total = 0
    picard_max = 0
    halvings_total = 0
    change_cap = opts.change_cap_rel * rng_scale

    while t < horizon:
        dt = min(dt, max(horizon - t, 1e-15))
        accepted = False
        for _ in range(opts.max_halvings + 1):
            u_new, iters, converged = _implicit_step_1d(spec, eps, x, h, u, g, dt, opts)
            if converged and float(np.abs(u_new - u).max()) <= max(change_cap,
                                                                   10 * opts.picard_tol):
                accepted = True
                break
            dt *= 0.5
            halvings_total += 1
        if not accepted:
            raise PicardError(f"step at t={t} failed after {opts.max_halvings} halvings")
        lo_ok = u_new.min() >= gr.g_min - opts.max_principle_tol
        hi_ok = u_new.max() <= gr.g_max + opts.max_principle_tol
        if not (lo_ok and hi_ok):
            raise MaxPrincipleError(
                f"discrete maximum principle violated at t={t + dt}: range "
                f"[{u_new.min()}, {u_new.max()}] vs data [{gr.g_min}, {gr.g_max}]")
        change = float(np.abs(u_new - u).max())
        t += dt
        u = u_new
        steps += 1
        picard_total += iters
        picard_max = max(picard_max, iters)
        if steps % opts.store_every == 0 or t >= horizon:
            times.append(t)
            frames.append(u.copy())
        if change / dt <= opts.quasi_threshold * rng_scale or change <= 0.2 * change_cap:
            dt *= opts.growth
    return PdeSolution(spec=spec, eps=eps, mesh=x, times=np.asarray(times),
                       u=np.asarray(frames), g_min=gr.g_min, g_max=gr.g_max,
                       steps=steps, picard_iterations=picard_total,
                       max_picard_per_step=picard_max, halvings=halvings_total)


def _implicit_step_1d(spec, eps, x, h, u_old, g, dt, opts):
    m = len(x)
    pts = x[:, None]
    u_lag = u_old.copy()
    scale = max(1.0, float(np.abs(u_old).max()))
    for it in range(1, opts.picard_cap + 1):
        a = spec.eval_a(pts, u_lag)[:, 0, 0]
        b = spec.eval_b(pts, u_lag, eps=eps)[:, 0]
        diff = 0.5 * eps * eps * a / (h * h)
        bp = np.maximum(b, 0.0) / h
        bm = np.maximum(-b, 0.0) / h
        lower = -dt * (diff + bm)
        upper = -dt * (diff + bp)
        diag = 1.0 + dt * (2.0 * diff + bp + bm)
        ab = np.zeros((3, m))
        ab[0, 1:] = upper[:-1]
        ab[1, :] = diag
        ab[2, :-1] = lower[1:]
        rhs = u_old.copy()
        # Dirichlet rows
        ab[1, 0] = 1.0
        ab[0, 1] = 0.0
        rhs[0] = g[0]
        ab[1, -1] = 1.0
        ab[2, -2] = 0.0
        rhs[-1] = g[-1]
        u_next = solve_banded((1, 1), ab, rhs)
        if float(np.abs(u_next - u_lag).max()) <= opts.picard_tol * scale:
            return u_next, it, True
        u_lag = u_next
    return u_lag, opts.picard_cap, False


def _solve_2d_box(spec, eps, horizon, opts):
    dom = spec.domain
    m = max(17, int(round(np.sqrt(opts.mesh))))
    xs = np.linspace(dom.lower[0], dom.upper[0], m)
    ys = np.linspace(dom.lower[1], dom.upper[1], m)
    hx = xs[1] - xs[0]
    hy = ys[1] - ys[0]
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    # diagonal diffusion only: the ADI sweeps have no mixed-derivative term
    probe = spec.eval_a(pts[:: max(1, len(pts) // 64)], 0.0)
    if np.abs(probe[:, 0, 1]).max() > 1e-12 or np.abs(probe[:, 1, 0]).max() > 1e-12:
        raise NotImplementedError("2d solves require a diagonal diffusion matrix")
    g = spec.eval_g(pts).reshape(m, m)
    gr = g_range(spec)
    rng_scale = max(gr.g_max - gr.g_min, 1.0)
    boundary = np.zeros((m, m), dtype=bool)
    boundary[0, :] = boundary[-1, :] = True
    boundary[:, 0] = boundary[:, -1] = True
    u = g.copy()
    times = [0.0]
    frames = [u.copy()]
    t = 0.0
    dt = opts.dt0
    steps = picard_total = picard_max = halvings_total = 0
    change_cap = opts.change_cap_rel * rng_scale
    while t < horizon:
        dt = min(dt, max(horizon - t, 1e-15))
        accepted = False
        for _ in range(opts.max_halvings + 1):
            u_new, iters, converged = _adi_step(spec, eps, pts, m, hx, hy, u, g,
                                                boundary, dt, opts)
            if converged and float(np.abs(u_new - u).max()) <= max(change_cap,
                                                                   10 * opts.picard_tol):
                accepted = True
                break
            dt *= 0.5
            halvings_total += 1
        if not accepted:
            raise PicardError(f"2d step at t={t} failed after {opts.max_halvings} halvings")
        if u_new.min() < gr.g_min - opts.max_principle_tol or \
                u_new.max() > gr.g_max + opts.max_principle_tol:
            raise MaxPrincipleError(f"maximum principle violated at t={t + dt}")
        change = float(np.abs(u_new - u).max())
        t += dt
        u = u_new
        steps += 1
        picard_total += iters
        picard_max = max(picard_max, iters)
        times.append(t)
        frames.append(u.copy())
        if change / dt <= opts.quasi_threshold * rng_scale or change <= 0.2 * change_cap:
            dt *= opts.growth
    return PdeSolution(spec=spec, eps=eps, mesh=pts, times=np.asarray(times),
                       u=np.asarray(frames), g_min=gr.g_min, g_max=gr.g_max,
                       steps=steps, picard_iterations=picard_total,
                       max_picard_per_step=picard_max, halvings=halvings_total,
                       meshes=(xs, ys))


def _tridiag_sweep(diff, bp, bm, u_rhs, g_line, dt):
    m = len(u_rhs)
    lower = -dt * (diff + bm)
    upper = -dt * (diff + bp)
    diag = 1.0 + dt * (2.0 * diff + bp + bm)
    ab = np.zeros((3, m))
    ab[0, 1:] = upper[:-1]
    ab[1, :] = diag
    ab[2, :-1] = lower[1:]
    rhs = u_rhs.copy()
    ab[1, 0] = 1.0
    ab[0, 1] = 0.0
    rhs[0] = g_line[0]
    ab[1, -1] = 1.0
    ab[2, -2] = 0.0
    rhs[-1] = g_line[-1]
    return solve_banded((1, 1), ab, rhs)


def _adi_step(spec, eps, pts, m, hx, hy, u_old, g, boundary, dt, opts):
    u_lag = u_old.copy()
    scale = max(1.0, float(np.abs(u_old).max()))
    for it in range(1, opts.picard_cap + 1):
        a = spec.eval_a(pts, u_lag.ravel())
        b = spec.eval_b(pts, u_lag.ravel(), eps=eps)
        a11 = a[:, 0, 0].reshape(m, m)
        a22 = a[:, 1, 1].reshape(m, m)
        b1 = b[:, 0].reshape(m, m)
        b2 = b[:, 1].reshape(m, m)
        half = 0.5 * dt
        u_half = np.empty_like(u_old)
        for j in range(m):
            diff = 0.5 * eps * eps * a11[:, j] / (hx * hx)
            bp = np.maximum(b1[:, j], 0.0) / hx
            bm = np.maximum(-b1[:, j], 0.0) / hx
            u_half[:, j] = _tridiag_sweep(diff, bp, bm, u_old[:, j], g[:, j], half)
        u_next = np.empty_like(u_old)
        for i in range(m):
            diff = 0.5 * eps * eps * a22[i, :] / (hy * hy)
            bp = np.maximum(b2[i, :], 0.0) / hy
            bm = np.maximum(-b2[i, :], 0.0) / hy
            u_next[i, :] = _tridiag_sweep(diff, bp, bm, u_half[i, :], g[i, :], half)
        u_next[boundary] = g[boundary]
        if float(np.abs(u_next - u_lag).max()) <= opts.picard_tol * scale:
            return u_next, it, True
        u_lag = u_next
    return u_lag, opts.picard_cap, False


def extract_center_trace(sol: PdeSolution, probes=None):
    """(lambda_eff, values) with lambda_eff = eps^2 ln t, at x0 and any probes."""
    spec = sol.spec
    if probes is None:
        probes = []
    targets = [spec.x0] + [np.atleast_1d(np.asarray(p, dtype=float)) for p in probes]
    pos = np.asarray(sol.times) > 0
    ts = sol.times[pos]
    lam = sol.eps ** 2 * np.log(ts)
    if sol.spec.dimension == 1:
        cols = [np.array([np.interp(float(p[0]), sol.mesh, row) for row in sol.u[pos]])
                for p in targets]
        return lam, np.stack(cols, axis=1)
    xs, ys = sol.meshes
    cols = []
    for p in targets:
        i = int(np.clip(np.searchsorted(xs, p[0]) - 1, 0, len(xs) - 2))
        j = int(np.clip(np.searchsorted(ys, p[1]) - 1, 0, len(ys) - 2))
        tx = (p[0] - xs[i]) / (xs[i + 1] - xs[i])
        ty = (p[1] - ys[j]) / (ys[j + 1] - ys[j])
        vals = ((1 - tx) * (1 - ty) * sol.u[pos, i, j]
                + tx * (1 - ty) * sol.u[pos, i + 1, j]
                + (1 - tx) * ty * sol.u[pos, i, j + 1]
                + tx * ty * sol.u[pos, i + 1, j + 1])
        cols.append(vals)
    return lam, np.stack(cols, axis=1)
