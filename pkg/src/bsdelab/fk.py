"""Finite-difference solvers for the semilinear PDEs and the cross-validation
of u(t, x) against BSDE values along the associated diffusion.

The FD path shares no discretization with the probabilistic solver: it is the
independent oracle that the regression machinery is checked against.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .core import CoefficientSpec, build_grid
from .errors import (ConfigurationError, DiscretizationError,
                     FDNonConvergenceError)
from .sde import DriftDiffusionSpec, euler_maruyama, first_exit_time, simulate_brownian
from .solver import GeneratorSpec, SolverConfig, picard_solve

_SWEEP_TOL = 1e-8
_MAX_SWEEPS = 80


def _as_xfun(f):
    if callable(f):
        return f
    c = float(f)
    return lambda *args: np.full_like(np.asarray(args[-1], dtype=float), c)


@dataclass(frozen=True)
class ParabolicProblem:
    """Terminal-value problem u_t + (1/2) sigma^2 u_xx + b u_x + g = 0.

    ``b`` and ``sigma`` are functions of (t, x) (scalars allowed), ``g`` maps
    (t, x, u, w) with w the diffusion-scaled gradient, ``h`` is the terminal
    datum.  ``m`` and ``n`` are the declared monotonicity/Lipschitz envelopes
    of g in (u, w); with ``bound`` set, m + theta n^2 / (2 [1^(p-1)]) <= bound
    is validated on the FD grid.
    """

    b: object
    sigma: object
    g: object
    h: object
    horizon: float
    x_min: float
    x_max: float
    m: object = 0.0
    n: object = 0.0
    bound: float | None = None
    p: float = 2.0
    theta: float = 2.0

    def validate_envelope(self, xs, times):
        if self.bound is None:
            return
        mfun, nfun = _as_xfun(self.m), _as_xfun(self.n)
        denom = 2.0 * min(1.0, self.p - 1.0)
        for t in times:
            combo = mfun(t, xs) + self.theta * nfun(t, xs) ** 2 / denom
            if np.max(combo) > self.bound + 1e-12:
                raise ConfigurationError(
                    f"envelope combination exceeds bound {self.bound} at t={t}")

    def coefficient_spec(self) -> CoefficientSpec:
        mfun, nfun = _as_xfun(self.m), _as_xfun(self.n)
        denom = 2.0 * min(1.0, self.p - 1.0)

        def rho(t, states):
            x = states[:, 0]
            return mfun(t, x) + self.theta * nfun(t, x) ** 2 / denom

        return CoefficientSpec(self.p, self.theta, rho,
                               lambda t, s: mfun(t, s[:, 0]),
                               lambda t, s: nfun(t, s[:, 0]))


@dataclass(frozen=True)
class EllipticProblem:
    """Dirichlet problem (1/2) sigma^2 u'' + b u' + g(x, u, w) = 0 on (a, b).

    ``h`` supplies the boundary data (as a function so the Euler overshoot can
    evaluate it just outside the interval); ``cap`` bounds the exit time.
    ``margin`` is the exponential-moment margin constant: when set,
    p * max(m + theta n^2/(2[1^(p-1)])) < margin is validated on the grid.
    """

    a: float
    b_right: float
    drift: object
    sigma: object
    g: object
    h: object
    cap: float
    m: object = 0.0
    n: object = 0.0
    margin: float | None = None
    p: float = 2.0
    theta: float = 2.0

    def validate_envelope(self, xs):
        if self.margin is None:
            return
        mfun, nfun = _as_xfun(self.m), _as_xfun(self.n)
        denom = 2.0 * min(1.0, self.p - 1.0)
        combo = self.p * np.max(mfun(xs) + self.theta * nfun(xs) ** 2 / denom)
        if combo >= self.margin:
            raise ConfigurationError(
                f"p * envelope max {combo:.6g} must stay below margin {self.margin}")

    def coefficient_spec(self) -> CoefficientSpec:
        mfun, nfun = _as_xfun(self.m), _as_xfun(self.n)
        denom = 2.0 * min(1.0, self.p - 1.0)

        def rho(t, states):
            x = states[:, 0]
            return mfun(x) + self.theta * nfun(x) ** 2 / denom

        return CoefficientSpec(self.p, self.theta, rho,
                               lambda t, s: mfun(s[:, 0]),
                               lambda t, s: nfun(s[:, 0]))


@dataclass(frozen=True)
class FDSolution:
    xs: np.ndarray
    values: np.ndarray          # (nt + 1, nx) parabolic, (nx,) elliptic
    times: np.ndarray | None = None
    scheme_weight: float | None = None

    def interpolate(self, t, x):
        if self.times is None:
            return float(np.interp(x, self.xs, self.values))
        row = np.searchsorted(self.times, t, side="right") - 1
        row = min(max(row, 0), len(self.times) - 2)
        t0, t1 = self.times[row], self.times[row + 1]
        w = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        u0 = np.interp(x, self.xs, self.values[row])
        u1 = np.interp(x, self.xs, self.values[row + 1])
        return float((1 - w) * u0 + w * u1)


def _gradient(u, dx):
    w = np.empty_like(u)
    w[1:-1] = (u[2:] - u[:-2]) / (2 * dx)
    w[0] = (u[1] - u[0]) / dx
    w[-1] = (u[-1] - u[-2]) / dx
    return w


def solve_parabolic_fd(problem: ParabolicProblem, nx: int, nt: int,
                       scheme_weight: float = 0.5) -> FDSolution:
    """Backward theta-scheme with the nonlinear term swept to tolerance.

    Artificial window boundary: zero second difference (linear extrapolation)
    at both edges.
    """
    if not 0.0 <= scheme_weight <= 1.0:
        raise ConfigurationError("scheme_weight must lie in [0, 1]")
    xs = np.linspace(problem.x_min, problem.x_max, nx)
    times = np.linspace(0.0, problem.horizon, nt + 1)
    dx = xs[1] - xs[0]
    dt = times[1] - times[0]
    bfun, sfun = _as_xfun(problem.b), _as_xfun(problem.sigma)
    gfun, hfun = problem.g, problem.h
    problem.validate_envelope(xs, times[:: max(1, nt // 8)])
    if scheme_weight < 0.5:
        peak = max(float(np.max(sfun(t, xs) ** 2)) for t in (0.0, problem.horizon))
        if peak * dt / dx ** 2 > 1.0 / (2.0 * (1.0 - 2.0 * scheme_weight)) + 1e-12:
            raise ConfigurationError("CFL violated for the explicit scheme weight")

    values = np.empty((nt + 1, nx))
    values[nt] = hfun(xs)

    def operator_rows(t):
        diff = 0.5 * sfun(t, xs) ** 2 / dx ** 2
        drift = bfun(t, xs) / (2 * dx)
        return diff - drift, -2 * diff, diff + drift  # sub, diag, sup

    for step in range(nt - 1, -1, -1):
        t_new, t_old = times[step], times[step + 1]
        u_old = values[step + 1]
        sub_o, diag_o, sup_o = operator_rows(t_old)
        explicit = u_old.copy()
        explicit[1:-1] += (1 - scheme_weight) * dt * (
            sub_o[1:-1] * u_old[:-2] + diag_o[1:-1] * u_old[1:-1] + sup_o[1:-1] * u_old[2:])
        g_old = gfun(t_old, xs, u_old, _gradient(u_old, dx) * sfun(t_old, xs))
        sub_n, diag_n, sup_n = operator_rows(t_new)

        # banded matrix for I - theta dt L, with extrapolation rows at edges
        ab = np.zeros((5, nx))
        ab[1, 2:] = -scheme_weight * dt * sup_n[1:-1]
        ab[2, 1:-1] = 1.0 - scheme_weight * dt * diag_n[1:-1]
        ab[3, :-2] = -scheme_weight * dt * sub_n[1:-1]
        ab[2, 0] = 1.0
        ab[1, 1] = -2.0
        ab[0, 2] = 1.0
        ab[2, -1] = 1.0
        ab[3, -2] = -2.0
        ab[4, -3] = 1.0

        u_iter = u_old.copy()
        for sweep in range(_MAX_SWEEPS):
            g_new = gfun(t_new, xs, u_iter, _gradient(u_iter, dx) * sfun(t_new, xs))
            rhs = explicit + dt * (scheme_weight * np.asarray(g_new, dtype=float)
                                   + (1 - scheme_weight) * np.asarray(g_old, dtype=float))
            rhs[0] = 0.0
            rhs[-1] = 0.0
            u_new = solve_banded((2, 2), ab, rhs)
            if not np.all(np.isfinite(u_new)):
                raise FDNonConvergenceError(f"nonlinear sweep diverged at step {step}")
            if np.max(np.abs(u_new - u_iter)) < _SWEEP_TOL:
                u_iter = u_new
                break
            u_iter = u_new
        else:
            raise FDNonConvergenceError(f"nonlinear sweep stalled at step {step}")
        values[step] = u_iter
    return FDSolution(xs, values, times, scheme_weight)


def solve_elliptic_fd(problem: EllipticProblem, nx: int, damping: float = 1.0) -> FDSolution:
    """Centered second-order scheme with Dirichlet rows pinned to the data and
    damped sweeps for the nonlinear term."""
    xs = np.linspace(problem.a, problem.b_right, nx)
    dx = xs[1] - xs[0]
    problem.validate_envelope(xs)
    bfun, sfun = _as_xfun(problem.drift), _as_xfun(problem.sigma)
    sig2 = sfun(xs) ** 2
    if np.min(sig2) <= 0:
        raise ConfigurationError("uniform ellipticity requires sigma^2 > 0 on the closure")
    diff = 0.5 * sig2 / dx ** 2
    drift = bfun(xs) / (2 * dx)

    ab = np.zeros((3, nx))
    ab[0, 2:] = (diff + drift)[1:-1]
    ab[1, 1:-1] = -2 * diff[1:-1]
    ab[2, :-2] = (diff - drift)[1:-1]
    ab[1, 0] = 1.0
    ab[1, -1] = 1.0

    boundary_left = float(problem.h(np.array([problem.a]))[0])
    boundary_right = float(problem.h(np.array([problem.b_right]))[0])
    u = np.linspace(boundary_left, boundary_right, nx)
    for sweep in range(200):
        w = _gradient(u, dx) * sfun(xs)
        rhs = -np.asarray(problem.g(xs, u, w), dtype=float)
        rhs[0] = boundary_left
        rhs[-1] = boundary_right
        try:
            u_new = solve_banded((1, 1), ab, rhs)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise DiscretizationError(str(exc))
        if not np.all(np.isfinite(u_new)):
            raise DiscretizationError("elliptic sweep produced non-finite values")
        u_next = (1 - damping) * u + damping * u_new
        if np.max(np.abs(u_next - u)) < _SWEEP_TOL:
            return FDSolution(xs, u_next)
        u = u_next
    raise FDNonConvergenceError("elliptic sweeps did not reach tolerance")


# ---------------------------------------------------------------------------
# BSDE surface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurfacePoint:
    t: float
    x: float
    value: float
    se: float


@dataclass(frozen=True)
class SurfaceTable:
    points: tuple


def _bsde_generator(problem) -> GeneratorSpec:
    coeffs = problem.coefficient_spec()
    parabolic = isinstance(problem, ParabolicProblem)

    def g(t, x, y, z):
        w = z[:, 0, 0]
        if parabolic:
            out = problem.g(t, x[:, 0], y[:, 0], w)
        else:
            out = problem.g(x[:, 0], y[:, 0], w)
        return np.asarray(out, dtype=float)[:, None]

    return GeneratorSpec(g, coeffs, k=1)


def bsde_surface(problem, sample_points, batch_config: dict,
                 solver_config: SolverConfig | None = None) -> SurfaceTable:
    """Evaluate u at sample points through the probabilistic representation.

    ``batch_config`` keys: n_paths, n_steps, seed.  Parabolic points are
    (t, x) pairs with the diffusion run on [t, T]; elliptic points are x values
    with the diffusion stopped at the first exit, capped at ``problem.cap``.
    """
    solver_config = solver_config or SolverConfig()
    n_paths = int(batch_config["n_paths"])
    n_steps = int(batch_config["n_steps"])
    seed = int(batch_config.get("seed", 0))
    gen = _bsde_generator(problem)
    parabolic = isinstance(problem, ParabolicProblem)
    points = []
    for index, point in enumerate(sample_points):
        point_seed = seed + 7919 * index
        if parabolic:
            t0, x0 = float(point[0]), float(point[1])
            span = problem.horizon - t0
            if span <= 0:
                value = float(np.asarray(problem.h(np.array([x0])))[0])
                points.append(SurfacePoint(t0, x0, value, 0.0))
                continue
            steps = max(8, int(round(n_steps * span / problem.horizon)))
            grid = build_grid(t0, problem.horizon, steps)
            carrier = simulate_brownian(n_paths, grid, 1, point_seed)
            spec = DriftDiffusionSpec(problem.b, problem.sigma, x0)
            batch = euler_maruyama(spec, carrier)
            xi = np.asarray(problem.h(batch.states[:, -1, 0]), dtype=float)
        else:
            x0 = float(point)
            grid = build_grid(0.0, problem.cap, n_steps)
            carrier = simulate_brownian(n_paths, grid, 1, point_seed)
            spec = DriftDiffusionSpec(problem.drift, problem.sigma, x0)
            batch = first_exit_time(euler_maruyama(spec, carrier),
                                    problem.a, problem.b_right)
            xi = np.asarray(problem.h(batch.stopped_states()[:, 0]), dtype=float)
            t0 = 0.0
        sol = picard_solve(gen, xi, batch, solver_config, check_structure=False)
        points.append(SurfacePoint(t0, x0, sol.scalar_y0(), float(sol.y0_se[0])))
    return SurfaceTable(tuple(points))


@dataclass(frozen=True)
class CompareRow:
    t: float
    x: float
    u_fd: float
    u_bsde: float
    se: float
    diff: float


@dataclass(frozen=True)
class CompareReport:
    rows: tuple
    max_abs_diff: float
    mean_abs_diff: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "x", "u_fd", "u_bsde", "se", "diff"])
        for row in self.rows:
            writer.writerow(["%.10g" % v for v in
                             (row.t, row.x, row.u_fd, row.u_bsde, row.se, row.diff)])
        return buf.getvalue()


def fk_compare(fd: FDSolution, surface: SurfaceTable) -> CompareReport:
    """Interpolate the FD solution at the surface sample points and report
    the discrepancies."""
    rows = []
    for pt in surface.points:
        u_fd = fd.interpolate(pt.t, pt.x)
        rows.append(CompareRow(pt.t, pt.x, u_fd, pt.value, pt.se, u_fd - pt.value))
    diffs = np.array([abs(r.diff) for r in rows]) if rows else np.zeros(1)
    return CompareReport(tuple(rows), float(diffs.max()), float(diffs.mean()))


@dataclass(frozen=True)
class GrowthBoundReport:
    constant: float
    exponent: float
    fitted_exponent: float | None
    passed: bool


def growth_bound_check(surface: SurfaceTable, constant: float, exponent: float) -> GrowthBoundReport:
    """Assert |u(t,x)| <= C (1 + |x|^q) at the sample points and fit the
    empirical growth exponent of log|u| against log(1 + |x|)."""
    xs = np.array([pt.x for pt in surface.points])
    us = np.array([pt.value for pt in surface.points])
    passed = bool(np.all(np.abs(us) <= constant * (1.0 + np.abs(xs) ** exponent) + 1e-12))
    mask = (np.abs(us) > 1e-8) & (np.abs(xs) > 1e-8)
    fitted = None
    if mask.sum() >= 2:
        slope = np.polyfit(np.log1p(np.abs(xs[mask])), np.log(np.abs(us[mask])), 1)[0]
        fitted = float(slope)
    return GrowthBoundReport(constant, exponent, fitted, passed)
