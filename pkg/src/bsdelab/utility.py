"""Dynamic concave utility: conjugation of the core function, the BSDE
representation with generator mu*y - g(-z), dual minimization over admissible
densities, optimal-density extraction and the axiom checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.optimize import minimize_scalar

from ._parallel import mean_and_se
from .core import (CoefficientSpec, PathBatch, as_process, node_values,
                   restrict, running_integral)
from .errors import ConfigurationError, CoreDomainError
from .sde import girsanov_weights
from .solver import BSDESolution, GeneratorSpec, SolverConfig, picard_solve


@dataclass(frozen=True)
class CoreFunctionSpec:
    """Convex core f(t, state, q) with effective domain |q| <= nu_t.

    ``f`` returns +inf outside the barrier ball; ``nu`` is the barrier
    process and ``h`` a nonnegative envelope with |f(t, 0)| <= h_t and
    f >= -h_t.  ``q`` is scalar for d = 1 or a length-d vector for d = 2.
    """

    f: object
    nu: object
    h: object = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nu", as_process(self.nu))
        object.__setattr__(self, "h", as_process(self.h))

    def value(self, t, state, q):
        """Scalar evaluation (f itself is vectorized over paths)."""
        return float(np.asarray(self.f(t, np.atleast_2d(state), q)).ravel()[0])

    def check_convexity(self, t, state, nu_value, n_probe: int = 64,
                        tol: float = 1e-10) -> bool:
        """Midpoint convexity on a probe grid over the open domain."""
        qs = np.linspace(-nu_value, nu_value, n_probe)
        vals = np.array([self.value(t, state, q) for q in qs])
        finite = np.isfinite(vals)
        v = vals[finite]
        ok = True
        if v.size >= 3:
            ok = bool(np.all(v[1:-1] <= 0.5 * (v[:-2] + v[2:]) + tol))
        return ok

    def check_domain_rule(self, t, state, nu_value, margin: float = 1e-6) -> bool:
        outside = [nu_value * (1 + margin) + 0.1, -(nu_value * (1 + margin) + 0.1)]
        return all(np.isinf(self.value(t, state, q)) for q in outside)


# ---------------------------------------------------------------------------
# conjugation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConjugateTable:
    """Tabulated Legendre-Fenchel transform g(z) = sup_{|q|<=nu} (q.z - f(q))
    with the argmax recorded as a subgradient selector.

    For d = 1 the table extends linearly beyond the grid with the barrier
    slope (g is globally nu-Lipschitz); d = 2 tables are product grids.
    """

    z_grid: object            # array (d=1) or (z1_nodes, z2_nodes) tuple (d=2)
    g_values: np.ndarray
    argmax_q: np.ndarray      # (..., d)
    nu_value: float
    h_value: float
    d: int

    def interp_g(self, z):
        if self.d == 1:
            z = np.asarray(z, dtype=float)
            grid = self.z_grid
            inner = np.interp(z, grid, self.g_values)
            above = self.g_values[-1] + self.nu_value * (z - grid[-1])
            below = self.g_values[0] - self.nu_value * (z - grid[0])
            return np.where(z > grid[-1], above, np.where(z < grid[0], below, inner))
        from scipy.interpolate import RegularGridInterpolator
        interp = RegularGridInterpolator(self.z_grid, self.g_values,
                                         bounds_error=True)
        return interp(np.asarray(z, dtype=float))

    def interp_argmax(self, z):
        if self.d == 1:
            z = np.asarray(z, dtype=float)
            q = np.interp(z, self.z_grid, self.argmax_q[:, 0])
            return np.clip(q, -self.nu_value, self.nu_value)
        from scipy.interpolate import RegularGridInterpolator
        out = np.empty(np.shape(z))
        zz = np.asarray(z, dtype=float)
        for i in range(2):
            interp = RegularGridInterpolator(self.z_grid, self.argmax_q[..., i],
                                             bounds_error=True)
            out[..., i] = interp(zz)
        return out

    def band_holds(self, tol: float = 1e-9) -> bool:
        """-h <= g(z) <= nu |z| + h on every grid node."""
        if self.d == 1:
            mags = np.abs(self.z_grid)
        else:
            g1, g2 = np.meshgrid(*self.z_grid, indexing="ij")
            mags = np.sqrt(g1 ** 2 + g2 ** 2)
        upper = self.nu_value * mags + self.h_value + tol
        return bool(np.all(self.g_values >= -self.h_value - tol)
                    and np.all(self.g_values <= upper))

    def convex_on_grid(self, tol: float = 1e-10) -> bool:
        g = self.g_values
        if self.d == 1:
            return bool(np.all(g[1:-1] <= 0.5 * (g[:-2] + g[2:]) + tol))
        ok_rows = np.all(g[1:-1, :] <= 0.5 * (g[:-2, :] + g[2:, :]) + tol)
        ok_cols = np.all(g[:, 1:-1] <= 0.5 * (g[:, :-2] + g[:, 2:]) + tol)
        return bool(ok_rows and ok_cols)

    def biconjugate(self, q):
        """Reconstruct f(q) = sup_z (q.z - g(z)) from the tabulated transform."""
        if self.d == 1:
            return float(np.max(q * self.z_grid - self.g_values))
        g1, g2 = np.meshgrid(*self.z_grid, indexing="ij")
        return float(np.max(q[0] * g1 + q[1] * g2 - self.g_values))


def _refine_1d(core, t, state, z, lo, hi, coarse_best):
    """Golden refinement of q -> q z - f(q) around the best coarse node."""
    objective = lambda q: -(q * z - core.value(t, state, q))
    res = minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    if np.isfinite(res.fun) and -res.fun >= coarse_best[0]:
        return -res.fun, res.x
    return coarse_best


def legendre_fenchel(core: CoreFunctionSpec, t: float, state, z_grid,
                     q_resolution: int = 129, d: int = 1) -> ConjugateTable:
    """Tabulate the conjugate on a z grid: coarse scan over [-nu, nu]^d plus a
    bounded scalar refinement around the best node (coordinate-wise for d=2)."""
    if q_resolution < 64:
        raise ConfigurationError("q_resolution must be at least 64 nodes")
    state_arr = np.atleast_2d(np.asarray(state, dtype=float))
    nu_value = float(np.asarray(core.nu(t, state_arr)).ravel()[0])
    h_value = float(np.asarray(core.h(t, state_arr)).ravel()[0])
    if d == 1:
        zs = np.asarray(z_grid, dtype=float)
        qs = np.linspace(-nu_value, nu_value, q_resolution) if nu_value > 0 else np.zeros(1)
        f_vals = np.array([core.value(t, state, q) for q in qs])
        if not np.any(np.isfinite(f_vals)):
            raise ConfigurationError("core function is +inf on its whole domain")
        g_values = np.empty_like(zs)
        argmax = np.empty((zs.size, 1))
        dq = qs[1] - qs[0] if qs.size > 1 else 0.0
        for i, z in enumerate(zs):
            scores = qs * z - f_vals
            best = int(np.nanargmax(np.where(np.isfinite(scores), scores, -np.inf)))
            value, q_best = scores[best], qs[best]
            if dq > 0:
                lo = max(-nu_value, qs[best] - dq)
                hi = min(nu_value, qs[best] + dq)
                value, q_best = _refine_1d(core, t, state, z, lo, hi, (value, q_best))
            g_values[i] = value
            argmax[i, 0] = q_best
        return ConjugateTable(zs, g_values, argmax, nu_value, h_value, 1)
    if d != 2:
        raise ConfigurationError("conjugate tables support d in {1, 2}")
    z1, z2 = (np.asarray(g, dtype=float) for g in z_grid)
    qs = np.linspace(-nu_value, nu_value, q_resolution) if nu_value > 0 else np.zeros(1)
    pairs = [(qa, qb) for qa, qb in product(qs, qs) if np.hypot(qa, qb) <= nu_value + 1e-15]
    if nu_value > 0:
        # fine ring on the barrier sphere: boundary optima dominate the error
        angles = np.linspace(0.0, 2.0 * np.pi, 512, endpoint=False)
        pairs += [(nu_value * np.cos(a), nu_value * np.sin(a)) for a in angles]
    f_vals = np.array([core.value(t, state, np.array(pair)) for pair in pairs])
    if not np.any(np.isfinite(f_vals)):
        raise ConfigurationError("core function is +inf on its whole domain")
    qarr = np.array(pairs)
    g_values = np.empty((z1.size, z2.size))
    argmax = np.empty((z1.size, z2.size, 2))
    for i, a in enumerate(z1):
        scores_a = qarr[:, 0] * a - f_vals
        for j, b in enumerate(z2):
            scores = scores_a + qarr[:, 1] * b
            best = int(np.nanargmax(np.where(np.isfinite(scores), scores, -np.inf)))
            g_values[i, j] = scores[best]
            argmax[i, j] = qarr[best]
    return ConjugateTable((z1, z2), g_values, argmax, nu_value, h_value, 2)


# ---------------------------------------------------------------------------
# utility via the BSDE and via the dual
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtilityReport:
    u_bsde: float
    u_bsde_se: float
    u_dual: float | None
    u_dual_se: float | None
    q_opt: str | None
    gap: float | None
    attainability_mode: str | None
    solution: BSDESolution
    table: ConjugateTable


def utility_generator(mu, table: ConjugateTable) -> GeneratorSpec:
    mu_proc = as_process(mu)

    def g(t, x, y, z):
        return mu_proc(t, x)[:, None] * y - table.interp_g(-z[:, :, 0])

    return g


def utility_via_bsde(xi, core: CoreFunctionSpec, mu, nu, rho, batch: PathBatch,
                     config: SolverConfig | None = None,
                     table: ConjugateTable | None = None,
                     z_halfwidth: float = 6.0, z_nodes: int = 481) -> UtilityReport:
    """Value process of the utility BSDE with generator mu*y - g(-z).

    The conjugate is tabulated once at the batch start (time-invariant cores);
    pass ``table`` to reuse a caller-built transform.
    """
    config = config or SolverConfig()
    if table is None:
        table = legendre_fenchel(core, float(batch.times[0]), batch.states[:1, 0],
                                 np.linspace(-z_halfwidth, z_halfwidth, z_nodes))
    coeffs = CoefficientSpec(2.0, 2.0, rho, mu, nu)
    gen = GeneratorSpec(utility_generator(mu, table), coeffs, k=1)
    sol = picard_solve(gen, xi, batch, config, check_structure=False)
    return UtilityReport(sol.scalar_y0(), float(sol.y0_se[0]), None, None, None,
                         None, None, sol, table)


@dataclass(frozen=True)
class DualCandidate:
    label: str
    q: object  # constant, callable (t, states) -> per-path values, or array (n, m)


def constant_candidates(values):
    return [DualCandidate(f"const={v:g}", float(v)) for v in values]


@dataclass(frozen=True)
class DualRow:
    label: str
    value: float
    se: float
    admissible: bool


@dataclass(frozen=True)
class DualTable:
    rows: tuple
    best: DualRow


def _candidate_steps(candidate: DualCandidate, batch: PathBatch) -> np.ndarray:
    q = candidate.q
    if callable(q):
        cols = [np.broadcast_to(np.asarray(q(float(batch.times[j]), batch.states[:, j]),
                                           dtype=float), (batch.n_paths,))
                for j in range(batch.n_steps)]
        return np.stack(cols, axis=1)
    arr = np.asarray(q, dtype=float)
    if arr.ndim == 0:
        return np.full((batch.n_paths, batch.n_steps), float(arr))
    return arr


def dual_value(candidate: DualCandidate, xi, core: CoreFunctionSpec, mu, nu,
               batch: PathBatch) -> DualRow:
    """E[L_tau (e^{int mu} xi + int e^{int mu} f(s, q_s) ds)] for one density."""
    q_steps = _candidate_steps(candidate, batch)
    nu_nodes = node_values(as_process(nu), batch)[:, :-1]
    bad = (np.abs(q_steps) > nu_nodes + 1e-12) & batch.alive_steps()
    if bad.any():
        raise CoreDomainError(f"candidate {candidate.label} leaves the barrier ball")
    weights = girsanov_weights(q_steps, batch)
    log_l = weights.log_weights[np.arange(batch.n_paths), batch.stop_index]
    if not np.all(np.isfinite(log_l)):
        return DualRow(candidate.label, float("nan"), float("nan"), False)
    mu_int = running_integral(node_values(as_process(mu), batch), batch)
    xi_values = np.asarray(xi(batch) if callable(xi) else xi, dtype=float)
    f_steps = np.empty_like(q_steps)
    for j in range(batch.n_steps):
        t = float(batch.times[j])
        # core functions are vectorized over paths (q may be an array)
        f_steps[:, j] = np.broadcast_to(
            np.asarray(core.f(t, batch.states[:, j], q_steps[:, j]), dtype=float),
            (batch.n_paths,))
    running_cost = np.where(batch.alive_steps(),
                            np.exp(mu_int[:, :-1]) * f_steps * batch.dt[None, :],
                            0.0).sum(axis=1)
    terminal = np.exp(mu_int[np.arange(batch.n_paths), batch.stop_index]) * xi_values
    samples = np.exp(log_l) * (terminal + running_cost)
    if not np.all(np.isfinite(samples)):
        return DualRow(candidate.label, float("nan"), float("nan"), False)
    value, se = mean_and_se(samples)
    return DualRow(candidate.label, value, se, True)


def utility_via_dual(xi, core: CoreFunctionSpec, mu, nu, q_candidates,
                     batch: PathBatch) -> DualTable:
    """Evaluate the dual functional per candidate and return the minimum."""
    rows = [dual_value(c, xi, core, mu, nu, batch) for c in q_candidates]
    admissible = [r for r in rows if r.admissible]
    if not admissible:
        raise ConfigurationError("no admissible dual candidate")
    best = min(admissible, key=lambda r: r.value)
    return DualTable(tuple(rows), best)


# ---------------------------------------------------------------------------
# optimal density and attainability certification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimalDensityReport:
    q_path: np.ndarray
    mode: str
    dual: DualRow
    gap: float
    martingale_mean: float
    martingale_se: float


def _certify(core, mu, nu, q_steps, batch) -> tuple[str, float, float]:
    nu_nodes = node_values(as_process(nu), batch)
    quad = running_integral(nu_nodes ** 2, batch, rule="left")
    quad_tau = quad[np.arange(batch.n_paths), batch.stop_index]
    h_nodes = node_values(core.h, batch)
    mu_int = running_integral(node_values(as_process(mu), batch), batch)
    discounted_h = np.where(batch.alive_steps(),
                            np.exp(mu_int[:, :-1]) * h_nodes[:, :-1] * batch.dt[None, :],
                            0.0).sum(axis=1)
    h_bounded = bool(np.all(np.isfinite(discounted_h)))
    weights = girsanov_weights(q_steps, batch)
    mart_mean, mart_se = weights.mean_terminal_weight()
    with np.errstate(over="ignore"):
        ladder_ok = all(np.all(np.isfinite(np.exp(0.5 * pbar * quad_tau)))
                        for pbar in (2.0, 4.0, 8.0))
        half_ok = bool(np.all(np.isfinite(np.exp(0.5 * quad_tau))))
    if ladder_ok:
        mode = "nu-exponential-moment"
    elif half_ok and h_bounded:
        mode = "half-exponential-moment-bounded-envelope"
    elif abs(mart_mean - 1.0) <= 3 * mart_se and h_bounded:
        mode = "empirical-martingale-bounded-envelope"
    else:
        mode = "uncertified"
    return mode, mart_mean, mart_se


def optimal_density(report: UtilityReport, core: CoreFunctionSpec, mu, nu,
                    batch: PathBatch) -> OptimalDensityReport:
    """Extract q~ from the conjugate's argmax selector at -Z, certify an
    attainability condition and close the dual gap."""
    z_field = report.solution.Z[:, :, 0, 0]
    q_steps = report.table.interp_argmax(-z_field)
    nu_nodes = node_values(as_process(nu), batch)[:, :-1]
    q_steps = np.clip(q_steps, -nu_nodes, nu_nodes)
    mode, mart_mean, mart_se = _certify(core, mu, nu, q_steps, batch)
    if mode == "uncertified":
        import warnings
        warnings.warn("no attainability condition certified for the extracted density",
                      RuntimeWarning)
    row = dual_value(DualCandidate("subgradient", q_steps), xi_from_report(report, batch),
                     core, mu, nu, batch)
    gap = report.u_bsde - row.value
    return OptimalDensityReport(q_steps, mode, row, float(gap), mart_mean, mart_se)


def xi_from_report(report: UtilityReport, batch: PathBatch) -> np.ndarray:
    return report.solution.Y[np.arange(batch.n_paths), batch.stop_index, 0]


# ---------------------------------------------------------------------------
# axioms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AxiomCheck:
    name: str
    passed: bool
    statistic: float
    tolerance: float


@dataclass(frozen=True)
class AxiomReport:
    checks: tuple

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)


def axiom_check(xi, eta, core: CoreFunctionSpec, mu, nu, rho, batch: PathBatch,
                config: SolverConfig | None = None,
                lambdas=(0.25, 0.5, 0.75), solver_tol: float = 0.02) -> AxiomReport:
    """Monotonicity, concavity and time consistency of the utility operator
    on a pair of payoffs with xi >= eta path-wise."""
    config = config or SolverConfig()
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(eta > xi + 1e-12):
        raise ConfigurationError("monotonicity check needs xi >= eta path-wise")
    table = legendre_fenchel(core, float(batch.times[0]), batch.states[:1, 0],
                             np.linspace(-6.0, 6.0, 481))

    def solve(payoff, sub_batch=None):
        return utility_via_bsde(payoff, core, mu, nu, rho, sub_batch or batch,
                                config, table)

    u_xi = solve(xi)
    u_eta = solve(eta)
    checks = []
    se = 3 * float(np.hypot(u_xi.u_bsde_se, u_eta.u_bsde_se))
    checks.append(AxiomCheck("monotonicity", u_xi.u_bsde >= u_eta.u_bsde - se,
                             u_xi.u_bsde - u_eta.u_bsde, se))
    for lam in lambdas:
        mix = solve(lam * xi + (1 - lam) * eta)
        target = lam * u_xi.u_bsde + (1 - lam) * u_eta.u_bsde
        tol = 3 * float(np.hypot(mix.u_bsde_se, np.hypot(u_xi.u_bsde_se, u_eta.u_bsde_se)))
        checks.append(AxiomCheck(f"concavity-lambda={lam:g}",
                                 mix.u_bsde >= target - tol,
                                 mix.u_bsde - target, tol))
    # time consistency: re-solve on [0, T/2] with the midpoint utility as data
    half = batch.n_steps // 2
    sub = restrict(batch, half)
    midpoint = u_xi.solution.Y[:, half, 0]
    flowed = solve(midpoint, sub_batch=sub)
    tol = 3 * float(np.hypot(flowed.u_bsde_se, u_xi.u_bsde_se)) + solver_tol
    checks.append(AxiomCheck("time-consistency",
                             abs(flowed.u_bsde - u_xi.u_bsde) <= tol,
                             flowed.u_bsde - u_xi.u_bsde, tol))
    return AxiomReport(tuple(checks))
