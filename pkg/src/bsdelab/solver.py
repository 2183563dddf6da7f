"""Backward Euler regression solver wrapped in the z-freezing fixed-point map.

The backward pass solves, per time step, the conditional-expectation problem
with the z-argument of the generator frozen at a field V; the outer loop
re-inserts the produced Z field until the M2-weighted distance between
successive fields drops below tolerance.  The frozen-z map contracts with
ratio 1/theta under the structural condition, which is what makes the outer
loop converge.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._parallel import mean_and_se
from .core import (CoefficientSpec, PathBatch, WeightedNormReport, node_values,
                   norm_report, running_integral, weighted_sup_norm,
                   weighted_terminal_norm, weighted_z_norm)
from .errors import (ConfigurationError, DegenerateInputError, DivergenceError)
from .regression import StepRegressor


@dataclass(frozen=True)
class GeneratorSpec:
    """A generator g(t, x, y, z) with its declared coefficient envelopes.

    ``g`` is vectorized over paths: x is (n, state_dim), y is (n, k), z is
    (n, k, d), and the result is (n, k).  ``coeffs`` carries the declared
    monotonicity envelope mu, Lipschitz envelope nu and weight rho.
    ``growth_envelope`` optionally bounds sup_{|y|<=r} |g(t,y,0) - g(t,0,0)|
    as a callable (t, x, r) -> per-path bound.
    """

    g: Callable
    coeffs: CoefficientSpec
    growth_envelope: Callable | None = None
    k: int = 1

    def at_zero(self, t, x, d):
        zero_y = np.zeros((x.shape[0], self.k))
        zero_z = np.zeros((x.shape[0], self.k, d))
        return np.asarray(self.g(t, x, zero_y, zero_z), dtype=float)


@dataclass(frozen=True)
class SolverConfig:
    basis_degree: int = 3
    picard_tol: float = 1e-3
    max_picard: int = 10
    z_estimator: str = "martingale-increment"
    implicit_y: bool = True
    ridge: float = 1e-10

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise ConfigurationError("picard_tol must be positive")
        if self.z_estimator != "martingale-increment":
            raise ConfigurationError(f"unknown z estimator {self.z_estimator!r}")


@dataclass(frozen=True)
class BSDESolution:
    Y: np.ndarray               # (n_paths, n_steps + 1, k)
    Z: np.ndarray               # (n_paths, n_steps, k, d)
    norms: WeightedNormReport | None
    picard_iterations: int
    residual: float
    converged: bool
    y0: np.ndarray              # (k,)
    y0_se: np.ndarray           # (k,)
    picard_history: tuple = ()

    def scalar_y0(self) -> float:
        return float(self.y0[0])


@dataclass(frozen=True)
class EnvelopeReport:
    n_probes: int
    monotonicity_excess: float
    lipschitz_excess: float
    growth_excess: float | None
    passed: bool


def probe_envelopes(gen: GeneratorSpec, batch: PathBatch, n_probes: int = 10000,
                    seed: int = 0, tol: float = 1e-9, y_scale: float = 1.0,
                    z_scale: float = 1.0) -> EnvelopeReport:
    """Sample the declared monotonicity/Lipschitz/growth envelopes.

    Draws random (y1, y2, z, z1, z2) probes at grid nodes spread over the
    batch and checks, with ``tol`` slack,

        <y1 - y2, g(t,y1,z) - g(t,y2,z)> <= mu_t |y1 - y2|^2
        |g(t,y,z1) - g(t,y,z2)|          <= nu_t |z1 - z2|
        |g(t,y,0)  - g(t,0,0)|           <= psi(t, |y|)     (when declared)
    """
    rng = np.random.default_rng(seed)
    n, m, d, k = batch.n_paths, batch.n_steps, batch.d, gen.k
    nodes = np.unique(np.linspace(0, m, num=min(m + 1, 16), dtype=int))
    per_node = max(1, int(np.ceil(n_probes / (len(nodes) * n))))
    mono_excess = lip_excess = -np.inf
    growth_excess = -np.inf if gen.growth_envelope is not None else None
    total = 0
    for j in nodes:
        t = float(batch.times[j])
        active = batch.stop_index >= j
        if not active.any():
            continue
        x = batch.states[active, j]
        na = x.shape[0]
        mu = np.asarray(gen.coeffs.mu(t, x), dtype=float)
        nu = np.asarray(gen.coeffs.nu(t, x), dtype=float)
        for _ in range(per_node):
            y1 = rng.normal(scale=y_scale, size=(na, k))
            y2 = rng.normal(scale=y_scale, size=(na, k))
            z = rng.normal(scale=z_scale, size=(na, k, d))
            z1 = rng.normal(scale=z_scale, size=(na, k, d))
            z2 = rng.normal(scale=z_scale, size=(na, k, d))
            g1 = np.asarray(gen.g(t, x, y1, z), dtype=float)
            g2 = np.asarray(gen.g(t, x, y2, z), dtype=float)
            dy = y1 - y2
            inner = np.sum(dy * (g1 - g2), axis=1)
            mono_excess = max(mono_excess,
                              float(np.max(inner - mu * np.sum(dy * dy, axis=1))))
            gz1 = np.asarray(gen.g(t, x, y1, z1), dtype=float)
            gz2 = np.asarray(gen.g(t, x, y1, z2), dtype=float)
            dzm = np.sqrt(np.sum((z1 - z2) ** 2, axis=(1, 2)))
            gap = np.sqrt(np.sum((gz1 - gz2) ** 2, axis=1))
            lip_excess = max(lip_excess, float(np.max(gap - nu * dzm)))
            if gen.growth_envelope is not None:
                zero_z = np.zeros((na, k, d))
                gy = np.asarray(gen.g(t, x, y1, zero_z), dtype=float)
                g0 = gen.at_zero(t, x, d)
                bound = np.asarray(
                    gen.growth_envelope(t, x, np.sqrt(np.sum(y1 * y1, axis=1))),
                    dtype=float)
                growth_excess = max(growth_excess, float(np.max(
                    np.sqrt(np.sum((gy - g0) ** 2, axis=1)) - bound)))
            total += na
    passed = mono_excess <= tol and lip_excess <= tol and (
        growth_excess is None or growth_excess <= tol)
    return EnvelopeReport(total, mono_excess, lip_excess, growth_excess, bool(passed))


def terminal_values(xi, batch: PathBatch, k: int) -> np.ndarray:
    values = np.asarray(xi(batch) if callable(xi) else xi, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape != (batch.n_paths, k):
        raise ConfigurationError(f"terminal values must be (n_paths, {k})")
    return values


def _backward_fields(gen: GeneratorSpec, xi_values, V, batch: PathBatch,
                     config: SolverConfig):
    """One backward sweep with the generator's z-argument frozen at V."""
    n, m, d, k = batch.n_paths, batch.n_steps, batch.d, gen.k
    times, dt = batch.times, batch.dt
    stop = batch.stop_index
    Y = np.repeat(xi_values[:, None, :], m + 1, axis=1)
    Z = np.zeros((n, m, k, d))
    if V is None:
        V = Z
    # per-path telescoped target xi + sum g dt: the regressions preserve its
    # mean, so its spread yields the Monte Carlo standard error of Y_0
    accumulated = xi_values.copy()
    for j in range(m - 1, -1, -1):
        alive = stop > j
        if not alive.any():
            continue
        all_alive = bool(alive.all())
        sel = slice(None) if all_alive else alive
        reg = StepRegressor(batch.states[sel, j], config.basis_degree, config.ridge)
        y_next = Y[sel, j + 1]
        expected = reg.fit_predict(y_next)
        # centered martingale-increment estimator: E_j[(Y_{j+1} - E_j Y_{j+1}) dB]/dt
        # equals E_j[Y_{j+1} dB]/dt with far lower sampling variance
        resid = y_next - expected
        z_target = resid[:, :, None] * batch.increments[sel, j][:, None, :] / dt[j]
        Z[sel, j] = reg.fit_predict(z_target)
        t_j = float(times[j])
        x_j = batch.states[sel, j]
        v_j = V[sel, j]
        source = np.asarray(gen.g(t_j, x_j, expected, v_j), dtype=float)
        y = expected + dt[j] * source
        if config.implicit_y:
            source = np.asarray(gen.g(t_j, x_j, y, v_j), dtype=float)
            y = expected + dt[j] * source
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"backward pass diverged at step {j}")
        Y[sel, j] = y
        accumulated[sel] += dt[j] * source
    y0_se = accumulated.std(axis=0) / np.sqrt(n)
    return Y, Z, y0_se


def _m2_distance(z_a, z_b, rho_nodes, batch, weights=None) -> float:
    if weights is None:
        norm, _ = weighted_z_norm(z_a - z_b, rho_nodes, batch, 2.0,
                                  scenario="picard-distance")
        return norm
    diff = z_a - z_b
    sq = np.sum(diff * diff, axis=(2, 3)) if diff.ndim == 4 else diff * diff
    return float(np.sqrt(np.mean(np.sum(weights * sq, axis=1))))


def _m2_weights(rho_nodes, batch) -> np.ndarray:
    """Per-step quadrature weights exp(2 int rho) dt, zeroed after the stop."""
    integral = running_integral(rho_nodes, batch)
    w = np.exp(2.0 * integral[:, :-1]) * batch.dt[None, :]
    return np.where(batch.alive_steps(), w, 0.0)


def _assemble(gen, xi_values, batch, Y, Z, y0_se, iterations, history, converged,
              with_norms=True) -> BSDESolution:
    rho_nodes = gen.coeffs.rho_nodes(batch)
    norms = None
    if with_norms:
        norms = norm_report(Y, Z, xi_values, rho_nodes, batch, gen.coeffs.p)
    stopped = Y[np.arange(batch.n_paths), batch.stop_index]
    residual = float(np.max(np.abs(stopped - xi_values)))
    return BSDESolution(Y, Z, norms, iterations, residual, converged,
                        Y[:, 0].mean(axis=0), y0_se, tuple(history))


def backward_euler_pass(gen: GeneratorSpec, xi, V, batch: PathBatch,
                        config: SolverConfig | None = None) -> BSDESolution:
    """Solve the z-frozen BSDE: backward regression with generator g(s, y, V_s)."""
    config = config or SolverConfig()
    xi_values = terminal_values(xi, batch, gen.k)
    Y, Z, y0_se = _backward_fields(gen, xi_values, V, batch, config)
    return _assemble(gen, xi_values, batch, Y, Z, y0_se, 1, (), True)


def picard_solve(gen: GeneratorSpec, xi, batch: PathBatch,
                 config: SolverConfig | None = None,
                 check_structure: bool = True) -> BSDESolution:
    """Iterate the z-freezing map from V = 0 until the discrete M2(rho)
    distance between successive Z fields drops below ``picard_tol``.

    Non-convergence is reported on the solution (``converged=False``) and via
    a warning, never silently.
    """
    config = config or SolverConfig()
    if check_structure:
        from .core import check_structural_condition
        report = check_structural_condition(gen.coeffs, batch)
        if not report.passed:
            raise ConfigurationError(
                f"structural condition fails: margin {report.margin:.6g} at "
                f"path {report.worst_path}, node {report.worst_node}")
    xi_values = terminal_values(xi, batch, gen.k)
    rho_nodes = gen.coeffs.rho_nodes(batch)
    m2_w = _m2_weights(rho_nodes, batch)
    V = np.zeros((batch.n_paths, batch.n_steps, gen.k, batch.d))
    history = []
    converged = False
    Y = Z = y0_se = None
    for iteration in range(1, config.max_picard + 1):
        Y, Z, y0_se = _backward_fields(gen, xi_values, V, batch, config)
        dist = _m2_distance(Z, V, rho_nodes, batch, m2_w)
        history.append(dist)
        V = Z
        if dist < config.picard_tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"fixed-point loop hit max_picard={config.max_picard} "
                      f"with distance {history[-1]:.3g}", RuntimeWarning)
    return _assemble(gen, xi_values, batch, Y, Z, y0_se, len(history), history, converged)


def contraction_ratio(gen: GeneratorSpec, xi, V1, V2, batch: PathBatch,
                      config: SolverConfig | None = None) -> float:
    """||Phi(V1) - Phi(V2)||^2 / ||V1 - V2||^2 in the discrete M2(rho) norm."""
    config = config or SolverConfig()
    xi_values = terminal_values(xi, batch, gen.k)
    rho_nodes = gen.coeffs.rho_nodes(batch)
    denom = _m2_distance(np.asarray(V1, dtype=float), np.asarray(V2, dtype=float),
                         rho_nodes, batch)
    if denom == 0.0:
        raise DegenerateInputError("V1 and V2 coincide; contraction ratio undefined")
    _, z1, _ = _backward_fields(gen, xi_values, np.asarray(V1, dtype=float), batch, config)
    _, z2, _ = _backward_fields(gen, xi_values, np.asarray(V2, dtype=float), batch, config)
    num = _m2_distance(z1, z2, rho_nodes, batch)
    return float((num / denom) ** 2)


# ---------------------------------------------------------------------------
# truncation scheme
# ---------------------------------------------------------------------------


def radial_clip(x, r):
    """Clip to the centered ball of radius r:  x * r / (|x| v r)."""
    arr = np.asarray(x, dtype=float)
    radius = np.asarray(r, dtype=float)
    if arr.ndim <= 1:
        mag = np.abs(arr)
    else:
        mag = np.sqrt(np.sum(arr * arr, axis=-1, keepdims=True))
    scale = radius / np.maximum(mag, radius)
    return arr * scale


@dataclass(frozen=True)
class TruncationRow:
    level: int
    y_diff_norm: float
    y_diff_se: float
    z_diff_norm: float
    z_diff_se: float


@dataclass(frozen=True)
class TruncationStudy:
    rows: tuple
    levels: tuple


def truncation_study(gen: GeneratorSpec, xi, rho, n_values, batch: PathBatch,
                     config: SolverConfig | None = None) -> TruncationStudy:
    """Solve the truncated problems and report the dyadic Cauchy increments.

    Level n replaces the terminal value by its radial clip at n * gamma_tau
    and the generator's zero term by its clip at n * exp(-t) * gamma_t, where
    gamma_t = exp(-int_0^t rho).  Reported: ||y^{2n} - y^n|| in the weighted
    sup norm and ||z^{2n} - z^n|| in the weighted quadrature norm.
    """
    config = config or SolverConfig()
    rho_nodes = node_values(rho, batch)
    weight = running_integral(rho_nodes, batch)
    gamma_tau = np.exp(-weight[np.arange(batch.n_paths), batch.stop_index])
    # the running weight joins the regression state so the clipped zero term
    # stays a function of the (augmented) Markov state
    aug_states = np.concatenate([batch.states, weight[:, :, None]], axis=2)
    aug_batch = batch.with_states(aug_states)
    orig_dim = batch.state_dim
    xi_full = terminal_values(xi, batch, gen.k)

    def truncated_generator(level):
        def g_n(t, x, y, z):
            x_orig = x[:, :orig_dim]
            gamma = np.exp(-x[:, orig_dim])
            base = np.asarray(gen.g(t, x_orig, y, z), dtype=float)
            zero = gen.at_zero(t, x_orig, z.shape[2])
            radius = (level * np.exp(-t) * gamma)[:, None]
            return base - zero + radial_clip(zero, radius)
        return g_n

    levels = sorted({int(n) for n in n_values} | {2 * int(n) for n in n_values})
    solutions = {}
    for level in levels:
        xi_n = radial_clip(xi_full, (level * gamma_tau)[:, None])
        gen_n = GeneratorSpec(truncated_generator(level), gen.coeffs,
                              gen.growth_envelope, gen.k)
        solutions[level] = picard_solve(gen_n, xi_n, aug_batch, config,
                                        check_structure=False)
    rows = []
    p = gen.coeffs.p
    for n in sorted({int(v) for v in n_values}):
        dy = solutions[2 * n].Y - solutions[n].Y
        dz = solutions[2 * n].Z - solutions[n].Z
        yn, yse = weighted_sup_norm(dy, rho_nodes, batch, p, scenario="truncation-y")
        zn, zse = weighted_z_norm(dz, rho_nodes, batch, p, scenario="truncation-z")
        rows.append(TruncationRow(n, yn, yse, zn, zse))
    return TruncationStudy(tuple(rows), tuple(levels))


# ---------------------------------------------------------------------------
# estimate reports and perturbation checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AprioriReport:
    lhs: float
    rhs: float
    ratio: float
    sup_power: float
    z_power: float
    terminal_power: float
    source_power: float


def apriori_report(gen: GeneratorSpec, xi, solution: BSDESolution,
                   batch: PathBatch, f_process=None) -> AprioriReport:
    """Both sides of the a priori bound: the weighted sup/quadrature powers of
    the solution against the powers of the data (terminal norm and the
    discounted source integral).  The constant is not explicit, so consumers
    check finiteness and stability of the ratio.
    """
    p = gen.coeffs.p
    rho_nodes = gen.coeffs.rho_nodes(batch)
    xi_values = terminal_values(xi, batch, gen.k)
    sup_norm, _ = weighted_sup_norm(solution.Y, rho_nodes, batch, p)
    z_norm, _ = weighted_z_norm(solution.Z, rho_nodes, batch, p)
    term_norm, _ = weighted_terminal_norm(xi_values, rho_nodes, batch, p)
    if f_process is None:
        f_nodes = np.stack([
            np.sqrt(np.sum(gen.at_zero(float(t), batch.states[:, j], batch.d) ** 2, axis=1))
            for j, t in enumerate(batch.times)], axis=1)
    else:
        f_nodes = node_values(f_process, batch)
    weight = running_integral(rho_nodes, batch)
    contrib = np.exp(weight[:, :-1]) * f_nodes[:, :-1] * batch.dt[None, :]
    source = np.where(batch.alive_steps(), contrib, 0.0).sum(axis=1)
    source_power, _ = mean_and_se(source ** p)
    lhs = sup_norm ** p + z_norm ** p
    rhs = term_norm ** p + source_power
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else float("inf"))
    return AprioriReport(lhs, rhs, ratio, sup_norm ** p, z_norm ** p,
                         term_norm ** p, source_power)


@dataclass(frozen=True)
class DependenceReport:
    numerator: float
    denominator: float
    ratio: float
    dy_power: float
    dz_power: float


def continuous_dependence_check(gen: GeneratorSpec, gen2: GeneratorSpec, xi, xi2,
                                batch: PathBatch,
                                config: SolverConfig | None = None) -> DependenceReport:
    """Solve both problems and compare the solution distance against the
    perturbation size (terminal difference plus discounted generator gap
    along the second solution)."""
    config = config or SolverConfig()
    p = gen.coeffs.p
    rho_nodes = gen.coeffs.rho_nodes(batch)
    sol = picard_solve(gen, xi, batch, config, check_structure=False)
    sol2 = picard_solve(gen2, xi2, batch, config, check_structure=False)
    dy, _ = weighted_sup_norm(sol.Y - sol2.Y, rho_nodes, batch, p)
    dz, _ = weighted_z_norm(sol.Z - sol2.Z, rho_nodes, batch, p)
    xi_a = terminal_values(xi, batch, gen.k)
    xi_b = terminal_values(xi2, batch, gen.k)
    dxi, _ = weighted_terminal_norm(xi_a - xi_b, rho_nodes, batch, p)
    weight = running_integral(rho_nodes, batch)
    gaps = np.zeros((batch.n_paths, batch.n_steps))
    for j in range(batch.n_steps):
        t = float(batch.times[j])
        x = batch.states[:, j]
        y2 = sol2.Y[:, j]
        z2 = sol2.Z[:, j]
        diff = (np.asarray(gen.g(t, x, y2, z2), dtype=float)
                - np.asarray(gen2.g(t, x, y2, z2), dtype=float))
        gaps[:, j] = np.sqrt(np.sum(diff * diff, axis=1))
    contrib = np.exp(weight[:, :-1]) * gaps * batch.dt[None, :]
    source = np.where(batch.alive_steps(), contrib, 0.0).sum(axis=1)
    source_power, _ = mean_and_se(source ** p)
    numerator = dy ** p + dz ** p
    denominator = dxi ** p + source_power
    ratio = numerator / denominator if denominator > 0 else (
        0.0 if numerator == 0 else float("inf"))
    return DependenceReport(numerator, denominator, ratio, dy ** p, dz ** p)


def stability_check(gen_sequence, xi_sequence, gen: GeneratorSpec, xi,
                    batch: PathBatch, config: SolverConfig | None = None):
    """Distances of a perturbed solution sequence to the base solution."""
    config = config or SolverConfig()
    p = gen.coeffs.p
    rho_nodes = gen.coeffs.rho_nodes(batch)
    base = picard_solve(gen, xi, batch, config, check_structure=False)
    distances = []
    for gen_n, xi_n in zip(gen_sequence, xi_sequence):
        sol_n = picard_solve(gen_n, xi_n, batch, config, check_structure=False)
        dy, _ = weighted_sup_norm(sol_n.Y - base.Y, rho_nodes, batch, p)
        dz, _ = weighted_z_norm(sol_n.Z - base.Z, rho_nodes, batch, p)
        distances.append(dy ** p + dz ** p)
    return distances


def horizon_decay_study(c: float, horizons, steps_per_unit: int = 256,
                        n_paths: int = 128, seed: int = 7,
                        config: SolverConfig | None = None):
    """Y_0(T) for the pure-decay problem g(y) = -y with constant terminal c.

    The values track c * exp(-T) and vanish as the horizon grows even though
    the terminal value stays fixed, which is the growth-condition necessity
    demonstration at desk scale.
    """
    from .core import build_grid
    from .sde import simulate_brownian
    config = config or SolverConfig()
    coeffs = CoefficientSpec(2.0, 2.0, 0.0, 0.0, 0.0)

    def g(t, x, y, z):
        return -y

    rows = []
    for horizon in horizons:
        grid = build_grid(0.0, float(horizon), int(steps_per_unit * horizon))
        batch = simulate_brownian(n_paths, grid, 1, seed)
        gen = GeneratorSpec(g, coeffs, k=1)
        xi = np.full(n_paths, float(c))
        sol = picard_solve(gen, xi, batch, config)
        rows.append((float(horizon), sol.scalar_y0(), float(c) * float(np.exp(-horizon))))
    return rows
