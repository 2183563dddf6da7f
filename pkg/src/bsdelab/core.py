"""Time grids, path containers, weighted Lp norms and the structural margin check.

Conventions used throughout the package:

* path arrays have the path axis first: increments ``(n_paths, n_steps, d)``,
  states ``(n_paths, n_steps + 1, state_dim)``;
* time integrals of node-valued processes use the trapezoid rule, stochastic
  integrals and quadratic variations use the left endpoint (predictable) rule;
* every path carries a ``stop_index``; nodes past it are frozen and excluded
  from integrals;
* exponential weights ``exp(p * int rho)`` are accumulated in log space and
  exponentiated once per path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._parallel import mean_and_se
from .errors import ConfigurationError, NumericalOverflowError

Process = Callable[[float, np.ndarray], np.ndarray]


def as_process(value) -> Process:
    """Coerce a constant into a ``(t, states) -> per-path array`` callable."""
    if callable(value):
        return value
    c = float(value)

    def constant(t, states):
        return np.full(states.shape[0], c)

    return constant


# ---------------------------------------------------------------------------
# grids and batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing, quasi-uniform grid on [t0, horizon]."""

    t0: float
    horizon: float
    n_steps: int
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.shape != (self.n_steps + 1,):
            raise ConfigurationError("times must have n_steps + 1 entries")
        dt = np.diff(times)
        if not np.all(dt > 0):
            raise ConfigurationError("grid times must be strictly increasing")
        if dt.max() > 2.0 * dt.min() + 1e-15:
            raise ConfigurationError("grid must be quasi-uniform (max step <= 2 min step)")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)


def build_grid(t0: float, horizon: float, n_steps: int) -> TimeGrid:
    """Uniform grid with step (horizon - t0) / n_steps."""
    if n_steps < 1:
        raise ConfigurationError(f"n_steps must be >= 1, got {n_steps}")
    if not horizon > t0:
        raise ConfigurationError(f"horizon must exceed t0, got [{t0}, {horizon}]")
    times = np.linspace(float(t0), float(horizon), int(n_steps) + 1)
    return TimeGrid(float(t0), float(horizon), int(n_steps), times)


@dataclass(frozen=True)
class PathBatch:
    """A seeded batch of discretized paths plus per-path stopping indices.

    Immutable after construction; transforms return new batches.  States at
    nodes past ``stop_index`` repeat the stopped value.
    """

    grid: TimeGrid
    increments: np.ndarray   # (n_paths, n_steps, d)
    states: np.ndarray       # (n_paths, n_steps + 1, state_dim)
    stop_index: np.ndarray   # (n_paths,), int in [0, n_steps]
    seed: int | None = None

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        states = np.asarray(self.states, dtype=float)
        stop = np.asarray(self.stop_index, dtype=np.int64)
        m = self.grid.n_steps
        if inc.ndim != 3 or inc.shape[1] != m:
            raise ConfigurationError("increments must be (n_paths, n_steps, d)")
        if states.ndim != 3 or states.shape[:2] != (inc.shape[0], m + 1):
            raise ConfigurationError("states must be (n_paths, n_steps + 1, state_dim)")
        if stop.shape != (inc.shape[0],) or stop.min() < 0 or stop.max() > m:
            raise ConfigurationError("stop_index must be per-path ints in [0, n_steps]")
        for a in (inc, states, stop):
            a.setflags(write=False)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "stop_index", stop)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def dt(self) -> np.ndarray:
        return self.grid.dt

    def alive_steps(self) -> np.ndarray:
        """Mask (n_paths, n_steps): step j is active iff j < stop_index."""
        return np.arange(self.n_steps)[None, :] < self.stop_index[:, None]

    def active_nodes(self) -> np.ndarray:
        """Mask (n_paths, n_steps + 1): node j is active iff j <= stop_index."""
        return np.arange(self.n_steps + 1)[None, :] <= self.stop_index[:, None]

    def stopped_states(self) -> np.ndarray:
        return self.states[np.arange(self.n_paths), self.stop_index]

    def stop_times(self) -> np.ndarray:
        return self.times[self.stop_index]

    def with_states(self, states, stop_index=None) -> "PathBatch":
        stop = self.stop_index if stop_index is None else stop_index
        return PathBatch(self.grid, self.increments, states, stop, self.seed)


def restrict(batch: PathBatch, node: int) -> PathBatch:
    """Truncate a batch to the sub-grid ending at the given node index."""
    if not 0 < node <= batch.n_steps:
        raise ConfigurationError(f"restrict node must be in [1, n_steps], got {node}")
    grid = TimeGrid(batch.grid.t0, float(batch.times[node]), node, batch.times[: node + 1])
    return PathBatch(
        grid,
        batch.increments[:, :node],
        batch.states[:, : node + 1],
        np.minimum(batch.stop_index, node),
        batch.seed,
    )


# ---------------------------------------------------------------------------
# path-wise evaluation and quadrature
# ---------------------------------------------------------------------------


def node_values(process: Process, batch: PathBatch) -> np.ndarray:
    """Evaluate a process at every grid node: (n_paths, n_steps + 1)."""
    proc = as_process(process)
    cols = [np.broadcast_to(np.asarray(proc(float(t), batch.states[:, j]), dtype=float),
                            (batch.n_paths,))
            for j, t in enumerate(batch.times)]
    return np.stack(cols, axis=1)


def running_integral(values, batch: PathBatch, rule: str = "trapezoid") -> np.ndarray:
    """Cumulative time integral of node values, frozen at each path's stop.

    ``rule`` is "trapezoid" (default, second order) or "left" (predictable).
    Returns (n_paths, n_steps + 1) with the zero integral in column 0.
    """
    v = np.asarray(values, dtype=float)
    alive = batch.alive_steps()
    if rule == "trapezoid":
        contrib = 0.5 * (v[:, :-1] + v[:, 1:]) * batch.dt[None, :]
    elif rule == "left":
        contrib = v[:, :-1] * batch.dt[None, :]
    else:
        raise ConfigurationError(f"unknown quadrature rule {rule!r}")
    contrib = np.where(alive, contrib, 0.0)
    return _cumsum_from_zero(contrib)


def _cumsum_from_zero(contrib):
    out = np.zeros((contrib.shape[0], contrib.shape[1] + 1))
    out[:, 1:] = np.cumsum(contrib, axis=1)
    return out


def stochastic_integral(step_values, batch: PathBatch) -> np.ndarray:
    """Cumulative sum of q_j . dB_j with q evaluated at the left endpoint.

    ``step_values`` has shape (n_paths, n_steps) for d = 1 or
    (n_paths, n_steps, d).  Returns (n_paths, n_steps + 1).
    """
    q = np.asarray(step_values, dtype=float)
    if q.ndim == 2:
        q = q[:, :, None]
    contrib = np.einsum("njd,njd->nj", q, batch.increments)
    contrib = np.where(batch.alive_steps(), contrib, 0.0)
    return _cumsum_from_zero(contrib)


# ---------------------------------------------------------------------------
# weighted norms
# ---------------------------------------------------------------------------


def _check_finite(arr, scenario):
    if not np.all(np.isfinite(arr)):
        raise NumericalOverflowError(
            f"non-finite path values in scenario {scenario!r}")


def _norm_from_powers(powers, p, scenario):
    """Mean of per-path p-th powers -> (norm, se) via the delta method."""
    _check_finite(powers, scenario)
    mean, se_mean = mean_and_se(powers)
    if mean <= 0.0:
        return 0.0, 0.0
    norm = mean ** (1.0 / p)
    se = se_mean * norm / (p * mean)
    return float(norm), float(se)


def _magnitude(arr):
    """Euclidean magnitude over component axes trailing (path, node)."""
    a = np.asarray(arr, dtype=float)
    if a.ndim <= 2:
        return np.abs(a)
    sq = np.sum(a * a, axis=tuple(range(2, a.ndim)))
    return np.sqrt(sq)


def _terminal_magnitude(xi):
    a = np.asarray(xi, dtype=float)
    if a.ndim == 1:
        return np.abs(a)
    return np.sqrt(np.sum(a * a, axis=tuple(range(1, a.ndim))))


def weighted_terminal_norm(xi, rho_path, batch: PathBatch, p: float,
                           scenario: str = "terminal-norm", rho_integral=None):
    """Monte Carlo estimate of (E[exp(p int_0^tau rho) |xi|^p])^(1/p).

    ``rho_path`` is the per-path rho trajectory at the grid nodes; the weight
    integral uses the trapezoid rule.  Returns (norm, standard_error).
    """
    mag = _terminal_magnitude(xi)
    _check_finite(mag, scenario)
    _check_finite(rho_path, scenario)
    integral = running_integral(rho_path, batch) if rho_integral is None else rho_integral
    i_tau = integral[np.arange(batch.n_paths), batch.stop_index]
    with np.errstate(divide="ignore"):
        log_w = p * (i_tau + np.log(mag))
    powers = np.exp(log_w)
    return _norm_from_powers(powers, p, scenario)


def weighted_sup_norm(Y, rho_path, batch: PathBatch, p: float,
                      scenario: str = "sup-norm", rho_integral=None):
    """Discrete (E[sup_j exp(p int_0^tj rho)|Y_j|^p])^(1/p) with standard error."""
    mag = _magnitude(Y)
    _check_finite(mag, scenario)
    integral = running_integral(rho_path, batch) if rho_integral is None else rho_integral
    with np.errstate(divide="ignore"):
        log_nodes = p * (integral + np.log(mag))
    log_nodes = np.where(batch.active_nodes(), log_nodes, -np.inf)
    powers = np.exp(np.max(log_nodes, axis=1))
    return _norm_from_powers(powers, p, scenario)


def weighted_z_norm(Z, rho_path, batch: PathBatch, p: float,
                    scenario: str = "z-norm", rho_integral=None):
    """Discrete (E[(int exp(2 int rho)|Z|^2 dt)^(p/2)])^(1/p) with standard error.

    Z lives on steps (left endpoints): (n_paths, n_steps[, k, d]).
    """
    z = np.asarray(Z, dtype=float)
    sq = z * z if z.ndim == 2 else np.sum(z * z, axis=tuple(range(2, z.ndim)))
    _check_finite(sq, scenario)
    integral = running_integral(rho_path, batch) if rho_integral is None else rho_integral
    with np.errstate(divide="ignore"):
        log_terms = 2.0 * integral[:, :-1] + np.log(sq) + np.log(batch.dt)[None, :]
    log_terms = np.where(batch.alive_steps(), log_terms, -np.inf)
    log_quad = _logsumexp_rows(log_terms)
    with np.errstate(invalid="ignore"):
        powers = np.where(np.isneginf(log_quad), 0.0, np.exp(0.5 * p * log_quad))
    return _norm_from_powers(powers, p, scenario)


def _logsumexp_rows(log_terms):
    peak = np.max(log_terms, axis=1)
    safe = np.where(np.isneginf(peak), 0.0, peak)
    with np.errstate(invalid="ignore", divide="ignore"):
        total = np.sum(np.exp(log_terms - safe[:, None]), axis=1)
        out = safe + np.log(total)
    return np.where(np.isneginf(peak), -np.inf, out)


@dataclass(frozen=True)
class WeightedNormReport:
    terminal_norm: float
    sup_norm: float
    z_norm: float
    standard_errors: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in (("terminal", self.terminal_norm),
                            ("sup", self.sup_norm), ("z", self.z_norm)):
            if not np.isfinite(value) or value < 0:
                raise NumericalOverflowError(f"norm report entry {name!r} not finite")


def norm_report(Y, Z, xi, rho_path, batch: PathBatch, p: float,
                scenario: str = "norms") -> WeightedNormReport:
    integral = running_integral(rho_path, batch)
    tn, tse = weighted_terminal_norm(xi, rho_path, batch, p, scenario, integral)
    sn, sse = weighted_sup_norm(Y, rho_path, batch, p, scenario, integral)
    zn, zse = weighted_z_norm(Z, rho_path, batch, p, scenario, integral)
    return WeightedNormReport(tn, sn, zn, {"terminal": tse, "sup": sse, "z": zse})


# ---------------------------------------------------------------------------
# coefficient triple and the structural condition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientSpec:
    """The triple (rho, mu, nu) with exponents (p, theta).

    rho, mu are real processes of (t, state); nu is nonnegative.  The margin
    rho - mu - theta nu^2 / (2 [1 ^ (p-1)]) must be nonnegative along paths.
    """

    p: float
    theta: float
    rho: Process
    mu: Process
    nu: Process

    def __post_init__(self):
        if not self.p > 1:
            raise ConfigurationError(f"p must exceed 1, got {self.p}")
        if not self.theta > 1:
            raise ConfigurationError(f"theta must exceed 1, got {self.theta}")
        object.__setattr__(self, "rho", as_process(self.rho))
        object.__setattr__(self, "mu", as_process(self.mu))
        object.__setattr__(self, "nu", as_process(self.nu))

    @property
    def lipschitz_denominator(self) -> float:
        return 2.0 * min(1.0, self.p - 1.0)

    def rho_nodes(self, batch: PathBatch) -> np.ndarray:
        return node_values(self.rho, batch)

    def mu_nodes(self, batch: PathBatch) -> np.ndarray:
        return node_values(self.mu, batch)

    def nu_nodes(self, batch: PathBatch) -> np.ndarray:
        return node_values(self.nu, batch)

    def integrability_sample(self, batch: PathBatch) -> float:
        """Largest sampled value of int (|rho| + |mu| + nu^2) dt (must be finite)."""
        total = (np.abs(self.rho_nodes(batch)) + np.abs(self.mu_nodes(batch))
                 + self.nu_nodes(batch) ** 2)
        integral = running_integral(total, batch)
        return float(integral[np.arange(batch.n_paths), batch.stop_index].max())


@dataclass(frozen=True)
class StructuralReport:
    margin: float
    passed: bool
    worst_path: int
    worst_node: int
    tolerance: float


def check_structural_condition(spec: CoefficientSpec, batch: PathBatch,
                               tolerance: float = 1e-12) -> StructuralReport:
    """Minimum over paths and nodes of rho - mu - theta nu^2 / (2 [1 ^ (p-1)])."""
    margin = (spec.rho_nodes(batch) - spec.mu_nodes(batch)
              - spec.theta * spec.nu_nodes(batch) ** 2 / spec.lipschitz_denominator)
    margin = np.where(batch.active_nodes(), margin, np.inf)
    flat = int(np.argmin(margin))
    path, node = divmod(flat, batch.n_steps + 1)
    worst = float(margin[path, node])
    return StructuralReport(worst, bool(worst >= -tolerance), path, node, tolerance)
