"""Brownian driver, forward Euler-Maruyama diffusions, first-exit stopping and
Girsanov reweighting.

Randomness comes from one counter-based Philox stream per path index keyed by
the scenario seed, so a batch is reproducible per (seed, path index) and
independent of worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import map_blocks, mean_and_se
from .core import PathBatch, TimeGrid, as_process, stochastic_integral, node_values, running_integral
from .errors import ConfigurationError, CoreDomainError, NumericalOverflowError

_MASK64 = (1 << 64) - 1


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based stream for one path, keyed by (seed, path index)."""
    key = ((int(seed) & _MASK64) << 64) | (int(path_index) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_brownian(n_paths: int, grid: TimeGrid, d: int = 1, seed: int = 0,
                      jobs=None) -> PathBatch:
    """Independent Gaussian increments with variance dt per step and dimension.

    States hold the Brownian path itself (state_dim = d, started at 0);
    stop_index is the full horizon.
    """
    if n_paths < 1:
        raise ConfigurationError(f"n_paths must be >= 1, got {n_paths}")
    m = grid.n_steps
    sqrt_dt = np.sqrt(grid.dt)[:, None]
    increments = np.empty((n_paths, m, d))

    def fill(sl):
        for i in range(sl.start, sl.stop):
            increments[i] = path_rng(seed, i).standard_normal((m, d)) * sqrt_dt
        return 0

    map_blocks(fill, n_paths, jobs)
    states = np.zeros((n_paths, m + 1, d))
    np.cumsum(increments, axis=1, out=states[:, 1:])
    stop = np.full(n_paths, m, dtype=np.int64)
    return PathBatch(grid, increments, states, stop, seed)


def coarsen(batch: PathBatch, factor: int) -> PathBatch:
    """Sum consecutive increments to obtain the same Brownian paths on a
    coarser nested grid (common-random-number refinement studies).

    Only valid for unstopped Brownian carrier batches.
    """
    m = batch.n_steps
    if factor < 1 or m % factor:
        raise ConfigurationError(f"coarsening factor {factor} must divide n_steps {m}")
    if not np.all(batch.stop_index == m):
        raise ConfigurationError("coarsen requires an unstopped batch")
    mc = m // factor
    times = batch.times[::factor]
    grid = TimeGrid(batch.grid.t0, batch.grid.horizon, mc, times)
    inc = batch.increments.reshape(batch.n_paths, mc, factor, batch.d).sum(axis=2)
    states = np.zeros((batch.n_paths, mc + 1, batch.d))
    np.cumsum(inc, axis=1, out=states[:, 1:])
    return PathBatch(grid, inc, states, np.full(batch.n_paths, mc, dtype=np.int64), batch.seed)


@dataclass(frozen=True)
class DriftDiffusionSpec:
    """Forward SDE coefficients: drift b(t, x), diffusion sigma(t, x), start x0.

    ``b`` maps (t, states (n, s)) -> (n, s) (or (n,) for s = 1);
    ``sigma`` maps (t, states) -> (n, s, d), or (n,)/(n, s) when d = 1.
    Scalars are accepted for constant coefficients.
    """

    b: object
    sigma: object
    x0: object
    lipschitz_const: float | None = None

    def start(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.x0, dtype=float))


def _eval_drift(spec, t, states):
    b = spec.b(t, states) if callable(spec.b) else spec.b
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        return np.full_like(states, float(b))
    if b.ndim == 1:
        return b[:, None] if states.shape[1] == 1 else np.broadcast_to(b[:, None], states.shape)
    return b


def _eval_sigma(spec, t, states, d):
    s = spec.sigma(t, states) if callable(spec.sigma) else spec.sigma
    s = np.asarray(s, dtype=float)
    n, sdim = states.shape
    if s.ndim == 0:
        out = np.zeros((n, sdim, d))
        for i in range(min(sdim, d)):
            out[:, i, i] = float(s)
        return out
    if s.ndim == 1:  # per-path scalar, sdim == d == 1
        return s[:, None, None]
    if s.ndim == 2:  # (n, sdim) with d == 1
        return s[:, :, None]
    return s


def euler_maruyama(spec: DriftDiffusionSpec, batch: PathBatch) -> PathBatch:
    """Fill states with X_{j+1} = X_j + b dt + sigma dB along the batch's noise."""
    x0 = spec.start()
    sdim = x0.shape[0]
    n, m, d = batch.n_paths, batch.n_steps, batch.d
    states = np.empty((n, m + 1, sdim))
    states[:, 0] = x0
    times, dt = batch.times, batch.dt
    for j in range(m):
        x = states[:, j]
        drift = _eval_drift(spec, float(times[j]), x)
        sig = _eval_sigma(spec, float(times[j]), x, d)
        states[:, j + 1] = x + drift * dt[j] + np.einsum("nsd,nd->ns", sig, batch.increments[:, j])
        if not np.all(np.isfinite(states[:, j + 1])):
            raise NumericalOverflowError(f"euler-maruyama overflow at step {j + 1}")
    # respect a pre-existing stopping rule by freezing past the stop index
    if not np.all(batch.stop_index == m):
        idx = np.minimum(np.arange(m + 1)[None, :], batch.stop_index[:, None])
        states = np.take_along_axis(states, idx[:, :, None], axis=1)
    return batch.with_states(states)


def first_exit_time(batch: PathBatch, a: float, b: float) -> PathBatch:
    """Stop each path at the first grid node with X outside (a, b); cap at the
    grid horizon.  States after the stop are frozen at the stopped value.

    The state must be scalar (1D exit problems).
    """
    if batch.state_dim != 1:
        raise ConfigurationError("first_exit_time handles scalar states only")
    if not a < b:
        raise ConfigurationError(f"empty interval ({a}, {b})")
    x = batch.states[:, :, 0]
    outside = (x <= a) | (x >= b)
    m = batch.n_steps
    first = np.where(outside.any(axis=1), outside.argmax(axis=1), m)
    stop = np.minimum(first, batch.stop_index).astype(np.int64)
    idx = np.minimum(np.arange(m + 1)[None, :], stop[:, None])
    frozen = np.take_along_axis(batch.states, idx[:, :, None], axis=1)
    return batch.with_states(frozen, stop)


@dataclass(frozen=True)
class GirsanovWeightPath:
    """Stochastic exponential L_t of a density process q with |q| <= nu."""

    q_steps: np.ndarray      # (n_paths, n_steps, d), left-endpoint values
    log_weights: np.ndarray  # (n_paths, n_steps + 1), log L at nodes
    batch: PathBatch

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def terminal_weights(self) -> np.ndarray:
        logs = self.log_weights[np.arange(self.batch.n_paths), self.batch.stop_index]
        return np.exp(logs)

    def mean_terminal_weight(self):
        """E[L_tau] with standard error; should be 1 for a true density."""
        return mean_and_se(self.terminal_weights())


def girsanov_weights(q, batch: PathBatch, nu=None) -> GirsanovWeightPath:
    """Discrete stochastic exponential, accumulated in log space:
    log L_{j+1} = log L_j + q_j . dB_j - |q_j|^2 dt_j / 2  (left-endpoint q).

    When a barrier ``nu`` is supplied, |q| <= nu is enforced at every active
    node and a violation raises :class:`CoreDomainError`.
    """
    q_nodes = _density_steps(q, batch)
    if nu is not None:
        bound = node_values(as_process(nu), batch)[:, :-1]
        mag = np.sqrt(np.sum(q_nodes * q_nodes, axis=2))
        bad = (mag > bound + 1e-12) & batch.alive_steps()
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise CoreDomainError(
                f"density exceeds barrier at path {i}, step {j}: "
                f"|q|={mag[i, j]:.6g} > nu={bound[i, j]:.6g}")
    drift = stochastic_integral(q_nodes, batch)
    quad = running_integral(
        np.concatenate([np.sum(q_nodes * q_nodes, axis=2),
                        np.zeros((batch.n_paths, 1))], axis=1),
        batch, rule="left")
    log_l = drift - 0.5 * quad
    return GirsanovWeightPath(q_nodes, log_l, batch)


def _density_steps(q, batch: PathBatch) -> np.ndarray:
    """Evaluate a density candidate at left endpoints: (n_paths, n_steps, d)."""
    if callable(q):
        cols = []
        for j in range(batch.n_steps):
            val = np.asarray(q(float(batch.times[j]), batch.states[:, j]), dtype=float)
            if val.ndim == 0:
                val = np.full((batch.n_paths, batch.d), float(val))
            elif val.ndim == 1:
                val = np.broadcast_to(val[:, None], (batch.n_paths, batch.d))
            cols.append(val)
        return np.stack(cols, axis=1)
    arr = np.asarray(q, dtype=float)
    if arr.ndim == 0:
        return np.full((batch.n_paths, batch.n_steps, batch.d), float(arr))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape != (batch.n_paths, batch.n_steps, batch.d):
        raise ConfigurationError("density array must be (n_paths, n_steps[, d])")
    return arr
