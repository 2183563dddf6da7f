"""Closed-form linear BSDE evaluation and the sup-norm margin study.

For coefficients (mu, nu) and terminal value xi the linear value process is

    y_t = E[ xi * exp( int_t^T mu dr + int_t^T nu dB - int_t^T nu^2/2 dr ) | F_t ],

estimated by exact discrete reweighting (log space) plus, for interior t, a
polynomial regression on the Markov state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import mean_and_se
from .core import (PathBatch, as_process, node_values, running_integral,
                   stochastic_integral)
from .errors import ConfigurationError, IllPosedScenarioError
from .regression import StepRegressor


def _locate_node(batch: PathBatch, t: float) -> int:
    j = int(np.argmin(np.abs(batch.times - t)))
    if abs(batch.times[j] - t) > 1e-9:
        raise ConfigurationError(f"time {t} is not a grid node")
    return j


def _terminal_values(xi, batch: PathBatch) -> np.ndarray:
    values = np.asarray(xi(batch) if callable(xi) else xi, dtype=float)
    if values.shape != (batch.n_paths,):
        raise ConfigurationError("terminal values must be one scalar per path")
    return values


def reweighting_exponent(mu, nu, batch: PathBatch) -> np.ndarray:
    """Cumulative log of the linear-BSDE weight exp(int mu + int nu dB - int nu^2/2)."""
    mu_nodes = node_values(as_process(mu), batch)
    nu_nodes = node_values(as_process(nu), batch)
    drift = running_integral(mu_nodes, batch)
    stoch = stochastic_integral(nu_nodes[:, :-1], batch)
    quad = running_integral(nu_nodes ** 2, batch, rule="left")
    return drift + stoch - 0.5 * quad


@dataclass(frozen=True)
class LinearBSDEValue:
    y0: float
    y0_se: float
    node: int
    y_t: np.ndarray | None  # per-path conditional values at the node (None at t = 0)


def linear_bsde_value(mu, nu, xi, t, batch: PathBatch, basis_degree: int = 3,
                      coeffs=None) -> LinearBSDEValue:
    """Estimate y_t of the linear BSDE with generator mu*y + nu*z.

    y_0 is a plain reweighted Monte Carlo average; for interior t the
    conditional expectation is a degree-``basis_degree`` regression of the
    reweighted tail on the state at that node.  Passing a
    :class:`~bsdelab.core.CoefficientSpec` gates the call on its structural
    margin.
    """
    if coeffs is not None:
        from .core import check_structural_condition
        structure = check_structural_condition(coeffs, batch)
        if not structure.passed:
            raise ConfigurationError(
                f"structural margin {structure.margin:.6g} fails for the "
                "supplied weight process")
    values = _terminal_values(xi, batch)
    exponent = reweighting_exponent(mu, nu, batch)
    tail = exponent[np.arange(batch.n_paths), batch.stop_index]
    if not np.all(np.isfinite(tail)):
        raise IllPosedScenarioError("non-finite log-weight: terminal value outside the weighted space")
    with np.errstate(over="ignore"):
        weighted = values * np.exp(tail)
    if not np.all(np.isfinite(weighted)):
        raise IllPosedScenarioError("reweighted terminal value overflows: scenario ill-posed")
    y0, y0_se = mean_and_se(weighted)

    node = _locate_node(batch, t)
    y_t = None
    if node > 0:
        target = values * np.exp(tail - exponent[:, node])
        if not np.all(np.isfinite(target)):
            raise IllPosedScenarioError("non-finite reweighted tail at interior node")
        reg = StepRegressor(batch.states[:, node], basis_degree)
        y_t = reg.fit_predict(target)
    return LinearBSDEValue(float(y0), float(y0_se), node, y_t)


# ---------------------------------------------------------------------------
# sup-norm margin study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MarginStudyRow:
    theta: float
    sup_estimate: float
    sup_se: float
    terminal_estimate: float
    terminal_se: float
    doob_constant: float  # inf when theta == 1 (no maximal control)

    @property
    def normalized_ratio(self) -> float:
        return self.sup_estimate / self.terminal_estimate


@dataclass(frozen=True)
class MarginStudyReport:
    p: float
    rows: tuple

    def row(self, theta) -> MarginStudyRow:
        for r in self.rows:
            if abs(r.theta - theta) < 1e-12:
                return r
        raise KeyError(theta)


def doob_constant(p: float, theta: float) -> float:
    """(q/(q-1))^q with q = p / (1 + (p-1)/theta); inf at theta = 1."""
    if theta <= 1.0:
        return float("inf")
    p_tilde = 1.0 + (p - 1.0) / theta
    q = p / p_tilde
    return float((q / (q - 1.0)) ** q)


def supnorm_margin_study(b_process, p: float, theta_values, batch: PathBatch) -> MarginStudyReport:
    """Weighted sup-norm statistics for the borderline linear value process.

    The terminal value is the exponential functional whose conditional
    expectations have the closed form

        y_t = exp( A_t/(p-1) - (2p-1)/(2(p-1)^2) * Q_t ),

    where A_t = int_0^t b dB and Q_t = int_0^t b^2 dr.  With the weight
    exponent rho = theta * b^2 / (2(p-1)) the study reports, per theta, the
    estimate of E[sup_t exp(p int rho)|y_t|^p], the terminal bound estimate
    E[exp(p int rho)|xi|^p] and the maximal-inequality constant.
    """
    b_nodes = node_values(as_process(b_process), batch)
    a = stochastic_integral(b_nodes[:, :-1], batch)
    qv = running_integral(b_nodes ** 2, batch, rule="left")
    log_y = a / (p - 1.0) - (2.0 * p - 1.0) / (2.0 * (p - 1.0) ** 2) * qv
    active = batch.active_nodes()
    last = batch.stop_index
    rows = []
    for theta in theta_values:
        log_weight = p * float(theta) / (2.0 * (p - 1.0)) * qv
        log_nodes = np.where(active, p * log_y + log_weight, -np.inf)
        sup_stat = np.exp(np.max(log_nodes, axis=1))
        term_stat = np.exp(p * log_y[np.arange(batch.n_paths), last]
                           + log_weight[np.arange(batch.n_paths), last])
        sup_mean, sup_se = mean_and_se(sup_stat)
        term_mean, term_se = mean_and_se(term_stat)
        rows.append(MarginStudyRow(float(theta), sup_mean, sup_se,
                                   term_mean, term_se, doob_constant(p, float(theta))))
    return MarginStudyReport(p, tuple(rows))
