"""Named scenario catalog: generators, PDE problems, utility cores and
study presets, each with a desk-scale "full" profile and a fast "smoke"
profile for wiring tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import CoefficientSpec, PathBatch, build_grid, running_integral, node_values
from .errors import UsageError
from .fk import EllipticProblem, ParabolicProblem
from .sde import DriftDiffusionSpec, euler_maruyama, first_exit_time, simulate_brownian
from .solver import GeneratorSpec
from .utility import CoreFunctionSpec


# ---------------------------------------------------------------------------
# BSDE generator scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BsdeScenarioDef:
    name: str
    description: str
    gen: GeneratorSpec
    terminal: Callable[[PathBatch], np.ndarray]
    exit_interval: tuple | None = None   # (a, b); None = deterministic horizon
    y0_expect: tuple | None = None       # (value, abs_tol)
    grid: tuple = (1.0, 64)              # (horizon, n_steps)
    y_probe_scale: float = 1.0

    def build_batch(self, n_paths: int, seed: int, grid_override=None) -> PathBatch:
        horizon, n_steps = grid_override or self.grid
        grid = build_grid(0.0, horizon, n_steps)
        batch = simulate_brownian(n_paths, grid, 1, seed)
        if self.exit_interval is not None:
            batch = first_exit_time(batch, *self.exit_interval)
        return batch


def _terminal_state(batch):
    return batch.stopped_states()[:, 0]


def _terminal_discounted_state(batch):
    return np.exp(-batch.stop_times()) * batch.stopped_states()[:, 0]


def _terminal_exp_tau(batch):
    return np.exp(batch.stop_times())


def _terminal_state_pair(batch):
    x = batch.stopped_states()[:, 0]
    return np.stack([x, x * x], axis=1)


def _build_bsde_scenarios():
    scenarios = {}

    # worst-case z drift: g = -nu |z|, explicit solution y = B_t - nu (T - t)
    nu = 0.5
    scenarios["worst-case-z-drift"] = BsdeScenarioDef(
        "worst-case-z-drift",
        "z-only generator -nu|z| with Brownian terminal; closed-form value",
        GeneratorSpec(lambda t, x, y, z: -nu * np.abs(z[:, :, 0]),
                      CoefficientSpec(2.0, 2.0, nu ** 2, 0.0, nu), k=1),
        _terminal_state, y0_expect=(-0.5, 0.02))

    # linear generator cross-checked against the closed-form oracle
    mu_l, nu_l = 0.5, 0.3
    scenarios["linear-mu-nu"] = BsdeScenarioDef(
        "linear-mu-nu",
        "linear generator mu y + nu z; matches the reweighting oracle",
        GeneratorSpec(lambda t, x, y, z: mu_l * y + nu_l * z[:, :, 0],
                      CoefficientSpec(2.0, 2.0, mu_l + nu_l ** 2, mu_l, nu_l), k=1),
        _terminal_state, y0_expect=(0.3 * np.exp(0.5), 0.02))

    # monotone drift with a clipped-quadratic z term; the kink of |z| ^ |z|^2
    # has slope 2, so the provable Lipschitz envelope carries the factor 2
    def g_clipped(t, x, y, z):
        zmag = np.sqrt(np.sum(z * z, axis=(1, 2)))
        zpart = np.sqrt(np.abs(x[:, 0]) + 1.0) * np.minimum(zmag, zmag ** 2)
        return -np.abs(x[:, :1]) * y + zpart[:, None]

    scenarios["bm-monotone-clipped-z"] = BsdeScenarioDef(
        "bm-monotone-clipped-z",
        "state-monotone drift -|x| y with clipped-quadratic z growth",
        GeneratorSpec(
            g_clipped,
            CoefficientSpec(2.0, 2.0,
                            rho=lambda t, s: 3.0 * np.abs(s[:, 0]) + 4.0,
                            mu=lambda t, s: -np.abs(s[:, 0]),
                            nu=lambda t, s: 2.0 * np.sqrt(np.abs(s[:, 0]) + 1.0)),
            growth_envelope=lambda t, s, r: np.abs(s[:, 0]) * r, k=1),
        _terminal_state)

    # exponential decay in y with a bounded sine z term; stopped at an exit
    def g_exp_decay(t, x, y, z):
        zmag = np.sqrt(np.sum(z * z, axis=(1, 2)))
        return np.exp(-np.abs(x[:, :1]) * y) - y + np.sin(zmag)[:, None] - 1.0

    scenarios["exp-decay-sine-z"] = BsdeScenarioDef(
        "exp-decay-sine-z",
        "state-modulated exponential decay with sine z term on a stopped horizon",
        GeneratorSpec(
            g_exp_decay,
            CoefficientSpec(2.0, 2.0, rho=0.0, mu=-1.0, nu=1.0),
            growth_envelope=lambda t, s, r: np.exp(np.abs(s[:, 0]) * r) + r + 1.0,
            k=1),
        _terminal_state, exit_interval=(-2.0, 2.0), grid=(4.0, 256),
        y_probe_scale=0.5)

    # strongly decaying cubic drift dominated by a growing z coefficient
    def _a(t, x):
        return np.abs(x) ** 2 * (t <= 1.0) + 2.0 * np.exp(-t)

    def _nu3(t, x):
        return np.abs(x) ** 2 * (t <= 1.0) + np.exp(-t)

    def g_cubic(t, x, y, z):
        zmag = np.sqrt(np.sum(z * z, axis=(1, 2)))
        a2 = _a(t, x[:, 0]) ** 2
        return -a2[:, None] * (y + y ** 3) + (_nu3(t, x[:, 0]) * zmag)[:, None]

    scenarios["cubic-decay-abs-z"] = BsdeScenarioDef(
        "cubic-decay-abs-z",
        "cubic monotone decay with quartic-weight coefficients",
        GeneratorSpec(
            g_cubic,
            CoefficientSpec(2.0, 2.0,
                            rho=lambda t, s: -_a(t, s[:, 0]) ** 2 + _nu3(t, s[:, 0]) ** 2,
                            mu=lambda t, s: -_a(t, s[:, 0]) ** 2,
                            nu=lambda t, s: _nu3(t, s[:, 0])),
            growth_envelope=lambda t, s, r: _a(t, s[:, 0]) ** 2 * (r + r ** 3), k=1),
        _terminal_state, exit_interval=(-2.0, 2.0), grid=(2.0, 128),
        y_probe_scale=0.5)

    # square-root kink around zero with a logarithmic z term; the drift is
    # nonincreasing but flat for positive y, so the declared envelope is mu = 0
    def g_kink(t, x, y, z):
        zmag = np.sqrt(np.sum(z * z, axis=(1, 2)))
        yv = y[:, 0]
        with np.errstate(invalid="ignore"):
            drift = np.where(yv <= -0.25, -yv + 0.25,
                             np.where(yv <= 0.0, np.sqrt(np.maximum(-yv, 0.0)), 0.0))
        return (drift + np.log1p(zmag))[:, None]

    scenarios["sqrt-kink-log-z"] = BsdeScenarioDef(
        "sqrt-kink-log-z",
        "square-root kink drift with log(1+|z|) growth and discounted terminal",
        GeneratorSpec(g_kink, CoefficientSpec(2.0, 2.0, rho=1.0, mu=0.0, nu=1.0),
                      growth_envelope=lambda t, s, r: r + 0.5, k=1),
        _terminal_discounted_state, exit_interval=(-1.0, 1.0), grid=(4.0, 256))

    # two-dimensional cross-coupled monotone system with square-root and norm
    # z terms; the sine coupling keeps the monotonicity envelope at -2
    def g_pair(t, x, y, z):
        zmag = np.sqrt(np.sum(z * z, axis=(1, 2)))
        out = -3.0 * y
        out[:, 0] += np.sin(y[:, 1]) + np.sqrt(1.0 + 2.0 * zmag)
        out[:, 1] += np.sin(y[:, 0]) + zmag
        return out

    scenarios["coupled-pair-sqrt-z"] = BsdeScenarioDef(
        "coupled-pair-sqrt-z",
        "two-dimensional cross-coupled monotone system, sqrt and norm z terms",
        GeneratorSpec(g_pair, CoefficientSpec(2.0, 2.0, rho=0.0, mu=-2.0,
                                              nu=np.sqrt(2.0)),
                      growth_envelope=lambda t, s, r: 4.0 * r, k=2),
        _terminal_state_pair, exit_interval=(-1.0, 1.0), grid=(4.0, 256),
        y_probe_scale=0.5)

    # exponential-plus-linear monotone drift, z-free, negative weight
    def g_exp_linear(t, x, y, z):
        yv = y[:, 0]
        return (np.where(yv <= 0.0, np.exp(-yv), 1.0 - yv) - 1.0)[:, None]

    scenarios["exp-plus-linear-monotone"] = BsdeScenarioDef(
        "exp-plus-linear-monotone",
        "piecewise exponential/linear monotone drift with negative weight",
        GeneratorSpec(g_exp_linear, CoefficientSpec(2.0, 2.0, rho=-1.0, mu=-1.0, nu=0.0),
                      growth_envelope=lambda t, s, r: np.exp(r) + r + 1.0, k=1),
        _terminal_exp_tau, exit_interval=(-1.0, 1.0), grid=(4.0, 256),
        y_probe_scale=0.5)
    return scenarios


BSDE_SCENARIOS = _build_bsde_scenarios()


# ---------------------------------------------------------------------------
# Feynman-Kac scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FkScenarioDef:
    name: str
    description: str
    problem: object
    points: tuple
    fd: dict
    expected: Callable | None = None       # analytic u(t, x) when known
    growth: tuple | None = None            # (C, q) for the growth check
    tolerance: float = 0.05
    # exit-time discretization allowance per sqrt(dt); the first-exit scheme
    # carries no bridge correction, so tau-sensitive values stop late
    exit_budget: float = 0.0


def _build_fk_scenarios():
    scenarios = {}
    heat = ParabolicProblem(
        b=0.0, sigma=1.0,
        g=lambda t, x, u, w: np.zeros_like(np.asarray(x, dtype=float)),
        h=lambda x: np.asarray(x, dtype=float) ** 2,
        horizon=1.0, x_min=-6.0, x_max=6.0, bound=0.0)
    scenarios["fk-heat-quadratic"] = FkScenarioDef(
        "fk-heat-quadratic", "quadratic terminal under the heat flow",
        heat,
        points=((0.0, 0.0), (0.0, 1.0), (0.0, -1.0), (0.0, 2.0), (0.0, -2.0),
                (0.25, 0.5), (0.25, -0.5), (0.5, 1.0), (0.5, -1.0)),
        fd={"nx": 201, "nt": 200},
        expected=lambda t, x: x ** 2 + (1.0 - t),
        growth=(2.0, 2.0))

    decay = ParabolicProblem(
        b=0.0, sigma=1.0,
        g=lambda t, x, u, w: -np.asarray(u, dtype=float),
        h=lambda x: np.asarray(x, dtype=float),
        horizon=1.0, x_min=-6.0, x_max=6.0, m=-1.0, n=0.0, bound=0.0)
    scenarios["fk-product-decay"] = FkScenarioDef(
        "fk-product-decay", "linear terminal with unit decay",
        decay, points=((0.0, 0.0), (0.0, 1.0), (0.5, -1.0)),
        fd={"nx": 201, "nt": 200},
        expected=lambda t, x: x * np.exp(-(1.0 - t)))

    const = ParabolicProblem(
        b=0.0, sigma=1.0,
        g=lambda t, x, u, w: np.zeros_like(np.asarray(x, dtype=float)),
        h=lambda x: np.full_like(np.asarray(x, dtype=float), 2.0),
        horizon=1.0, x_min=-6.0, x_max=6.0)
    scenarios["fk-constant"] = FkScenarioDef(
        "fk-constant", "constant datum is preserved exactly",
        const, points=((0.0, 0.0), (0.7, 1.3)),
        fd={"nx": 101, "nt": 100},
        expected=lambda t, x: 2.0, tolerance=0.01)

    harmonic = EllipticProblem(
        a=-1.0, b_right=1.0, drift=0.0, sigma=1.0,
        g=lambda x, u, w: np.zeros_like(np.asarray(x, dtype=float)),
        h=lambda x: np.asarray(x, dtype=float),
        cap=6.0, margin=1.0)
    scenarios["fk-elliptic-harmonic"] = FkScenarioDef(
        "fk-elliptic-harmonic", "harmonic boundary data on an interval",
        harmonic, points=(-0.5, 0.0, 0.5),
        fd={"nx": 201},
        expected=lambda t, x: x)

    cosh = EllipticProblem(
        a=-1.0, b_right=1.0, drift=0.0, sigma=1.0,
        g=lambda x, u, w: -np.asarray(u, dtype=float),
        h=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        cap=6.0, m=-1.0, margin=1.0)
    scenarios["fk-elliptic-cosh"] = FkScenarioDef(
        "fk-elliptic-cosh", "exit-time discounting of unit boundary data",
        cosh, points=(-0.5, 0.0, 0.5),
        fd={"nx": 201},
        expected=lambda t, x: np.cosh(np.sqrt(2.0) * x) / np.cosh(np.sqrt(2.0)),
        exit_budget=0.5)

    quad = EllipticProblem(
        a=-1.0, b_right=1.0, drift=0.0, sigma=1.0,
        g=lambda x, u, w: np.ones_like(np.asarray(x, dtype=float)),
        h=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        cap=6.0)
    scenarios["fk-elliptic-quadratic"] = FkScenarioDef(
        "fk-elliptic-quadratic", "unit source with zero boundary data",
        quad, points=(-0.5, 0.0, 0.5),
        fd={"nx": 201},
        expected=lambda t, x: 1.0 - x ** 2,
        exit_budget=1.6)
    return scenarios


FK_SCENARIOS = _build_fk_scenarios()


# ---------------------------------------------------------------------------
# utility scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtilityScenarioDef:
    name: str
    description: str
    core: CoreFunctionSpec
    mu: float
    nu: float
    rho: float
    candidates: tuple
    u0_expect: tuple | None = None      # (value, abs_tol)
    gap_tol: float = 0.02
    best_candidate: str | None = None
    grid: tuple = (1.0, 64)


def _flat_core(nu):
    def f(t, state, q):
        q = np.asarray(q, dtype=float)
        return np.where(np.abs(q) <= nu + 1e-12, 0.0, np.inf)
    return CoreFunctionSpec(f, nu, 0.0)


def _quadratic_core(nu):
    def f(t, state, q):
        q = np.asarray(q, dtype=float)
        return np.where(np.abs(q) <= nu + 1e-12, 0.5 * q * q, np.inf)
    return CoreFunctionSpec(f, nu, 0.5 * nu ** 2)


def _build_utility_scenarios():
    nu = 0.5
    return {
        "utility-worst-case-drift": UtilityScenarioDef(
            "utility-worst-case-drift",
            "flat core on |q| <= 1/2: worst-case drift of a Brownian payoff",
            _flat_core(nu), mu=0.0, nu=nu, rho=nu ** 2,
            candidates=(-0.5, -0.25, 0.0, 0.25, 0.5),
            u0_expect=(-0.5, 0.02), best_candidate="const=-0.5"),
        "utility-clipped-quadratic": UtilityScenarioDef(
            "utility-clipped-quadratic",
            "quadratic core clipped at |q| <= 1/2",
            _quadratic_core(nu), mu=0.0, nu=nu, rho=nu ** 2,
            candidates=(-0.5, -0.25, 0.0, 0.25, 0.5),
            u0_expect=(-(nu - 0.5 * nu ** 2), 0.02)),
    }


UTILITY_SCENARIOS = _build_utility_scenarios()


# ---------------------------------------------------------------------------
# study presets and the catalog index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    kind: str
    description: str
    config: dict = field(default_factory=dict)


def _catalog() -> dict:
    entries = {}

    def add(id_, kind, description, **config):
        entries[id_] = CatalogEntry(id_, kind, description, config)

    add("linear-drift-vol-bm", "linear",
        "closed-form linear value for (mu, nu, xi) = (0.5, 0.3, B_T)",
        mu="0.5", nu="0.3", terminal="x",
        grid={"horizon": 1.0, "n_steps": 64},
        batch={"full": 100000, "smoke": 4000},
        expects=[{"name": "y0", "value": 0.3 * float(np.exp(0.5)), "rel_tol": 0.01}])

    for name, scen in BSDE_SCENARIOS.items():
        add(name, "nonlinear-bsde", scen.description, scenario=name,
            batch={"full": 40000, "smoke": 3000})

    for name, scen in FK_SCENARIOS.items():
        kind = ("feynman-kac-parabolic" if isinstance(scen.problem, ParabolicProblem)
                else "feynman-kac-elliptic")
        add(name, kind, scen.description, scenario=name,
            batch={"full": 20000, "smoke": 2000},
            steps={"full": 64 if kind.endswith("parabolic") else 256,
                   "smoke": 16 if kind.endswith("parabolic") else 64})

    for name, scen in UTILITY_SCENARIOS.items():
        add(name, "utility", scen.description, scenario=name,
            batch={"full": 100000, "smoke": 4000}, axioms=True)

    add("infinite-horizon-decay", "study",
        "pure-decay values vanish as the horizon grows while xi stays fixed",
        study="horizon-decay", horizons=[1.0, 2.0, 4.0],
        steps_per_unit={"full": 256, "smoke": 64},
        batch={"full": 128, "smoke": 64}, c=1.0,
        rel_tol={"full": 0.01, "smoke": 0.05})

    add("supnorm-margin-study", "study",
        "weighted sup-norm margins of the borderline linear value process",
        study="supnorm-margin", b=1.0, p=2.0, thetas=[1.0, 2.0],
        grid={"horizon": 1.0, "n_steps": {"full": 128, "smoke": 32}},
        batch={"full": 150000, "smoke": 5000})

    add("truncation-lognormal-decay", "study",
        "dyadic truncation differences decay for a lognormal terminal",
        study="truncation-decay", levels=[1, 2, 4, 8],
        grid={"horizon": 0.4, "n_steps": 32},
        batch={"full": 100000, "smoke": 5000})

    add("quartic-weight-qualitative", "study",
        "quartic-path-integral terminal stays in the weighted space",
        study="weight-membership",
        grid={"horizon": 2.0, "n_steps": 128},
        batch={"full": 20000, "smoke": 2000})

    return entries


CATALOG = _catalog()


def get_entry(entry_id: str) -> CatalogEntry:
    try:
        return CATALOG[entry_id]
    except KeyError:
        raise UsageError(f"unknown catalog id {entry_id!r}; see `catalog list`")


def catalog_ids():
    return sorted(CATALOG)
