import numpy as np
import pytest

from bsdelab import (CoefficientSpec, GeneratorSpec, SolverConfig,
                     backward_euler_pass, build_grid, contraction_ratio,
                     continuous_dependence_check, horizon_decay_study,
                     linear_bsde_value, picard_solve, probe_envelopes,
                     radial_clip, simulate_brownian, stability_check,
                     truncation_study, weighted_sup_norm,
                     weighted_terminal_norm)
from bsdelab.errors import ConfigurationError, DegenerateInputError
from bsdelab.solver import apriori_report

ZERO_COEFFS = CoefficientSpec(2.0, 2.0, 0.0, 0.0, 0.0)


def terminal_bm(batch):
    return batch.states[:, -1, 0]


def gen_const(value=0.0, coeffs=ZERO_COEFFS):
    return GeneratorSpec(lambda t, x, y, z: np.full_like(y, value), coeffs, k=1)


# --- backward pass -------------------------------------------------------------


def test_backward_pass_martingale_representation(bm_batch):
    # g = 0, xi = B_T: Y_t = B_t and Z = 1 up to regression noise
    sol = backward_euler_pass(gen_const(0.0), terminal_bm(bm_batch), None, bm_batch)
    rms_y = np.sqrt(np.mean((sol.Y[:, :, 0] - bm_batch.states[:, :, 0]) ** 2))
    rms_z = np.sqrt(np.mean((sol.Z[:, :, 0, 0] - 1.0) ** 2))
    assert rms_y <= 1e-2
    assert rms_z <= 5e-2  # pointwise field; the path-mean is much tighter
    assert abs(sol.Z.mean() - 1.0) <= 1e-2


def test_backward_pass_linear_ode(bm_batch):
    # g(y) = -y, xi = c: Y_0 = c e^{-T}
    c = 2.0
    gen = GeneratorSpec(lambda t, x, y, z: -y, CoefficientSpec(2, 2, 0.0, -1.0, 0.0), k=1)
    sol = backward_euler_pass(gen, np.full(bm_batch.n_paths, c), None, bm_batch)
    assert abs(sol.scalar_y0() - c * np.exp(-1.0)) <= 0.01 * c


def test_backward_pass_deterministic_integration(bm_batch_small):
    sol = backward_euler_pass(gen_const(1.0), np.zeros(bm_batch_small.n_paths),
                              None, bm_batch_small)
    expected = bm_batch_small.grid.horizon - bm_batch_small.times
    np.testing.assert_allclose(sol.Y[:, :, 0],
                               np.broadcast_to(expected, sol.Y[:, :, 0].shape),
                               atol=1e-10)


def test_terminal_consistency(bm_batch_small):
    xi = np.abs(terminal_bm(bm_batch_small))
    sol = backward_euler_pass(gen_const(0.0), xi, None, bm_batch_small)
    assert sol.residual == 0.0


# --- fixed-point loop -----------------------------------------------------------


def test_picard_two_iterations_for_z_independent(bm_batch_small):
    gen = GeneratorSpec(lambda t, x, y, z: -y, CoefficientSpec(2, 2, 0.0, -1.0, 0.0), k=1)
    sol = picard_solve(gen, terminal_bm(bm_batch_small), bm_batch_small)
    assert sol.converged and sol.picard_iterations == 2
    assert sol.picard_history[-1] <= 1e-12


def test_picard_worst_case_drift(bm_batch):
    # g(z) = -nu |z|, xi = B_T: y_t = B_t - nu (T - t), Z = 1
    nu = 0.5
    coeffs = CoefficientSpec(2.0, 2.0, rho=nu ** 2, mu=0.0, nu=nu)
    gen = GeneratorSpec(lambda t, x, y, z: -nu * np.abs(z[:, :, 0]), coeffs, k=1)
    sol = picard_solve(gen, terminal_bm(bm_batch), bm_batch)
    assert sol.converged
    assert abs(sol.scalar_y0() + nu) <= 0.02
    assert abs(sol.Z.mean() - 1.0) <= 0.02


def test_picard_matches_linear_oracle(bm_batch):
    mu, nu = 0.5, 0.3
    coeffs = CoefficientSpec(2.0, 2.0, rho=mu + nu ** 2, mu=mu, nu=nu)
    gen = GeneratorSpec(lambda t, x, y, z: mu * y + nu * z[:, :, 0], coeffs, k=1)
    sol = picard_solve(gen, terminal_bm(bm_batch), bm_batch)
    oracle = linear_bsde_value(mu, nu, terminal_bm(bm_batch), 0.0, bm_batch)
    assert abs(sol.scalar_y0() - 0.3 * np.exp(0.5)) <= 0.02
    assert abs(sol.scalar_y0() - oracle.y0) <= 0.02


def test_picard_structural_gate(bm_batch_small):
    bad = CoefficientSpec(2.0, 2.0, rho=0.0, mu=0.0, nu=1.0)
    gen = GeneratorSpec(lambda t, x, y, z: np.abs(z[:, :, 0]), bad, k=1)
    with pytest.raises(ConfigurationError, match="structural"):
        picard_solve(gen, terminal_bm(bm_batch_small), bm_batch_small)


def test_picard_idempotent_at_fixed_point(bm_batch):
    nu = 0.5
    coeffs = CoefficientSpec(2.0, 2.0, rho=nu ** 2, mu=0.0, nu=nu)
    gen = GeneratorSpec(lambda t, x, y, z: -nu * np.abs(z[:, :, 0]), coeffs, k=1)
    config = SolverConfig(picard_tol=1e-3)
    sol = picard_solve(gen, terminal_bm(bm_batch), bm_batch, config)
    again = backward_euler_pass(gen, terminal_bm(bm_batch), sol.Z, bm_batch, config)
    from bsdelab.solver import _m2_distance
    dist = _m2_distance(again.Z, sol.Z, coeffs.rho_nodes(bm_batch), bm_batch)
    assert dist < config.picard_tol


def test_comparison_sanity(bm_batch):
    gen = GeneratorSpec(lambda t, x, y, z: -y, CoefficientSpec(2, 2, 0.0, -1.0, 0.0), k=1)
    hi = picard_solve(gen, terminal_bm(bm_batch), bm_batch)
    lo = picard_solve(gen, terminal_bm(bm_batch) - 1.0, bm_batch)
    se = np.hypot(hi.y0_se[0], lo.y0_se[0])
    assert hi.scalar_y0() >= lo.scalar_y0() - 3 * se


def test_grid_refinement_halves_ode_error():
    # deterministic scenario: g(y) = -y, xi = 1; the error against e^{-T} is
    # pure time-discretization and halves when the step count doubles
    gen = GeneratorSpec(lambda t, x, y, z: -y, CoefficientSpec(2, 2, 0.0, -1.0, 0.0), k=1)
    errors = {}
    for m in (16, 32):
        batch = simulate_brownian(256, build_grid(0, 1, m), seed=5)
        sol = picard_solve(gen, np.ones(256), batch)
        errors[m] = abs(sol.scalar_y0() - np.exp(-1.0))
    ratio = errors[16] / errors[32]
    assert 2 * 0.6 <= ratio <= 2 * 1.4


# --- contraction ---------------------------------------------------------------


def _smooth_fields(batch, seed, k=1):
    rng = np.random.default_rng(seed)
    x = batch.states[:, :-1, 0]
    t = batch.times[:-1][None, :]
    coeff = rng.normal(scale=1.0, size=6)
    field = (coeff[0] + coeff[1] * x + coeff[2] * np.sin(x) + coeff[3] * t
             + coeff[4] * x * t + coeff[5] * np.cos(x))
    return field[:, :, None, None]


@pytest.mark.parametrize("theta,nu_val", [(2.0, 0.5), (4.0, 0.3535533905932738)])
def test_contraction_ratio_bound(theta, nu_val):
    batch = simulate_brownian(20000, build_grid(0, 1, 32), seed=303)
    coeffs = CoefficientSpec(2.0, theta, rho=0.25, mu=0.0, nu=nu_val)
    gen = GeneratorSpec(lambda t, x, y, z: nu_val * z[:, :, 0], coeffs, k=1)
    xi = terminal_bm(batch)
    worst = 0.0
    for pair_seed in range(5):
        v1 = _smooth_fields(batch, 2 * pair_seed)
        v2 = _smooth_fields(batch, 2 * pair_seed + 1)
        worst = max(worst, contraction_ratio(gen, xi, v1, v2, batch))
    assert worst <= 1.0 / theta + 0.05


def test_contraction_z_independent_noise_floor(bm_batch_small):
    gen = GeneratorSpec(lambda t, x, y, z: -y, CoefficientSpec(2, 2, 0.0, -1.0, 0.0), k=1)
    v1 = _smooth_fields(bm_batch_small, 1)
    v2 = _smooth_fields(bm_batch_small, 2)
    ratio = contraction_ratio(gen, terminal_bm(bm_batch_small), v1, v2, bm_batch_small)
    assert ratio <= 1e-3


def test_contraction_degenerate_input(bm_batch_small):
    gen = gen_const(0.0)
    v = _smooth_fields(bm_batch_small, 3)
    with pytest.raises(DegenerateInputError):
        contraction_ratio(gen, terminal_bm(bm_batch_small), v, v, bm_batch_small)


# --- truncation ------------------------------------------------------------------


def test_radial_clip_definition():
    assert radial_clip(3.0, 2.0) == pytest.approx(2.0)
    assert radial_clip(-1.0, 2.0) == pytest.approx(-1.0)
    assert radial_clip(0.0, 2.0) == 0.0
    vec = radial_clip(np.array([[3.0, 4.0]]), 2.5)
    np.testing.assert_allclose(vec, [[1.5, 2.0]])  # radius 2.5 along (3,4)/5


def test_truncation_inactive_for_bounded_terminal(bm_batch_small):
    xi = np.clip(terminal_bm(bm_batch_small), -0.9, 0.9)
    study = truncation_study(gen_const(0.0), xi, 0.0, [2, 4], bm_batch_small)
    for row in study.rows:
        assert row.y_diff_norm == pytest.approx(0.0, abs=1e-9)
        assert row.z_diff_norm == pytest.approx(0.0, abs=1e-9)


def test_truncation_tail_domination():
    # dyadic differences are dominated by the tail norm ||xi 1_{|xi|>n}||
    batch = simulate_brownian(30000, build_grid(0, 0.4, 32), seed=404)
    xi = np.exp(terminal_bm(batch))
    study = truncation_study(gen_const(0.0), xi, 0.0, [1, 2, 4, 8], batch)
    rho = np.zeros((batch.n_paths, batch.n_steps + 1))
    for row in study.rows:
        tail = np.where(np.abs(xi) > row.level, xi, 0.0)
        tail_norm, _ = weighted_terminal_norm(tail, rho, batch, 2.0)
        assert row.y_diff_norm <= 2.0 * tail_norm + 1e-6


# --- a priori / dependence / stability -------------------------------------------


def test_apriori_null_problem(bm_batch_small):
    sol = picard_solve(gen_const(0.0), np.zeros(bm_batch_small.n_paths), bm_batch_small)
    report = apriori_report(gen_const(0.0), np.zeros(bm_batch_small.n_paths),
                            sol, bm_batch_small)
    assert report.lhs == pytest.approx(0.0, abs=1e-16)
    assert report.rhs == pytest.approx(0.0, abs=1e-16)


def test_apriori_ratio_stable_under_doubling():
    mu, nu = 0.5, 0.3
    coeffs = CoefficientSpec(2.0, 2.0, rho=mu + nu ** 2, mu=mu, nu=nu)
    gen = GeneratorSpec(lambda t, x, y, z: mu * y + nu * z[:, :, 0], coeffs, k=1)
    ratios = []
    for n in (10000, 40000):
        batch = simulate_brownian(n, build_grid(0, 1, 32), seed=111)
        xi = terminal_bm(batch)
        sol = picard_solve(gen, xi, batch)
        report = apriori_report(gen, xi, sol, batch)
        assert np.isfinite(report.ratio)
        ratios.append(report.ratio)
    assert abs(ratios[1] - ratios[0]) <= 0.2 * ratios[0]


def test_apriori_p_homogeneity(bm_batch_small):
    mu, nu = 0.5, 0.3
    coeffs = CoefficientSpec(2.0, 2.0, rho=mu + nu ** 2, mu=mu, nu=nu)
    gen = GeneratorSpec(lambda t, x, y, z: mu * y + nu * z[:, :, 0], coeffs, k=1)
    xi = terminal_bm(bm_batch_small)
    r1 = apriori_report(gen, xi, picard_solve(gen, xi, bm_batch_small), bm_batch_small)
    r2 = apriori_report(gen, 2 * xi, picard_solve(gen, 2 * xi, bm_batch_small), bm_batch_small)
    assert r2.sup_power == pytest.approx(4.0 * r1.sup_power, rel=1e-6)
    assert r2.terminal_power == pytest.approx(4.0 * r1.terminal_power, rel=1e-10)


def test_continuous_dependence_identical_inputs(bm_batch_small):
    gen = gen_const(0.0)
    xi = terminal_bm(bm_batch_small)
    report = continuous_dependence_check(gen, gen, xi, xi, bm_batch_small)
    assert report.numerator == pytest.approx(0.0, abs=1e-16)


def test_continuous_dependence_eps_scaling(bm_batch_small):
    mu, nu = 0.5, 0.3
    coeffs = CoefficientSpec(2.0, 2.0, rho=mu + nu ** 2, mu=mu, nu=nu)
    gen = GeneratorSpec(lambda t, x, y, z: mu * y + nu * z[:, :, 0], coeffs, k=1)
    xi = terminal_bm(bm_batch_small)
    nums = {}
    for eps in (0.1, 0.05):
        report = continuous_dependence_check(gen, gen, xi + eps, xi, bm_batch_small)
        nums[eps] = report.numerator
    # numerator scales like eps^p (p = 2): halving eps divides it by 4
    assert nums[0.05] / nums[0.1] == pytest.approx(0.25, rel=0.2)


def test_continuous_dependence_constant_shift(bm_batch_small):
    # g' = g + delta with mu = nu = 0: the difference field is delta (T - t)
    delta = 0.3
    gen = gen_const(0.0)
    gen2 = gen_const(delta)
    xi = terminal_bm(bm_batch_small)
    from bsdelab.solver import picard_solve as solve
    sol = solve(gen, xi, bm_batch_small)
    sol2 = solve(gen2, xi, bm_batch_small)
    expected = delta * (bm_batch_small.grid.horizon - bm_batch_small.times)
    diff = sol2.Y[:, :, 0] - sol.Y[:, :, 0]
    assert np.max(np.abs(diff - expected[None, :])) <= 0.02


def test_stability_distances_decrease(bm_batch_small):
    gen = GeneratorSpec(lambda t, x, y, z: -y, CoefficientSpec(2, 2, 0.0, -1.0, 0.0), k=1)
    xi = terminal_bm(bm_batch_small)
    seq = [1, 2, 4, 8]
    gens = [gen] * len(seq)
    xis = [xi + 1.0 / n for n in seq]
    distances = stability_check(gens, xis, gen, xi, bm_batch_small)
    assert all(d1 > d2 for d1, d2 in zip(distances, distances[1:]))


def test_stability_constant_sequence_floor(bm_batch_small):
    gen = gen_const(0.0)
    xi = terminal_bm(bm_batch_small)
    distances = stability_check([gen, gen], [xi, xi], gen, xi, bm_batch_small)
    assert max(distances) <= 1e-12


def test_stability_linear_perturbation_rate(bm_batch_small):
    gen = gen_const(0.0)
    xi = terminal_bm(bm_batch_small)

    def shifted(value):
        return GeneratorSpec(lambda t, x, y, z: np.full_like(y, value), ZERO_COEFFS, k=1)

    seq = [2, 8]
    distances = stability_check([shifted(1.0 / n) for n in seq], [xi] * 2,
                                gen, xi, bm_batch_small)
    # squared distances of a linear perturbation scale like (1/n)^2
    c = distances[0] * seq[0] ** 2
    assert distances[1] <= 2 * c / seq[1] ** 2
    assert distances[1] >= c / (2 * seq[1] ** 2)


# --- growth-condition necessity study ---------------------------------------------


def test_horizon_decay_study():
    rows = horizon_decay_study(1.0, [1.0, 2.0, 4.0], steps_per_unit=256, n_paths=64)
    values = [row[1] for row in rows]
    for (T, y0, ref) in rows:
        assert abs(y0 - ref) <= 0.01 * ref
    assert values[0] > values[1] > values[2]
    assert values[-1] < 0.02  # decays toward zero while xi stays at 1


def test_horizon_decay_zero_terminal():
    rows = horizon_decay_study(0.0, [1.0], steps_per_unit=64, n_paths=32)
    assert rows[0][1] == pytest.approx(0.0, abs=1e-12)


# --- envelope probes ----------------------------------------------------------------


def test_envelope_probes_pass_for_declared_generator(bm_batch_small):
    # exponential-decay generator: monotone with mu = -1, z-free
    def g(t, x, y, z):
        return np.where(y <= 0, np.exp(-y), 1.0 - y) - 1.0

    coeffs = CoefficientSpec(2.0, 2.0, rho=-1.0, mu=-1.0, nu=0.0)
    gen = GeneratorSpec(g, coeffs, k=1)
    report = probe_envelopes(gen, bm_batch_small, n_probes=20000, seed=8)
    assert report.passed, report


def test_envelope_probes_flag_violations(bm_batch_small):
    # declared mu = -2 is stronger than the true monotonicity constant -1
    def g(t, x, y, z):
        return -y

    coeffs = CoefficientSpec(2.0, 2.0, rho=-2.0, mu=-2.0, nu=0.0)
    gen = GeneratorSpec(g, coeffs, k=1)
    report = probe_envelopes(gen, bm_batch_small, n_probes=20000, seed=8)
    assert not report.passed
    assert report.monotonicity_excess > 0
