import numpy as np
import pytest

from bsdelab import linear_bsde_value, simulate_brownian, supnorm_margin_study, build_grid
from bsdelab._parallel import mean_and_se
from bsdelab.errors import IllPosedScenarioError
from bsdelab.linear import doob_constant, reweighting_exponent


def terminal_bm(batch):
    return batch.states[:, -1, 0]


def test_deterministic_exponential(bm_batch):
    val = linear_bsde_value(0.5, 0.0, np.ones(bm_batch.n_paths), 0.0, bm_batch)
    assert val.y0 == pytest.approx(np.exp(0.5), rel=1e-12)


def test_gaussian_shift_oracle(bm_batch):
    val = linear_bsde_value(0.0, 0.3, terminal_bm(bm_batch), 0.5, bm_batch)
    assert abs(val.y0 - 0.3) <= 3 * val.y0_se
    # conditional values: y_t = B_t + 0.3 (1 - t) at t = 0.5
    target = bm_batch.states[:, val.node, 0] + 0.3 * 0.5
    rms = np.sqrt(np.mean((val.y_t - target) ** 2))
    assert rms <= 0.05


def test_product_scenario(bm_batch):
    val = linear_bsde_value(0.5, 0.3, terminal_bm(bm_batch), 0.0, bm_batch)
    expected = 0.3 * np.exp(0.5)
    assert abs(val.y0 - expected) <= max(3 * val.y0_se, 0.01 * expected)


def test_tower_property(bm_batch):
    mu, nu = 0.5, 0.3
    val = linear_bsde_value(mu, nu, terminal_bm(bm_batch), 0.5, bm_batch)
    exponent = reweighting_exponent(mu, nu, bm_batch)
    reweighted = val.y_t * np.exp(exponent[:, val.node])
    back, se = mean_and_se(reweighted)
    assert abs(back - val.y0) <= 3 * np.hypot(se, val.y0_se)


def test_linearity_same_sample(bm_batch):
    xi1 = terminal_bm(bm_batch)
    xi2 = np.abs(xi1)
    a = linear_bsde_value(0.2, 0.1, xi1, 0.5, bm_batch)
    b = linear_bsde_value(0.2, 0.1, xi2, 0.5, bm_batch)
    both = linear_bsde_value(0.2, 0.1, xi1 + xi2, 0.5, bm_batch)
    assert both.y0 == pytest.approx(a.y0 + b.y0, rel=1e-10)
    np.testing.assert_allclose(both.y_t, a.y_t + b.y_t, atol=1e-8)
    scaled = linear_bsde_value(0.2, 0.1, 2.5 * xi1, 0.5, bm_batch)
    assert scaled.y0 == pytest.approx(2.5 * a.y0, rel=1e-10)


def test_zero_vol_oracle_agreement(bm_batch):
    # nu = 0 and a sigma(B_t)-measurable terminal in the basis span:
    # y_t = exp(mu (T - t)) xi, sample-exact up to the ridge term
    mu = 0.3
    node = 32
    xi = bm_batch.states[:, node, 0] ** 2
    val = linear_bsde_value(mu, 0.0, xi, 0.5, bm_batch)
    np.testing.assert_allclose(val.y_t, np.exp(mu * 0.5) * xi, atol=1e-6)


def test_ill_posed_scenario_detected(bm_batch):
    with np.errstate(over="ignore"):
        heavy = np.exp(np.exp(np.clip(6 * bm_batch.states[:, -1, 0], None, 200)))
    with pytest.raises(IllPosedScenarioError):
        linear_bsde_value(700.0, 0.0, heavy, 0.0, bm_batch)


# --- sup-norm margin study ----------------------------------------------------


def test_margin_study_degenerate_weight(bm_batch_small):
    report = supnorm_margin_study(0.0, 2.0, [1.0, 2.0], bm_batch_small)
    for row in report.rows:
        assert row.sup_estimate == pytest.approx(1.0, abs=1e-12)
        assert row.terminal_estimate == pytest.approx(1.0, abs=1e-12)


def test_margin_study_doob_bound_and_ordering(bm_batch):
    # theta' = 2 weighted sup stays under the maximal-inequality bound
    # (constant (q/(q-1))^q, q = p / (1 + (p-1)/theta)); the bound-normalized
    # ratio at theta' = 2 sits strictly below the theta' = 1 ratio.
    report = supnorm_margin_study(1.0, 2.0, [1.0, 2.0], bm_batch)
    r1, r2 = report.row(1.0), report.row(2.0)
    c = doob_constant(2.0, 2.0)
    assert c == pytest.approx((4 / 3 / (1 / 3)) ** (4 / 3))
    combined = 3 * (r2.sup_se + c * r2.terminal_se)
    assert r2.sup_estimate <= c * r2.terminal_estimate + combined
    assert r2.normalized_ratio < r1.normalized_ratio
    assert np.isinf(r1.doob_constant)


def test_margin_study_grows_under_refinement():
    # the borderline theta' = 1 statistic grows as the grid resolves the sup
    fine = simulate_brownian(20000, build_grid(0, 1, 1024), seed=77)
    from bsdelab.sde import coarsen
    coarse = coarsen(fine, 16)
    s_fine = supnorm_margin_study(1.0, 2.0, [1.0], fine).row(1.0)
    s_coarse = supnorm_margin_study(1.0, 2.0, [1.0], coarse).row(1.0)
    assert s_fine.sup_estimate > s_coarse.sup_estimate
