import math
from dataclasses import replace

import numpy as np
import pytest

from mmvlab.applications import (
    PortfolioScenario,
    ReinsuranceScenario,
    mv_feedback_reinsurance,
    run_portfolio,
    run_reinsurance,
    scenario_from_config,
    zero_loading_limit,
)
from mmvlab.bsde import solve_scenario
from mmvlab.control import StepContext
from mmvlab.duality import K_hat, gamma_hat
from mmvlab.io import load_scenario
from mmvlab.model import ClaimDistribution, CoefficientModel, JumpModel, Tier, TimeGrid


def _jump(b=0.3):
    return JumpModel(1.0, ClaimDistribution("discrete", atoms=((1.0, 0.5), (2.0, 0.5))), b)


def test_scenario_round_trip():
    cfg = load_scenario("reinsurance_discrete")
    scn = scenario_from_config(cfg)
    assert isinstance(scn, ReinsuranceScenario)
    assert scn.model.tier is cfg.model.tier
    assert isinstance(scenario_from_config(load_scenario("portfolio_const")), PortfolioScenario)


def test_generic_model_has_no_market():
    model = CoefficientModel(Tier.DETERMINISTIC, B=np.array([0.1]), C=np.array([0.05]), D=np.array([[0.2]]), A=0.03)
    with pytest.raises(ValueError):
        PortfolioScenario.from_model(model)


def test_feedback_at_gamma_hat_reproduces_retention():
    scn = PortfolioScenario(0.03, [0.1], [[0.2]])
    jump = _jump()
    cfg = load_scenario("reinsurance_discrete", steps=50)
    cfg = replace(cfg, model=scn.model, jump=jump)
    sol = solve_scenario(cfg)
    x, theta = cfg.x, cfg.theta
    h0, y0 = sol.h.h0, sol.y.y0
    g = gamma_hat(K_hat(h0, y0, x, theta), h0, y0, x)
    k = 20
    state = cfg.model.initial_state(3)
    h, L, Y, Z, ph = sol.values(k, state)
    coefs = cfg.model.evaluate(cfg.grid.t(k), state)
    lam = np.array([0.5, 1.0, 1.7])
    X = (theta * h0 * x + y0 - lam * Y) / (theta * h)
    ctx = StepContext(k, cfg.grid.t(k), 1.0, h, L, Y, Z, ph, lam, theta, coefs, jump)
    pi, q = mv_feedback_reinsurance(g, h, L, Y, Z, ph, X, coefs, jump)
    u_hat, q_hat = ctx.optimal(X)
    np.testing.assert_allclose(q, q_hat, rtol=1e-12)
    np.testing.assert_allclose(pi, u_hat, rtol=1e-12)


def test_zero_premium_market():
    r = lambda t: 0.02 + 0.02 * t  # noqa: E731
    scn = PortfolioScenario(r, [0.0], [[0.2]])
    cfg = load_scenario("portfolio_const", steps=100)
    cfg = replace(cfg, model=scn.model)
    sol = solve_scenario(cfg)
    assert sol.h.h0 == pytest.approx(math.exp(0.03), rel=1e-12)
    assert sol.y.y0 == 1.0
    state = cfg.model.initial_state(2)
    h, L, Y, Z, ph = sol.values(0, state)
    ctx = StepContext(0, 0.0, 1.0, h, L, Y, Z, ph, np.ones(2), cfg.theta, cfg.model.evaluate(0.0, state))
    assert np.all(ctx.u_hat(np.array([1.0, 2.0])) == 0.0)


def test_h_unaffected_by_claims():
    cfg = load_scenario("reinsurance_discrete", steps=50)
    with_claims = solve_scenario(cfg)
    without = solve_scenario(replace(cfg, jump=None))
    np.testing.assert_array_equal(with_claims.h.values, without.h.values)
    assert with_claims.y.y0 > without.y.y0


@pytest.fixture(scope="module")
def reports():
    cfg = load_scenario("reinsurance_lognormal", n_paths=20_000, steps=50, seed=2)
    scn = scenario_from_config(cfg)
    zero = ReinsuranceScenario(scn.portfolio, replace(cfg.jump, premium_loading=0.0))
    port = run_portfolio(scn.portfolio, replace(cfg, jump=None))
    return port, run_reinsurance(scn, cfg), run_reinsurance(zero, replace(cfg, jump=zero.jump))


def test_portfolio_report(reports):
    port = reports[0]
    assert port["pass"], port["checks"]
    assert port["specialization"]["pi_max_rel_diff"] <= 1e-12
    assert port["conservation"]["closed_form_max_rel"] <= 1e-12


def test_reinsurance_report(reports):
    rep = reports[1]
    assert rep["pass"], rep["checks"]
    ri = rep["reinsurance"]
    assert ri["q_hat_min"] > 0
    assert 0 <= ri["psi_hat_min"] <= ri["psi_hat_max"] <= ri["psi_hat_bound"]


def test_zero_loading_limit(reports):
    port, _, zero = reports
    lim = zero_loading_limit(port, zero)
    assert lim["pass"], lim
    assert lim["probes_compared"] >= 4


def test_oracle_block_for_factor_rate():
    cfg = load_scenario("portfolio_vasicek", n_paths=4000, steps=50, seed=1)
    rep = run_portfolio(scenario_from_config(cfg), cfg)
    assert "oracle" in rep and set(rep["oracle"]) == {"h0", "y0", "pass"}
    assert rep["oracle"]["h0"]["rel_diff"] < 1e-3
