import math
from dataclasses import replace

import numpy as np
import pytest

from mmvlab.bsde import solve_h_deterministic, solve_scenario, solve_Y
from mmvlab.control import (
    StepContext,
    compute_R,
    conservation_study,
    forward_pass,
    optimal_eta,
    optimal_retention,
    optimal_u,
    optimal_wealth_closed_form,
    robust_value,
    verify_saddle,
)
from mmvlab.errors import DomainError, FloorViolation, SingularD
from mmvlab.io import load_scenario
from mmvlab.model import ClaimDistribution, CoefficientModel, JumpModel, ScenarioConfig, Tier, TimeGrid
from mmvlab.paths import PathBundle


def _model(A=0.03, B=0.1, D=0.2):
    return CoefficientModel(Tier.DETERMINISTIC, B=np.array([B]), C=np.zeros(1), D=np.array([[D]]), A=A)


def _coefs(model, P=2):
    return model.evaluate(0.0, model.initial_state(P))


class TestPointwise:
    def test_u_hat_at_origin(self):
        model = _model()
        grid = TimeGrid(1.0, 100)
        h = solve_h_deterministic(model, grid)
        y = solve_Y(h)
        P = 2
        hv = np.full(P, h.h0)
        u = optimal_u(hv, np.zeros((P, 1)), np.full(P, y.y0), np.zeros((P, 1)), np.full((P, 1), 0.5),
                      np.array([1.0, 7.0]), np.ones(P), 1.0, _coefs(model, P))
        expected = 0.5 * math.exp(0.25) / (math.exp(0.03) * 0.2)
        np.testing.assert_allclose(u, expected, rtol=1e-12)

    def test_eta_hat(self):
        np.testing.assert_array_equal(optimal_eta(np.array([[0.5, -0.1]])), [[-0.5, 0.1]])

    def test_wealth_closed_form_starts_at_x(self):
        h0, y0 = math.exp(0.03), math.exp(0.25)
        assert optimal_wealth_closed_form(np.array([h0]), np.array([y0]), np.ones(1), 1.3, 2.0, h0, y0)[0] \
            == pytest.approx(1.3, rel=1e-15)

    def test_R_identity(self):
        h0, y0, x, theta = 1.2, 1.5, 0.7, 3.0
        assert compute_R(h0, y0, x, 1.0, theta) == pytest.approx(robust_value(h0, y0, x, theta), rel=1e-15)

    def test_retention(self):
        jump = JumpModel(1.0, ClaimDistribution("discrete", atoms=((1.0, 1.0),)), 0.3)
        q = optimal_retention(np.array([1.0]), np.array([math.exp(0.09)]), np.ones(1), 1.0, jump)
        assert q[0] == pytest.approx(0.3 * math.exp(0.09), rel=1e-15)

    def test_floor_and_singular(self):
        model = _model()
        args = (np.zeros((1, 1)), np.ones(1), np.zeros((1, 1)), np.zeros((1, 1)), np.ones(1), np.ones(1), 1.0)
        with pytest.raises(FloorViolation):
            optimal_u(np.array([0.0]), *args, _coefs(model, 1))
        sing = CoefficientModel(Tier.DETERMINISTIC, B=np.zeros(2), C=np.zeros(2), D=np.ones((2, 2)), A=0.0,
                                delta=0.0)
        with pytest.raises(SingularD):
            optimal_u(np.ones(1), np.zeros((1, 2)), np.ones(1), np.zeros((1, 2)), np.zeros((1, 2)),
                      np.ones(1), np.ones(1), 1.0, _coefs(sing, 1))


class TestRobustValue:
    def test_examples(self):
        assert robust_value(1.0, 1.0, 2.0, 1.0) == 2.0
        assert robust_value(math.exp(0.03), math.exp(0.25), 1.0, 1.0) == pytest.approx(
            math.exp(0.03) + (math.exp(0.25) - 1) / 2, rel=1e-15)

    @pytest.mark.parametrize("h0, y0, theta", [(1.0, 0.5, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 0.0)])
    def test_domain(self, h0, y0, theta):
        with pytest.raises(DomainError):
            robust_value(h0, y0, 1.0, theta)

    def test_tolerance(self):
        assert robust_value(1.0, 1.0 - 1e-12, 1.0, 1.0, tol=1e-10) == pytest.approx(1.0)


def test_closed_form_wealth_conserves_R():
    h0, y0, x, theta = 1.2, 1.5, 0.7, 3.0
    h, Y, lam = np.array([1.1, 1.05, 1.0]), np.array([1.3, 1.0, 1.0]), np.array([0.6, 2.0, 0.01])
    X = optimal_wealth_closed_form(h, Y, lam, x, theta, h0, y0)
    # h X = h0 x + (y0 - Lam Y)/theta on the closed-form wealth
    R = compute_R(h, Y, X, lam, theta)
    np.testing.assert_allclose(R, h0 * x + (y0 - 1) / theta - (lam * Y - 1) / (2 * theta), rtol=1e-14)


def _zero_cfg(steps=20, P=2000):
    model = _model(A=0.0, B=0.0)
    return ScenarioConfig(1.5, 1.0, TimeGrid(1.0, steps), model, None, P, 3)


class TestZeroMarket:
    def test_saddle_exact(self):
        cfg = _zero_cfg()
        rep = verify_saddle(cfg)
        assert rep.r0 == 1.5
        assert rep.equality_case["estimate"] == pytest.approx(1.5, abs=1e-15)
        by = {p["name"]: p for p in rep.probes}
        assert by["u_hat"]["estimate"] == pytest.approx(1.5, abs=1e-15)
        assert by["zero"]["estimate"] == pytest.approx(1.5, abs=1e-15)

    def test_forward_has_no_deviation(self):
        cfg = _zero_cfg()
        fr = forward_pass(cfg, solve_scenario(cfg), PathBundle(cfg.grid, 500, 1, 0))
        assert fr.deviation_max == 0.0 and np.all(fr.X_opt == 1.5)


@pytest.fixture(scope="module")
def small_const():
    return load_scenario("portfolio_const", n_paths=20_000, steps=50, seed=11)


def test_saddle_small_run(small_const):
    rep = verify_saddle(small_const)
    d = rep.to_dict()
    assert d["pass"], [p for p in d["probes"] if not p["pass"]]
    sol = solve_scenario(small_const)
    assert rep.r0 == robust_value(sol.h.h0, sol.y.y0, small_const.x, small_const.theta)


def test_saddle_reruns_identical(small_const):
    cfg = load_scenario("portfolio_const", n_paths=2000, steps=20, seed=5)
    assert verify_saddle(cfg).to_dict() == verify_saddle(cfg).to_dict()


def test_forward_closed_form_deviation(small_const):
    fr = forward_pass(small_const, solve_scenario(small_const), PathBundle(small_const.grid, 4096, 1, 2))
    assert fr.closed_form_deviation <= 1e-12
    assert fr.X_opt.shape[-1] == 4096


def test_conservation_deviation_shrinks():
    cfg = load_scenario("portfolio_const", n_paths=2000, seed=4)
    study = conservation_study(cfg, lambda g: solve_scenario(replace(cfg, grid=g)), steps=(50, 100, 200))
    errs = [r["path_sup_mean"] for r in study["rows"]]
    assert errs[0] > errs[1] > errs[2]
    assert 0.35 < study["order"] < 0.65


def test_step_context_jump_free_optimal_is_u():
    model = _model()
    h = solve_h_deterministic(model, TimeGrid(1.0, 10))
    ctx = StepContext(0, 0.0, 1.0, np.full(2, h.h0), np.zeros((2, 1)), np.ones(2), np.zeros((2, 1)),
                      np.full((2, 1), 0.5), np.ones(2), 1.0, _coefs(model))
    np.testing.assert_array_equal(ctx.optimal(np.ones(2)), ctx.u_hat(np.ones(2)))
