import math

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmvlab.control import compute_R, optimal_wealth_closed_form, robust_value
from mmvlab.duality import F_value, J_value, K_hat, gamma_hat, mv_value, sup_J
from mmvlab.model import ClaimDistribution, CoefficientModel, Tier, TimeGrid, generic_to_portfolio, portfolio_to_generic
from mmvlab.paths import PathBundle, stochastic_exponential

finite = dict(allow_nan=False, allow_infinity=False)
y0s = st.floats(1.001, 20.0, **finite)
thetas = st.floats(0.05, 20.0, **finite)
xs = st.floats(-5.0, 5.0, **finite)
h0s = st.floats(0.2, 5.0, **finite)


@given(st.lists(st.tuples(st.floats(0.01, 50.0, **finite), st.floats(0.01, 1.0, **finite)), min_size=1, max_size=6))
def test_claim_moments_ordered(atoms):
    total = sum(p for _, p in atoms)
    atoms = tuple((y, p / total) for y, p in atoms)
    assume(abs(sum(p for _, p in atoms) - 1.0) < 1e-12)
    c = ClaimDistribution("discrete", atoms=atoms)
    assert c.m1**2 <= c.m2 * (1 + 1e-12)
    assert c.m1 <= c.support_max * (1 + 1e-12)


@given(h0s, y0s, xs, thetas)
def test_duality_chain(h0, y0, x, theta):
    K = K_hat(h0, y0, x, theta)
    F = F_value(K, h0, y0, x)
    assert math.isclose(K - 0.5 * theta * F, robust_value(h0, y0, x, theta), rel_tol=1e-10, abs_tol=1e-10)
    assert math.isclose(mv_value(h0, y0, x, theta), robust_value(h0, y0, x, theta), rel_tol=1e-12, abs_tol=1e-12)
    g = gamma_hat(K, h0, y0, x)
    assert math.isclose(g, h0 * x + y0 / theta, rel_tol=1e-10, abs_tol=1e-10)
    assert math.isclose(F, (y0 - 1) / theta**2, rel_tol=1e-10, abs_tol=1e-12)


@settings(max_examples=50)
@given(h0s, st.floats(1.01, 10.0, **finite), xs, st.floats(-10.0, 10.0, **finite))
def test_F_is_sup_of_J(h0, y0, x, K):
    F = F_value(K, h0, y0, x)
    g = gamma_hat(K, h0, y0, x)
    assert math.isclose(J_value(K, g, h0, y0, x), F, rel_tol=1e-9, abs_tol=1e-9)
    for dg in (-1.0, -1e-3, 1e-3, 1.0):
        assert J_value(K, g + dg, h0, y0, x) <= F + 1e-12 * max(1.0, F)
    sup, _ = sup_J(K, h0, y0, x)
    assert abs(sup - F) <= 1e-9 * max(1.0, F)


@given(h0s, y0s, xs, thetas, arrays(float, 4, elements=st.floats(0.2, 5.0, **finite)),
       arrays(float, 4, elements=st.floats(1.0, 5.0, **finite)), arrays(float, 4, elements=st.floats(1e-3, 10.0, **finite)))
def test_closed_form_wealth_conserved(h0, y0, x, theta, h, Y, lam):
    X = optimal_wealth_closed_form(h, Y, lam, x, theta, h0, y0)
    conserved = theta * h * X + lam * Y
    np.testing.assert_allclose(conserved, theta * h0 * x + y0, rtol=1e-10, atol=1e-10)
    R = compute_R(h, Y, X, lam, theta)
    assert np.all(np.isfinite(R))


@st.composite
def markets(draw):
    n = draw(st.integers(1, 3))
    r = draw(st.floats(-0.05, 0.1, **finite))
    mu = draw(arrays(float, n, elements=st.floats(-0.5, 0.5, **finite)))
    lower = draw(arrays(float, (n, n), elements=st.floats(-0.3, 0.3, **finite)))
    diag = draw(arrays(float, n, elements=st.floats(0.1, 0.6, **finite)))
    sigma = np.tril(lower, -1) + np.diag(diag)
    return r, mu, sigma


@given(markets())
def test_portfolio_round_trip(market):
    r, mu, sigma = market
    r2, mu2, sigma2 = generic_to_portfolio(portfolio_to_generic(r, mu, sigma))
    assert r2 == r
    np.testing.assert_allclose(mu2, mu, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(sigma2, sigma, rtol=1e-12, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(arrays(float, 2, elements=st.floats(-3.0, 3.0, **finite)), st.integers(0, 2**31 - 1))
def test_density_positive(eta, seed):
    model = CoefficientModel(Tier.DETERMINISTIC, B=np.zeros(2), C=np.zeros(2), D=np.eye(2), A=0.0)
    lam = stochastic_exponential(eta, PathBundle(TimeGrid(1.0, 20), 64, 2, seed), model).Lam
    assert np.all(lam > 0) and np.all(np.isfinite(lam))
