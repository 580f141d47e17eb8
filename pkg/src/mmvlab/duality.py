"""Mean-variance problem: Lagrangian dual chain, closed forms and empirical check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .control import _check_h, _solve_hdt, robust_value
from .errors import DegenerateMarket
from .model import ScenarioConfig
from .paths import PathBundle, generate_paths, simulate_state

EXACT_TOL = 1e-10


def _check(y0: float, tol: float):
    if not y0 - 1.0 > tol:
        raise DegenerateMarket(f"Y_0 - 1 = {y0 - 1.0:.3g} is within {tol:g} of zero; the dual is degenerate")


def J_value(K: float, gamma: float, h0: float, y0: float, x: float, *, tol: float = EXACT_TOL) -> float:
    """``Y_0^{-1} (h_0 x - gamma)^2 - (K - gamma)^2``."""
    _check(y0, tol)
    return (h0 * x - gamma) ** 2 / y0 - (K - gamma) ** 2


def F_value(K: float, h0: float, y0: float, x: float, *, tol: float = EXACT_TOL) -> float:
    """Minimal variance at mean K: ``Y_0^{-1} (K - h_0 x)^2 / (1 - Y_0^{-1})``."""
    _check(y0, tol)
    return (K - h0 * x) ** 2 / (y0 - 1.0)


def gamma_hat(K: float, h0: float, y0: float, x: float, *, tol: float = EXACT_TOL) -> float:
    """Maximiser of ``J(K, .)``: ``(Y_0^{-1} h_0 x - K) / (Y_0^{-1} - 1)``."""
    _check(y0, tol)
    return (h0 * x / y0 - K) / (1.0 / y0 - 1.0)


def K_hat(h0: float, y0: float, x: float, theta: float, *, tol: float = EXACT_TOL) -> float:
    """Optimal target mean ``h_0 x + (1 - Y_0^{-1}) / (theta Y_0^{-1})``."""
    _check(y0, tol)
    return h0 * x + (1.0 - 1.0 / y0) / (theta / y0)


def mv_value(h0: float, y0: float, x: float, theta: float, *, tol: float = EXACT_TOL) -> float:
    """``K_hat - (theta/2) F(K_hat)``; asserted equal to ``h_0 x + (Y_0 - 1)/(2 theta)``."""
    K = K_hat(h0, y0, x, theta, tol=tol)
    val = K - 0.5 * theta * F_value(K, h0, y0, x, tol=tol)
    closed = h0 * x + (y0 - 1.0) / (2.0 * theta)
    if not math.isclose(val, closed, rel_tol=1e-12, abs_tol=1e-12):
        raise AssertionError(f"duality chain broken: {val!r} != {closed!r}")
    return val


def sup_J(K: float, h0: float, y0: float, x: float, *, tol: float = EXACT_TOL, xtol: float = 1e-12) -> tuple:
    """Numerical ``sup_gamma J(K, gamma)`` by golden-section search; returns ``(value, argmax)``."""
    _check(y0, tol)
    centre = h0 * x
    width = 10.0 * (abs(K - centre) + 1.0) * y0 / (y0 - 1.0)
    res = optimize.minimize_scalar(lambda g: -J_value(K, g, h0, y0, x, tol=tol), method="golden",
                                   bracket=(centre - width, centre, centre + width), tol=xtol)
    return -float(res.fun), float(res.x)


def mv_feedback(gamma: float, h, L, Y, Z, phi, X, coefs) -> np.ndarray:
    """``(h D')^{-1} [-(phi - Z/Y)(h X - gamma) - X L - h X C]``."""
    _check_h(h)
    rhs = -(phi - Z / Y[:, None]) * (h * X - gamma)[:, None] - X[:, None] * L - (h * X)[:, None] * coefs.C
    return _solve_hdt(h, coefs.D, rhs)


def _mean_var_ses(XT: np.ndarray, theta: float):
    """Sample mean, variance, MV value and delta-method standard errors."""
    P = XT.size
    mean = float(XT.mean())
    c = XT - mean
    var = float(c @ c / (P - 1))
    m4 = float(np.mean(c**4))
    m3 = float(np.mean(c**3))
    se_mean = math.sqrt(var / P)
    se_var = math.sqrt(max(m4 - var**2, 0.0) / P)
    # value = mean - theta/2 var: influence function c - theta/2 (c^2 - var)
    var_value = var - theta * m3 + 0.25 * theta**2 * (m4 - var**2)
    se_value = math.sqrt(max(var_value, 0.0) / P)
    return mean, var, mean - 0.5 * theta * var, se_mean, se_var, se_value


@dataclass
class MVEmpirical:
    mean: float
    var: float
    value: float
    se_mean: float
    se_var: float
    se_value: float
    n_paths: int
    excluded: int = 0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "var": self.var, "value": self.value, "se_mean": self.se_mean,
                "se_var": self.se_var, "se_value": self.se_value, "n_paths": self.n_paths, "excluded": self.excluded}


def mv_empirical(control_rule: Callable, cfg: ScenarioConfig, *, bundle: Optional[PathBundle] = None,
                 eta=None, psi=None) -> MVEmpirical:
    """Simulate X under ``control_rule`` and summarise ``X_T``.

    ``control_rule(step, X, Lam)`` as in :func:`simulate_state`; ``eta``/``psi``
    generate the density handed to the rule.
    """
    bundle = bundle or generate_paths(cfg)
    sp = simulate_state(cfg.model, control_rule, bundle, cfg.x, eta=eta, psi=psi, keep="terminal")
    XT = sp.terminal[sp.valid]
    return MVEmpirical(*_mean_var_ses(XT, cfg.theta), n_paths=int(XT.size), excluded=sp.n_flagged)


def mv_from_terminal(XT: np.ndarray, theta: float) -> MVEmpirical:
    XT = XT[np.isfinite(XT)]
    return MVEmpirical(*_mean_var_ses(XT, theta), n_paths=int(XT.size))


@dataclass
class DualityReport:
    h0: float
    y0: float
    x: float
    theta: float
    k_hat: float
    gamma_hat_k_hat: float
    f_k_hat: float
    mv_value: float
    mmv_value: float
    var_target: float
    empirical: Optional[MVEmpirical] = None
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        out = {"h0": self.h0, "y0": self.y0, "x": self.x, "theta": self.theta, "k_hat": self.k_hat,
               "gamma_hat_k_hat": self.gamma_hat_k_hat, "f_k_hat": self.f_k_hat, "mv_value": self.mv_value,
               "mmv_value": self.mmv_value,
               "var_target": self.var_target,
               "var_target_note": "derived: F(K_hat) = (Y_0 - 1) / theta^2",
               "empirical": None if self.empirical is None else self.empirical.to_dict(),
               "checks": self.checks, "pass": self.passed}
        return out


def duality_report(h0: float, y0: float, x: float, theta: float, *, empirical: Optional[MVEmpirical] = None,
                   tol: float = EXACT_TOL) -> DualityReport:
    """Closed-form chain plus optional empirical comparison at 4 standard errors."""
    K = K_hat(h0, y0, x, theta, tol=tol)
    g = gamma_hat(K, h0, y0, x, tol=tol)
    F = F_value(K, h0, y0, x, tol=tol)
    mv = mv_value(h0, y0, x, theta, tol=tol)
    mmv = robust_value(h0, y0, x, theta)
    sup, _ = sup_J(K, h0, y0, x, tol=tol)
    var_target = (y0 - 1.0) / theta**2
    scale = max(1.0, abs(h0 * x) + y0 / theta)
    checks = {
        "mv_equals_mmv": math.isclose(mv, mmv, rel_tol=1e-12, abs_tol=1e-14),
        "gamma_hat_k_hat_closed_form": math.isclose(g, h0 * x + y0 / theta, rel_tol=1e-12, abs_tol=1e-14 * scale),
        "f_k_hat_variance": math.isclose(F, var_target, rel_tol=1e-12, abs_tol=1e-14),
        "dual_sup_matches_f": abs(sup - F) <= 1e-9,
    }
    if empirical is not None:
        e = empirical
        checks["empirical_mean"] = abs(e.mean - K) <= 4 * e.se_mean
        checks["empirical_var"] = abs(e.var - var_target) <= 4 * e.se_var
        checks["empirical_value"] = abs(e.value - mv) <= 4 * e.se_value
    return DualityReport(h0, y0, x, theta, K, g, F, mv, mmv, var_target, empirical, checks)
