"""Portfolio selection and investment-reinsurance scenarios.

Both applications map onto the generic problem with ``(A, B, C, D) = (r, mu, 0, sigma)``.
The reinsurance market adds compensated Poisson claims with a retention
control ``q >= 0`` and a jump generator ``psi`` in the density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import __version__
from .bsde import BsdeSolution, solve_scenario
from .control import (
    StepContext,
    _check_h,
    default_control_probes,
    default_density_probes,
    forward_pass,
    robust_value,
    saddle_report,
)
from .duality import duality_report, mv_feedback, mv_from_terminal
from .model import (
    DEFAULT_A_MAX,
    DEFAULT_CAP,
    DEFAULT_DELTA,
    CoefficientModel,
    JumpModel,
    ScenarioConfig,
    portfolio_to_generic,
)
from .paths import DensityStepper, PathBundle, generate_paths, scaled_generator, walk

SPECIALIZATION_PATHS = 256
SPECIALIZATION_RTOL = 1e-12
ORACLE_SE = 3.0


@dataclass
class PortfolioScenario:
    """Market ``(r, mu, sigma)``: constants, functions of ``t``, or a factor for ``r``."""

    r: object
    mu: object
    sigma: object
    delta: float = DEFAULT_DELTA
    cap: float = DEFAULT_CAP
    a_max: float = DEFAULT_A_MAX

    @property
    def model(self) -> CoefficientModel:
        return portfolio_to_generic(self.r, self.mu, self.sigma, delta=self.delta, cap=self.cap, a_max=self.a_max)

    @classmethod
    def from_model(cls, model: CoefficientModel) -> "PortfolioScenario":
        if model.source is None:
            raise ValueError("model was not built from a portfolio market")
        r, mu, sigma = model.source
        return cls(r, mu, sigma, model.delta, model.cap, model.a_max)

    def mu_sigma(self, t: float):
        mu = self.mu(t) if callable(self.mu) else self.mu
        sigma = self.sigma(t) if callable(self.sigma) else self.sigma
        return np.atleast_1d(np.asarray(mu, dtype=float)), np.atleast_2d(np.asarray(sigma, dtype=float))


@dataclass
class ReinsuranceScenario:
    portfolio: PortfolioScenario
    jump: JumpModel

    @property
    def model(self) -> CoefficientModel:
        return self.portfolio.model


def _as_config(cfg: ScenarioConfig, model: CoefficientModel, jump: Optional[JumpModel]) -> ScenarioConfig:
    return replace(cfg, model=model, jump=jump)


def mv_feedback_reinsurance(gamma: float, h, L, Y, Z, phi, X, coefs, jump: JumpModel):
    """Mean-variance feedback ``(pi, q)`` for the target ``gamma``.

    ``pi`` is the Brownian feedback with ``C = 0``; the retention solves
    ``h q = -(h X - gamma) b / (lambda m2)``.
    """
    _check_h(h)
    pi = mv_feedback(gamma, h, L, Y, Z, phi, X, coefs)
    q = -(h * X - gamma) * jump.premium_loading / (jump.intensity * jump.m2 * h)
    return pi, q


def _specialized(scn: PortfolioScenario, t: float, h, L, Y, Z, X, lam, theta):
    """Optimal pair written directly in market symbols (mu, sigma, r)."""
    mu, sigma = scn.mu_sigma(t)
    premium = np.linalg.solve(sigma, mu)
    eta = -premium - L / h[:, None]
    bracket = (lam / theta)[:, None] * ((premium + L / h[:, None]) * Y[:, None] - Z) - X[:, None] * L
    pi = np.linalg.solve(sigma.T, (bracket / h[:, None]).T).T
    return eta, pi


def specialization_check(scn: PortfolioScenario, cfg: ScenarioConfig, sol: BsdeSolution, bundle: PathBundle,
                         *, n_paths: int = SPECIALIZATION_PATHS) -> dict:
    """Compare the market-symbol formulas with the generic feedback pointwise.

    States are the first ``n_paths`` paths of ``bundle``; the wealth is the
    closed-form optimal wealth and the density the optimal one.
    """
    sub = bundle.with_paths(min(n_paths, bundle.n_paths))
    jump = cfg.jump if sub.marks is not None else None
    psi = scaled_generator(jump, 1.0, "psi_hat") if jump is not None else None
    lam_hat = DensityStepper(sub.n_paths, psi)
    h0, y0, theta, x = sol.h.h0, sol.y.y0, cfg.theta, cfg.x
    worst_eta = worst_pi = 0.0
    for step in walk(sol.model, sub):
        h, L, Y, Z, ph = sol.values(step.k, step.state, step.coefs)
        lam = lam_hat.value
        X = (theta * h0 * x + y0 - lam * Y) / (theta * h)
        ctx = StepContext(step.k, step.t, cfg.grid.horizon, h, L, Y, Z, ph, lam, theta, step.coefs)
        eta_s, pi_s = _specialized(scn, step.t, h, L, Y, Z, X, lam, theta)
        eta_g, pi_g = ctx.eta_hat, ctx.u_hat(X)
        worst_eta = max(worst_eta, float(np.max(np.abs(eta_s - eta_g) / np.maximum(1.0, np.abs(eta_g)))))
        worst_pi = max(worst_pi, float(np.max(np.abs(pi_s - pi_g) / np.maximum(1.0, np.abs(pi_g)))))
        lam_hat.step(ctx.eta_hat, step)
    ok = worst_eta <= SPECIALIZATION_RTOL and worst_pi <= SPECIALIZATION_RTOL
    return {"eta_max_rel_diff": worst_eta, "pi_max_rel_diff": worst_pi, "n_paths": sub.n_paths, "pass": bool(ok)}


def _oracle_comparison(cfg: ScenarioConfig, exact: BsdeSolution) -> dict:
    reg = solve_scenario(cfg, backend="regression")
    out = {}
    for key, ref, est, se in (("h0", exact.h.h0, reg.h.h0, reg.h.h0_se), ("y0", exact.y.y0, reg.y.y0, reg.y.y0_se)):
        out[key] = {"exact": ref, "regression": est, "se": se, "rel_diff": abs(est - ref) / abs(ref),
                    "pass": bool(abs(est - ref) <= ORACLE_SE * se)}
    out["pass"] = all(v["pass"] for v in out.values())
    return out


def _solution_block(cfg: ScenarioConfig, sol: BsdeSolution) -> dict:
    h0, y0 = sol.h.h0, sol.y.y0
    return {"tier": sol.tier, "h0": h0, "y0": y0, "h0_se": sol.h.h0_se, "y0_se": sol.y.y0_se,
            "value": robust_value(h0, y0, cfg.x, cfg.theta)}


def _run(scn, cfg: ScenarioConfig, jump: Optional[JumpModel], *, sol, bundle, antithetic, oracle) -> dict:
    portfolio = scn if jump is None else scn.portfolio
    cfg = _as_config(cfg, portfolio.model, jump)
    sol = sol or solve_scenario(cfg)
    bundle = bundle or generate_paths(cfg, antithetic=antithetic)
    n = cfg.model.n
    cps = default_control_probes(n, cfg.seed, jump)
    dps = default_density_probes(n, cfg.seed, jump)
    fr = forward_pass(cfg, sol, bundle, control_probes=cps, density_probes=dps)
    saddle = saddle_report(cfg, fr, cps, dps)
    h0, y0 = sol.h.h0, sol.y.y0
    empirical = mv_from_terminal(fr.X_opt, cfg.theta)
    dual = duality_report(h0, y0, cfg.x, cfg.theta, empirical=empirical)
    value = robust_value(h0, y0, cfg.x, cfg.theta)
    checks = {
        "saddle": saddle.passed,
        "duality": dual.passed,
        "mmv_equals_mv": math.isclose(value, dual.mv_value, rel_tol=1e-12, abs_tol=1e-14),
        "closed_form_conservation": fr.closed_form_deviation <= 1e-12,
    }
    report = {
        "version": __version__, "seed": cfg.seed, "n_paths": cfg.n_paths, "steps": cfg.grid.steps,
        "solution": _solution_block(cfg, sol),
        "common_value": value,
        "saddle": saddle.to_dict(),
        "duality": dual.to_dict(),
        "conservation": {"closed_form_max_rel": fr.closed_form_deviation,
                         "simulated_rms_max": fr.deviation_rms, "simulated_abs_max": fr.deviation_max},
        "specialization": specialization_check(portfolio, cfg, sol, bundle),
    }
    checks["specialization"] = report["specialization"]["pass"]
    if jump is not None:
        bound = float(jump.premium_loading * jump.claims.support_max / (jump.intensity * jump.m2))
        sizes = bundle.marks.size if bundle.marks is not None else np.zeros(0)
        psi_marks = scaled_generator(jump, 1.0)(sizes)
        psi_min = float(psi_marks.min()) if sizes.size else 0.0
        psi_max = float(psi_marks.max()) if sizes.size else 0.0
        report["reinsurance"] = {"q_hat_min": fr.q_min, "psi_hat_min": psi_min, "psi_hat_max": psi_max,
                                 "psi_hat_bound": bound, "n_claims": int(sizes.size)}
        q_ok = fr.q_min > 0 if jump.premium_loading > 0 else fr.q_min >= 0
        checks["q_hat_positive"] = bool(q_ok)
        checks["psi_hat_in_bounds"] = bool(psi_min >= 0.0 and psi_max <= bound * (1 + 1e-12))
    if oracle is None:
        oracle = sol.h.exact and cfg.model.tier.value == "markov_factor"
    if oracle:
        report["oracle"] = _oracle_comparison(cfg, sol)
        checks["oracle"] = report["oracle"]["pass"]
    report["checks"] = checks
    report["pass"] = all(checks.values())
    return report


def run_portfolio(scn: PortfolioScenario, cfg: ScenarioConfig, *, sol: Optional[BsdeSolution] = None,
                  bundle: Optional[PathBundle] = None, antithetic: bool = False,
                  oracle: Optional[bool] = None) -> dict:
    """Solve, verify the saddle point and the duality chain for a portfolio market.

    Returns a combined JSON-ready report.  With a factor interest rate the
    affine solution is also compared with the regression backend unless
    ``oracle=False``.
    """
    return _run(scn, cfg, None, sol=sol, bundle=bundle, antithetic=antithetic, oracle=oracle)


def run_reinsurance(scn: ReinsuranceScenario, cfg: ScenarioConfig, *, sol: Optional[BsdeSolution] = None,
                    bundle: Optional[PathBundle] = None, antithetic: bool = False,
                    oracle: Optional[bool] = None) -> dict:
    """As :func:`run_portfolio` with claims, joint ``(eta, psi)`` and ``(pi, q)`` probes."""
    return _run(scn, cfg, scn.jump, sol=sol, bundle=bundle, antithetic=antithetic, oracle=oracle)


def scenario_from_config(cfg: ScenarioConfig):
    """Portfolio or reinsurance scenario wrapping a loaded config."""
    port = PortfolioScenario.from_model(cfg.model)
    return port if cfg.jump is None else ReinsuranceScenario(port, cfg.jump)


_LIMIT_PROBES = {"u_hat": "(pi_hat,q_hat)", "eta_hat": "(eta_hat,psi_hat)"}
# control probes whose retention vanishes with the premium loading
_LIMIT_U = ("u_hat", "zero")


def zero_loading_limit(portfolio_report: dict, reinsurance_report: dict) -> dict:
    """Fields of a ``b = 0`` reinsurance report that must equal the portfolio report bit for bit.

    Compared: the solution block, the common value, the duality report, the
    conservation block, ``R_0``, the equality case, every density probe
    present in both reports and the control probes whose retention vanishes
    at ``b = 0`` (optimal probes matched by role).
    """
    p, r = portfolio_report, reinsurance_report
    mismatches = []
    for key in ("solution", "common_value", "duality", "conservation"):
        if p[key] != r[key]:
            mismatches.append(key)
    ps, rs = p["saddle"], r["saddle"]
    for key in ("r0",):
        if ps[key] != rs[key]:
            mismatches.append(f"saddle.{key}")
    eq_keys = ("estimate", "se", "pass")
    if any(ps["equality_case"][k] != rs["equality_case"][k] for k in eq_keys):
        mismatches.append("saddle.equality_case")
    rprobes = {q["name"]: q for q in rs["probes"]}
    compared = 0
    for q in ps["probes"]:
        other = rprobes.get(_LIMIT_PROBES.get(q["name"], q["name"]))
        if other is None or other["kind"] != q["kind"] or (q["kind"] == "u" and q["name"] not in _LIMIT_U):
            continue
        compared += 1
        if (q["estimate"], q["se"]) != (other["estimate"], other["se"]):
            mismatches.append(f"probe.{q['name']}")
    return {"probes_compared": compared, "mismatches": mismatches, "pass": not mismatches and compared > 0}
