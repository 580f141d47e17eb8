"""Acceptance criteria as runnable checks shared by the test suite and ``mmvlab selftest``.

Each ``criterion_k`` returns a :class:`Result` with a one-line summary and
the numbers behind it.  ``n_paths`` overrides the Monte Carlo size of the
stochastic criteria (default: the preset's own count).
"""

from __future__ import annotations

import itertools
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .applications import (
    ReinsuranceScenario,
    run_portfolio,
    run_reinsurance,
    scenario_from_config,
    zero_loading_limit,
)
from .bsde import H_FLOOR, solve_scenario
from .control import (
    conservation_study,
    default_control_probes,
    default_density_probes,
    forward_pass,
    optimal_rules,
    robust_value,
    verify_saddle,
)
from .duality import F_value, K_hat, duality_report, gamma_hat, mv_empirical, mv_value, sup_J
from .errors import DegenerateMarket
from .io import load_scenario
from .paths import generate_paths, walk

MACHINE_RTOL = 1e-13


@dataclass
class Result:
    number: int
    title: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"criterion {self.number} [{'PASS' if self.passed else 'FAIL'}] {self.title}: {self.summary}"

    def to_dict(self) -> dict:
        return {"criterion": self.number, "title": self.title, "pass": self.passed, "summary": self.summary,
                "details": self.details}


def _timed(fn: Callable) -> Callable:
    def wrapper(*args, **kwargs) -> Result:
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _close(a: float, b: float, rtol: float = MACHINE_RTOL) -> bool:
    return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))


@_timed
def criterion_1(n_paths: Optional[int] = None) -> Result:
    """Closed-form h_0, Y_0 and value on the constant-coefficient portfolio."""
    t0 = time.perf_counter()
    cfg = load_scenario("portfolio_const")
    sol = solve_scenario(cfg)
    h0, y0 = sol.h.h0, sol.y.y0
    value = robust_value(h0, y0, cfg.x, cfg.theta)
    mv = mv_value(h0, y0, cfg.x, cfg.theta)
    exact = math.exp(0.03) + (math.exp(0.25) - 1.0) / 2.0
    elapsed = time.perf_counter() - t0
    h_err = abs(h0 / math.exp(0.03) - 1.0)
    y_err = abs(y0 / math.exp(0.25) - 1.0)
    ok = h_err <= 1e-9 and y_err <= 1e-9 and _close(value, exact) and _close(mv, exact) and elapsed < 1.0
    return Result(1, "closed-form value", ok,
                  f"h0 rel err {h_err:.1e}, y0 rel err {y_err:.1e}, |value - exact| {abs(value - exact):.1e}, "
                  f"{elapsed:.2f}s",
                  {"h0": h0, "y0": y0, "value": value, "mv_value": mv, "exact": exact, "seconds": elapsed})


@_timed
def criterion_2(n_paths: Optional[int] = None) -> Result:
    """Empirical mean, variance and MV value of X_T under the optimal feedback."""
    cfg = load_scenario("portfolio_const", n_paths=n_paths)
    t0 = time.perf_counter()
    sol = solve_scenario(cfg)
    control_rule, eta_rule, psi = optimal_rules(cfg, sol)
    emp = mv_empirical(control_rule, cfg, eta=eta_rule, psi=psi)
    rep = duality_report(sol.h.h0, sol.y.y0, cfg.x, cfg.theta, empirical=emp)
    elapsed = time.perf_counter() - t0
    keys = ("empirical_mean", "empirical_var", "empirical_value")
    ok = all(rep.checks[k] for k in keys) and elapsed < 60.0
    z = lambda est, ref, se: (est - ref) / se  # noqa: E731
    return Result(2, "empirical MV optimality", ok,
                  f"mean z={z(emp.mean, rep.k_hat, emp.se_mean):+.2f}, "
                  f"var z={z(emp.var, rep.var_target, emp.se_var):+.2f}, "
                  f"value z={z(emp.value, rep.mv_value, emp.se_value):+.2f}, {elapsed:.1f}s",
                  {"report": rep.to_dict(), "seconds": elapsed})


@_timed
def criterion_3(n_paths: Optional[int] = None) -> Result:
    """Saddle-point statements on the constant-coefficient portfolio."""
    cfg = load_scenario("portfolio_const", n_paths=n_paths)
    t0 = time.perf_counter()
    rep = verify_saddle(cfg)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and elapsed < 120.0
    worst = min(p["excess_se_units"] for p in rep.probes if p.get("margin_pass") is not None)
    return Result(3, "saddle verification", ok,
                  f"{sum(p['pass'] for p in rep.probes)}/{len(rep.probes)} probes pass, "
                  f"smallest eps=0.2 margin {worst:.1f} SE, equality case "
                  f"{'ok' if rep.equality_case['pass'] else 'off'}, {elapsed:.1f}s",
                  {"report": rep.to_dict(), "seconds": elapsed})


def _conservation(name: str, n_paths: Optional[int]) -> dict:
    cfg = load_scenario(name, n_paths=n_paths)
    study = conservation_study(cfg, lambda grid: solve_scenario(replace(cfg, grid=grid)))
    sol = solve_scenario(cfg)
    fr = forward_pass(cfg, sol, generate_paths(cfg).with_paths(min(cfg.n_paths, 4096)))
    study["closed_form_max_rel"] = fr.closed_form_deviation
    study["closed_form_pass"] = fr.closed_form_deviation <= 1e-12
    return study


@_timed
def criterion_4(n_paths: Optional[int] = None) -> Result:
    """Conservation identity: exact for the closed form, order >= 0.5 for Euler."""
    studies = {name: _conservation(name, n_paths) for name in ("portfolio_const", "reinsurance_discrete")}
    ok = all(s["pass"] and s["closed_form_pass"] for s in studies.values())
    parts = [f"{name}: closed-form dev {s['closed_form_max_rel']:.1e}, order {s['order']:.3f}"
             for name, s in studies.items()]
    return Result(4, "conservation identity", ok, "; ".join(parts), studies)


@_timed
def criterion_5(n_paths: Optional[int] = None) -> Result:
    """Regression h_0, Y_0 against the affine closed forms on the Vasicek preset."""
    cfg = load_scenario("portfolio_vasicek", n_paths=n_paths)
    exact = solve_scenario(cfg)
    t0 = time.perf_counter()
    reg = solve_scenario(cfg, backend="regression")
    elapsed = time.perf_counter() - t0
    rows = {}
    for key, ref, est, se in (("h0", exact.h.h0, reg.h.h0, reg.h.h0_se), ("y0", exact.y.y0, reg.y.y0, reg.y.y0_se)):
        rows[key] = {"affine": ref, "regression": est, "se": se, "z": (est - ref) / se,
                     "rel_diff": abs(est / ref - 1.0), "pass": abs(est - ref) <= 3.0 * se}
    ok = all(r["pass"] for r in rows.values()) and elapsed < 180.0
    return Result(5, "Vasicek oracle equivalence", ok,
                  ", ".join(f"{k} z={r['z']:+.2f} rel {r['rel_diff']:.1e}" for k, r in rows.items())
                  + f", {elapsed:.1f}s", {"rows": rows, "seconds": elapsed})


DUALITY_GRID = {"y0": (1.01, 1.2, 2.0, 5.0), "theta": (0.25, 1.0, 4.0), "h0x": (-0.5, 0.8, 1.0, 3.0)}


@_timed
def criterion_6(n_paths: Optional[int] = None) -> Result:
    """Duality chain identities on a grid of (Y_0, theta, h_0 x)."""
    worst_chain = worst_gamma = worst_sup = 0.0
    for y0, theta, h0x in itertools.product(*DUALITY_GRID.values()):
        K = K_hat(h0x, y0, 1.0, theta)
        F = F_value(K, h0x, y0, 1.0)
        closed = h0x + (y0 - 1.0) / (2.0 * theta)
        scale = max(1.0, abs(closed))
        worst_chain = max(worst_chain, abs(K - 0.5 * theta * F - closed) / scale)
        worst_gamma = max(worst_gamma, abs(gamma_hat(K, h0x, y0, 1.0) - (h0x + y0 / theta))
                          / max(1.0, abs(h0x + y0 / theta)))
        sup, _ = sup_J(K, h0x, y0, 1.0)
        worst_sup = max(worst_sup, abs(sup - F))
    degenerate = []
    for fn in (lambda: K_hat(1.0, 1.0, 1.0, 1.0), lambda: F_value(1.0, 1.0, 1.0, 1.0),
               lambda: gamma_hat(1.0, 1.0, 1.0, 1.0), lambda: sup_J(1.0, 1.0, 1.0, 1.0)):
        try:
            fn()
            degenerate.append(False)
        except DegenerateMarket:
            degenerate.append(True)
    ok = worst_chain <= MACHINE_RTOL and worst_gamma <= MACHINE_RTOL and worst_sup <= 1e-9 and all(degenerate)
    return Result(6, "duality chain", ok,
                  f"chain {worst_chain:.1e}, gamma {worst_gamma:.1e}, |sup J - F| {worst_sup:.1e}, "
                  f"degenerate raised {sum(degenerate)}/{len(degenerate)}",
                  {"chain": worst_chain, "gamma": worst_gamma, "sup": worst_sup, "degenerate": degenerate})


LIMIT_PATHS = 20_000


@_timed
def criterion_7(n_paths: Optional[int] = None) -> Result:
    """Reinsurance: closed-form value, joint saddle gates, admissibility and the b -> 0 limit."""
    cfg = load_scenario("reinsurance_discrete", n_paths=n_paths)
    scn = scenario_from_config(cfg)
    rep = run_reinsurance(scn, cfg)
    exact = cfg.x * math.exp(0.03) + (math.exp(0.09) - 1.0) / (2.0 * cfg.theta)
    value = rep["solution"]["value"]
    value_ok = abs(value - exact) <= 1e-9 * abs(exact)
    cons = _conservation("reinsurance_discrete", n_paths)
    base = load_scenario("reinsurance_lognormal", n_paths=min(LIMIT_PATHS, n_paths or LIMIT_PATHS))
    lscn = scenario_from_config(base)
    zero = ReinsuranceScenario(lscn.portfolio, replace(base.jump, premium_loading=0.0))
    limit = zero_loading_limit(run_portfolio(lscn.portfolio, replace(base, jump=None)),
                               run_reinsurance(zero, base))
    ok = value_ok and rep["pass"] and cons["pass"] and cons["closed_form_pass"] and limit["pass"]
    ri = rep["reinsurance"]
    return Result(7, "reinsurance", ok,
                  f"|value - exact| {abs(value - exact):.1e}, saddle {'ok' if rep['checks']['saddle'] else 'off'}, "
                  f"q_min {ri['q_hat_min']:.3f}, psi in [{ri['psi_hat_min']:.3f}, {ri['psi_hat_max']:.3f}] "
                  f"<= {ri['psi_hat_bound']:.3f}, order {cons['order']:.3f}, "
                  f"b->0 mismatches {len(limit['mismatches'])}",
                  {"value": value, "exact": exact, "report": rep, "conservation": cons, "limit": limit})


@contextmanager
def _threads(n: int):
    old = os.environ.get("MMVLAB_THREADS")
    os.environ["MMVLAB_THREADS"] = str(n)
    try:
        yield
    finally:
        if old is None:
            os.environ.pop("MMVLAB_THREADS", None)
        else:
            os.environ["MMVLAB_THREADS"] = old


INVARIANT_PATHS = 20_000
DETERMINISM_PATHS = 10_000


def _grid_invariants(cfg, sol, n_paths: int) -> dict:
    bundle = generate_paths(replace(cfg, n_paths=n_paths)).with_paths(min(n_paths, 2000))
    min_h, min_y, terminal = math.inf, math.inf, True
    N = cfg.grid.steps
    state = None
    for step in walk(sol.model, bundle):
        h, _, Y, _, _ = sol.values(step.k, step.state, step.coefs)
        min_h, min_y = min(min_h, float(h.min())), min(min_y, float(Y.min()))
        state = step.model.step_state(step.state, step.dt, step.dW)
    hN, _, YN, _, _ = sol.values(N, state)
    terminal = bool(np.all(hN == 1.0) and np.all(YN == 1.0))
    y_tol = 0.0 if sol.y.exact else 3.0 * sol.y.y0_se
    h_tol = 0.0 if sol.h.exact else 3.0 * sol.h.h0_se
    return {"min_h": min_h, "min_y": min_y, "terminal_exact": terminal, "y_tol": y_tol,
            "pass": bool(min_h >= H_FLOOR - h_tol and min_y >= 1.0 - y_tol and terminal)}


@_timed
def criterion_8(n_paths: Optional[int] = None) -> Result:
    """Floors, terminal conditions, density martingale gates and thread invariance."""
    P = min(INVARIANT_PATHS, n_paths or INVARIANT_PATHS)
    details = {}
    for name in ("portfolio_const", "portfolio_vasicek", "reinsurance_discrete", "reinsurance_lognormal"):
        cfg = load_scenario(name, n_paths=P)
        sols = {"exact": solve_scenario(cfg)}
        if name == "portfolio_vasicek":
            sols["regression"] = solve_scenario(cfg, backend="regression")
        for label, sol in sols.items():
            details[f"{name}/{label}"] = _grid_invariants(cfg, sol, P)
        dps = default_density_probes(cfg.model.n, cfg.seed, cfg.jump)
        fr = forward_pass(cfg, sols["exact"], generate_paths(cfg), density_probes=dps)
        gates = []
        for p in dps:
            lam = fr.lam_probe[p.name]
            se = float(lam.std(ddof=1) / math.sqrt(lam.size))
            gates.append(abs(float(lam.mean()) - 1.0) <= 4.0 * se + 1e-12)
        details[f"{name}/martingale"] = {"probes": len(gates), "pass": all(gates)}
    cfg = load_scenario("portfolio_vasicek", n_paths=min(DETERMINISM_PATHS, n_paths or DETERMINISM_PATHS))
    reports = []
    for threads in (1, 3):
        with _threads(threads):
            sol = solve_scenario(cfg, backend="regression", se_batches=2)
            reports.append((sol.h.h0, sol.y.y0, verify_saddle(cfg, sol).to_dict()))
    details["thread_invariance"] = {"pass": reports[0] == reports[1]}
    ok = all(v["pass"] for v in details.values())
    failed = [k for k, v in details.items() if not v["pass"]]
    return Result(8, "structural invariants", ok,
                  f"{len(details) - len(failed)}/{len(details)} checks pass"
                  + (f" (failed: {', '.join(failed)})" if failed else ""), details)


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8)


def run_all(n_paths: Optional[int] = None, echo: Optional[Callable[[str], None]] = None) -> list:
    out = []
    for fn in CRITERIA:
        res = fn(n_paths)
        if echo is not None:
            echo(res.line())
        out.append(res)
    return out
