"""Optimal pair, closed-form wealth, the R-process and Monte Carlo saddle verification.

For ``R = h X + (Lam Y - 1) / (2 theta)`` the verifier estimates, on one
forward ensemble under P,

* ``E[Lam_T^{eta_hat} R_T^{(eta_hat, u)}]`` for each control probe ``u``
  (should equal ``R_0``);
* ``E[Lam_T^{eta} R_T^{(eta, u_hat)}]`` for each density probe ``eta``
  (should be at least ``R_0``);

where ``R_0 = x h_0 + (Y_0 - 1) / (2 theta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .bsde import H_FLOOR, BsdeSolution, solve_scenario
from .errors import DomainError, FloorViolation, NegativeRetention, SingularD
from .model import Coefs, JumpModel, ScenarioConfig, TimeGrid, solve_dt
from .paths import (
    DensityStepper,
    JumpGenerator,
    PathBundle,
    euler_increment,
    generate_paths,
    girsanov_reweight,
    constant_generator,
    scaled_generator,
    walk,
)

GATE_SE = 4.0
MARGIN_SE = 2.0
MARGIN_EPS = 0.2


# -- pointwise formulas ------------------------------------------------------------


def optimal_eta(phi: np.ndarray) -> np.ndarray:
    return -np.asarray(phi)


def _check_h(h):
    if np.any(h < H_FLOOR) or not np.all(np.isfinite(h)):
        raise FloorViolation(f"h below floor {H_FLOOR:g}")


def _solve_hdt(h, D, v):
    try:
        return solve_dt(D, v) / h[:, None]
    except np.linalg.LinAlgError as exc:
        raise SingularD("control volatility matrix D is singular") from exc


def optimal_u(h, L, Y, Z, phi, X, lam, theta: float, coefs: Coefs) -> np.ndarray:
    """``u_hat = (h D')^{-1} (Lam/theta [phi Y - Z] - X L - h X C)`` with ``Lam = Lam^{eta_hat}``."""
    _check_h(h)
    rhs = (lam / theta)[:, None] * (phi * Y[:, None] - Z) - X[:, None] * L - (h * X)[:, None] * coefs.C
    return _solve_hdt(h, coefs.D, rhs)


def optimal_wealth_closed_form(h, Y, lam, x: float, theta: float, h0: float, y0: float) -> np.ndarray:
    """``(theta h_0 x + Y_0 - Lam Y) / (theta h)``."""
    h = np.asarray(h, dtype=float)
    _check_h(h)
    return (theta * h0 * x + y0 - np.asarray(lam) * np.asarray(Y)) / (theta * h)


def compute_R(h, Y, X, lam, theta: float):
    """``h X + (Lam Y - 1) / (2 theta)``."""
    return np.asarray(h) * np.asarray(X) + (np.asarray(lam) * np.asarray(Y) - 1.0) / (2.0 * theta)


def robust_value(h0: float, y0: float, x: float, theta: float, tol: float = 0.0) -> float:
    """Optimal robust value ``x h_0 + (Y_0 - 1) / (2 theta)``."""
    if not theta > 0:
        raise DomainError("theta must be positive")
    if not h0 > 0:
        raise DomainError("h_0 must be positive")
    if y0 < 1.0 - tol:
        raise DomainError(f"Y_0 = {y0!r} < 1 beyond tolerance {tol:g}")
    return x * h0 + (y0 - 1.0) / (2.0 * theta)


def optimal_retention(h, Y, lam, theta: float, jump: JumpModel) -> np.ndarray:
    """``q_hat = b Lam Y / (h theta lambda m2)``."""
    _check_h(h)
    return jump.premium_loading * lam * Y / (h * theta * jump.intensity * jump.m2)


# -- probes ----------------------------------------------------------------------------


@dataclass
class StepContext:
    """Solver values and the optimal density at the left end of one step."""

    k: int
    t: float
    T: float
    h: np.ndarray
    L: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    phi: np.ndarray
    lam_hat: np.ndarray
    theta: float
    coefs: Coefs
    jump: Optional[JumpModel] = None

    @property
    def eta_hat(self) -> np.ndarray:
        return -self.phi

    def u_hat(self, X) -> np.ndarray:
        return optimal_u(self.h, self.L, self.Y, self.Z, self.phi, X, self.lam_hat, self.theta, self.coefs)

    def q_hat(self) -> np.ndarray:
        return optimal_retention(self.h, self.Y, self.lam_hat, self.theta, self.jump)

    def optimal(self, X):
        """Optimal control at wealth X: ``u`` or ``(u, q)`` with claims."""
        u = self.u_hat(X)
        return u if self.jump is None else (u, self.q_hat())


@dataclass(frozen=True)
class ControlProbe:
    """``fn(ctx, X)`` returns ``u`` (P, n), or ``(u, q)`` when claims are simulated."""

    name: str
    fn: Callable


@dataclass(frozen=True)
class DensityProbe:
    """``fn(ctx)`` returns ``eta`` (P, n); ``psi`` is the jump generator, if any."""

    name: str
    fn: Callable
    psi: Optional[JumpGenerator] = None
    epsilon: Optional[float] = None
    is_optimal: bool = False


def _piecewise_levels(seed, n, pieces, lo, hi, tag):
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(9000 + tag,))))
    return g.uniform(lo, hi, size=(pieces, n))


def default_control_probes(n: int, seed: int, jump: Optional[JumpModel] = None) -> list:
    """Optimal, zero, shifted optimal, sinusoidal and seeded piecewise-constant rules."""
    levels = _piecewise_levels(seed, n, 8, -1.0, 1.0, 1)
    ones = np.ones(n)

    def piece(ctx):
        return levels[min(int(ctx.t / ctx.T * len(levels)), len(levels) - 1)]

    def sin_u(ctx):
        return 0.5 * math.sin(2 * math.pi * ctx.t / ctx.T) * ones

    if jump is None:
        return [
            ControlProbe("u_hat", lambda ctx, X: ctx.u_hat(X)),
            ControlProbe("zero", lambda ctx, X: np.zeros((X.size, n))),
            ControlProbe("u_hat+0.5", lambda ctx, X: ctx.u_hat(X) + 0.5),
            ControlProbe("sinusoidal", lambda ctx, X: np.broadcast_to(sin_u(ctx), (X.size, n))),
            ControlProbe("random_pc", lambda ctx, X: np.broadcast_to(piece(ctx), (X.size, n))),
        ]
    q_levels = np.abs(_piecewise_levels(seed, 1, 8, 0.0, 1.0, 2)[:, 0])

    def q_piece(ctx):
        return q_levels[min(int(ctx.t / ctx.T * len(q_levels)), len(q_levels) - 1)]

    return [
        ControlProbe("(pi_hat,q_hat)", lambda ctx, X: ctx.optimal(X)),
        ControlProbe("zero", lambda ctx, X: (np.zeros((X.size, n)), np.zeros(X.size))),
        ControlProbe("(pi_hat+0.5,q_hat+0.5)", lambda ctx, X: (ctx.u_hat(X) + 0.5, ctx.q_hat() + 0.5)),
        ControlProbe("sinusoidal", lambda ctx, X: (np.broadcast_to(sin_u(ctx), (X.size, n)),
                                                   np.full(X.size, 0.5 + 0.5 * math.sin(2 * math.pi * ctx.t / ctx.T)))),
        ControlProbe("random_pc", lambda ctx, X: (np.broadcast_to(piece(ctx), (X.size, n)),
                                                  np.full(X.size, q_piece(ctx)))),
    ]


def default_density_probes(n: int, seed: int, jump: Optional[JumpModel] = None) -> list:
    """Optimal density, coordinate shifts by 0.1 and 0.2, and a seeded bounded rule.

    With claims every Brownian probe carries the optimal jump generator, and
    scaled copies ``c psi_hat`` (c = 0, 0.5, 1.5) and ``psi = 0.1`` are added.
    """
    psi_hat = scaled_generator(jump, 1.0, "psi_hat") if jump is not None else None
    probes = [DensityProbe("eta_hat" if jump is None else "(eta_hat,psi_hat)", lambda ctx: ctx.eta_hat,
                           psi_hat, is_optimal=True)]
    for eps in (0.1, 0.2):
        for i in range(n):
            for sign in (1.0, -1.0):
                e = np.zeros(n)
                e[i] = sign * eps
                name = f"eta_hat{'+' if sign > 0 else '-'}{eps:g}e{i + 1}"
                probes.append(DensityProbe(name, lambda ctx, e=e: ctx.eta_hat + e, psi_hat, epsilon=eps))
    levels = _piecewise_levels(seed, n, 8, -0.3, 0.3, 3)
    probes.append(DensityProbe(
        "eta_hat+random_pc",
        lambda ctx: ctx.eta_hat + levels[min(int(ctx.t / ctx.T * len(levels)), len(levels) - 1)], psi_hat))
    if jump is not None:
        for c in (0.0, 0.5, 1.5):
            probes.append(DensityProbe(f"(eta_hat,{c:g}*psi_hat)", lambda ctx: ctx.eta_hat,
                                       scaled_generator(jump, c)))
        probes.append(DensityProbe("(eta_hat,psi=0.1)", lambda ctx: ctx.eta_hat, constant_generator(jump, 0.1)))
    return probes


# -- forward pass ------------------------------------------------------------------------


@dataclass
class ForwardResult:
    """Terminal quantities of one forward ensemble."""

    x: float
    theta: float
    h0: float
    y0: float
    lam_hat: np.ndarray
    X_opt: np.ndarray
    X_probe: dict
    lam_probe: dict
    deviation_rms: float
    deviation_max: float
    deviation_path_sup: float
    closed_form_deviation: float
    q_min: float
    flagged: int
    a_cap_hits: int
    n_paths: int

    @property
    def r0(self) -> float:
        return self.x * self.h0 + (self.y0 - 1.0) / (2.0 * self.theta)


def _x_step(X, ctrl, ctx: StepContext, step, jump):
    if jump is not None:
        u, q = ctrl
        q = np.broadcast_to(np.asarray(q, dtype=float), X.shape)
        if np.any(q < 0):
            raise NegativeRetention(f"retention q < 0 requested at step {step.k}")
    else:
        u, q = ctrl, None
    u = np.broadcast_to(np.asarray(u, dtype=float), X.shape + (ctx.phi.shape[1],))
    dX = euler_increment(X, u, ctx.coefs, step.dt, step.dW)
    if q is not None:
        dX = dX + q * (jump.premium_loading * step.dt - (step.claim_totals - jump.intensity * jump.m1 * step.dt))
    return X + dX


def forward_pass(cfg: ScenarioConfig, sol: BsdeSolution, bundle: PathBundle, *,
                 control_probes: Sequence[ControlProbe] = (), density_probes: Sequence[DensityProbe] = (),
                 shift=None) -> ForwardResult:
    """Step the optimal pair and every probe jointly through one ensemble.

    The optimal wealth is simulated under the feedback ``u_hat`` with the
    jointly stepped optimal density; its deviation from the conservation
    identity ``theta h X + Lam Y = theta h_0 x + Y_0`` is tracked relative
    to the constant: the mean over paths of each path's maximum over grid
    points, the largest path-RMS over grid points and the overall maximum.
    """
    jump = cfg.jump if bundle.marks is not None else None
    P, theta, x = bundle.n_paths, cfg.theta, cfg.x
    h0, y0 = sol.h.h0, sol.y.y0
    const = theta * h0 * x + y0
    psi_hat = scaled_generator(jump, 1.0, "psi_hat") if jump is not None else None
    lam_hat = DensityStepper(P, psi_hat)
    X_opt = np.full(P, float(x))
    X_probe = {p.name: np.full(P, float(x)) for p in control_probes}
    dens = {p.name: DensityStepper(P, p.psi) for p in density_probes}
    for p in density_probes:
        if p.psi is not None:
            p.psi.check(bundle.marks.size)
    dev_rms, dev_max, cf_dev, q_min, hits = 0.0, 0.0, 0.0, math.inf, 0
    path_sup = np.zeros(P)
    model = sol.model
    grid = bundle.grid
    for step in walk(model, bundle, shift):
        h, L, Y, Z, ph = sol.values(step.k, step.state, step.coefs)
        lam = lam_hat.value
        ctx = StepContext(step.k, step.t, grid.horizon, h, L, Y, Z, ph, lam, theta, step.coefs, jump)
        hits += step.coefs.a_cap_hits
        X_cf = optimal_wealth_closed_form(h, Y, lam, x, theta, h0, y0)
        cf_dev = max(cf_dev, float(np.max(np.abs(theta * h * X_cf + lam * Y - const))) / abs(const))
        if jump is not None:
            q_min = min(q_min, float(ctx.q_hat().min()))
        if step.k > 0:
            dev = (theta * h * X_opt + lam * Y - const) / const
            dev_rms = max(dev_rms, float(np.sqrt(np.nanmean(dev * dev))))
            dev_max = max(dev_max, float(np.nanmax(np.abs(dev))))
            path_sup = np.fmax(path_sup, np.abs(dev))
        new_opt = _x_step(X_opt, ctx.optimal(X_opt), ctx, step, jump)
        for p in control_probes:
            X_probe[p.name] = _x_step(X_probe[p.name], p.fn(ctx, X_probe[p.name]), ctx, step, jump)
        for p in density_probes:
            dens[p.name].step(p.fn(ctx), step)
        lam_hat.step(ctx.eta_hat, step)
        X_opt = new_opt
    lam_T = lam_hat.value
    X_cf = optimal_wealth_closed_form(np.ones(P), np.ones(P), lam_T, x, theta, h0, y0)
    cf_dev = max(cf_dev, float(np.max(np.abs(theta * X_cf + lam_T - const))) / abs(const))
    dev = (theta * X_opt + lam_T - const) / const
    dev_rms = max(dev_rms, float(np.sqrt(np.nanmean(dev * dev))))
    dev_max = max(dev_max, float(np.nanmax(np.abs(dev))))
    path_sup = np.fmax(path_sup, np.abs(dev))
    flagged = int(np.count_nonzero(~np.isfinite(X_opt)))
    return ForwardResult(x, theta, h0, y0, lam_T, X_opt, X_probe, {k: v.value for k, v in dens.items()},
                         dev_rms, dev_max, float(np.nanmean(path_sup)), cf_dev, q_min, flagged, hits, P)


# -- saddle report -------------------------------------------------------------------------


def _entry(kind, name, est, se, passed, **extra):
    out = {"kind": kind, "name": name, "estimate": est, "se": se, "pass": bool(passed)}
    out.update(extra)
    return out


@dataclass
class SaddleReport:
    r0: float
    probes: list
    equality_case: dict
    martingale: list
    n_paths: int
    steps: int
    seed: int
    cross_check: Optional[dict] = None

    @property
    def passed(self) -> bool:
        ok = all(p["pass"] for p in self.probes) and self.equality_case["pass"]
        ok = ok and all(m["pass"] for m in self.martingale)
        if self.cross_check is not None:
            ok = ok and self.cross_check["pass"]
        return ok

    def to_dict(self) -> dict:
        out = {"r0": self.r0, "probes": self.probes, "equality_case": self.equality_case,
               "martingale": self.martingale, "pass": self.passed}
        if self.cross_check is not None:
            out["cross_check"] = self.cross_check
        return out


def saddle_report(cfg: ScenarioConfig, fr: ForwardResult, control_probes, density_probes) -> SaddleReport:
    theta, r0 = cfg.theta, fr.r0
    probes = []
    for p in control_probes:
        RT = compute_R(1.0, 1.0, fr.X_probe[p.name], fr.lam_hat, theta)
        est, se = girsanov_reweight(RT, fr.lam_hat)
        probes.append(_entry("u", p.name, est, se, abs(est - r0) <= GATE_SE * se + 1e-12 * max(1.0, abs(r0)),
                             gate="|estimate - r0| <= 4 se"))
    martingale = []
    eq = None
    for p in density_probes:
        lam = fr.lam_probe[p.name]
        RT = compute_R(1.0, 1.0, fr.X_opt, lam, theta)
        est, se = girsanov_reweight(RT, lam)
        tol = 1e-12 * max(1.0, abs(r0))
        extra = {"excess": est - r0, "excess_se_units": (est - r0) / se if se > 0 else 0.0}
        passed = est >= r0 - GATE_SE * se - tol
        if p.epsilon is not None and math.isclose(p.epsilon, MARGIN_EPS):
            margin_ok = est - r0 >= MARGIN_SE * se
            extra["margin_pass"] = bool(margin_ok)
            passed = passed and margin_ok
        if p.is_optimal:
            eq = {"name": p.name, "estimate": est, "se": se, "pass": bool(abs(est - r0) <= GATE_SE * se + tol)}
        probes.append(_entry("eta", p.name, est, se, passed, **extra))
        lm, ls = girsanov_reweight(np.ones_like(lam), lam)
        martingale.append({"name": p.name, "mean": lm, "se": ls, "pass": bool(abs(lm - 1.0) <= GATE_SE * ls + 1e-12)})
    if eq is None:
        RT = compute_R(1.0, 1.0, fr.X_opt, fr.lam_hat, theta)
        est, se = girsanov_reweight(RT, fr.lam_hat)
        eq = {"name": "optimal", "estimate": est, "se": se,
              "pass": bool(abs(est - r0) <= GATE_SE * se + 1e-12 * max(1.0, abs(r0)))}
    return SaddleReport(r0, probes, eq, martingale, fr.n_paths, cfg.grid.steps, cfg.seed)


def cross_check_measure(cfg: ScenarioConfig, sol: BsdeSolution, probe: DensityProbe, *, stream: int = 7) -> dict:
    """Re-simulate under the probe's measure and compare with the reweighted estimate.

    Under ``P^eta`` the bundle increments are Brownian for ``W - int eta ds``,
    so ``dW = xi + eta dt``; the plain sample mean of ``R_T`` then estimates
    the same expectation as reweighting by ``Lam_T^eta`` under P.
    """
    if probe.psi is not None:
        raise ValueError("cross-check supports Brownian density probes only")
    bundle = generate_paths(cfg, stream=stream)
    grid, theta = cfg.grid, cfg.theta

    def shift(t, state):
        k = int(round(t / grid.dt))
        h, L, Y, Z, ph = sol.values(k, state)
        ctx = StepContext(k, t, grid.horizon, h, L, Y, Z, ph, None, theta, None)
        return -probe.fn(ctx)

    fr_shift = forward_pass(cfg, sol, bundle, density_probes=[probe], shift=shift)
    RT = compute_R(1.0, 1.0, fr_shift.X_opt, fr_shift.lam_probe[probe.name], theta)
    plain, plain_se = girsanov_reweight(RT, np.ones_like(RT))
    fr = forward_pass(cfg, sol, bundle, density_probes=[probe])
    RT = compute_R(1.0, 1.0, fr.X_opt, fr.lam_probe[probe.name], theta)
    rew, rew_se = girsanov_reweight(RT, fr.lam_probe[probe.name])
    se = math.hypot(plain_se, rew_se)
    return {"probe": probe.name, "resimulated": plain, "resimulated_se": plain_se, "reweighted": rew,
            "reweighted_se": rew_se, "pass": bool(abs(plain - rew) <= GATE_SE * se)}


def verify_saddle(cfg: ScenarioConfig, sol: Optional[BsdeSolution] = None, *, control_probes=None,
                  density_probes=None, bundle: Optional[PathBundle] = None, antithetic: bool = False,
                  cross_check: bool = False) -> SaddleReport:
    """Monte Carlo check of the saddle-point statements on one forward ensemble."""
    sol = sol or solve_scenario(cfg)
    bundle = bundle or generate_paths(cfg, antithetic=antithetic)
    n = cfg.model.n
    cps = list(control_probes) if control_probes is not None else default_control_probes(n, cfg.seed, cfg.jump)
    dps = list(density_probes) if density_probes is not None else default_density_probes(n, cfg.seed, cfg.jump)
    fr = forward_pass(cfg, sol, bundle, control_probes=cps, density_probes=dps)
    rep = saddle_report(cfg, fr, cps, dps)
    if cross_check:
        target = next((p for p in dps if p.epsilon is not None and p.psi is None), None)
        if target is not None:
            rep.cross_check = cross_check_measure(cfg, sol, target)
    return rep


# -- conservation ----------------------------------------------------------------------------


def conservation_study(cfg: ScenarioConfig, sol_factory: Callable, steps=(125, 250, 500, 1000), *,
                       n_paths: Optional[int] = None) -> dict:
    """Deviation of the Euler-simulated optimal wealth from the conservation identity.

    All grids share the Brownian paths of the finest grid (coarse increments
    are sums of fine ones).  ``sol_factory(grid)`` returns the solution on a
    grid.  The error is the mean per-path maximum deviation; the order is the
    least-squares slope of log error against log dt.
    """
    steps = sorted(steps)
    finest = TimeGrid(cfg.grid.horizon, steps[-1])
    P = n_paths or cfg.n_paths
    fine = PathBundle(finest, P, cfg.model.n, cfg.seed, jump=cfg.jump)
    rows = []
    for N in steps:
        grid = TimeGrid(cfg.grid.horizon, N)
        b = fine.coarsen(steps[-1] // N)
        sub = ScenarioConfig(cfg.x, cfg.theta, grid, cfg.model, cfg.jump, P, cfg.seed, cfg.basis_degree)
        fr = forward_pass(sub, sol_factory(grid), b)
        rows.append({"steps": N, "dt": grid.dt, "path_sup_mean": fr.deviation_path_sup,
                     "rms_max": fr.deviation_rms, "abs_max": fr.deviation_max})
    dts = np.log([r["dt"] for r in rows])
    errs = np.log([r["path_sup_mean"] for r in rows])
    order = float(np.polyfit(dts, errs, 1)[0]) if np.all(np.isfinite(errs)) else float("nan")
    pairwise = [float(np.log(rows[i]["path_sup_mean"] / rows[i + 1]["path_sup_mean"])
                      / np.log(rows[i]["dt"] / rows[i + 1]["dt"])) for i in range(len(rows) - 1)]
    return {"rows": rows, "order": order, "pairwise_orders": pairwise, "pass": bool(order >= 0.5)}


def optimal_rules(cfg: ScenarioConfig, sol: BsdeSolution):
    """``(control_rule, eta_rule, psi)`` for :func:`simulate_state` realising the optimal pair."""
    jump = cfg.jump

    def ctx_of(step, lam):
        h, L, Y, Z, ph = sol.values(step.k, step.state, step.coefs)
        return StepContext(step.k, step.t, cfg.grid.horizon, h, L, Y, Z, ph, lam, cfg.theta, step.coefs,
                           jump if step.bundle.marks is not None else None)

    def control_rule(step, X, lam):
        return ctx_of(step, lam).optimal(X)

    def eta_rule(step):
        return -sol.values(step.k, step.state, step.coefs)[4]

    psi = scaled_generator(jump, 1.0, "psi_hat") if jump is not None else None
    return control_rule, eta_rule, psi
