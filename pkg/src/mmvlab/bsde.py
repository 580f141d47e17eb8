"""Solutions of the two backward equations on a time grid.

The pair (h, L) solves

    dh = [(-A + (D^{-1}B)'C) h + (D^{-1}B)'L + |L|^2 / h] dt + L'dW,   h_T = 1,

and is computed from the representation ``h_t = 1 / Ebar_t[exp(int_t^T g ds)]``
with ``g = -A + (D^{-1}B)'C`` and ``Pbar`` the measure under which
``W + int D^{-1}B ds`` is Brownian.  The pair (Y, Z) solves

    dY = [-(|phi|^2 + c) Y + 2 phi'Z] dt + Z'dW,   Y_T = 1,

with ``phi = D^{-1}B + L/h`` and ``c`` a constant extra rate (zero except in
the reinsurance variant); ``Y_t = Etil_t[exp(int_t^T (|phi|^2 + c) ds)]``
where ``W + 2 int phi ds`` is Brownian under ``Ptil``.

Three routes are provided: Simpson quadrature when the integrand is
deterministic, exponential-affine formulas for an Ornstein-Uhlenbeck drift
factor with constant B, C, D, and least-squares regression Monte Carlo
otherwise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import FloorViolation, QuadratureNonConvergence, RegressionIllConditioned
from .model import CoefficientModel, FactorDynamics, JumpModel, State, Tier, TimeGrid, solve_d
from .paths import PathBundle, generate_paths, walk
from .regression import Fit, PolyBasis, fit

H_FLOOR = 1e-6
QUAD_RTOL = 1e-10
QUAD_MAX_LEVEL = 18
SE_BATCHES = 10
_BATCH_STREAM = 1_000_000


# -- quadrature -------------------------------------------------------------------


def tail_integrals(fn: Callable, grid: TimeGrid, rtol: float = QUAD_RTOL, max_level: int = QUAD_MAX_LEVEL):
    """``I_k = int_{t_k}^T fn(s) ds`` for every grid point by composite Simpson.

    Each grid interval is split into ``2^j`` panels and ``j`` is increased
    until the largest change in any ``I_k`` falls below ``rtol`` (an absolute
    change in ``I`` is the relative change in ``exp(I)``).

    ``fn`` maps an array of times to an array of values.
    """
    N, dt = grid.steps, grid.dt
    prev = None
    for level in range(1, max_level + 1):
        m = 2**level
        s = np.arange(N * m + 1) * (dt / m)
        s[-1] = grid.horizon
        v = np.asarray(fn(s), dtype=float)
        if not np.all(np.isfinite(v)):
            raise QuadratureNonConvergence("integrand is not finite on the grid")
        w = np.ones(m + 1)
        w[1:-1:2], w[2:-1:2] = 4.0, 2.0
        blocks = v[np.arange(N)[:, None] * m + np.arange(m + 1)[None, :]]
        per_interval = blocks @ w * (dt / m / 3.0)
        I = np.zeros(N + 1)
        I[:-1] = np.cumsum(per_interval[::-1])[::-1]
        if prev is not None and np.max(np.abs(I - prev)) < rtol * max(1.0, np.max(np.abs(I))):
            return I, level
        prev = I
    raise QuadratureNonConvergence(f"Simpson refinement did not reach {rtol:g} after {max_level} levels")


def _vectorize(fn):
    def out(ts):
        return np.array([fn(float(t)) for t in ts], dtype=float)

    return out


def _is_const(model: CoefficientModel) -> bool:
    return model.constant_bcd and not callable(model.A)


# -- h ---------------------------------------------------------------------------


class HSolution:
    """Interface shared by the h/L solutions.

    ``h(k, state)`` and ``L(k, state)`` evaluate the solution at grid index k
    for every path in ``state``; ``phi_fn(t)`` is the continuous-time phi when
    it is deterministic, else ``None``.
    """

    tier: str
    exact: bool
    h0: float
    h0_se: float

    def h(self, k: int, state: State) -> np.ndarray:
        raise NotImplementedError

    def L(self, k: int, state: State) -> np.ndarray:
        raise NotImplementedError

    def phi_fn(self, t: float):
        return None

    def diagnostics(self) -> dict:
        return {}


@dataclass(eq=False)
class DeterministicH(HSolution):
    """h on the grid for time-deterministic coefficients; L is identically zero."""

    model: CoefficientModel
    grid: TimeGrid
    values: np.ndarray
    level: int = 0
    tier: str = "deterministic"
    exact: bool = True

    @property
    def h0(self) -> float:
        return float(self.values[0])

    h0_se = 0.0

    def h(self, k, state):
        return np.full(state.w.shape[0], self.values[k])

    def L(self, k, state):
        return np.zeros((state.w.shape[0], self.model.n))

    def phi_fn(self, t):
        return self.model.risk_premium(t)

    def diagnostics(self):
        return {"min_h": float(self.values.min()), "simpson_level": self.level}


def solve_h_deterministic(model: CoefficientModel, grid: TimeGrid, *, floor: float = H_FLOOR) -> DeterministicH:
    """``h_k = exp(int_{t_k}^T (A - (D^{-1}B)'C) ds)`` by refined Simpson quadrature."""
    if model.tier is not Tier.DETERMINISTIC:
        raise ValueError("deterministic solver needs the deterministic tier")
    if _is_const(model):
        rate = model.drift_exponent(0.0)
        integrand = lambda s: np.full_like(s, rate)  # noqa: E731
    else:
        integrand = _vectorize(model.drift_exponent)
    I, level = tail_integrals(integrand, grid)
    h = np.exp(I)
    h[-1] = 1.0
    if h.min() < floor:
        raise FloorViolation(f"h reaches {h.min():.3g} below the floor {floor:g}")
    return DeterministicH(model, grid, h, level)


@dataclass(eq=False)
class AffineH(HSolution):
    """Exponential-affine h for an OU drift factor with constant B, C, D.

    Under ``Pbar`` the factor reverts to ``mbar = m - v'D^{-1}B / kappa``, and

        h(t, f) = exp(-kbar tau) / Pbar(tau, f),   Pbar = exp(a(tau) - b(tau) f),
        b(tau) = (1 - exp(-kappa tau)) / kappa,
        a(tau) = (mbar - |v|^2 / (2 kappa^2)) (b - tau) - |v|^2 b^2 / (4 kappa),

    with ``tau = T - t`` and ``kbar = (D^{-1}B)'C``.  Then ``L = h b(tau) v``.
    """

    model: CoefficientModel
    grid: TimeGrid
    tier: str = "affine"
    exact: bool = True

    def __post_init__(self):
        fd: FactorDynamics = self.model.factor
        self.premium = self.model.risk_premium(0.0)
        self.kbar = float(self.premium @ self.model.C)
        self.kappa = float(fd.kappa)
        self.v = fd.vol
        self.mbar = float(fd.level - self.v @ self.premium / self.kappa)

    def b(self, tau):
        return -np.expm1(-self.kappa * np.asarray(tau, dtype=float)) / self.kappa

    def a(self, tau):
        b = self.b(tau)
        v2 = float(self.v @ self.v)
        return (self.mbar - v2 / (2 * self.kappa**2)) * (b - tau) - v2 * b * b / (4 * self.kappa)

    def value(self, t, f):
        tau = self.grid.horizon - t
        return np.exp(-self.kbar * tau - self.a(tau) + self.b(tau) * np.asarray(f, dtype=float))

    @property
    def h0(self) -> float:
        return float(self.value(0.0, self.model.factor.initial))

    h0_se = 0.0

    def h(self, k, state):
        return self.value(self.grid.t(k), state.f)

    def L(self, k, state):
        tau = self.grid.horizon - self.grid.t(k)
        return (self.h(k, state) * self.b(tau))[:, None] * self.v[None, :]

    def phi_fn(self, t):
        return self.premium + self.b(self.grid.horizon - t) * self.v

    def diagnostics(self):
        return {"kbar": self.kbar, "mbar": self.mbar}


def solve_h_affine(model: CoefficientModel, grid: TimeGrid) -> AffineH:
    if model.tier is not Tier.MARKOV_FACTOR or not model.constant_bcd:
        raise ValueError("affine backend needs the markov-factor tier with constant B, C, D")
    if not model.factor.kappa > 0:
        raise ValueError("affine backend needs kappa_f > 0")
    return AffineH(model, grid)


def _trapezoid_tail(rates: np.ndarray, dt: float) -> np.ndarray:
    """Backward cumulative trapezoid sums over axis 0; ``out[N] = 0``."""
    mid = 0.5 * (rates[1:] + rates[:-1]) * dt
    out = np.zeros_like(rates)
    out[:-1] = np.cumsum(mid[::-1], axis=0)[::-1]
    return out


class _SurfaceSolution:
    """Per-grid-point regression surfaces ``value_k(features)``; the last point is fixed at 1."""

    def __init__(self, model, grid, fits, const0, transform):
        self.model, self.grid, self.fits, self.const0 = model, grid, fits, const0
        self._transform = transform
        self._M = model.feature_loadings()

    def _surface(self, k, state):
        if k == self.grid.steps:
            return np.ones(state.w.shape[0])
        return self._transform(self.fits[k].predict(self.model.features(state)))

    def _gradient(self, k, state):
        P = state.w.shape[0]
        if k == self.grid.steps or self._M.shape[0] == 0:
            return np.zeros((P, self.model.n))
        j = k
        # a point mass (t = 0) carries no slope information; use the next surface
        while self.fits[j].basis.active.size == 0 and j + 1 < self.grid.steps:
            j += 1
        g = self.fits[j].gradient(self.model.features(state), self._transform)
        return g @ self._M


@dataclass(eq=False)
class _RegressionDiag:
    min_value: float
    min_r2: float
    max_cond: float
    n_paths: int


class RegressionH(_SurfaceSolution, HSolution):
    """Regression-Monte-Carlo h with ``L = M' grad h`` from the fitted surfaces."""

    exact = False

    def __init__(self, model, grid, fits, h0, h0_se, diag, degree, floor):
        super().__init__(model, grid, fits, None, lambda g: 1.0 / g)
        self.tier = "regression"
        self.h0, self.h0_se, self.diag = h0, h0_se, diag
        self.degree, self.floor = degree, floor

    def h(self, k, state):
        out = self._surface(k, state)
        if np.any(out < self.floor) or not np.all(np.isfinite(out)):
            raise FloorViolation(f"fitted h below floor {self.floor:g} at step {k}")
        return out

    def L(self, k, state):
        return self._gradient(k, state)

    def refit(self, bundle: PathBundle) -> "RegressionH":
        return solve_h_regression(self.model, self.grid, bundle, degree=self.degree, floor=self.floor)

    def diagnostics(self):
        d = self.diag
        return {"min_h": d.min_value, "min_r2": d.min_r2, "max_cond": d.max_cond, "n_paths": d.n_paths,
                "h0_se": self.h0_se}


def _hbar_shift(model):
    if model.constant_bcd:
        return model.risk_premium(0.0)

    def shift(t, state):
        c = model.evaluate(t, state)
        return solve_d(c.D, c.B)

    return shift


def solve_h_regression(model: CoefficientModel, grid: TimeGrid, bundle: PathBundle, *, degree: int = 3,
                       floor: float = H_FLOOR) -> RegressionH:
    """Regress ``exp(int_{t_k}^T g ds)`` on the market features under ``Pbar``."""
    if bundle.grid != grid:
        raise ValueError("bundle grid differs from the solver grid")
    P, N = bundle.n_paths, grid.steps
    feats = np.empty((N + 1, P, model.feature_dim))
    rates = np.empty((N + 1, P))
    last = None
    for step in walk(model, bundle, _hbar_shift(model)):
        c = step.coefs
        feats[step.k] = model.features(step.state)
        rates[step.k] = -c.A + np.einsum("pi,pi->p", solve_d(c.D, c.B), c.C)
        last = step
    end = model.step_state(last.state, last.dt, last.dW)
    c = model.evaluate(grid.horizon, end)
    feats[N] = model.features(end)
    rates[N] = -c.A + np.einsum("pi,pi->p", solve_d(c.D, c.B), c.C)
    G = np.exp(_trapezoid_tail(rates, grid.dt))
    del rates
    fits, r2, cond, min_h = [], 1.0, 1.0, 1.0
    for k in range(N):
        fk = fit(feats[k], G[k], degree)
        fits.append(fk)
        r2, cond = min(r2, fk.r2), max(cond, fk.cond)
        fitted = fk.predict(feats[k])
        if np.any(fitted <= 0):
            raise FloorViolation(f"fitted conditional expectation is not positive at step {k}")
        min_h = min(min_h, float((1.0 / fitted).min()))
        if min_h < floor:
            raise FloorViolation(f"fitted h reaches {min_h:.3g} below floor {floor:g} at step {k}")
    g0 = G[0]
    mean0 = float(g0.mean())
    se0 = float(g0.std(ddof=1) / math.sqrt(P)) if P > 1 else 0.0
    return RegressionH(model, grid, fits, 1.0 / mean0, se0 / mean0**2, _RegressionDiag(min_h, r2, cond, P),
                       degree, floor)


def solve_h_markov(model: CoefficientModel, grid: TimeGrid, bundle: Optional[PathBundle] = None, *,
                   backend: str = "affine", degree: int = 3, floor: float = H_FLOOR) -> HSolution:
    """h for the markov-factor tier by the ``affine`` or ``regression`` backend."""
    if model.tier is not Tier.MARKOV_FACTOR:
        raise ValueError("markov solver needs the markov-factor tier")
    if backend == "affine":
        return solve_h_affine(model, grid)
    if backend == "regression":
        if bundle is None:
            raise ValueError("regression backend needs a path bundle")
        return solve_h_regression(model, grid, bundle, degree=degree, floor=floor)
    raise ValueError(f"unknown backend {backend!r}")


def solve_h(model: CoefficientModel, grid: TimeGrid, bundle: Optional[PathBundle] = None, *,
            backend: Optional[str] = None, degree: int = 3, floor: float = H_FLOOR) -> HSolution:
    """Dispatch on the model tier; ``backend`` selects affine or regression for factor models."""
    if model.tier is Tier.DETERMINISTIC:
        return solve_h_deterministic(model, grid, floor=floor)
    if model.tier is Tier.MARKOV_FACTOR:
        if backend is None:
            backend = "affine" if model.constant_bcd and model.factor.kappa > 0 else "regression"
        return solve_h_markov(model, grid, bundle, backend=backend, degree=degree, floor=floor)
    if bundle is None:
        raise ValueError("path-dependent tier needs a path bundle")
    return solve_h_regression(model, grid, bundle, degree=degree, floor=floor)


# -- phi and alpha ------------------------------------------------------------------


def phi(h_sol: HSolution, model: CoefficientModel, k: int, state: State, coefs=None) -> np.ndarray:
    """``phi_k = D^{-1}B + L/h`` on every path, shape (P, n)."""
    t = h_sol.grid.t(k)
    c = coefs if coefs is not None else model.evaluate(t, state)
    h = h_sol.h(k, state)
    if np.any(h < H_FLOOR):
        raise FloorViolation(f"h below floor {H_FLOOR:g} in L/h at step {k}")
    return solve_d(c.D, c.B) + h_sol.L(k, state) / h[:, None]


def phi_grid(h_sol: HSolution) -> Optional[np.ndarray]:
    """Deterministic phi on the grid, shape (N+1, n), or ``None`` when it is random."""
    if h_sol.phi_fn(0.0) is None:
        return None
    return np.array([h_sol.phi_fn(t) for t in h_sol.grid.times])


def alpha(u: np.ndarray, X: np.ndarray, h: np.ndarray, L: np.ndarray, coefs) -> np.ndarray:
    """``h D'u + X L + h X C`` per path."""
    Dtu = np.einsum("pji,pj->pi", np.broadcast_to(coefs.D, u.shape + (u.shape[-1],)), u)
    return h[:, None] * Dtu + X[:, None] * L + (h * X)[:, None] * coefs.C


# -- Y ---------------------------------------------------------------------------


class YSolution:
    tier: str
    exact: bool
    y0: float
    y0_se: float
    extra_rate: float

    def Y(self, k: int, state: State) -> np.ndarray:
        raise NotImplementedError

    def Z(self, k: int, state: State) -> np.ndarray:
        raise NotImplementedError

    def diagnostics(self) -> dict:
        return {}


@dataclass(eq=False)
class DeterministicY(YSolution):
    grid: TimeGrid
    n: int
    values: np.ndarray
    extra_rate: float = 0.0
    level: int = 0
    tier: str = "deterministic"
    exact: bool = True
    y0_se: float = 0.0

    @property
    def y0(self) -> float:
        return float(self.values[0])

    def Y(self, k, state):
        return np.full(state.w.shape[0], self.values[k])

    def Z(self, k, state):
        return np.zeros((state.w.shape[0], self.n))

    def diagnostics(self):
        return {"min_y": float(self.values.min()), "simpson_level": self.level}


class RegressionY(_SurfaceSolution, YSolution):
    """Regression-Monte-Carlo Y; Z from one-step increments, smoothed over 3 grid points."""

    exact = False

    def __init__(self, model, grid, fits, z_fits, y0, y0_se, extra_rate, diag, z_method):
        super().__init__(model, grid, fits, None, lambda v: v)
        self.tier = "regression"
        self.z_fits, self.y0, self.y0_se = z_fits, y0, y0_se
        self.extra_rate, self.diag, self.z_method = extra_rate, diag, z_method

    def Y(self, k, state):
        return self._surface(k, state)

    def Z(self, k, state):
        P = state.w.shape[0]
        if k >= self.grid.steps:
            return np.zeros((P, self.model.n))
        if self.z_method == "gradient":
            return self._gradient(k, state)
        feats = self.model.features(state)
        ks = [j for j in (k - 1, k, k + 1) if 0 <= j < self.grid.steps]
        return sum(self.z_fits[j].basis.design(feats) @ self.z_fits[j].coef for j in ks) / len(ks)

    def diagnostics(self):
        d = self.diag
        return {"min_y": d.min_value, "min_r2": d.min_r2, "max_cond": d.max_cond, "n_paths": d.n_paths,
                "y0_se": self.y0_se, "z_method": self.z_method}


@dataclass(frozen=True)
class _ZFit:
    basis: PolyBasis
    coef: np.ndarray


def solve_Y_deterministic(h_sol: HSolution, *, extra_rate: float = 0.0) -> DeterministicY:
    """``Y_k = exp(int_{t_k}^T (|phi|^2 + c) ds)`` for deterministic phi."""
    grid = h_sol.grid
    model = h_sol.model
    if isinstance(h_sol, DeterministicH) and _is_const(model):
        p = model.risk_premium(0.0)
        rate = float(p @ p) + extra_rate
        integrand = lambda s: np.full_like(s, rate)  # noqa: E731
    else:
        def one(t):
            p = h_sol.phi_fn(t)
            return float(p @ p) + extra_rate

        integrand = _vectorize(one)
    I, level = tail_integrals(integrand, grid)
    Y = np.exp(I)
    Y[-1] = 1.0
    return DeterministicY(grid, model.n, Y, extra_rate, level)


def _ytilde_shift(h_sol, model):
    grid = h_sol.grid

    def shift(t, state):
        k = int(round(t / grid.dt))
        return 2.0 * phi(h_sol, model, k, state)

    return shift


def _regress_Y(h_sol, model, bundle, degree, extra_rate, z_method, fit_z=True):
    grid = h_sol.grid
    P, N = bundle.n_paths, grid.steps
    feats = np.empty((N + 1, P, model.feature_dim))
    rates = np.empty((N + 1, P))
    last = None
    for step in walk(model, bundle, _ytilde_shift(h_sol, model)):
        ph = step.shift / 2.0
        feats[step.k] = model.features(step.state)
        rates[step.k] = np.einsum("pi,pi->p", ph, ph) + extra_rate
        last = step
    end = model.step_state(last.state, last.dt, last.dW)
    feats[N] = model.features(end)
    ph = phi(h_sol, model, N, end)
    rates[N] = np.einsum("pi,pi->p", ph, ph) + extra_rate
    G = np.exp(_trapezoid_tail(rates, grid.dt))
    del rates
    fits, r2, cond, min_y = [], 1.0, 1.0, math.inf
    for k in range(N):
        fk = fit(feats[k], G[k], degree)
        fits.append(fk)
        r2, cond = min(r2, fk.r2), max(cond, fk.cond)
        min_y = min(min_y, float(fk.predict(feats[k]).min()))
    y0 = float(G[0].mean())
    z_fits = None
    if fit_z and z_method == "increment":
        z_fits = []
        nxt = np.ones(P)
        for k in range(N - 1, -1, -1):
            cur = fits[k].predict(feats[k])
            xi = bundle.increments(k)
            target = (nxt - cur)[:, None] * xi / grid.dt
            basis = PolyBasis.for_sample(feats[k], degree)
            Phi = basis.design(feats[k])
            coef, *_ = np.linalg.lstsq(Phi, target, rcond=None)
            z_fits.append(_ZFit(basis, coef))
            nxt = cur
        z_fits.reverse()
    se0 = float(G[0].std(ddof=1) / math.sqrt(P)) if P > 1 else 0.0
    return fits, z_fits, y0, se0, _RegressionDiag(min(min_y, 1.0), r2, cond, P)


def solve_Y_regression(h_sol: HSolution, bundle: PathBundle, *, degree: int = 3, extra_rate: float = 0.0,
                       z_method: str = "increment", se_batches: int = SE_BATCHES) -> RegressionY:
    """Regression estimate of Y under ``Ptil`` (drift shift ``2 phi``).

    ``y0_se`` combines the Monte Carlo error of the final average with the
    error propagated from a refitted h: the whole pipeline (h refit when h
    came from regression, then Y) is rerun on ``se_batches`` independent
    sub-ensembles of ``n_paths / se_batches`` paths and the spread of their
    Y_0 values is scaled to the full path count.
    """
    model = h_sol.model
    fits, z_fits, y0, se_mc, diag = _regress_Y(h_sol, model, bundle, degree, extra_rate, z_method)
    se = se_mc
    P = bundle.n_paths
    if se_batches and se_batches > 1 and P >= 20 * se_batches:
        sub = P // se_batches
        vals = []
        for b in range(se_batches):
            bb = bundle.with_stream(_BATCH_STREAM + bundle.stream * 64 + b).with_paths(sub)
            hb = h_sol.refit(bb) if isinstance(h_sol, RegressionH) else h_sol
            vals.append(_regress_Y(hb, model, bb, degree, extra_rate, z_method, fit_z=False)[2])
        se_batch = float(np.std(vals, ddof=1) * math.sqrt(sub / P))
        se = max(se_mc, se_batch)
    return RegressionY(model, h_sol.grid, fits, z_fits, y0, se, extra_rate, diag, z_method)


def solve_Y(h_sol: HSolution, bundle: Optional[PathBundle] = None, *, degree: int = 3, extra_rate: float = 0.0,
            method: Optional[str] = None, **kwargs) -> YSolution:
    """Y by quadrature when phi is deterministic, else by regression on ``bundle``.

    ``method`` forces ``"quadrature"`` or ``"regression"``.
    """
    if method is None:
        method = "quadrature" if h_sol.phi_fn(0.0) is not None else "regression"
    if method == "quadrature":
        return solve_Y_deterministic(h_sol, extra_rate=extra_rate)
    if bundle is None:
        raise ValueError("regression Y needs a path bundle")
    return solve_Y_regression(h_sol, bundle, degree=degree, extra_rate=extra_rate, **kwargs)


def solve_Y_reinsurance(h_sol: HSolution, jump: JumpModel, bundle: Optional[PathBundle] = None,
                        **kwargs) -> YSolution:
    """Y with the extra driver rate ``b^2 / (lambda m2)``; b = 0 gives :func:`solve_Y` exactly."""
    rate = jump.jump_rate
    return solve_Y(h_sol, bundle, extra_rate=rate + 0.0, **kwargs)


# -- combined solution and checks ---------------------------------------------------------


@dataclass(eq=False)
class BsdeSolution:
    h: HSolution
    y: YSolution
    model: CoefficientModel = field(init=False)
    grid: TimeGrid = field(init=False)

    def __post_init__(self):
        self.model = self.h.model
        self.grid = self.h.grid

    @property
    def tier(self) -> str:
        return f"h:{self.h.tier}/Y:{self.y.tier}"

    @property
    def exact(self) -> bool:
        return self.h.exact and self.y.exact

    def values(self, k: int, state: State, coefs=None):
        """``(h, L, Y, Z, phi)`` at grid index k for every path."""
        h = self.h.h(k, state)
        L = self.h.L(k, state)
        c = coefs if coefs is not None else self.model.evaluate(self.grid.t(k), state)
        ph = solve_d(c.D, c.B) + L / h[:, None]
        return h, L, self.y.Y(k, state), self.y.Z(k, state), ph

    def y_floor_gate(self) -> dict:
        """Y >= 1 (exact) or Y >= 1 - 3 SE (regression)."""
        min_y = self.y.diagnostics().get("min_y", 1.0)
        tol = 0.0 if self.y.exact else 3.0 * self.y.y0_se
        return {"min_y": min_y, "tol": tol, "pass": min_y >= 1.0 - tol}

    def diagnostics(self) -> dict:
        return {"tier": self.tier, "h": self.h.diagnostics(), "y": self.y.diagnostics(),
                "h0": self.h.h0, "y0": self.y.y0, "h0_se": self.h.h0_se, "y0_se": self.y.y0_se}


def h_residual_check(h_sol: HSolution, bundle: PathBundle) -> dict:
    """One-step residuals ``h_{k+1} - h_k - driver dt - L'dW`` along a P-ensemble.

    The driver uses the trapezoid rule across the step.  Reports the worst
    per-step |mean| in SE units and the gate on the summed residual.
    """
    model, grid = h_sol.model, h_sol.grid

    def driver(k, state):
        c = model.evaluate(grid.t(k), state)
        h, L = h_sol.h(k, state), h_sol.L(k, state)
        th = solve_d(c.D, c.B)
        return (-c.A + np.einsum("pi,pi->p", th, c.C)) * h + np.einsum("pi,pi->p", th, L) \
            + np.einsum("pi,pi->p", L, L) / h

    total = np.zeros(bundle.n_paths)
    worst, max_abs = 0.0, 0.0
    drivers = []
    for step in walk(model, bundle):
        k, s0 = step.k, step.state
        s1 = model.step_state(s0, step.dt, step.dW)
        d0 = driver(k, s0)
        drivers.append(float(d0[0]))
        r = (h_sol.h(k + 1, s1) - h_sol.h(k, s0) - 0.5 * (d0 + driver(k + 1, s1)) * step.dt
             - np.einsum("pi,pi->p", h_sol.L(k, s0), step.dW))
        total += r
        m = float(r.mean())
        se = float(r.std(ddof=1) / math.sqrt(r.size)) if r.size > 1 else 0.0
        max_abs = max(max_abs, abs(m))
        if se > 0:
            worst = max(worst, abs(m) / se)
    mean = float(total.mean())
    se = float(total.std(ddof=1) / math.sqrt(total.size)) if total.size > 1 else 0.0
    tol = 0.0
    if isinstance(h_sol, DeterministicH):
        # no noise: the residual is the trapezoid error, bounded by T max|f''| dt^2 / 12 (doubled)
        d2 = np.abs(np.diff(drivers, 2)).max() if len(drivers) > 2 else 0.0
        tol = grid.horizon * d2 / 6.0 + 1e-12 * max(1.0, h_sol.h0)
    return {"mean": mean, "se": se, "max_step_abs_mean": max_abs, "max_step_z": worst,
            "pass": abs(mean) <= 4 * se + tol}


def write_bsde_csv(path, sol: BsdeSolution, *, bundle: Optional[PathBundle] = None, max_paths: int = 20) -> int:
    """Grid dump ``k, t, h, L_*, Y, Z_*``; with a bundle, one block per sample path."""
    n, grid, model = sol.model.n, sol.grid, sol.model
    head = ["k", "t", "h"] + [f"L_{i + 1}" for i in range(n)] + ["Y"] + [f"Z_{i + 1}" for i in range(n)]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if bundle is None:
            w.writerow(head)
            state = model.initial_state(1)
            for k in range(grid.steps + 1):
                h, L, Y, Z, _ = sol.values(k, state)
                w.writerow([k, repr(grid.t(k)), repr(float(h[0]))] + [repr(float(v)) for v in L[0]]
                           + [repr(float(Y[0]))] + [repr(float(v)) for v in Z[0]])
                rows += 1
            return rows
        sub = bundle.with_paths(min(max_paths, bundle.n_paths))
        w.writerow(["path"] + head)
        states = []
        for step in walk(model, sub):
            states.append(step.state)
        states.append(model.step_state(step.state, step.dt, step.dW))
        for k, st in enumerate(states):
            h, L, Y, Z, _ = sol.values(k, st)
            for p in range(sub.n_paths):
                w.writerow([p, k, repr(grid.t(k)), repr(float(h[p]))] + [repr(float(v)) for v in L[p]]
                           + [repr(float(Y[p]))] + [repr(float(v)) for v in Z[p]])
                rows += 1
    return rows


STREAM_H = 1
STREAM_Y = 2


def solve_scenario(cfg, *, backend: Optional[str] = None, z_method: str = "increment",
                   se_batches: int = SE_BATCHES, antithetic: bool = False) -> BsdeSolution:
    """Solve both equations for a scenario.

    Regression backends draw their own ensembles (streams ``STREAM_H`` and
    ``STREAM_Y``) so that fitted surfaces are independent of the forward
    ensemble (stream 0) used by the verifiers.
    """
    generate_paths(cfg)  # memory-budget check
    model, grid = cfg.model, cfg.grid
    needs_paths = model.tier is Tier.PATH_DEPENDENT or backend == "regression" or (
        model.tier is Tier.MARKOV_FACTOR and not (model.constant_bcd and model.factor.kappa > 0))
    # the Y and h ensembles carry no claims: both solutions are Brownian-adapted
    hb = PathBundle(grid, cfg.n_paths, model.n, cfg.seed, stream=STREAM_H, antithetic=antithetic) \
        if needs_paths else None
    h = solve_h(model, grid, hb, backend=backend, degree=cfg.basis_degree)
    yb = None
    if h.phi_fn(0.0) is None:
        yb = PathBundle(grid, cfg.n_paths, model.n, cfg.seed, stream=STREAM_Y, antithetic=antithetic)
    kwargs = {} if yb is None else {"z_method": z_method, "se_batches": se_batches}
    if cfg.jump is not None:
        y = solve_Y_reinsurance(h, cfg.jump, yb, degree=cfg.basis_degree, **kwargs)
    else:
        y = solve_Y(h, yb, degree=cfg.basis_degree, **kwargs)
    return BsdeSolution(h, y)
