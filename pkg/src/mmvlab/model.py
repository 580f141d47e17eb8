"""Market-model types, scenario configuration and standing-assumption checks.

The state equation is the scalar linear SDE

    dX = (A X + u'B) dt + (X C' + u'D) dW,

with coefficient processes supplied in one of three tiers:

* ``deterministic``  -- A, B, C, D are constants or functions of ``t``;
* ``markov_factor``  -- A is an Ornstein-Uhlenbeck factor driven by W,
  B, C, D are constants or functions of ``t``;
* ``path_dependent`` -- any coefficient may be a function ``fn(t, state)``
  of the current Brownian position ``state.w`` (and factor ``state.f``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import integrate, special

from .errors import Degenerate, DimensionMismatch

DEFAULT_DELTA = 1e-4
DEFAULT_CAP = 10.0
DEFAULT_A_MAX = 50.0

Spec = Union[float, Sequence, np.ndarray, Callable]


class Tier(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    MARKOV_FACTOR = "markov_factor"
    PATH_DEPENDENT = "path_dependent"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * dt`` on ``[0, horizon]``."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 2:
            raise ValueError(f"steps must be an integer >= 2, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def t(self, k: int) -> float:
        return self.horizon if k == self.steps else k * self.dt

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.steps % factor:
            raise ValueError(f"{self.steps} steps not divisible by {factor}")
        return TimeGrid(self.horizon, self.steps // factor)


class State(NamedTuple):
    """Per-path market state: Brownian position ``w`` (P, n) and factor ``f`` (P,)."""

    w: np.ndarray
    f: Optional[np.ndarray]


class Coefs(NamedTuple):
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    a_cap_hits: int = 0


@dataclass(frozen=True, eq=False)
class FactorDynamics:
    """Ornstein-Uhlenbeck factor ``df = kappa (level - f) dt + vol' dW``."""

    kappa: float
    level: float
    vol: np.ndarray
    initial: float

    def __post_init__(self):
        object.__setattr__(self, "vol", np.atleast_1d(np.asarray(self.vol, dtype=float)))

    def _weights(self, dt):
        if self.kappa == 0.0:
            return 1.0, 1.0
        decay = math.exp(-self.kappa * dt)
        return decay, (1.0 - decay) / (self.kappa * dt)

    def step(self, f: np.ndarray, dt: float, dW: np.ndarray) -> np.ndarray:
        # exponential integrator: exact conditional mean for any constant drift shift
        decay, w = self._weights(dt)
        return self.level + (f - self.level) * decay + w * (dW @ self.vol)

    def mean(self, t):
        """Deterministic path of the factor when ``vol`` vanishes."""
        return self.level + (self.initial - self.level) * np.exp(-self.kappa * np.asarray(t))


def _as_coefficient(spec, shape, name):
    """Normalise a coefficient spec into a constant array or a callable."""
    if callable(spec):
        return spec
    arr = np.asarray(spec, dtype=float)
    if arr.shape != shape:
        raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


def _takes_state(fn):
    try:
        import inspect

        return len(inspect.signature(fn).parameters) >= 2
    except (TypeError, ValueError):
        return False


@dataclass(frozen=True, eq=False)
class CoefficientModel:
    """Coefficient processes (A, B, C, D) of the controlled state SDE.

    Parameters
    ----------
    tier : Tier
    B, C : constant (n,) arrays or callables
    D : constant (n, n) array or callable
    A : constant, callable, or ``None`` in the markov-factor tier (A is the factor)
    factor : FactorDynamics, required in the markov-factor tier
    n : Brownian dimension; inferred from B or D when omitted
    delta : nondegeneracy bound for ``D D'``
    cap : bound on |B|, |C|, |D| entries
    a_max : hard cap on |A| applied at simulation time
    """

    tier: Tier
    B: Spec
    C: Spec
    D: Spec
    A: Optional[Spec] = None
    factor: Optional[FactorDynamics] = None
    n: Optional[int] = None
    delta: float = DEFAULT_DELTA
    cap: float = DEFAULT_CAP
    a_max: float = DEFAULT_A_MAX
    source: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        tier = Tier(self.tier)
        object.__setattr__(self, "tier", tier)
        n = self.n
        if n is None:
            if not callable(self.B):
                n = np.atleast_1d(np.asarray(self.B, dtype=float)).shape[0]
            elif not callable(self.D):
                n = np.atleast_2d(np.asarray(self.D, dtype=float)).shape[0]
            elif self.factor is not None:
                n = self.factor.vol.shape[0]
            else:
                raise DimensionMismatch("cannot infer n; pass it explicitly")
        object.__setattr__(self, "n", int(n))
        B = self.B if callable(self.B) else np.atleast_1d(np.asarray(self.B, dtype=float))
        C = self.C if callable(self.C) else np.atleast_1d(np.asarray(self.C, dtype=float))
        D = self.D if callable(self.D) else np.atleast_2d(np.asarray(self.D, dtype=float))
        object.__setattr__(self, "B", _as_coefficient(B, (n,), "B"))
        object.__setattr__(self, "C", _as_coefficient(C, (n,), "C"))
        object.__setattr__(self, "D", _as_coefficient(D, (n, n), "D"))
        if tier is Tier.MARKOV_FACTOR:
            if self.factor is None:
                raise ValueError("markov_factor tier requires factor dynamics")
            if self.A is not None:
                raise ValueError("markov_factor tier defines A as the factor; leave A unset")
        elif self.A is None:
            raise ValueError(f"{tier.value} tier requires A")
        elif not callable(self.A):
            object.__setattr__(self, "A", float(self.A))
        if self.factor is not None and self.factor.vol.shape != (n,):
            raise DimensionMismatch(f"factor vol has shape {self.factor.vol.shape}, expected {(n,)}")
        if tier is not Tier.PATH_DEPENDENT:
            for name in ("A", "B", "C", "D"):
                fn = getattr(self, name)
                if callable(fn) and _takes_state(fn):
                    raise ValueError(f"{name} depends on the path state; use the path_dependent tier")

    # -- structure -------------------------------------------------------

    @property
    def constant_bcd(self) -> bool:
        return not any(callable(v) for v in (self.B, self.C, self.D))

    @property
    def uses_path_state(self) -> bool:
        return self.tier is Tier.PATH_DEPENDENT

    @property
    def feature_dim(self) -> int:
        return (self.n if self.uses_path_state else 0) + (1 if self.factor is not None else 0)

    def feature_loadings(self) -> np.ndarray:
        """Rows give d(feature)/dW: identity for the Brownian position, ``vol`` for the factor."""
        rows = []
        if self.uses_path_state:
            rows.extend(np.eye(self.n))
        if self.factor is not None:
            rows.append(self.factor.vol)
        return np.array(rows, dtype=float).reshape(len(rows), self.n)

    def features(self, state: State) -> np.ndarray:
        cols = []
        if self.uses_path_state:
            cols.append(state.w)
        if self.factor is not None:
            cols.append(state.f[:, None])
        if not cols:
            return np.zeros((state.w.shape[0], 0))
        return np.concatenate(cols, axis=1)

    def initial_state(self, n_paths: int) -> State:
        f = None if self.factor is None else np.full(n_paths, float(self.factor.initial))
        return State(np.zeros((n_paths, self.n)), f)

    def step_state(self, state: State, dt: float, dW: np.ndarray) -> State:
        f = None if self.factor is None else self.factor.step(state.f, dt, dW)
        return State(state.w + dW, f)

    # -- evaluation ------------------------------------------------------

    def _eval(self, spec, t, state):
        if not callable(spec):
            return spec
        if self.uses_path_state:
            return np.asarray(spec(t, state), dtype=float)
        return np.asarray(spec(t), dtype=float)

    def evaluate(self, t: float, state: Optional[State] = None) -> Coefs:
        """Coefficients at time ``t``; broadcast to every path when ``state`` is given.

        Without a state only time-deterministic coefficients can be evaluated and
        the drift is returned uncapped.
        """
        if state is None:
            if self.tier is not Tier.DETERMINISTIC:
                raise ValueError("path state required outside the deterministic tier")
            return Coefs(
                float(self._eval(self.A, t, None)),
                self._eval(self.B, t, None),
                self._eval(self.C, t, None),
                self._eval(self.D, t, None),
            )
        P, n = state.w.shape
        if self.tier is Tier.MARKOV_FACTOR:
            A = state.f
        else:
            A = np.broadcast_to(self._eval(self.A, t, state), (P,))
        hits = int(np.count_nonzero(np.abs(A) > self.a_max))
        if hits:
            A = np.clip(A, -self.a_max, self.a_max)
        B = np.broadcast_to(self._eval(self.B, t, state), (P, n))
        C = np.broadcast_to(self._eval(self.C, t, state), (P, n))
        D = np.broadcast_to(self._eval(self.D, t, state), (P, n, n))
        return Coefs(A, B, C, D, hits)

    def drift_exponent(self, t: float) -> float:
        """``A_t - (D_t^{-1} B_t)' C_t`` for the deterministic tier."""
        c = self.evaluate(t)
        return c.A - float(np.linalg.solve(c.D, c.B) @ c.C)

    def risk_premium(self, t: float) -> np.ndarray:
        """``D_t^{-1} B_t`` for time-deterministic B, D."""
        B = self._eval(self.B, t, None)
        D = self._eval(self.D, t, None)
        return np.linalg.solve(D, B)


def solve_d(D: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched ``D^{-1} v`` for D of shape (..., n, n) and v of shape (..., n)."""
    return np.linalg.solve(D, v[..., None])[..., 0]


def solve_dt(D: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched ``(D')^{-1} v``."""
    return np.linalg.solve(np.swapaxes(D, -1, -2), v[..., None])[..., 0]


# -- jumps -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClaimDistribution:
    """Claim-size law on a bounded subset of ``[0, inf)``.

    ``kind`` is ``"discrete"`` (``atoms`` = ((y, p), ...)) or ``"lognormal_trunc"``
    (``mu``, ``sigma`` of log y, truncated to ``(0, y_max]``).  An unbounded
    lognormal (``y_max=None``) can be constructed so that validation reports it.
    """

    kind: str
    atoms: Optional[tuple] = None
    mu: float = 0.0
    sigma: float = 1.0
    y_max: Optional[float] = None

    def __post_init__(self):
        if self.kind == "discrete":
            atoms = np.asarray(self.atoms, dtype=float).reshape(-1, 2)
            if atoms.shape[0] == 0:
                raise ValueError("discrete claim distribution needs at least one atom")
            if np.any(atoms[:, 1] < 0) or not math.isclose(atoms[:, 1].sum(), 1.0, rel_tol=1e-9):
                raise ValueError("atom probabilities must be nonnegative and sum to one")
            object.__setattr__(self, "atoms", tuple(map(tuple, atoms)))
        elif self.kind == "lognormal_trunc":
            if not self.sigma > 0:
                raise ValueError("lognormal sigma must be positive")
        else:
            raise ValueError(f"unknown claim distribution kind {self.kind!r}")

    @property
    def bounded(self) -> bool:
        if self.kind == "discrete":
            return True
        return self.y_max is not None and math.isfinite(self.y_max)

    @property
    def support_max(self) -> float:
        if self.kind == "discrete":
            return max(y for y, _ in self.atoms)
        return math.inf if not self.bounded else float(self.y_max)

    def _z_max(self):
        return (math.log(self.y_max) - self.mu) / self.sigma if self.bounded else math.inf

    def raw_moment(self, order: int) -> float:
        if self.kind == "discrete":
            return float(sum(p * y**order for y, p in self.atoms))
        s, z = self.sigma, self._z_max()
        return math.exp(order * self.mu + 0.5 * (order * s) ** 2) * special.ndtr(z - order * s) / special.ndtr(z)

    @property
    def m1(self) -> float:
        return self.raw_moment(1)

    @property
    def m2(self) -> float:
        return self.raw_moment(2)

    def pdf(self, y):
        if self.kind != "lognormal_trunc":
            raise TypeError("pdf is defined for the lognormal law only")
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        ok = (y > 0) & (y <= self.support_max)
        z = (np.log(y[ok]) - self.mu) / self.sigma
        out[ok] = np.exp(-0.5 * z * z) / (y[ok] * self.sigma * math.sqrt(2 * math.pi)) / special.ndtr(self._z_max())
        return out

    def expect(self, fn: Callable) -> float:
        """``int fn(y) nu(dy)``."""
        if self.kind == "discrete":
            ys = np.array([y for y, _ in self.atoms])
            ps = np.array([p for _, p in self.atoms])
            return float(np.sum(ps * np.asarray(fn(ys), dtype=float)))
        upper = self.support_max
        val, _ = integrate.quad(lambda y: float(fn(np.array([y]))[0]) * float(self.pdf(np.array([y]))[0]), 0.0, upper,
                                limit=200, epsabs=1e-13, epsrel=1e-11)
        return val

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "discrete":
            ys = np.array([y for y, _ in self.atoms])
            ps = np.array([p for _, p in self.atoms])
            return ys[rng.choice(len(ys), size=size, p=ps)] if len(ys) > 1 else np.full(size, ys[0])
        u = rng.random(size) * special.ndtr(self._z_max())
        return np.exp(self.mu + self.sigma * special.ndtri(u))

    def to_dict(self) -> dict:
        if self.kind == "discrete":
            return {"kind": "discrete", "atoms": [list(a) for a in self.atoms]}
        return {"kind": "lognormal_trunc", "mu": self.mu, "sigma": self.sigma, "y_max": self.y_max}


@dataclass(frozen=True, eq=False)
class JumpModel:
    """Compound-Poisson claims with intensity ``intensity`` and law ``claims``.

    ``premium_loading`` (b) may be zero to represent the no-reinsurance limit.
    """

    intensity: float
    claims: ClaimDistribution
    premium_loading: float
    drift_offset: float = 0.0

    @property
    def m1(self) -> float:
        return self.claims.m1

    @property
    def m2(self) -> float:
        return self.claims.m2

    @property
    def jump_rate(self) -> float:
        """``b^2 / (lambda m2)``, the extra Y-driver rate from reinsurance."""
        return self.premium_loading**2 / (self.intensity * self.m2)


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    x: float
    theta: float
    grid: TimeGrid
    model: CoefficientModel
    jump: Optional[JumpModel] = None
    n_paths: int = 10_000
    seed: int = 0
    basis_degree: int = 3


# -- validation ----------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: str
    location: str
    detail: str


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, rule, location, detail):
        self.violations.append(Violation(rule, location, detail))

    def rules(self) -> list:
        return [v.rule for v in self.violations]


VALIDATION_PATHS = 64


def _sample_states(model: CoefficientModel, grid: TimeGrid, seed: int):
    """Short P-measure ensemble used to probe state-dependent coefficients."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    state = model.initial_state(VALIDATION_PATHS)
    yield 0, state
    for k in range(grid.steps):
        dW = rng.standard_normal((VALIDATION_PATHS, model.n)) * math.sqrt(grid.dt)
        state = model.step_state(state, grid.dt, dW)
        yield k + 1, state


def validate_scenario(cfg: ScenarioConfig) -> ValidationReport:
    """Check the standing assumptions; every violation is reported, none raised.

    Coefficient rules are evaluated at every grid point (on sample paths in
    the path-dependent tier); each violated rule is reported once, at its
    first location, with the count of further offending evaluations.
    """
    rep = ValidationReport()
    model, grid = cfg.model, cfg.grid
    if not cfg.theta > 0:
        rep.add("risk parameter", "/theta", f"theta={cfg.theta} must be positive")
    if int(cfg.n_paths) < 1:
        rep.add("path count", "/n_paths", f"n_paths={cfg.n_paths} must be >= 1")
    if not math.isfinite(cfg.x):
        rep.add("initial wealth", "/x", "x must be finite")

    if model.factor is not None:
        fd = model.factor
        if fd.kappa < 0:
            rep.add("factor mean reversion", "/model/kappa_f", f"kappa_f={fd.kappa} is negative")
        if not np.all(np.isfinite(fd.vol)):
            rep.add("factor volatility", "/model/v_f", "v_f must be finite")

    grid_hits: dict = {}

    def hit(rule, where, detail):
        first = grid_hits.setdefault(rule, [where, detail, 0])
        first[2] += 1

    if model.tier is Tier.PATH_DEPENDENT:
        evaluations = ((k, s) for k, s in _sample_states(model, grid, cfg.seed))
    else:
        evaluations = ((k, None) for k in range(grid.steps + 1))
    for k, state in evaluations:
        t = grid.t(k)
        if state is None:
            B, C, D = (np.asarray(model._eval(getattr(model, nm), t, None), dtype=float) for nm in "BCD")
            B, C, D = B[None], C[None], D[None]
            A = np.atleast_1d(model._eval(model.A, t, None)) if model.tier is Tier.DETERMINISTIC else None
        else:
            c = model.evaluate(t, state)
            A = np.broadcast_to(model._eval(model.A, t, state), (VALIDATION_PATHS,))
            B, C, D = c.B, c.C, c.D
        where = f"k={k}" if state is None else f"k={k}, path sample"
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(C)) and np.all(np.isfinite(D))):
            hit("nonfinite coefficient", where, "B, C or D not finite")
            continue
        eig = np.linalg.eigvalsh(D @ np.swapaxes(D, -1, -2))[..., 0]
        bad = np.flatnonzero(eig < model.delta)
        if bad.size:
            hit("nondegeneracy", f"{where} {int(bad[0])}" if state is not None else where,
                    f"min eig(DD')={eig[bad[0]]:.3g} < delta={model.delta:g}")
        big = max(np.abs(B).max(), np.abs(C).max(), np.abs(D).max())
        if big > model.cap:
            hit("coefficient cap", where, f"max |B|,|C|,|D| = {big:.3g} > cap={model.cap:g}")
        if A is not None and np.abs(A).max() > model.a_max:
            hit("drift cap", where, f"|A| = {np.abs(A).max():.3g} > a_max={model.a_max:g}")

    for rule, (where, detail, count) in grid_hits.items():
        more = f" (and {count - 1} more evaluations)" if count > 1 else ""
        rep.add(rule, where, detail + more)

    if cfg.jump is not None:
        jm = cfg.jump
        if not jm.intensity > 0:
            rep.add("jump intensity", "/jump/intensity", f"lambda={jm.intensity} must be positive")
        if jm.premium_loading < 0:
            rep.add("premium loading", "/jump/premium_loading", f"b={jm.premium_loading} is negative")
        if jm.drift_offset != 0.0:
            rep.add("drift offset", "/jump/drift_offset", "a is normalised to 0")
        if not jm.claims.bounded:
            rep.add("claim support unbounded", "/jump/claim_distribution", "lognormal claims need a finite y_max")
        else:
            m2 = jm.m2
            if not (m2 > 0 and math.isfinite(m2)):
                rep.add("claim moments", "/jump/claim_distribution", f"m2={m2} must be positive and finite")
        if jm.claims.kind == "discrete" and min(y for y, _ in jm.claims.atoms) < 0:
            rep.add("claim support", "/jump/claim_distribution", "claim sizes must be nonnegative")
    return rep


# -- portfolio mapping -----------------------------------------------------------


def _check_sigma(sig_fn, mu_fn, delta, times):
    for t in times:
        mu = np.atleast_1d(np.asarray(mu_fn(t), dtype=float))
        sig = np.atleast_2d(np.asarray(sig_fn(t), dtype=float))
        n = mu.shape[0]
        if sig.shape != (n, n):
            raise DimensionMismatch(f"sigma has shape {sig.shape}, mu has length {n}")
        if np.linalg.eigvalsh(sig @ sig.T)[0] < delta:
            raise Degenerate(f"sigma sigma' fails the bound delta={delta:g} at t={t:g}")
    return n


def portfolio_to_generic(r, mu, sigma, *, delta=DEFAULT_DELTA, cap=DEFAULT_CAP, a_max=DEFAULT_A_MAX,
                         check_times=(0.0,)) -> CoefficientModel:
    """Map a market ``(r, mu, sigma)`` onto the generic coefficients ``(A, B, C, D) = (r, mu, 0, sigma)``.

    ``r`` is a constant, a function of ``t``, or a :class:`FactorDynamics`
    (which selects the markov-factor tier).
    """
    as_fn = lambda v: v if callable(v) else (lambda t, _v=v: _v)  # noqa: E731
    n = _check_sigma(as_fn(sigma), as_fn(mu), delta, check_times)
    mu_c = mu if callable(mu) else np.atleast_1d(np.asarray(mu, dtype=float))
    sig_c = sigma if callable(sigma) else np.atleast_2d(np.asarray(sigma, dtype=float))
    common = dict(B=mu_c, C=np.zeros(n), D=sig_c, n=n, delta=delta, cap=cap, a_max=a_max, source=(r, mu, sigma))
    if isinstance(r, FactorDynamics):
        if r.vol.shape != (n,):
            raise DimensionMismatch(f"factor vol has length {r.vol.shape[0]}, market has n={n}")
        return CoefficientModel(Tier.MARKOV_FACTOR, factor=r, **common)
    return CoefficientModel(Tier.DETERMINISTIC, A=r, **common)


def generic_to_portfolio(model: CoefficientModel):
    """Inverse of :func:`portfolio_to_generic`: returns ``(r, mu, sigma)``."""
    if model.source is not None:
        return model.source
    if callable(model.C) or np.any(model.C != 0):
        raise ValueError("model has C != 0 and is not a portfolio market")
    r = model.factor if model.tier is Tier.MARKOV_FACTOR else model.A
    return r, model.B, model.D
