"""Seeded Brownian/Poisson ensembles and forward simulation of state and density paths.

Brownian increments are never stored.  Each block of ``CHUNK`` paths at each
step draws from its own Philox stream keyed by ``(seed, stream, chunk, step)``,
so any step can be regenerated independently and the output does not depend
on how the work is split across threads.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import LengthMismatch, NegativeRetention, NonFiniteState, PsiBelowMinusOne, ResourceLimit
from .model import CoefficientModel, Coefs, JumpModel, ScenarioConfig, State, TimeGrid

CHUNK = 4096
OVERFLOW = 1e12
MAX_FLAGGED_FRACTION = 1e-3
DEFAULT_MEMORY_MB = 4096

_KIND_BROWNIAN = 0
_KIND_JUMPS = 1


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MMVLAB_THREADS", "1")))
    except ValueError:
        return 1


def memory_budget_bytes() -> int:
    try:
        mb = float(os.environ.get("MMVLAB_MEMORY_MB", DEFAULT_MEMORY_MB))
    except ValueError:
        mb = DEFAULT_MEMORY_MB
    return int(mb * 2**20)


def _generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass(frozen=True)
class JumpMarks:
    """Claim arrivals sorted by grid step; ``ptr[k]:ptr[k+1]`` indexes step k."""

    path: np.ndarray
    time: np.ndarray
    size: np.ndarray
    ptr: np.ndarray

    @classmethod
    def build(cls, path, time, size, grid: TimeGrid) -> "JumpMarks":
        step = np.clip(np.ceil(time / grid.dt).astype(np.int64) - 1, 0, grid.steps - 1)
        order = np.lexsort((time, path, step))
        ptr = np.searchsorted(step[order], np.arange(grid.steps + 1), side="left")
        return cls(path[order], time[order], size[order], ptr)

    def in_step(self, k: int):
        s = slice(self.ptr[k], self.ptr[k + 1])
        return self.path[s], self.size[s]

    def counts(self, n_paths: int) -> np.ndarray:
        return np.bincount(self.path, minlength=n_paths)

    def claim_totals(self, k: int, n_paths: int) -> np.ndarray:
        p, y = self.in_step(k)
        return np.bincount(p, weights=y, minlength=n_paths)


class PathBundle:
    """Seeded ensemble of Brownian increments (and optional claim marks) on a grid.

    Parameters
    ----------
    grid : TimeGrid
    n_paths : int
    n : Brownian dimension
    seed : int
    stream : independent-ensemble index; the same seed with another stream
        gives statistically independent paths
    antithetic : mirror the first half of the paths
    jump : JumpModel, optional
    """

    def __init__(self, grid: TimeGrid, n_paths: int, n: int, seed: int, *, stream: int = 0,
                 antithetic: bool = False, jump: Optional[JumpModel] = None, _base=None, _factor: int = 1):
        if n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        self.grid = grid
        self.n_paths = int(n_paths)
        self.n = int(n)
        self.seed = int(seed)
        self.stream = int(stream)
        self.antithetic = bool(antithetic)
        self.jump = jump
        self._base = _base
        self._factor = _factor
        if _base is None:
            self.marks = self._draw_jumps() if jump is not None else None
        else:
            m = _base.marks
            self.marks = None if m is None else JumpMarks.build(m.path, m.time, m.size, grid)

    # -- Brownian increments ----------------------------------------------

    @property
    def n_base(self) -> int:
        return (self.n_paths + 1) // 2 if self.antithetic else self.n_paths

    def _chunks(self):
        return [(c, min(CHUNK, self.n_base - c * CHUNK)) for c in range(-(-self.n_base // CHUNK))]

    def _draw_chunk(self, c_len, k):
        c, length = c_len
        g = _generator(self.seed, self.stream, _KIND_BROWNIAN, c, k)
        return g.standard_normal((length, self.n))

    def increments(self, k: int) -> np.ndarray:
        """Brownian increments over ``[t_k, t_{k+1}]``, shape (n_paths, n)."""
        if not 0 <= k < self.grid.steps:
            raise IndexError(k)
        if self._base is not None:
            f = self._factor
            return sum(self._base.increments(k * f + j) for j in range(f))
        chunks = self._chunks()
        threads = worker_count()
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(threads) as pool:
                parts = list(pool.map(lambda cl: self._draw_chunk(cl, k), chunks))
        else:
            parts = [self._draw_chunk(cl, k) for cl in chunks]
        z = np.concatenate(parts, axis=0) * math.sqrt(self.grid.dt)
        if self.antithetic:
            z = np.concatenate([z, -z], axis=0)[: self.n_paths]
        return z

    def all_increments(self) -> np.ndarray:
        """Materialise every increment, shape (N, n_paths, n)."""
        return np.stack([self.increments(k) for k in range(self.grid.steps)])

    # -- jumps ------------------------------------------------------------

    def _draw_jumps(self) -> JumpMarks:
        jm, T = self.jump, self.grid.horizon
        paths, times, sizes = [], [], []
        for c in range(-(-self.n_paths // CHUNK)):
            lo, hi = c * CHUNK, min(self.n_paths, (c + 1) * CHUNK)
            g = _generator(self.seed, self.stream, _KIND_JUMPS, c)
            counts = g.poisson(jm.intensity * T, hi - lo)
            total = int(counts.sum())
            paths.append(np.repeat(np.arange(lo, hi), counts))
            times.append(T * (1.0 - g.random(total)))
            sizes.append(jm.claims.sample(g, total))
        return JumpMarks.build(np.concatenate(paths), np.concatenate(times), np.concatenate(sizes), self.grid)

    # -- derived bundles ----------------------------------------------------

    def coarsen(self, factor: int) -> "PathBundle":
        """Same paths on a grid ``factor`` times coarser (increments are summed)."""
        if factor == 1:
            return self
        base = self if self._base is None else self._base
        total = factor * self._factor
        return PathBundle(base.grid.coarsen(total), self.n_paths, self.n, self.seed, stream=self.stream,
                          antithetic=self.antithetic, jump=self.jump, _base=base, _factor=total)

    def with_stream(self, stream: int) -> "PathBundle":
        return PathBundle(self.grid, self.n_paths, self.n, self.seed, stream=stream,
                          antithetic=self.antithetic, jump=self.jump)

    def with_paths(self, n_paths: int) -> "PathBundle":
        return PathBundle(self.grid, n_paths, self.n, self.seed, stream=self.stream,
                          antithetic=self.antithetic, jump=self.jump)

    def sanity(self) -> dict:
        """Per-step increment moment gates (reported, not enforced)."""
        dt, P = self.grid.dt, self.n_paths
        worst_mean, worst_cov = 0.0, 0.0
        for k in range(self.grid.steps):
            z = self.increments(k)
            worst_mean = max(worst_mean, float(np.abs(z.mean(axis=0)).max() / math.sqrt(dt / P)))
            cov = z.T @ z / P
            # var of z_i z_j is dt^2 (1 + delta_ij)
            se = dt * np.sqrt((1 + np.eye(self.n)) / P)
            worst_cov = max(worst_cov, float((np.abs(cov - dt * np.eye(self.n)) / se).max()))
        return {"mean_z": worst_mean, "mean_pass": worst_mean <= 5.0, "cov_z": worst_cov, "cov_pass": worst_cov <= 5.0}


def generate_paths(cfg: ScenarioConfig, *, antithetic: bool = False, stream: int = 0) -> PathBundle:
    """Ensemble for a scenario; raises :class:`ResourceLimit` past the memory budget."""
    n = cfg.model.n
    need = cfg.n_paths * (cfg.grid.steps + 1) * max(n, 1) * 8
    budget = memory_budget_bytes()
    if need > budget:
        raise ResourceLimit(f"{cfg.n_paths} paths x {cfg.grid.steps} steps needs ~{need / 2**20:.0f} MiB, "
                            f"budget is {budget / 2**20:.0f} MiB (MMVLAB_MEMORY_MB)")
    return PathBundle(cfg.grid, cfg.n_paths, n, cfg.seed, stream=stream, antithetic=antithetic, jump=cfg.jump)


# -- forward walking ----------------------------------------------------------------


@dataclass
class Step:
    """One grid interval of a forward pass.

    ``xi`` is the bundle increment (a Brownian increment under the simulation
    measure); ``dW`` is the increment of the reference Brownian motion W.
    """

    k: int
    t: float
    dt: float
    xi: np.ndarray
    dW: np.ndarray
    state: State
    model: CoefficientModel
    bundle: PathBundle
    shift: Optional[np.ndarray] = None

    @cached_property
    def coefs(self) -> Coefs:
        return self.model.evaluate(self.t, self.state)

    @cached_property
    def claims(self):
        if self.bundle.marks is None:
            return None
        return self.bundle.marks.in_step(self.k)

    @cached_property
    def claim_totals(self) -> Optional[np.ndarray]:
        if self.bundle.marks is None:
            return None
        return self.bundle.marks.claim_totals(self.k, self.bundle.n_paths)


def _eval_shift(shift, t, state, P, n):
    if shift is None:
        return None
    s = shift(t, state) if callable(shift) else shift
    return np.broadcast_to(np.asarray(s, dtype=float), (P, n))


def walk(model: CoefficientModel, bundle: PathBundle, shift=None) -> Iterator[Step]:
    """Yield every step of the bundle with the market state at its left end.

    ``shift`` (constant, or ``fn(t, state)``) makes the bundle Brownian under a
    measure where ``W + int shift ds`` is Brownian, i.e. ``dW = xi - shift dt``.
    """
    grid = bundle.grid
    if bundle.n != model.n:
        raise LengthMismatch(f"bundle has n={bundle.n}, model has n={model.n}")
    state = model.initial_state(bundle.n_paths)
    for k in range(grid.steps):
        t = grid.t(k)
        xi = bundle.increments(k)
        s = _eval_shift(shift, t, state, bundle.n_paths, model.n)
        dW = xi if s is None else xi - s * grid.dt
        step = Step(k, t, grid.dt, xi, dW, state, model, bundle, s)
        yield step
        state = model.step_state(state, grid.dt, dW)


def terminal_state(model: CoefficientModel, bundle: PathBundle, shift=None) -> State:
    for step in walk(model, bundle, shift):
        pass
    return model.step_state(step.state, step.dt, step.dW)


# -- density ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class JumpGenerator:
    """Time-constant jump generator ``psi(y)`` with its compensator ``int psi dnu``."""

    fn: Callable
    jump: JumpModel
    name: str = "psi"

    @cached_property
    def compensator(self) -> float:
        return self.jump.claims.expect(self.fn)

    def __call__(self, y):
        return np.asarray(self.fn(np.asarray(y, dtype=float)), dtype=float)

    def check(self, sizes: Optional[np.ndarray] = None):
        c = self.jump.claims
        if c.kind == "discrete":
            probe = np.array([y for y, _ in c.atoms])
        else:
            probe = np.linspace(0.0, c.support_max, 1001)
        if sizes is not None and sizes.size:
            probe = np.concatenate([probe, sizes])
        vals = self(probe)
        if np.any(~np.isfinite(vals)) or np.any(vals <= -1.0):
            i = int(np.argmin(vals))
            raise PsiBelowMinusOne(f"{self.name}({probe[i]:g}) = {vals[i]:g} is not > -1")


def scaled_generator(jump: JumpModel, scale: float, name=None) -> JumpGenerator:
    """``scale * b y / (lambda m2)``, a multiple of the optimal jump generator."""
    c = scale * jump.premium_loading / (jump.intensity * jump.m2)
    return JumpGenerator(lambda y, c=c: c * y, jump, name or f"{scale:g}*psi_hat")


def constant_generator(jump: JumpModel, value: float) -> JumpGenerator:
    return JumpGenerator(lambda y, v=value: np.full_like(y, v, dtype=float), jump, f"psi={value:g}")


class DensityStepper:
    """Log-Euler stepping of a stochastic exponential; positivity is exact."""

    def __init__(self, n_paths: int, psi: Optional[JumpGenerator] = None):
        self.log = np.zeros(n_paths)
        self.psi = psi

    @property
    def value(self) -> np.ndarray:
        return np.exp(self.log)

    def step(self, eta: np.ndarray, step: Step):
        eta = np.broadcast_to(eta, step.dW.shape)
        self.log += np.einsum("pi,pi->p", eta, step.dW) - 0.5 * step.dt * np.einsum("pi,pi->p", eta, eta)
        if self.psi is not None:
            self.log -= step.dt * step.bundle.jump.intensity * self.psi.compensator
            paths, sizes = step.claims
            if paths.size:
                vals = self.psi(sizes)
                if np.any(vals <= -1.0):
                    raise PsiBelowMinusOne(f"{self.psi.name} <= -1 at a simulated claim")
                np.add.at(self.log, paths, np.log1p(vals))


@dataclass
class DensityPath:
    Lam: np.ndarray
    steps: np.ndarray
    psi: Optional[JumpGenerator] = None

    @property
    def terminal(self) -> np.ndarray:
        return self.Lam[-1]

    def martingale_gate(self, k=-1) -> dict:
        lam = self.Lam[k]
        mean = float(lam.mean())
        se = float(lam.std(ddof=1) / math.sqrt(lam.size)) if lam.size > 1 else 0.0
        return {"mean": mean, "se": se, "pass": abs(mean - 1.0) <= 4 * se + 1e-12}


def _eta_at(eta, step: Step):
    if callable(eta):
        return np.asarray(eta(step), dtype=float)
    eta = np.asarray(eta, dtype=float)
    if eta.ndim >= 2 and eta.shape[0] == step.bundle.grid.steps:
        return eta[step.k]
    return eta


def _keep_index(grid, keep):
    if keep == "all":
        return np.arange(grid.steps + 1)
    if keep == "terminal":
        return np.array([0, grid.steps])
    return np.unique(np.concatenate([[0, grid.steps], np.asarray(keep, dtype=int)]))


def stochastic_exponential(eta, bundle: PathBundle, model: CoefficientModel, *, psi: Optional[JumpGenerator] = None,
                           keep="all", shift=None) -> DensityPath:
    """Density ``E(int eta' dW + int int psi d(compensated claims))`` on the bundle.

    ``eta`` is a constant (n,), a per-step array (N, n) or (N, P, n), or a
    rule ``fn(step)``.
    """
    if psi is not None:
        if bundle.marks is None:
            raise ValueError("jump generator given but the bundle has no claims")
        psi.check(bundle.marks.size)
    idx = _keep_index(bundle.grid, keep)
    out = np.empty((idx.size, bundle.n_paths))
    stepper = DensityStepper(bundle.n_paths, psi)
    out[0] = 1.0
    j = 1
    for step in walk(model, bundle, shift):
        stepper.step(_eta_at(eta, step), step)
        if j < idx.size and idx[j] == step.k + 1:
            out[j] = stepper.value
            j += 1
    return DensityPath(out, idx, psi)


def girsanov_reweight(payoff, lam_T):
    """Sample mean of ``lam_T * payoff`` and its standard error."""
    payoff = np.asarray(payoff, dtype=float)
    lam_T = np.asarray(lam_T, dtype=float)
    if payoff.shape != lam_T.shape:
        raise LengthMismatch(f"payoff has {payoff.shape}, density has {lam_T.shape}")
    w = lam_T * payoff
    if w.size < 2:
        return float(w.mean()), 0.0
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(w.size))


# -- state -------------------------------------------------------------------------


@dataclass
class StatePath:
    """Simulated wealth at the kept grid indices ``steps``; flagged paths are NaN."""

    X: np.ndarray
    steps: np.ndarray
    u: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    density: Optional[DensityPath] = None
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    a_cap_hits: int = 0

    @property
    def terminal(self) -> np.ndarray:
        return self.X[-1]

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())

    @property
    def valid(self) -> np.ndarray:
        return ~self.flagged


def euler_increment(X, u, coefs: Coefs, dt, dW) -> np.ndarray:
    """Euler-Maruyama increment of the controlled state without claims."""
    drift = coefs.A * X + np.einsum("pi,pi->p", u, coefs.B)
    vol = X[:, None] * coefs.C + np.einsum("pi,pij->pj", u, coefs.D)
    return drift * dt + np.einsum("pj,pj->p", vol, dW)


def simulate_state(model: CoefficientModel, control_rule: Callable, bundle: PathBundle, x: float, *,
                   eta=None, psi: Optional[JumpGenerator] = None, keep="all", keep_controls=False,
                   shift=None) -> StatePath:
    """Euler-Maruyama simulation of the controlled wealth.

    ``control_rule(step, X, Lam)`` returns ``u`` (P, n), or ``(u, q)`` when the
    bundle carries claims.  ``Lam`` is the density generated by ``eta`` (and
    ``psi``), stepped jointly with X, or ``None`` when no ``eta`` is given.
    """
    grid, P = bundle.grid, bundle.n_paths
    jump = bundle.jump if bundle.marks is not None else None
    idx = _keep_index(grid, keep)
    X_out = np.empty((idx.size, P))
    u_out = np.empty((grid.steps, P, model.n)) if keep_controls else None
    q_out = np.empty((grid.steps, P)) if keep_controls and jump is not None else None
    lam_out = np.empty((idx.size, P)) if eta is not None else None
    X = np.full(P, float(x))
    flagged = np.zeros(P, dtype=bool)
    density = DensityStepper(P, psi) if eta is not None else None
    if psi is not None:
        psi.check(bundle.marks.size)
    X_out[0] = X
    if lam_out is not None:
        lam_out[0] = 1.0
    hits, j = 0, 1
    for step in walk(model, bundle, shift):
        lam = density.value if density is not None else None
        out = control_rule(step, X, lam)
        if jump is not None:
            u, q = out
            q = np.broadcast_to(np.asarray(q, dtype=float), (P,))
            if np.any(q[~flagged] < 0):
                raise NegativeRetention(f"retention q < 0 requested at step {step.k}")
        else:
            u, q = out, None
        u = np.broadcast_to(np.asarray(u, dtype=float), (P, model.n))
        coefs = step.coefs
        hits += coefs.a_cap_hits
        dX = euler_increment(X, u, coefs, step.dt, step.dW)
        if q is not None:
            dX = dX + q * (jump.premium_loading * step.dt
                           - (step.claim_totals - jump.intensity * jump.m1 * step.dt))
        if density is not None:
            density.step(_eta_at(eta, step), step)
        X = X + dX
        bad = ~np.isfinite(X) | (np.abs(X) > OVERFLOW)
        if np.any(bad & ~flagged):
            flagged |= bad
            if flagged.sum() > MAX_FLAGGED_FRACTION * P:
                raise NonFiniteState(f"{int(flagged.sum())} of {P} paths overflowed by step {step.k + 1}")
        X = np.where(flagged, np.nan, X)
        if u_out is not None:
            u_out[step.k] = u
            if q_out is not None:
                q_out[step.k] = q
        if j < idx.size and idx[j] == step.k + 1:
            X_out[j] = X
            if lam_out is not None:
                lam_out[j] = density.value
            j += 1
    dens = DensityPath(lam_out, idx, psi) if lam_out is not None else None
    return StatePath(X_out, idx, u_out, q_out, dens, flagged, hits)


def write_paths_csv(path, grid: TimeGrid, sp: StatePath, max_paths: int = 100) -> int:
    """Columnar dump ``path, k, t, X, Lambda, u_1..u_n``; returns rows written."""
    P = min(max_paths, sp.X.shape[1])
    n = 0 if sp.u is None else sp.u.shape[2]
    lam = sp.density.Lam if sp.density is not None else np.ones_like(sp.X)
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "k", "t", "X", "Lambda"] + [f"u_{i + 1}" for i in range(n)])
        for p in range(P):
            for j, k in enumerate(sp.steps):
                u = sp.u[k, p] if sp.u is not None and k < sp.u.shape[0] else np.full(n, np.nan)
                w.writerow([p, int(k), repr(grid.t(int(k))), repr(float(sp.X[j, p])), repr(float(lam[j, p]))]
                           + [repr(float(v)) for v in u])
                rows += 1
    return rows
