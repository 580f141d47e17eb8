import math

import numpy as np
import pytest

from mmvlab.errors import LengthMismatch, NegativeRetention, NonFiniteState, PsiBelowMinusOne, ResourceLimit
from mmvlab.model import ClaimDistribution, CoefficientModel, JumpModel, ScenarioConfig, Tier, TimeGrid
from mmvlab.paths import (
    CHUNK,
    JumpGenerator,
    PathBundle,
    generate_paths,
    girsanov_reweight,
    simulate_state,
    stochastic_exponential,
    write_paths_csv,
)


def _model(A=0.0, B=(0.0,), C=(0.0,), D=((1.0,),)):
    return CoefficientModel(Tier.DETERMINISTIC, B=np.array(B, float), C=np.array(C, float),
                            D=np.array(D, float), A=A)


def _jump(lam=1.0, b=0.3, atoms=((1.0, 1.0),)):
    return JumpModel(lam, ClaimDistribution("discrete", atoms=atoms), b)


def _zero_rule(n=1):
    return lambda step, X, lam: np.zeros((X.size, n))


class TestBundle:
    def test_regeneration_identical(self):
        a = PathBundle(TimeGrid(1.0, 4), 2, 1, 42).all_increments()
        b = PathBundle(TimeGrid(1.0, 4), 2, 1, 42).all_increments()
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = PathBundle(TimeGrid(1.0, 4), 8, 1, 42)
        assert not np.array_equal(a.increments(0), a.with_stream(1).increments(0))

    def test_thread_invariance(self, monkeypatch):
        bundle = PathBundle(TimeGrid(1.0, 3), 2 * CHUNK + 5, 2, 9)
        monkeypatch.setenv("MMVLAB_THREADS", "1")
        one = bundle.all_increments()
        monkeypatch.setenv("MMVLAB_THREADS", "4")
        np.testing.assert_array_equal(one, bundle.all_increments())

    def test_prefix_stable(self):
        big = PathBundle(TimeGrid(1.0, 3), CHUNK + 10, 1, 5)
        small = big.with_paths(100)
        np.testing.assert_array_equal(big.increments(2)[:100], small.increments(2))

    def test_sanity_gates(self):
        rep = PathBundle(TimeGrid(1.0, 20), 20_000, 2, 3).sanity()
        assert rep["mean_pass"] and rep["cov_pass"]

    def test_antithetic_mirrors(self):
        z = PathBundle(TimeGrid(1.0, 2), 10, 1, 1, antithetic=True).increments(0)
        np.testing.assert_array_equal(z[:5], -z[5:])

    def test_coarsen_sums(self):
        fine = PathBundle(TimeGrid(1.0, 8), 6, 1, 2)
        coarse = fine.coarsen(4)
        np.testing.assert_allclose(coarse.increments(1), fine.increments(4) + fine.increments(5)
                                   + fine.increments(6) + fine.increments(7), rtol=0, atol=1e-15)

    def test_jump_counts(self):
        bundle = PathBundle(TimeGrid(1.0, 50), 100_000, 1, 11, jump=_jump(lam=2.0))
        mean = bundle.marks.counts(bundle.n_paths).mean()
        assert 1.97 <= mean <= 2.03
        assert bundle.marks.time.min() > 0.0 and bundle.marks.time.max() <= 1.0

    def test_no_jumps(self):
        assert PathBundle(TimeGrid(1.0, 4), 3, 1, 0).marks is None

    def test_resource_limit(self, monkeypatch):
        monkeypatch.setenv("MMVLAB_MEMORY_MB", "1")
        cfg = ScenarioConfig(1.0, 1.0, TimeGrid(1.0, 1000), _model(), None, 10**6, 0)
        with pytest.raises(ResourceLimit):
            generate_paths(cfg)


class TestSimulateState:
    def test_zero_dynamics(self):
        bundle = PathBundle(TimeGrid(1.0, 10), 50, 1, 0)
        sp = simulate_state(_model(), _zero_rule(), bundle, 2.5)
        assert np.all(sp.X == 2.5)

    def test_deterministic_growth(self):
        N, r = 50, 0.03
        bundle = PathBundle(TimeGrid(1.0, N), 4, 1, 0)
        sp = simulate_state(_model(A=r), _zero_rule(), bundle, 1.0, keep="terminal")
        np.testing.assert_allclose(sp.terminal, (1 + r / N) ** N, rtol=1e-14)

    def test_weak_order(self):
        errs = []
        for N in (10, 20, 40):
            sp = simulate_state(_model(A=0.5), _zero_rule(), PathBundle(TimeGrid(1.0, N), 4, 1, 0), 1.0,
                                keep="terminal")
            errs.append(abs(sp.terminal.mean() - math.exp(0.5)))
        assert errs[0] > errs[1] > errs[2]
        assert math.log2(errs[1] / errs[2]) >= 0.9

    def test_claims_recursion_by_hand(self):
        N, r, jm = 20, 0.03, _jump()
        grid = TimeGrid(1.0, N)
        bundle = PathBundle(grid, 3, 1, 4, jump=jm)
        sp = simulate_state(_model(A=r), lambda s, X, lam: (np.zeros((X.size, 1)), np.ones(X.size)), bundle, 1.0)
        marks = bundle.marks
        for p in range(3):
            x = 1.0
            for k in range(N):
                t0, t1 = k * grid.dt, (k + 1) * grid.dt
                claims = sum(y for q, t, y in zip(marks.path, marks.time, marks.size) if q == p and t0 < t <= t1)
                x = x + r * x * grid.dt + (0.3 * grid.dt - (claims - 1.0 * 1.0 * grid.dt))
            assert sp.X[-1, p] == pytest.approx(x, rel=1e-13)

    def test_claims_mean(self):
        jm = _jump()
        bundle = PathBundle(TimeGrid(1.0, 100), 50_000, 1, 6, jump=jm)
        sp = simulate_state(_model(), lambda s, X, lam: (np.zeros((X.size, 1)), np.ones(X.size)), bundle, 1.0,
                            keep="terminal")
        XT = sp.terminal
        assert abs(XT.mean() - (1.0 + 0.3)) <= 4 * XT.std() / math.sqrt(XT.size)

    def test_negative_retention(self):
        bundle = PathBundle(TimeGrid(1.0, 4), 3, 1, 0, jump=_jump())
        with pytest.raises(NegativeRetention):
            simulate_state(_model(), lambda s, X, lam: (np.zeros((X.size, 1)), -np.ones(X.size)), bundle, 1.0)

    def test_overflow(self):
        bundle = PathBundle(TimeGrid(1.0, 4), 10, 1, 0)
        with pytest.raises(NonFiniteState):
            simulate_state(_model(), lambda s, X, lam: np.full((X.size, 1), 1e14), bundle, 1.0)

    def test_single_overflowing_path_flagged(self):
        bundle = PathBundle(TimeGrid(1.0, 4), 5000, 1, 0)

        def rule(step, X, lam):
            u = np.zeros((X.size, 1))
            u[0] = 1e14
            return u

        sp = simulate_state(_model(), rule, bundle, 1.0)
        assert sp.n_flagged == 1 and np.isnan(sp.terminal[0]) and np.all(np.isfinite(sp.terminal[1:]))

    def test_csv(self, tmp_path):
        bundle = PathBundle(TimeGrid(1.0, 4), 3, 2, 0)
        sp = simulate_state(_model(B=(0.0, 0.0), C=(0.0, 0.0), D=np.eye(2)), _zero_rule(2), bundle, 1.0,
                            eta=np.zeros(2), keep_controls=True)
        rows = write_paths_csv(tmp_path / "p.csv", bundle.grid, sp, max_paths=2)
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "path,k,t,X,Lambda,u_1,u_2"
        assert rows == len(lines) - 1 == 2 * 5


class TestDensity:
    def test_zero_generator(self):
        bundle = PathBundle(TimeGrid(1.0, 10), 20, 1, 0)
        assert np.all(stochastic_exponential(np.zeros(1), bundle, _model()).Lam == 1.0)

    def test_lognormal_moments(self):
        c = 0.5
        bundle = PathBundle(TimeGrid(1.0, 20), 100_000, 1, 12)
        lam = stochastic_exponential(np.array([c]), bundle, _model(), keep="terminal").terminal
        assert abs(lam.mean() - 1) <= 4 * lam.std() / math.sqrt(lam.size)
        sq = lam**2
        assert abs(sq.mean() - math.exp(c * c)) <= 4 * sq.std() / math.sqrt(sq.size)
        assert np.all(lam > 0)

    def test_psi_boundary(self):
        jm = _jump(atoms=((1.0, 0.5), (2.0, 0.5)))
        ok = JumpGenerator(lambda y: np.where(y == 1.0, -1 + 1e-9, 0.0), jm)
        ok.check()
        bad = JumpGenerator(lambda y: np.where(y == 1.0, -1.0, 0.0), jm)
        with pytest.raises(PsiBelowMinusOne):
            bad.check()
        bundle = PathBundle(TimeGrid(1.0, 4), 50, 1, 0, jump=jm)
        with pytest.raises(PsiBelowMinusOne):
            stochastic_exponential(np.zeros(1), bundle, _model(), psi=bad)

    def test_zero_psi_collapses(self):
        jm = _jump()
        bundle = PathBundle(TimeGrid(1.0, 10), 200, 1, 3, jump=jm)
        plain = stochastic_exponential(np.array([0.3]), bundle, _model())
        zero = stochastic_exponential(np.array([0.3]), bundle, _model(), psi=JumpGenerator(lambda y: 0.0 * y, jm))
        np.testing.assert_array_equal(plain.Lam, zero.Lam)

    def test_jump_martingale(self):
        jm = _jump(lam=2.0, atoms=((0.5, 0.5), (1.5, 0.5)))
        bundle = PathBundle(TimeGrid(1.0, 20), 50_000, 1, 8, jump=jm)
        psi = JumpGenerator(lambda y: 0.4 * y, jm)
        assert stochastic_exponential(np.array([0.2]), bundle, _model(), psi=psi).martingale_gate()["pass"]


class TestGirsanov:
    def test_unit_payoff(self):
        bundle = PathBundle(TimeGrid(1.0, 10), 20_000, 1, 1)
        lam = stochastic_exponential(np.array([0.4]), bundle, _model(), keep="terminal").terminal
        est, se = girsanov_reweight(np.ones_like(lam), lam)
        assert abs(est - 1) <= 4 * se

    def test_zero_generator_plain_mean(self):
        payoff = np.arange(10.0)
        assert girsanov_reweight(payoff, np.ones(10))[0] == payoff.mean()

    def test_brownian_shift(self):
        c, T = 0.3, 2.0
        bundle = PathBundle(TimeGrid(T, 10), 50_000, 1, 2)
        WT = bundle.all_increments().sum(axis=0)[:, 0]
        lam = stochastic_exponential(np.array([c]), bundle, _model(), keep="terminal").terminal
        est, se = girsanov_reweight(WT, lam)
        assert abs(est - c * T) <= 4 * se

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            girsanov_reweight(np.ones(3), np.ones(4))
