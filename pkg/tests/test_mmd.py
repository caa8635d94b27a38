import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special, stats

from polychain import errors as E
from polychain.mmd import (counter_rng, cup_seed_sequence, gamma_cdf, gamma_pdf, gamma_quantile, gamma_sf,
                           parameterize, sample_cup)

P_GRID = np.round(np.arange(1, 100) / 100, 2)


class TestGammaCdf:
    def test_closed_forms(self):
        assert gamma_cdf(0.0, 2.0) == 0.0
        assert gamma_cdf(math.log(2), 1.0) == pytest.approx(0.5, abs=1e-14)
        assert gamma_cdf(2.0, 2.0) == pytest.approx(1 - 3 * math.exp(-2), abs=1e-14)

    def test_quadrature_oracle(self):
        # integrate the density directly for a few non-integer shapes
        for k in (0.7, 2.5, 7.3):
            for x in (0.3, k, 3 * k):
                ref, _ = integrate.quad(lambda t: t ** (k - 1) * math.exp(-t) / math.gamma(k), 0, x,
                                        epsabs=1e-14, epsrel=1e-13)
                assert gamma_cdf(x, k) == pytest.approx(ref, abs=1e-10)

    @pytest.mark.parametrize("k", [0.05, 0.5, 1.0, 2.0, 5.0, 10.0, 37.5, 250.0, 2000.0])
    def test_against_scipy(self, k):
        x = np.concatenate([np.linspace(0, 4 * k + 20, 400), [1e-8, 1e-3]])
        assert np.max(np.abs(gamma_cdf(x, k) - special.gammainc(k, x))) < 1e-10
        assert np.max(np.abs(gamma_sf(x, k) - special.gammaincc(k, x))) < 1e-10

    def test_monotone(self):
        x = np.linspace(0, 50, 2001)
        for k in (0.5, 3.0, 20.0):
            assert np.all(np.diff(gamma_cdf(x, k)) >= -1e-16)

    def test_pdf(self):
        x = np.linspace(0.1, 30, 50)
        assert np.allclose(gamma_pdf(x, 3.0), stats.gamma.pdf(x, 3.0), rtol=1e-12, atol=0)

    @pytest.mark.parametrize("args", [(math.nan, 1.0), (1.0, math.inf), (1.0, -1.0)])
    def test_bad_input(self, args):
        with pytest.raises((E.NonFiniteInput, ValueError)):
            gamma_cdf(*args)


class TestGammaQuantile:
    def test_examples(self):
        assert gamma_quantile(0.5, 1.0) == pytest.approx(math.log(2), rel=1e-12)
        assert gamma_quantile(0.99, 1.0) == pytest.approx(-math.log(0.01), rel=1e-12)
        assert gamma_quantile(0.5, 2.0) == pytest.approx(1.678347, abs=1e-6)

    def test_k2_median_by_bisection(self):
        # independent oracle: bisection on the closed-form CDF 1 - (1 + x) e^-x
        lo, hi = 0.0, 10.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if 1 - (1 + mid) * math.exp(-mid) < 0.5 else (lo, mid)
        assert gamma_quantile(0.5, 2.0) == pytest.approx(lo, rel=1e-12)

    def test_exponential_closed_form(self):
        for theta in (1.0, 20.0, 500.0):
            got = gamma_quantile(P_GRID, 1.0, theta)
            ref = -theta * np.log1p(-P_GRID)
            assert np.max(np.abs(got / ref - 1)) < 1e-8

    @pytest.mark.parametrize("k", [0.5, 1.0, 2.0, 5.0, 10.0])
    def test_round_trip(self, k):
        theta = 3.7
        x = gamma_quantile(P_GRID, k, theta)
        assert np.max(np.abs(gamma_cdf(x / theta, k) - P_GRID)) < 1e-8

    @pytest.mark.parametrize("k", [0.02, 0.5, 3.0, 40.0, 1e4])
    def test_against_scipy(self, k):
        p = np.array([1e-12, 1e-6, 0.001, 0.3, 0.5, 0.9, 0.999, 1 - 1e-9])
        assert np.allclose(gamma_quantile(p, k), special.gammaincinv(k, p), rtol=1e-9, atol=0)

    def test_domain(self):
        for p in (0.0, 1.0, -0.1, math.nan):
            with pytest.raises((ValueError, E.NonFiniteInput)):
                gamma_quantile(p, 1.0)

    def test_convergence_failure(self):
        with pytest.raises(E.ConvergenceFailure) as info:
            gamma_quantile(0.37, 3.3, max_iter=0)
        assert info.value.iterations == 0

    def test_runtime(self):
        t0 = time.perf_counter()
        for k in (0.5, 1, 2, 5, 10):
            gamma_quantile(P_GRID, k, 2.0)
        assert time.perf_counter() - t0 < 1.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-6, 1 - 1e-6), st.floats(0.05, 500.0))
    def test_round_trip_property(self, p, k):
        x = gamma_quantile(p, k)
        assert gamma_cdf(x, k) == pytest.approx(p, rel=1e-8, abs=1e-14)


class TestParameterize:
    def test_no_cap(self):
        p = parameterize(2000, 4000, 100)
        assert (p.dp_n, p.dispersity, p.k, p.theta, p.cap_factor) == (20.0, 2.0, 1.0, 20.0, 1.0)
        assert gamma_quantile(0.99, p.k, p.theta) == pytest.approx(92.1034, abs=1e-4)

    def test_k2(self):
        p = parameterize(10000, 15000, 100)
        assert p.dp_n == 100 and p.dispersity == 1.5
        assert p.k == pytest.approx(2.0, abs=1e-12) and p.theta == pytest.approx(50.0, abs=1e-9)

    def test_cap(self):
        p = parameterize(50000, 100000, 100)
        assert p.theta_uncapped == 500.0
        assert gamma_quantile(0.99, 1.0, 500.0) == pytest.approx(2302.585, abs=1e-3)
        assert p.theta == pytest.approx(217.147, abs=1e-3)
        assert p.k == 1.0
        assert gamma_quantile(0.99, p.k, p.theta) <= 1000 * (1 + 1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(500, 2e6), st.floats(1.0, 4.0), st.floats(20, 500))
    def test_cap_invariants(self, mn, d, m0):
        p = parameterize(mn, mn * d, m0)
        if p.monodisperse:
            assert d <= 1 + 1e-6 + 1e-12
            return
        assert p.k == pytest.approx(1 / (p.dispersity - 1), rel=1e-12)
        assert gamma_quantile(0.99, p.k, p.theta) <= p.dp_max * (1 + 1e-6)

    def test_monodisperse(self):
        p = parameterize(5000, 5000, 100)
        assert p.monodisperse and p.dp_n == 50

    @pytest.mark.parametrize("args", [(1000, 900, 100), (0, 10, 1), (100, 200, -5), (math.nan, 2, 1)])
    def test_invalid(self, args):
        with pytest.raises(E.InvalidDescriptors):
            parameterize(*args)


class TestSampleCup:
    def test_monodisperse(self):
        s = sample_cup(parameterize(5000, 5000, 100))
        assert list(s.dps) == [50] * 32

    def test_bins(self):
        p = parameterize(2000, 4000, 100)
        s = sample_cup(p, rng_seed=7, round_only=True)
        assert np.all(np.bincount(s.bin_index) == 4)
        for dp, b in zip(s.dps, s.bin_index):
            lo = 0.0 if b == 0 else gamma_quantile(b / 8, p.k, p.theta)
            hi = math.inf if b == 7 else gamma_quantile((b + 1) / 8, p.k, p.theta)
            assert lo <= dp + 0.5 and dp - 0.5 <= hi

    def test_clamped(self):
        p = parameterize(200, 800, 100)
        for seed in range(20):
            s = sample_cup(p, rng_seed=seed)
            assert s.dps.min() >= 1 and s.dps.max() <= p.dp_max

    def test_deterministic(self):
        p = parameterize(10000, 15000, 100)
        a = sample_cup(p, rng_seed=cup_seed_sequence("X", 2, 0))
        b = sample_cup(p, rng_seed=cup_seed_sequence("X", 2, 0))
        c = sample_cup(p, rng_seed=cup_seed_sequence("X", 3, 0))
        assert np.array_equal(a.dps, b.dps) and not np.array_equal(a.dps, c.dps)

    def test_divisibility(self):
        with pytest.raises(ValueError):
            sample_cup(parameterize(2000, 4000, 100), n_chains=30)

    def test_counter_rng_kinds(self):
        g = counter_rng(5)
        assert counter_rng(g) is g
        assert np.array_equal(counter_rng(5).random(3), counter_rng(np.random.SeedSequence(5)).random(3))

    def test_pooled_mean(self):
        from polychain.mmd import MMDParams

        params = MMDParams(k=2.0, theta=50.0, dp_n=100.0, dispersity=1.5, m0_eff=100.0, theta_uncapped=50.0)
        t0 = time.perf_counter()
        s = sample_cup(params, n_chains=100_000, rng_seed=1)
        elapsed = time.perf_counter() - t0
        assert 98 <= s.dps.mean() <= 102
        assert np.all(np.bincount(s.bin_index) == 100_000 // 8)
        assert elapsed < 5


def test_negative_x_is_zero_mass():
    assert gamma_cdf(-1.0, 2.0) == 0.0 and gamma_sf(-1.0, 2.0) == 1.0
