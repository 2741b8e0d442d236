import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import binom_cdf_enumerated, normal_cdf, normal_ppf_bisect
from rsmi.numerics import (Decision, RadiusInput, RngStream, VoteGate, binom_cdf_half,
                           binom_consensus, certified_radius, gaussian_vector, inv_norm_cdf,
                           lipschitz_scan, norm_cdf, smoothed_step, smoothing_lipschitz_bound)

# Frozen from the mpmath bisection oracle in tests/oracles.py.
PPF_09 = 1.2815515655446004


class TestRngStream:
    def test_same_key_same_draws(self):
        a = RngStream(7, 1).uniform(50)
        b = RngStream(7, 1).uniform(50)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(7, 1).uniform(1000)
        b = RngStream(7, 2).uniform(1000)
        assert not np.array_equal(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.1

    def test_substream_is_deterministic_and_distinct(self):
        base = RngStream(3, 9)
        assert np.array_equal(base.substream(4).uniform(5), RngStream(3, 9).substream(4).uniform(5))
        assert not np.array_equal(base.substream(4).uniform(5), base.substream(5).uniform(5))
        assert not np.array_equal(base.substream("a").uniform(5), base.substream("b").uniform(5))

    def test_uniform_open_interval(self):
        u = RngStream(0).uniform(100000)
        assert u.min() > 0 and u.max() < 1

    def test_rejects_out_of_range_keys(self):
        with pytest.raises(ValueError):
            RngStream(-1)
        with pytest.raises(ValueError):
            RngStream(0, 2 ** 64)

    def test_choice_distinct(self):
        c = RngStream(1).choice(10, 10)
        assert sorted(c) == list(range(10))


class TestGaussianVector:
    def test_zero_sigma(self):
        assert np.array_equal(gaussian_vector(RngStream(5), 4, 0.0), np.zeros(4))

    def test_deterministic(self):
        a = gaussian_vector(RngStream(7, 1), 16, 1.0)
        b = gaussian_vector(RngStream(7, 1), 16, 1.0)
        assert np.array_equal(a, b)

    def test_moments(self):
        x = gaussian_vector(RngStream(7), 100000, 2.0)
        assert -0.05 * 2 <= x.mean() <= 0.05 * 2
        assert 1.98 <= x.std() <= 2.02

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_vector(RngStream(0), 3, -1.0)


class TestInvNormCdf:
    def test_median(self):
        assert inv_norm_cdf(0.5) == pytest.approx(0.0, abs=1e-15)

    def test_known_quantile(self):
        assert abs(inv_norm_cdf(0.9) - PPF_09) <= 1e-7
        assert abs(inv_norm_cdf(0.9) - 1.2815516) <= 1e-7

    def test_symmetry(self):
        assert inv_norm_cdf(0.1) == pytest.approx(-inv_norm_cdf(0.9), abs=1e-12)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            inv_norm_cdf(p)

    def test_grid_against_bisection(self):
        grid = np.round(np.arange(1, 1000) / 1000, 3)
        ours = inv_norm_cdf(grid)
        assert np.all(np.diff(ours) > 0)
        for p, x in zip(grid[::37], ours[::37]):
            assert abs(x - normal_ppf_bisect(p)) <= 1e-7
        back = np.array([normal_cdf(x) for x in ours])
        assert np.max(np.abs(back - grid)) <= 1e-7

    def test_norm_cdf_matches_oracle(self):
        for x in (-5.0, -1.3, 0.0, 0.7, 3.2):
            assert norm_cdf(x) == pytest.approx(normal_cdf(x), abs=1e-15)


class TestBinomConsensus:
    def test_unanimous_accepts(self):
        assert binom_consensus(5, VoteGate(5, 0.98)) is Decision.ACCEPT

    def test_four_of_five_escalates(self):
        assert binom_cdf_half(4, 5) == Fraction(31, 32)
        assert binom_consensus(4, VoteGate(5, 0.98)) is Decision.ESCALATE

    def test_three_of_five_low_alpha(self):
        assert binom_cdf_half(3, 5) == Fraction(26, 32)
        assert binom_consensus(3, VoteGate(5, 0.5)) is Decision.ACCEPT

    def test_three_of_five_escalates(self):
        assert binom_cdf_half(3, 5) == Fraction(13, 16)
        assert binom_consensus(3, VoteGate(5, 0.98)) is Decision.ESCALATE

    def test_exhaustive_enumeration(self):
        for k0 in range(1, 17):
            for n_a in range(k0 + 1):
                assert binom_cdf_half(n_a, k0) == binom_cdf_enumerated(n_a, k0)

    @pytest.mark.parametrize("kw", [dict(k0=0), dict(alpha=0.0), dict(alpha=1.0), dict(k0=65)])
    def test_gate_validation(self, kw):
        with pytest.raises(ValueError):
            VoteGate(**kw)

    def test_n_a_out_of_range(self):
        with pytest.raises(ValueError):
            binom_consensus(6, VoteGate(5, 0.98))


class TestCertifiedRadius:
    def test_equal_probabilities(self):
        assert certified_radius(RadiusInput(0.3, 0.4, 0.4)) == 0.0

    def test_single_layer(self):
        r = certified_radius(RadiusInput(0.5, 0.9, 0.1))
        assert r == pytest.approx(2.5631032, abs=1e-6)
        assert r == pytest.approx(2 * PPF_09, abs=1e-9)

    def test_extra_layer(self):
        r = certified_radius(RadiusInput(0.5, 0.9, 0.1, (1.0,)))
        assert r == pytest.approx(5.1262064, abs=1e-6)

    @pytest.mark.parametrize("kw", [
        dict(sigma_embed=0.0, p_a=0.9, p_b=0.1),
        dict(sigma_embed=0.5, p_a=0.1, p_b=0.9),
        dict(sigma_embed=0.5, p_a=0.7, p_b=0.6),
        dict(sigma_embed=0.5, p_a=1.2, p_b=0.1),
        dict(sigma_embed=0.5, p_a=0.9, p_b=-0.1),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            certified_radius(RadiusInput(**kw))

    def test_clamping_warns(self, caplog):
        r = certified_radius(RadiusInput(0.5, 1.0, 0.0))
        assert math.isfinite(r) and r > 0
        assert "clamped" in caplog.text

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.05, 2.0), st.floats(0.01, 0.49), st.floats(0.0, 3.0),
           st.lists(st.floats(0.0, 2.0), max_size=4))
    def test_layer_product_law(self, s1, p_b, extra, layers):
        p_a = 1 - p_b - 0.005
        base = certified_radius(RadiusInput(s1, p_a, p_b, tuple(layers)))
        more = certified_radius(RadiusInput(s1, p_a, p_b, tuple(layers) + (extra,)))
        assert more == pytest.approx(base * (1 + extra ** 2), rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.1, 2.0), st.floats(0.01, 0.3), st.floats(1e-4, 0.2))
    def test_monotone(self, s1, p_b, step):
        p_a = 0.5
        r = certified_radius(RadiusInput(s1, p_a, p_b))
        assert certified_radius(RadiusInput(s1, p_a + step * 0.5, p_b)) > r
        assert certified_radius(RadiusInput(s1, p_a, max(p_b - step, 0.001))) >= r


class TestLipschitz:
    def test_constant(self):
        assert lipschitz_scan(lambda x: 3.0, -1, 1, 100) == 0.0

    @pytest.mark.parametrize("sigma", [1.0, 0.5])
    def test_smoothed_step_slope(self, sigma):
        measured = lipschitz_scan(smoothed_step(sigma), -6, 6, 100000)
        closed = 1 / (sigma * math.sqrt(2 * math.pi))
        assert measured == pytest.approx(closed, rel=1e-3)
        assert measured <= smoothing_lipschitz_bound(sigma)

    def test_vectorized_matches_pointwise(self):
        f = smoothed_step(0.7, threshold=0.3)
        assert lipschitz_scan(f, -3, 3, 2000, vectorized=True) == pytest.approx(
            lipschitz_scan(f, -3, 3, 2000), rel=1e-12)
        with pytest.raises(ValueError):
            lipschitz_scan(lambda x: 1.0, 0, 1, 10, vectorized=True)

    def test_bound_values(self):
        assert smoothing_lipschitz_bound(1.0) == pytest.approx(0.79788, abs=1e-5)
        assert smoothing_lipschitz_bound(0.5) == pytest.approx(1.59577, abs=1e-5)

    @pytest.mark.parametrize("lo,hi,steps", [(1, 1, 10), (2, 1, 10), (0, 1, 1)])
    def test_invalid(self, lo, hi, steps):
        with pytest.raises(ValueError):
            lipschitz_scan(lambda x: x, lo, hi, steps)
