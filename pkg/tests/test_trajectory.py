import mpmath
import numpy as np
import pytest
from scipy.integrate import quad

from trajinr.trajectory import (AD_LIKE, HEALTHY, REGULAR_AGES, DeviationParams, brain_age_rate,
                                generate_acquisition_ages, integrate_brain_age, sample_deviation_params)

AGES = np.arange(50.0, 91.0)


def _quad_gap(p, t, t0=50.0):
    # independent oracle: adaptive quadrature of the excess rate
    val, _ = quad(lambda s: float(brain_age_rate(s, p)) - 1.0, t0, t, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


class TestParams:
    def test_invariants(self):
        with pytest.raises(ValueError):
            DeviationParams(1.0, 0.25, 60, 55)
        with pytest.raises(ValueError):
            DeviationParams(1.0, 0.0, 55, 80)
        with pytest.raises(ValueError):
            DeviationParams(1.0, 0.25, 55, 80, noise_std=-1)

    def test_ad_alpha_mean(self):
        rng = np.random.default_rng(0)
        a = [sample_deviation_params(AD_LIKE, rng).alpha for _ in range(10_000)]
        assert abs(np.mean(a) - 1.10) <= 0.005 * 3

    def test_healthy_alpha_mean(self):
        rng = np.random.default_rng(1)
        a = [sample_deviation_params(HEALTHY, rng).alpha for _ in range(10_000)]
        assert abs(np.mean(a)) <= 0.003 * 3

    def test_spreads(self):
        rng = np.random.default_rng(2)
        ps = [sample_deviation_params(AD_LIKE, rng) for _ in range(10_000)]
        assert np.std([p.t_start for p in ps]) == pytest.approx(2.5, rel=0.05)
        assert np.std([p.r for p in ps]) == pytest.approx(0.05, rel=0.05)
        assert min(p.r for p in ps) >= 0.01

    def test_seeded(self):
        a = sample_deviation_params(AD_LIKE, np.random.default_rng(5))
        b = sample_deviation_params(AD_LIKE, np.random.default_rng(5))
        assert a == b


class TestRate:
    def test_zero_alpha(self):
        p = DeviationParams(0.0, 0.25, 55, 80)
        assert np.all(brain_age_rate(np.linspace(0, 200, 50), p) == 1.0)

    def test_far_past(self):
        p = DeviationParams(1.1, 0.25, 55, 80)
        assert brain_age_rate(-1e4, p) == pytest.approx(1.0, abs=1e-12)

    def test_reference(self):
        p = DeviationParams(1.10, 0.25, 55, 80)
        ref = 1 + mpmath.mpf("1.10") * (mpmath.mpf(1) / 2 - 2 / (1 + mpmath.e ** mpmath.mpf("6.25")))
        assert brain_age_rate(55.0, p) == pytest.approx(float(ref), abs=1e-14)
        assert float(ref) == pytest.approx(1.5457, abs=1e-4)

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = DeviationParams(rng.normal(0, 2), rng.uniform(0.01, 3), 55, 55 + rng.uniform(1, 40))
            t = np.linspace(0, 150, 301)
            assert np.all(np.abs(brain_age_rate(t, p) - 1) <= 2 * abs(p.alpha) + 1e-12)


class TestIntegration:
    def test_zero_alpha_exact(self):
        p = DeviationParams.mean(HEALTHY)
        assert p.alpha == 0.0
        c = integrate_brain_age(50.0, AGES, p)
        assert np.max(np.abs(c.brain_ages - c.ages)) == 0.0
        assert c.brain_ages[0] == 50.0

    def test_ad_gap_at_80(self):
        p = DeviationParams.mean(AD_LIKE)
        c = integrate_brain_age(50.0, [80.0], p)
        gap = c.brain_ages[0] - 80.0
        assert 4.0 <= gap <= 11.0
        assert gap == pytest.approx(_quad_gap(p, 80.0), abs=1e-8)

    def test_matches_quadrature_everywhere(self):
        p = DeviationParams(1.05, 0.3, 54.0, 75.0, 0.0, AD_LIKE)
        c = integrate_brain_age(50.0, AGES, p)
        ref = np.array([_quad_gap(p, t) for t in AGES])
        assert np.max(np.abs(c.brain_ages - AGES - ref)) < 1e-8

    def test_fine_step_agrees(self):
        p = DeviationParams.mean(AD_LIKE)
        a = integrate_brain_age(50.0, [80.0], p, step=0.05).brain_ages[0]
        b = integrate_brain_age(50.0, [80.0], p, step=1e-3).brain_ages[0]
        assert abs(a - b) < 1e-8

    def test_step_halving(self):
        p = DeviationParams.mean(AD_LIKE)
        a = integrate_brain_age(50.0, [90.0], p, step=0.05).brain_ages[0]
        b = integrate_brain_age(50.0, [90.0], p, step=0.025).brain_ages[0]
        assert abs(a - b) < 1e-6

    def test_ad_never_below_chronological(self):
        p = DeviationParams.mean(AD_LIKE)
        t = np.linspace(50, 90, 401)
        c = integrate_brain_age(50.0, t, p)
        assert np.all(c.brain_ages >= t)

    def test_continuity(self):
        p = DeviationParams.mean(AD_LIKE)
        t = np.arange(50, 90.0001, 0.05)
        ba = integrate_brain_age(50.0, t, p).brain_ages
        assert np.all(np.abs(np.diff(ba)) <= (1 + 2 * abs(p.alpha)) * 0.05 + 1e-12)

    def test_noise_seeded(self):
        p = DeviationParams(1.1, 0.25, 55, 73.5, noise_std=0.05, label=AD_LIKE)
        a = integrate_brain_age(50.0, AGES, p, seed=3).brain_ages
        b = integrate_brain_age(50.0, AGES, p, seed=3).brain_ages
        c = integrate_brain_age(50.0, AGES, p, seed=4).brain_ages
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a[0] == 50.0

    def test_noise_variance(self):
        # Euler-Maruyama with white noise: Var(gap at t) = noise_std^2 (t - t0)
        p = DeviationParams(0.0, 0.25, 55, 80, noise_std=0.2)
        gaps = [integrate_brain_age(50.0, [60.0], p, seed=s, step=0.5).brain_ages[0] - 60 for s in range(3000)]
        assert np.var(gaps) == pytest.approx(0.04 * 10, rel=0.08)

    def test_unsorted(self):
        with pytest.raises(ValueError):
            integrate_brain_age(50.0, [60.0, 55.0], DeviationParams.mean(AD_LIKE))

    def test_query_before_start(self):
        with pytest.raises(ValueError):
            integrate_brain_age(50.0, [49.0], DeviationParams.mean(AD_LIKE))


class TestSchedules:
    def test_regular(self):
        for s in range(5):
            assert generate_acquisition_ages("regular", np.random.default_rng(s)).ages == REGULAR_AGES
        assert set(REGULAR_AGES) == {50, 58, 67, 75}

    def test_irregular(self):
        counts = set()
        for s in range(300):
            ages = generate_acquisition_ages("irregular", np.random.default_rng(s)).ages
            counts.add(len(ages))
            assert 3 <= len(ages) <= 5
            assert all(50 <= a <= 75 and float(a).is_integer() for a in ages)
            assert all(b > a for a, b in zip(ages, ages[1:]))
        assert counts == {3, 4, 5}

    def test_seeded(self):
        a = generate_acquisition_ages("irregular", np.random.default_rng(9))
        b = generate_acquisition_ages("irregular", np.random.default_rng(9))
        assert a == b

    def test_unknown(self):
        with pytest.raises(ValueError):
            generate_acquisition_ages("weekly", np.random.default_rng(0))
