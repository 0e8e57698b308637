import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipalab import oracles as orc
from ipalab.errors import ShapeError
from ipalab.verification import gaussian_pairs

finite = st.floats(-3.0, 3.0)
positive = st.floats(0.1, 4.0)


class TestGaussianKL:
    def test_self_is_zero(self):
        p = orc.GaussianSpec([1.0, -2.0], [0.5, 3.0])
        assert orc.gaussian_kl(p, p) == 0.0

    def test_known_value(self):
        # KL(N(1, 1) || N(0, 1)) = 1/2
        assert orc.gaussian_kl(orc.GaussianSpec([1.0], [1.0]),
                               orc.GaussianSpec([0.0], [1.0])) == pytest.approx(0.5)

    def test_monte_carlo(self, rng):
        p = orc.GaussianSpec([0.3, -1.0], [0.7, 2.0])
        q = orc.GaussianSpec([0.0, 0.5], [1.5, 1.0])
        x = p.sample(rng, 400_000)

        def logpdf(g, x):
            return -0.5 * np.sum((x - g.mean) ** 2 / g.var + np.log(2 * np.pi * g.var), axis=1)

        mc = np.mean(logpdf(p, x) - logpdf(q, x))
        assert mc == pytest.approx(orc.gaussian_kl(p, q), rel=0.02)

    @settings(max_examples=50, deadline=None)
    @given(finite, positive, finite, positive)
    def test_non_negative(self, m1, v1, m2, v2):
        assert orc.gaussian_kl(orc.GaussianSpec([m1], [v1]), orc.GaussianSpec([m2], [v2])) >= -1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            orc.GaussianSpec([0.0], [0.0])
        with pytest.raises(ShapeError):
            orc.GaussianSpec([0.0, 1.0], [1.0])
        with pytest.raises(ShapeError):
            orc.gaussian_kl(orc.GaussianSpec([0.0], [1.0]), orc.GaussianSpec([0.0, 0.0], [1.0, 1.0]))


class TestAnalyticFlow:
    def test_marginal_endpoints(self):
        f = gaussian_pairs()[0][0]
        m0, m1 = f.marginal(0.0), f.marginal(1.0)
        assert np.allclose(m0.mean, f.source.mean) and np.allclose(m0.var, f.source.var)
        assert np.allclose(m1.mean, f.target.mean) and np.allclose(m1.var, f.target.var)

    def test_velocity_matches_windowed_monte_carlo(self, rng):
        flow = orc.AnalyticFlow(orc.GaussianSpec([0.0], [1.0]), orc.GaussianSpec([1.5], [0.25]))
        t = 0.4
        zq = np.array([-0.5, 0.3, 1.0])
        mc, se = orc.mc_conditional_velocity(flow, zq, t, rng, n=800_000)
        exact = orc.analytic_velocity(flow, zq[:, None], t)[:, 0]
        assert np.all(np.abs(mc - exact) < 4 * se + 0.01)

    def test_analytic_velocity_rejects_t1(self):
        f = gaussian_pairs()[0][0]
        with pytest.raises(ValueError):
            orc.analytic_velocity(f, np.zeros((1, 3)), 1.0)

    def test_predict_shape_error(self):
        with pytest.raises(ShapeError):
            gaussian_pairs()[0][0].predict(np.zeros((2, 5)), 0.5)

    def test_batch(self, rng):
        b = gaussian_pairs()[0][0].batch(rng, 10, t=0.3)
        assert np.all(b.t == 0.3) and b.zt.shape == (10, 3)


class TestIdentities:
    def test_gap_integrand_unbiased(self):
        for i, (r, q) in enumerate(gaussian_pairs()):
            rep = orc.verify_gap_integrand(r, q, (0.2, 0.5, 0.8), n_mc=200_000, seed=i)
            assert rep.passed, rep.to_text()

    def test_gap_rate_zero_for_identical_flows(self):
        r, _ = gaussian_pairs()[0]
        assert orc.closed_form_gap_rate(r, r, 0.5) == 0.0

    def test_kl_rate_report_well_formed(self):
        r, q = gaussian_pairs()[1]
        rep = orc.verify_kl_rate_identity(r, q, (0.2, 0.5), n_mc=100_000)
        assert len(rep.rows) == 2
        assert rep.to_csv().splitlines()[0] == ",".join(orc.REPORT_COLUMNS)
        assert all(row.status in ("PASS", "FAIL", "INCONCLUSIVE") for row in rep.rows)

    def test_small_n_rejected(self):
        r, q = gaussian_pairs()[0]
        with pytest.raises(ValueError):
            orc.verify_kl_rate_identity(r, q, (0.5,), n_mc=1000)
        with pytest.raises(ValueError):
            orc.verify_gap_integrand(r, q, (0.5,), n_mc=1000)

    def test_kl_rate_matches_finite_difference_of_kl(self):
        r, q = gaussian_pairs()[2]
        t, h = 0.5, 1e-3
        fd = (orc.gaussian_kl(q.marginal(t + h), r.marginal(t + h))
              - orc.gaussian_kl(q.marginal(t - h), r.marginal(t - h))) / (2 * h)
        assert orc.kl_marginal_rate(q, r, t) == pytest.approx(fd, rel=1e-5)


class TestGradCheck:
    def test_quadratic(self):
        a = np.array([1.0, 2.0, 3.0])
        rep = orc.grad_check(lambda p: (float(np.sum(a * p ** 2)), 2 * a * p), np.ones(3))
        assert rep.passed(1e-8)

    def test_catches_wrong_gradient(self):
        rep = orc.grad_check(lambda p: (float(np.sum(p ** 3)), 2 * p), np.full(4, 2.0))
        assert not rep.passed()

    def test_zero_gradient_uses_floor(self):
        rep = orc.grad_check(lambda p: (1.0, np.zeros_like(p)), np.ones(5))
        assert rep.max_rel_error == 0.0

    def test_bad_perturbation(self):
        with pytest.raises(ValueError):
            orc.grad_check(lambda p: (0.0, p), np.ones(2), perturbation=0.0)


class TestDelta:
    def test_estimate_zero_at_reference(self, small_ref, rng):
        from conftest import make_batch
        pol = small_ref.with_adapter(2)
        mean, se = orc.estimate_delta(pol, small_ref, lambda r, n: make_batch(r, n=n), 64)
        assert mean == 0.0 and se == 0.0

    def test_rank_agreement(self):
        assert orc.rank_agreement([0.3, -0.1, 0.05, 2.0], beta=5.0)


class TestDip:
    def test_two_point_masses(self):
        assert orc.dip_statistic(np.array([0.0] * 50 + [1.0] * 50)) == pytest.approx(0.25, abs=0.01)

    def test_constant(self):
        assert orc.dip_statistic(np.ones(10)) == 0.0

    def test_unimodal_small_bimodal_large(self, rng):
        uni = orc.dip_statistic(rng.standard_normal(2000))
        bi = orc.dip_statistic(np.concatenate([rng.normal(-3, 0.5, 1000), rng.normal(3, 0.5, 1000)]))
        crit = orc.dip_threshold(2000, n_sim=50)
        assert uni < crit < bi

    def test_in_range(self, rng):
        for _ in range(10):
            d = orc.dip_statistic(rng.standard_normal(int(rng.integers(3, 200))))
            assert 0.0 <= d <= 0.25 + 1e-12
