import math

import numpy as np
import pytest
from scipy import integrate

from clvlab._optim import DegenerateDataError, FitOptions
from clvlab.data_pipeline import CustomerSummary
from clvlab.spend_model import (
    GgParams,
    SpendFitError,
    cond_expected_spend,
    fit_gg,
    gg_loglik,
    load_params,
    save_params,
)


def summary(x, m_bar, cid="c"):
    t_x = 10.0 * x
    gaps = tuple([10.0] * x)
    return CustomerSummary(cid, x, t_x, t_x + 5.0, m_bar, gaps)


class TestDensity:
    def test_normalizes_to_one(self):
        params = GgParams(2.0, 3.0, 10.0)
        value, _ = integrate.quad(
            lambda m: math.exp(gg_loglik(params, 2, m)), 1e-9, 1e4, limit=200)
        assert value == pytest.approx(1.0, abs=1e-3)

    def test_normalizes_for_random_parameters(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            params = GgParams(rng.uniform(0.5, 8), rng.uniform(1.5, 6), rng.uniform(1, 30))
            x = int(rng.integers(1, 6))
            value, _ = integrate.quad(
                lambda m: math.exp(gg_loglik(params, x, m)), 1e-9, 1e5, limit=400)
            assert value == pytest.approx(1.0, abs=1e-3)

    def test_scaling_property(self):
        params = GgParams(2.0, 3.0, 10.0)
        scaled = GgParams(2.0, 3.0, 100.0)
        for m in (5.0, 20.0, 75.0):
            assert gg_loglik(scaled, 3, 10.0 * m) == pytest.approx(
                gg_loglik(params, 3, m) - math.log(10.0), rel=1e-12)

    def test_histogram_agreement_with_simulator(self):
        params = GgParams(2.0, 3.0, 10.0)
        x = 2
        rng = np.random.default_rng(8)
        n = 200_000
        nu = rng.gamma(params.q, 1.0 / params.gamma, size=n)
        m_bar = rng.gamma(params.p * x, 1.0 / (x * nu))
        edges = np.linspace(0.5, 40.0, 41)
        observed, _ = np.histogram(m_bar, bins=edges)
        centers = 0.5 * (edges[:-1] + edges[1:])
        widths = np.diff(edges)
        density = np.exp([gg_loglik(params, x, c) for c in centers])
        expected = density * widths * n
        noise = np.sqrt(np.maximum(expected, 1.0))
        assert np.all(np.abs(observed - expected) < 5.0 * noise + 5.0)

    def test_preconditions(self):
        params = GgParams(2.0, 3.0, 10.0)
        with pytest.raises(ValueError):
            gg_loglik(params, 0, 5.0)
        with pytest.raises(ValueError):
            gg_loglik(params, 2, 0.0)


class TestCondExpectedSpend:
    def test_x_zero_gives_population_mean(self):
        params = GgParams(6.0, 4.0, 15.0)
        assert cond_expected_spend(params, 0, None) == pytest.approx(
            6.0 * 15.0 / 3.0)

    def test_limit_to_observed_mean(self):
        params = GgParams(6.0, 4.0, 15.0)
        assert cond_expected_spend(params, 10**7, 20.0) == pytest.approx(20.0, rel=1e-5)

    def test_posterior_mean_oracle(self):
        # E[p/nu | x, m_bar] by numeric integration over the posterior of nu;
        # the kernel is rescaled by its peak so quad sees O(1) values
        params = GgParams(6.0, 4.0, 15.0)
        x, m_bar = 3, 20.0
        shape = params.q + params.p * x
        rate = params.gamma + x * m_bar
        peak = (shape - 1.0) / rate

        def log_kernel(nu):
            return (shape - 1.0) * math.log(nu) - rate * nu

        scale = log_kernel(peak)

        def kernel(nu):
            return math.exp(log_kernel(nu) - scale)

        numer, _ = integrate.quad(lambda nu: (params.p / nu) * kernel(nu),
                                  1e-12, 10.0, limit=400)
        denom, _ = integrate.quad(kernel, 1e-12, 10.0, limit=400)
        assert cond_expected_spend(params, x, m_bar) == pytest.approx(
            numer / denom, rel=1e-8)

    def test_shrinkage_and_convexity(self):
        params = GgParams(6.0, 4.0, 15.0)
        pop = params.population_mean
        m_bar = 55.0
        previous_distance = abs(cond_expected_spend(params, 1, m_bar) - m_bar)
        for x in (2, 5, 11, 40):
            value = cond_expected_spend(params, x, m_bar)
            assert min(m_bar, pop) < value < max(m_bar, pop)
            distance = abs(value - m_bar)
            assert distance < previous_distance
            previous_distance = distance


class TestFit:
    def test_recovery_from_simulated_cohort(self):
        rng = np.random.default_rng(17)
        true = GgParams(6.0, 4.0, 15.0)
        n = 20_000
        x = 1 + rng.poisson(2.0, size=n)
        nu = rng.gamma(true.q, 1.0 / true.gamma, size=n)
        m_bar = rng.gamma(true.p * x, 1.0 / (x * nu))
        summaries = [summary(int(xi), float(mi), cid=f"c{i}")
                     for i, (xi, mi) in enumerate(zip(x, m_bar))]
        fit = fit_gg(summaries, FitOptions(seed=2))
        assert fit.converged
        for got, want in ((fit.params.p, true.p), (fit.params.q, true.q),
                          (fit.params.gamma, true.gamma)):
            assert abs(got - want) / want < 0.15

    def test_deterministic_refit(self):
        rng = np.random.default_rng(23)
        summaries = [summary(int(x), float(m), cid=f"c{i}") for i, (x, m) in
                     enumerate(zip(1 + rng.poisson(1.5, 300),
                                   rng.gamma(4.0, 5.0, 300) + 0.5))]
        first = fit_gg(summaries, FitOptions(seed=5))
        second = fit_gg(summaries, FitOptions(seed=5))
        assert first.params == second.params
        assert first.log_likelihood == second.log_likelihood

    def test_identical_spend_rejected(self):
        summaries = [summary(2, 10.0, cid=f"c{i}") for i in range(50)]
        with pytest.raises(DegenerateDataError):
            fit_gg(summaries)

    def test_too_few_customers(self):
        with pytest.raises(DegenerateDataError):
            fit_gg([summary(0, None), summary(2, 10.0)])

    def test_q_below_one_rejected(self):
        # extremely heavy-tailed spends push the heterogeneity shape below 1
        rng = np.random.default_rng(31)
        m_bar = np.exp(rng.normal(0.0, 3.5, size=400)) + 0.01
        summaries = [summary(1, float(m), cid=f"c{i}") for i, m in enumerate(m_bar)]
        with pytest.raises(SpendFitError):
            fit_gg(summaries, FitOptions(seed=1))

    def test_correlation_warning(self):
        rng = np.random.default_rng(41)
        x = 1 + rng.poisson(2.0, 400)
        m_bar = 5.0 + 3.0 * x + rng.normal(0.0, 0.5, 400)
        summaries = [summary(int(xi), float(mi), cid=f"c{i}")
                     for i, (xi, mi) in enumerate(zip(x, m_bar))]
        with pytest.warns(UserWarning, match="correlation"):
            fit_gg(summaries, FitOptions(seed=3))

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        summaries = [summary(int(x), float(m), cid=f"c{i}") for i, (x, m) in
                     enumerate(zip(1 + rng.poisson(1.5, 300),
                                   rng.gamma(4.0, 5.0, 300) + 0.5))]
        fit = fit_gg(summaries, FitOptions(seed=5))
        save_params(fit, tmp_path / "gg.json")
        assert load_params(tmp_path / "gg.json") == fit.params
