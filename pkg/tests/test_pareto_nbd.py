import math

import numpy as np
import pytest

from clvlab._optim import DegenerateDataError, FitOptions
from clvlab.data_pipeline import CustomerSummary
from clvlab.pareto_nbd import (
    PnbdParams,
    _log_hyp2f1_batch,
    expected_ltv,
    expected_transactions,
    fit_pnbd,
    load_params,
    log_hyp2f1,
    p_alive,
    pnbd_loglik,
    save_params,
    total_loglik,
)
from clvlab.simulation import SimConfig, simulate_summaries
from clvlab.regularity import RegularityParams
from clvlab.spend_model import GgParams


def summary(x, t_x, T, gaps=None, m_bar=None):
    if gaps is None:
        gaps = tuple([t_x / x] * x) if x else ()
    return CustomerSummary("c", x, t_x, T, m_bar, tuple(gaps))


class TestLogHyp2f1:
    def test_z_zero_is_log_one(self):
        assert log_hyp2f1(1.3, 0.7, 2.0, 0.0) == 0.0

    def test_closed_form_identity(self):
        # 2F1(1, 1; 2; z) = -ln(1-z)/z
        for z in (0.1, 0.5, 0.9):
            expected = math.log(-math.log1p(-z) / z)
            assert log_hyp2f1(1.0, 1.0, 2.0, z) == pytest.approx(expected, rel=1e-11)

    def test_against_extended_precision_sum(self):
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 50

        def brute(a, b, c, z):
            total, term = mp.mpf(0), mp.mpf(1)
            for n in range(10**6):
                total += term
                term = term * (a + n) * (b + n) / ((c + n) * (n + 1)) * z
                if abs(term) < mp.mpf(10) ** -40 * abs(total):
                    break
            return mp.log(total)

        cases = [(2.3, 1.5, 4.1, 0.7)]
        rng = np.random.default_rng(5)
        for _ in range(10):
            cases.append((rng.uniform(0.2, 8), rng.uniform(0.2, 8),
                          rng.uniform(0.5, 10), rng.uniform(0.0, 0.95)))
        for a, b, c, z in cases:
            oracle = float(brute(mp.mpf(a), mp.mpf(b), mp.mpf(c), mp.mpf(z)))
            assert log_hyp2f1(a, b, c, z) == pytest.approx(oracle, rel=1e-10)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            log_hyp2f1(1.0, 1.0, 2.0, 1.0)
        with pytest.raises(ValueError):
            log_hyp2f1(1.0, 1.0, 2.0, -0.2)
        with pytest.raises(ValueError):
            log_hyp2f1(1.0, 1.0, -1.0, 0.5)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(11)
        a = rng.uniform(0.3, 9, 40)
        b = rng.uniform(0.3, 9, 40)
        c = rng.uniform(0.5, 12, 40)
        z = rng.uniform(0.0, 0.97, 40)
        batch = _log_hyp2f1_batch(a, b, c, z)
        for i in range(40):
            assert batch[i] == pytest.approx(
                log_hyp2f1(a[i], b[i], c[i], z[i]), rel=1e-11, abs=1e-13)


class TestLoglik:
    def test_quadrature_oracle_value(self):
        # frozen from scipy.integrate.dblquad of the individual likelihood
        # against both gamma priors (estimated error ~1e-14)
        params = PnbdParams(0.5, 10.0, 0.5, 10.0)
        value = pnbd_loglik(params, summary(2, 30.0, 50.0, (10.0, 20.0)))
        assert value == pytest.approx(-9.934639057641807, abs=1e-9)

    def test_branch_continuity_at_equal_rates(self):
        s = summary(3, 20.0, 40.0)
        lo = pnbd_loglik(PnbdParams(0.8, 10.0 - 1e-9, 1.2, 10.0), s)
        eq = pnbd_loglik(PnbdParams(0.8, 10.0, 1.2, 10.0), s)
        hi = pnbd_loglik(PnbdParams(0.8, 10.0 + 1e-9, 1.2, 10.0), s)
        assert lo == pytest.approx(eq, abs=1e-7)
        assert hi == pytest.approx(eq, abs=1e-7)

    def test_x0_probability_decreasing_in_T(self):
        params = PnbdParams(0.7, 12.0, 0.9, 15.0)
        values = [pnbd_loglik(params, summary(0, 0.0, T)) for T in (5, 20, 80, 200)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert all(v < 0 for v in values)  # proper probabilities

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            PnbdParams(0.0, 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            PnbdParams(1.0, -2.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            PnbdParams(1.0, 1.0, math.inf, 1.0)


class TestPAlive:
    def test_certain_when_purchase_at_cutoff(self):
        params = PnbdParams(0.5, 10.0, 0.5, 10.0)
        assert p_alive(params, summary(2, 50.0, 50.0)) == 1.0

    def test_decreasing_in_silence(self):
        params = PnbdParams(0.5, 10.0, 0.5, 10.0)
        values = [p_alive(params, summary(2, 30.0, T)) for T in (30, 40, 60, 120, 400)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            params = PnbdParams(*rng.uniform(0.1, 5.0, 2), *rng.uniform(0.1, 5.0, 2))
            T = rng.uniform(1.0, 200.0)
            t_x = rng.uniform(0.0, T)
            x = int(rng.integers(1, 30))
            value = p_alive(params, summary(x, t_x, T))
            assert 0.0 <= value <= 1.0


class TestExpectedTransactions:
    def test_zero_horizon(self):
        params = PnbdParams(0.5, 10.0, 0.5, 10.0)
        assert expected_transactions(params, summary(2, 30.0, 50.0), 1e-12) \
            == pytest.approx(0.0, abs=1e-10)

    def test_monotone_in_horizon(self):
        params = PnbdParams(0.5, 10.0, 0.5, 10.0)
        s = summary(2, 30.0, 50.0)
        assert expected_transactions(params, s, 60.0) \
            <= expected_transactions(params, s, 182.0)

    def test_continuous_across_s_equal_one(self):
        s = summary(2, 30.0, 50.0)
        lo = expected_transactions(PnbdParams(0.5, 10.0, 1.0 - 1e-6, 10.0), s, 100.0)
        hi = expected_transactions(PnbdParams(0.5, 10.0, 1.0 + 1e-6, 10.0), s, 100.0)
        assert lo == pytest.approx(hi, rel=1e-5)

    def test_ltv_structure(self):
        pn = PnbdParams(0.5, 10.0, 0.5, 10.0)
        gg = GgParams(6.0, 4.0, 15.0)
        s0 = summary(0, 0.0, 50.0)
        expected0 = expected_transactions(pn, s0, 182.0) * gg.population_mean
        assert expected_ltv(pn, gg, s0, 182.0) == pytest.approx(expected0)
        dead = PnbdParams(0.5, 10.0, 8.0, 0.01)  # immediate dropout population
        s_old = summary(1, 1.0, 4000.0, (1.0,), m_bar=25.0)
        assert expected_ltv(dead, gg, s_old, 10.0) == pytest.approx(0.0, abs=1e-6)


@pytest.fixture(scope="module")
def small_cohort():
    config = SimConfig(
        n_customers=4000, observation_days=104.0, holdout_days=26.0,
        params=RegularityParams(0.55, 10.6, 0.61, 11.7, 1.0),
        spend=GgParams(6.0, 4.0, 15.0), seed=20,
    )
    summaries, truth, customers = simulate_summaries(config)
    return summaries


class TestFit:
    def test_recovery_on_simulated_cohort(self, small_cohort):
        fit = fit_pnbd(small_cohort, FitOptions(seed=1))
        assert fit.converged
        true = (0.55, 10.6, 0.61, 11.7)
        fitted = (fit.params.r, fit.params.alpha, fit.params.s, fit.params.beta)
        for got, want in zip(fitted, true):
            assert abs(got - want) / want < 0.30  # full-scale bound is in acceptance

    def test_loglik_additivity(self):
        s = summary(2, 30.0, 50.0)
        params = PnbdParams(0.5, 10.0, 0.5, 10.0)
        assert total_loglik(params, [s] * 7) == pytest.approx(
            7 * pnbd_loglik(params, s), rel=1e-12)

    def test_deterministic_refit(self, small_cohort):
        first = fit_pnbd(small_cohort[:500], FitOptions(seed=9))
        second = fit_pnbd(small_cohort[:500], FitOptions(seed=9))
        assert first.params == second.params
        assert first.log_likelihood == second.log_likelihood
        assert first.iterations == second.iterations

    def test_degenerate_data_rejected(self):
        with pytest.raises(DegenerateDataError):
            fit_pnbd([summary(0, 0.0, 50.0), summary(0, 0.0, 60.0)])

    def test_fit_dominates_truth_on_simulated_data(self, small_cohort):
        fit = fit_pnbd(small_cohort, FitOptions(seed=1))
        truth_ll = total_loglik(PnbdParams(0.55, 10.6, 0.61, 11.7), small_cohort)
        assert fit.log_likelihood >= truth_ll - 1e-6

    def test_json_round_trip(self, small_cohort, tmp_path):
        fit = fit_pnbd(small_cohort[:500], FitOptions(seed=9))
        save_params(fit, tmp_path / "m.json")
        back = load_params(tmp_path / "m.json")
        assert back == fit.params
