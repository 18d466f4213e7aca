"""Gamma-Gamma model of monetary value.

Transaction values are Gamma(p, nu) per customer with rate heterogeneity
nu ~ Gamma(q, gamma) across customers, independent of purchase frequency.
The observed statistic is m_bar, the mean of a customer's x repeat spends.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from ._optim import DegenerateDataError, FitOptions, maximize_loglik

_CORR_WARN_THRESHOLD = 0.3
_Q_MIN_EXCESS = 1e-6


class SpendFitError(ValueError):
    """Fit rejected (population mean undefined or data degenerate)."""


@dataclass(frozen=True)
class GgParams:
    p: float
    q: float
    gamma: float

    def __post_init__(self):
        for name in ("p", "q", "gamma"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"{name} must be strictly positive and finite")

    @property
    def population_mean(self) -> float:
        if self.q <= 1.0:
            raise ValueError("population mean p*gamma/(q-1) requires q > 1")
        return self.p * self.gamma / (self.q - 1.0)


@dataclass
class GgFitResult:
    params: GgParams
    log_likelihood: float
    iterations: int
    converged: bool
    restarts_used: int
    spend_frequency_corr: float


def gg_loglik(params: GgParams, x: int, m_bar: float) -> float:
    """log density of the mean repeat spend m_bar given x repeat purchases.

    f(m_bar | x) = Gamma(px+q) / (Gamma(px) Gamma(q)) * gamma^q * x^{px}
                   * m_bar^{px-1} / (gamma + x m_bar)^{px+q}
    """
    return float(_gg_loglik_arrays(params, np.array([x]), np.array([m_bar]))[0])


def _gg_loglik_arrays(params: GgParams, x, m_bar) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m_bar = np.asarray(m_bar, dtype=float)
    if np.any(x < 1) or np.any(m_bar <= 0.0):
        raise ValueError("gg_loglik requires x >= 1 and m_bar > 0")
    p, q, gamma = params.p, params.q, params.gamma
    px = p * x
    return (
        special.gammaln(px + q)
        - special.gammaln(px)
        - special.gammaln(q)
        + q * math.log(gamma)
        + px * np.log(x)
        + (px - 1.0) * np.log(m_bar)
        - (px + q) * np.log(gamma + x * m_bar)
    )


def cond_expected_spend(params: GgParams, x: int, m_bar: float | None) -> float:
    """Shrinkage estimate of a customer's expected transaction value.

    Convex combination of the observed mean spend and the population mean;
    customers without repeat purchases get the population mean.
    """
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return params.population_mean
    if m_bar is None or m_bar <= 0.0:
        raise ValueError("x >= 1 requires m_bar > 0")
    weight = params.p * x / (params.p * x + params.q - 1.0)
    return (1.0 - weight) * params.population_mean + weight * m_bar


def fit_gg(summaries, opts: FitOptions = FitOptions()) -> GgFitResult:
    """Maximum-likelihood fit of (p, q, gamma) over customers with x >= 1.

    Nelder-Mead over log-parameters from (1, 2, 1); rejects fits whose
    optimum has q <= 1 (undefined population mean). A strong empirical
    correlation between frequency and spend is reported as a warning but
    does not block fitting.
    """
    x = np.array([s.x for s in summaries if s.x >= 1 and s.m_bar and s.m_bar > 0.0], dtype=float)
    m_bar = np.array([s.m_bar for s in summaries if s.x >= 1 and s.m_bar and s.m_bar > 0.0])
    if len(x) < 2:
        raise DegenerateDataError("need at least 2 customers with repeat spend")
    if np.all(m_bar == m_bar[0]):
        raise DegenerateDataError(
            "all mean spends identical: no heterogeneity, q is unbounded"
        )

    corr = 0.0
    if np.std(x) > 0.0 and np.std(m_bar) > 0.0:
        corr = float(np.corrcoef(x, m_bar)[0, 1])
    if abs(corr) > _CORR_WARN_THRESHOLD:
        warnings.warn(
            f"frequency/spend correlation {corr:.2f} exceeds "
            f"{_CORR_WARN_THRESHOLD}; the independence assumption is strained",
            stacklevel=2,
        )

    def objective(theta: np.ndarray) -> float:
        params = GgParams(*np.exp(theta))
        return float(np.sum(_gg_loglik_arrays(params, x, m_bar)))

    theta, meta = maximize_loglik(objective, np.log([1.0, 2.0, 1.0]), opts)
    p, q, gamma = np.exp(theta)
    if q <= 1.0 + _Q_MIN_EXCESS:
        raise SpendFitError(
            f"fitted q={q:.6g} <= 1: population mean spend is undefined"
        )
    return GgFitResult(
        params=GgParams(p=float(p), q=float(q), gamma=float(gamma)),
        log_likelihood=meta.log_likelihood,
        iterations=meta.iterations,
        converged=meta.converged,
        restarts_used=meta.restarts_used,
        spend_frequency_corr=corr,
    )


def save_params(result: GgFitResult, path) -> None:
    document = {
        "model": "gamma_gamma",
        "p": result.params.p,
        "q": result.params.q,
        "gamma": result.params.gamma,
        "log_likelihood": result.log_likelihood,
        "converged": result.converged,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_params(path) -> GgParams:
    with open(path, "r", encoding="utf-8") as handle:
        document = json.load(handle)
    if document.get("model") != "gamma_gamma":
        raise ValueError(f"{path} does not hold gamma_gamma parameters")
    return GgParams(p=document["p"], q=document["q"], gamma=document["gamma"])
