"""Shared derivative-free maximum-likelihood machinery.

All models fit by Nelder-Mead over log-parameters (positivity for free).
A run converges when the simplex log-likelihood spread drops below
``loglik_tol`` (and the log-parameter spread below ``param_tol``) or stops
at ``max_evaluations``. Non-convergent runs trigger up to ``restarts``
jittered retries from the start point; the best run by log-likelihood wins.
Everything is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

_LOG_PARAM_BOUND = 30.0  # reject absurd parameter magnitudes early


class DegenerateDataError(ValueError):
    """Raised when the data cannot identify the model."""


@dataclass(frozen=True)
class FitOptions:
    seed: int = 42
    restarts: int = 4
    max_evaluations: int = 20_000
    loglik_tol: float = 1e-8
    param_tol: float = 1e-4
    jitter_scale: float = 0.5


@dataclass
class FitMeta:
    log_likelihood: float
    iterations: int
    converged: bool
    restarts_used: int


def maximize_loglik(
    total_loglik: Callable[[np.ndarray], float],
    theta0: np.ndarray,
    opts: FitOptions,
) -> tuple[np.ndarray, FitMeta]:
    """Maximize ``total_loglik(theta)`` over log-parameter vector theta."""

    def negative(theta: np.ndarray) -> float:
        if np.any(np.abs(theta) > _LOG_PARAM_BOUND):
            return np.inf
        value = total_loglik(theta)
        if not np.isfinite(value):
            return np.inf
        return -value

    rng = np.random.default_rng(opts.seed)
    best = None
    restarts_used = 0
    start = np.asarray(theta0, dtype=float)
    for attempt in range(opts.restarts + 1):
        if attempt > 0:
            restarts_used += 1
            start = np.asarray(theta0, dtype=float) + rng.normal(
                0.0, opts.jitter_scale, size=len(theta0)
            )
        result = optimize.minimize(
            negative,
            start,
            method="Nelder-Mead",
            options={
                "xatol": opts.param_tol,
                "fatol": opts.loglik_tol,
                "maxfev": opts.max_evaluations,
                "adaptive": True,
            },
        )
        if best is None or -result.fun > best[1]:
            best = (result.x, -result.fun, result.nfev, bool(result.success))
        if best[3]:
            break

    theta, loglik, nfev, converged = best
    return theta, FitMeta(
        log_likelihood=float(loglik),
        iterations=int(nfev),
        converged=converged,
        restarts_used=restarts_used,
    )
