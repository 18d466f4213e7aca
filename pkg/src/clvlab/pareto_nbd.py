"""Closed-form Pareto/NBD engine.

Customers purchase at latent Poisson rate lambda until a latent exponential
dropout at rate mu; both rates are gamma-mixed across the population with
shapes/rates (r, alpha) and (s, beta). Everything here is computed in log
space; the Gaussian hypergeometric kernel is evaluated by direct series
summation with a running-maximum rescale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from ._optim import DegenerateDataError, FitMeta, FitOptions, maximize_loglik
from .data_pipeline import CustomerSummary

_HYP_MAX_TERMS = 10_000
_HYP_REL_TOL = 1e-12
_S_ONE_SWITCH = 1e-6


class HypergeometricError(ArithmeticError):
    def __init__(self, a, b, c, z):
        super().__init__(
            f"2F1 series did not converge within {_HYP_MAX_TERMS} terms "
            f"for (a={a}, b={b}, c={c}, z={z})"
        )
        self.args_tuple = (a, b, c, z)


@dataclass(frozen=True)
class PnbdParams:
    r: float
    alpha: float
    s: float
    beta: float

    def __post_init__(self):
        for name in ("r", "alpha", "s", "beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"{name} must be strictly positive and finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.alpha, self.s, self.beta])


@dataclass
class FitResult:
    params: "PnbdParams"
    log_likelihood: float
    iterations: int
    converged: bool
    restarts_used: int


def log_hyp2f1(a: float, b: float, c: float, z: float) -> float:
    """log of the Gaussian hypergeometric series 2F1(a, b; c; z).

    Direct term-by-term summation of sum_n (a)_n (b)_n / (c)_n z^n / n!
    accumulated in log space with a running-maximum rescale. Requires
    c > 0 and z in [0, 1); a and b must be non-negative so every term is
    non-negative. Converges when the next term contributes < 1e-12
    relatively, errors after 10_000 terms.
    """
    if not 0.0 <= z < 1.0:
        raise ValueError(f"z must lie in [0, 1), got {z}")
    if c <= 0.0:
        raise ValueError(f"c must be positive, got {c}")
    if a < 0.0 or b < 0.0:
        raise ValueError("series summation requires a >= 0 and b >= 0")
    if z == 0.0 or a == 0.0 or b == 0.0:
        return 0.0

    log_z = math.log(z)
    log_term = 0.0
    running_max = 0.0
    acc = 1.0
    for n in range(_HYP_MAX_TERMS):
        log_term += math.log((a + n) * (b + n) / ((c + n) * (n + 1.0))) + log_z
        if log_term > running_max:
            acc = acc * math.exp(running_max - log_term) + 1.0
            running_max = log_term
        else:
            term = math.exp(log_term - running_max)
            acc += term
            if term < _HYP_REL_TOL * acc:
                return running_max + math.log(acc)
    raise HypergeometricError(a, b, c, z)


def _log_hyp2f1_batch(a, b, c, z) -> np.ndarray:
    """Vectorized twin of log_hyp2f1 (same series, same stopping rule).

    Elements keep accumulating until every entry's next term is relatively
    negligible; extra terms past an element's own convergence only refine it.
    Converged elements are compacted away periodically so stragglers with
    z near 1 do not drag the whole batch.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any((z < 0.0) | (z >= 1.0)):
        raise ValueError("z must lie in [0, 1)")
    if np.any(c <= 0.0) or np.any(a < 0.0) or np.any(b < 0.0):
        raise ValueError("series summation requires a, b >= 0 and c > 0")

    out = np.zeros(z.shape)
    live = np.flatnonzero(z > 0.0)
    if live.size == 0:
        return out
    a, b, c = np.broadcast_to(a, z.shape).ravel()[live], \
        np.broadcast_to(b, z.shape).ravel()[live], \
        np.broadcast_to(c, z.shape).ravel()[live]
    log_z = np.log(z.ravel()[live])
    log_term = np.zeros(live.size)
    running_max = np.zeros(live.size)
    acc = np.ones(live.size)

    flat = out.ravel()
    n = 0
    while n < _HYP_MAX_TERMS:
        log_term += np.log((a + n) * (b + n) / ((c + n) * (n + 1.0))) + log_z
        grew = log_term > running_max
        if np.any(grew):
            acc[grew] = acc[grew] * np.exp(running_max[grew] - log_term[grew]) + 1.0
            running_max[grew] = log_term[grew]
        rest = ~grew
        term = np.exp(log_term[rest] - running_max[rest])
        acc[rest] += term
        n += 1
        if n % 64 == 0 or n >= 256:
            done = (~grew) & (np.exp(log_term - running_max) < _HYP_REL_TOL * acc)
            if np.all(done):
                flat[live] = running_max + np.log(acc)
                return out
            if np.count_nonzero(done) > done.size // 4:
                flat[live[done]] = running_max[done] + np.log(acc[done])
                keep = ~done
                live = live[keep]
                a, b, c, log_z = a[keep], b[keep], c[keep], log_z[keep]
                log_term, running_max, acc = log_term[keep], running_max[keep], acc[keep]
        elif np.all((~grew) & (np.exp(log_term - running_max) < _HYP_REL_TOL * acc)):
            flat[live] = running_max + np.log(acc)
            return out
    raise HypergeometricError(float(a[0]), float(b[0]), float(c[0]), float(np.exp(log_z[0])))


def _log_a0_arrays(r, alpha, s, beta, x, t_x, T) -> np.ndarray:
    """log A0 for arrays of summaries; -inf where t_x == T."""
    if alpha >= beta:
        larger, second = alpha, s + 1.0
    else:
        larger, second = beta, r + x
    rsx = r + s + x
    gap = abs(alpha - beta)
    lf1 = _log_hyp2f1_batch(rsx, second, rsx + 1.0, gap / (larger + t_x))
    lf2 = _log_hyp2f1_batch(rsx, second, rsx + 1.0, gap / (larger + T))
    la = lf1 - rsx * np.log(larger + t_x)
    lb = lf2 - rsx * np.log(larger + T)
    with np.errstate(invalid="ignore", divide="ignore"):
        diff = np.where(lb < la, lb - la, 0.0)
        return np.where(lb < la, la + np.log1p(-np.exp(diff)), -np.inf)


def _loglik_arrays(r, alpha, s, beta, x, t_x, T) -> np.ndarray:
    """Per-customer Pareto/NBD log-likelihood over parallel arrays."""
    x = np.asarray(x, dtype=float)
    t_x = np.asarray(t_x, dtype=float)
    T = np.asarray(T, dtype=float)
    rsx = r + s + x
    log_a0 = _log_a0_arrays(r, alpha, s, beta, x, t_x, T)
    alive = -(r + x) * np.log(alpha + T) - s * np.log(beta + T)
    dead = np.log(s) - np.log(rsx) + log_a0
    return (
        special.gammaln(r + x)
        - special.gammaln(r)
        + r * math.log(alpha)
        + s * math.log(beta)
        + np.logaddexp(alive, dead)
    )


def pnbd_loglik(params: PnbdParams, summary: CustomerSummary) -> float:
    """log-likelihood of one customer's (x, t_x, T) summary.

    L = Gamma(r+x)/Gamma(r) * alpha^r beta^s *
        [ (alpha+T)^-(r+x) (beta+T)^-s + s/(r+s+x) * A0 ]
    with A0 the two-term hypergeometric difference, branch chosen so the
    2F1 argument stays inside [0, 1).
    """
    value = _loglik_arrays(
        params.r, params.alpha, params.s, params.beta,
        np.array([summary.x]), np.array([summary.t_x]), np.array([summary.T]),
    )
    return float(value[0])


def p_alive(params: PnbdParams, summary: CustomerSummary) -> float:
    """Posterior probability the customer is still active at the cutoff."""
    return float(
        p_alive_arrays(
            params,
            np.array([summary.x]), np.array([summary.t_x]), np.array([summary.T]),
        )[0]
    )


def p_alive_arrays(params: PnbdParams, x, t_x, T) -> np.ndarray:
    r, alpha, s, beta = params.r, params.alpha, params.s, params.beta
    x = np.asarray(x, dtype=float)
    t_x = np.asarray(t_x, dtype=float)
    T = np.asarray(T, dtype=float)
    log_a0 = _log_a0_arrays(r, alpha, s, beta, x, t_x, T)
    log_odds_dead = (
        math.log(s) - np.log(r + s + x)
        + (r + x) * np.log(alpha + T)
        + s * np.log(beta + T)
        + log_a0
    )
    return special.expit(-log_odds_dead)


def expected_transactions(
    params: PnbdParams, summary: CustomerSummary, horizon_days: float
) -> float:
    """Conditional expected transactions in (T, T + horizon_days]."""
    return float(
        expected_transactions_arrays(
            params,
            np.array([summary.x]), np.array([summary.t_x]), np.array([summary.T]),
            horizon_days,
        )[0]
    )


def expected_transactions_arrays(params: PnbdParams, x, t_x, T, horizon_days) -> np.ndarray:
    if horizon_days < 0.0:
        raise ValueError("horizon must be non-negative")
    r, alpha, s, beta = params.r, params.alpha, params.s, params.beta
    x = np.asarray(x, dtype=float)
    t_x = np.asarray(t_x, dtype=float)
    T = np.asarray(T, dtype=float)
    alive = p_alive_arrays(params, x, t_x, T)
    if abs(s - 1.0) < _S_ONE_SWITCH:
        growth = np.log((beta + T + horizon_days) / (beta + T))
        base = (r + x) * (beta + T) / (alpha + T) * growth
    else:
        shrink = 1.0 - ((beta + T) / (beta + T + horizon_days)) ** (s - 1.0)
        base = (r + x) * (beta + T) / ((alpha + T) * (s - 1.0)) * shrink
    return base * alive


def expected_ltv(
    pnbd: PnbdParams, gg, summary: CustomerSummary, horizon_days: float
) -> float:
    """Expected holdout revenue: expected transactions times conditional
    expected spend (population mean for x = 0 customers)."""
    from .spend_model import cond_expected_spend

    count = expected_transactions(pnbd, summary, horizon_days)
    spend = cond_expected_spend(gg, summary.x, summary.m_bar)
    return count * spend


def total_loglik(params: PnbdParams, summaries) -> float:
    x = np.array([s.x for s in summaries], dtype=float)
    t_x = np.array([s.t_x for s in summaries], dtype=float)
    T = np.array([s.T for s in summaries], dtype=float)
    return float(np.sum(_loglik_arrays(params.r, params.alpha, params.s, params.beta, x, t_x, T)))


def fit_pnbd(summaries, opts: FitOptions = FitOptions()) -> FitResult:
    """Maximum-likelihood fit over (r, alpha, s, beta).

    Nelder-Mead over log-parameters from (1, 1, 1, 1), with jittered
    restarts on non-convergence; deterministic given opts.seed.
    """
    if sum(1 for s in summaries if s.x >= 1) < 2:
        raise DegenerateDataError(
            "need at least 2 customers with repeat purchases to fit Pareto/NBD"
        )
    profiles, counts = _dedup_profiles(summaries)
    x, t_x, T = profiles

    def objective(theta: np.ndarray) -> float:
        r, alpha, s, beta = np.exp(theta)
        try:
            ll = _loglik_arrays(r, alpha, s, beta, x, t_x, T)
        except (HypergeometricError, FloatingPointError):
            return -np.inf
        return float(np.sum(counts * ll))

    theta, meta = maximize_loglik(objective, np.zeros(4), opts)
    r, alpha, s, beta = np.exp(theta)
    return FitResult(
        params=PnbdParams(r=float(r), alpha=float(alpha), s=float(s), beta=float(beta)),
        log_likelihood=meta.log_likelihood,
        iterations=meta.iterations,
        converged=meta.converged,
        restarts_used=meta.restarts_used,
    )


def _dedup_profiles(summaries):
    """Collapse identical (x, t_x, T) profiles; likelihoods add."""
    table: dict[tuple[float, float, float], int] = {}
    for s in summaries:
        key = (float(s.x), float(s.t_x), float(s.T))
        table[key] = table.get(key, 0) + 1
    keys = sorted(table)
    x = np.array([k[0] for k in keys])
    t_x = np.array([k[1] for k in keys])
    T = np.array([k[2] for k in keys])
    counts = np.array([table[k] for k in keys], dtype=float)
    return (x, t_x, T), counts


def save_params(result: FitResult, path) -> None:
    document = {
        "model": "pareto_nbd",
        "r": result.params.r,
        "alpha": result.params.alpha,
        "s": result.params.s,
        "beta": result.params.beta,
        "log_likelihood": result.log_likelihood,
        "converged": result.converged,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_params(path) -> PnbdParams:
    with open(path, "r", encoding="utf-8") as handle:
        document = json.load(handle)
    if document.get("model") != "pareto_nbd":
        raise ValueError(f"{path} does not hold pareto_nbd parameters")
    return PnbdParams(
        r=document["r"], alpha=document["alpha"],
        s=document["s"], beta=document["beta"],
    )
