"""Cohort simulator: the generative oracle for every analytic expression.

Customers draw latent purchase and dropout rates from the gamma priors,
live for an exponential lifetime whose clock starts at the first purchase,
and buy with Gamma(k, k*lambda) interarrival gaps until dropout or the end
of the window. Spends follow the Gamma-Gamma process; coupon flags are
pure Bernoulli noise. Per-customer generator substreams are keyed by
(seed, index) so output does not depend on generation order.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .data_pipeline import CustomerSummary, Transaction
from .regularity import RegularityParams
from .spend_model import GgParams

TRANSACTIONS_FILENAME = "transactions.csv"
GROUND_TRUTH_FILENAME = "ground_truth.csv"
GROUND_TRUTH_HEADER = (
    "customer_id,lambda,mu,dropout_day,true_holdout_count,true_holdout_revenue"
)


@dataclass(frozen=True)
class SimConfig:
    n_customers: int
    observation_days: float
    holdout_days: float
    params: RegularityParams
    spend: GgParams
    coupon_prob: float = 0.0
    acquisition_window_days: float = 0.0
    origin: date = date(2020, 1, 1)
    seed: int = 42

    def __post_init__(self):
        if self.n_customers < 0:
            raise ValueError("n_customers must be >= 0")
        if self.observation_days <= 0 or self.holdout_days <= 0:
            raise ValueError("observation and holdout windows must be positive")
        if not 0.0 <= self.coupon_prob <= 1.0:
            raise ValueError("coupon_prob must lie in [0, 1]")
        if self.acquisition_window_days < 0:
            raise ValueError("acquisition window must be >= 0")
        if self.acquisition_window_days >= self.observation_days:
            raise ValueError("acquisition window must end before the cutoff")

    @property
    def calibration_end(self) -> date:
        return self.origin + timedelta(days=int(self.observation_days))

    @property
    def total_days(self) -> float:
        return self.observation_days + self.holdout_days


@dataclass
class SimCustomer:
    customer_id: str
    lam: float
    mu: float
    nu: float
    dropout_time: float          # days after the first purchase
    acquisition_day: float       # days after the origin
    event_times: list[float] = field(default_factory=list)  # after first buy
    amounts: list[float] = field(default_factory=list)      # incl. first buy
    coupons: list[bool] = field(default_factory=list)

    @property
    def absolute_times(self) -> list[float]:
        return [self.acquisition_day + t for t in [0.0, *self.event_times]]


def simulate_customer(params: RegularityParams, spend: GgParams,
                      coupon_prob: float, horizon_days: float,
                      rng: np.random.Generator,
                      acquisition_day: float = 0.0,
                      customer_id: str = "c0") -> SimCustomer:
    """Draw one customer: latent rates from the priors, an exponential
    dropout, gamma gaps until passing min(dropout, horizon), and spends."""
    lam = rng.gamma(params.r, 1.0 / params.alpha)
    mu = rng.gamma(params.s, 1.0 / params.beta)
    nu = rng.gamma(spend.q, 1.0 / spend.gamma)
    dropout = rng.exponential(1.0 / mu)

    limit = min(dropout, horizon_days - acquisition_day)
    events: list[float] = []
    t = 0.0
    while True:
        t += rng.gamma(params.k, 1.0 / (params.k * lam))
        if t > limit:
            break
        events.append(t)

    n_events = len(events) + 1  # the acquisition purchase included
    amounts = rng.gamma(spend.p, 1.0 / nu, size=n_events).tolist()
    coupons = (rng.random(n_events) < coupon_prob).tolist()
    return SimCustomer(
        customer_id=customer_id,
        lam=float(lam),
        mu=float(mu),
        nu=float(nu),
        dropout_time=float(dropout),
        acquisition_day=float(acquisition_day),
        event_times=events,
        amounts=amounts,
        coupons=coupons,
    )


def _customer_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def simulate_population(config: SimConfig) -> list[SimCustomer]:
    width = max(1, len(str(max(config.n_customers - 1, 0))))
    customers = []
    for index in range(config.n_customers):
        rng = _customer_stream(config.seed, index)
        if config.acquisition_window_days > 0.0:
            acquisition = float(rng.uniform(0.0, config.acquisition_window_days))
        else:
            acquisition = 0.0
        customers.append(
            simulate_customer(
                config.params, config.spend, config.coupon_prob,
                config.total_days, rng,
                acquisition_day=acquisition,
                customer_id=f"c{index:0{width}d}",
            )
        )
    return customers


def holdout_truth(config: SimConfig, customer: SimCustomer) -> tuple[int, float]:
    """Continuous-time holdout count and revenue (the latent truth; the
    day-resolution CSV may merge same-day events)."""
    start = config.observation_days
    end = config.total_days
    count = 0
    revenue = 0.0
    for when, amount in zip(customer.absolute_times, customer.amounts):
        if start < when <= end:
            count += 1
            revenue += amount
    return count, revenue


def transactions_from(config: SimConfig, customer: SimCustomer) -> list[Transaction]:
    rows = []
    for when, amount, coupon in zip(
        customer.absolute_times, customer.amounts, customer.coupons
    ):
        rows.append(
            Transaction(
                customer_id=customer.customer_id,
                date=config.origin + timedelta(days=int(math.floor(when))),
                amount=amount,
                coupon_used=bool(coupon),
            )
        )
    return rows


def summary_from(config: SimConfig, customer: SimCustomer) -> CustomerSummary:
    """Exact continuous-time calibration summary (no day rounding)."""
    cutoff_rel = config.observation_days - customer.acquisition_day
    events = [t for t in customer.event_times if t <= cutoff_rel]
    repeat_amounts = customer.amounts[1:len(events) + 1]
    gaps = tuple(np.diff([0.0, *events]).tolist())
    return CustomerSummary(
        customer_id=customer.customer_id,
        x=len(events),
        t_x=events[-1] if events else 0.0,
        T=cutoff_rel,
        m_bar=float(np.mean(repeat_amounts)) if repeat_amounts else None,
        interarrivals=gaps,
    )


def simulate_summaries(config: SimConfig) -> tuple[
    list[CustomerSummary], dict[str, tuple[int, float]], list[SimCustomer]
]:
    """Continuous-time summaries, holdout truth, and the latent customers."""
    customers = simulate_population(config)
    summaries = [summary_from(config, c) for c in customers]
    truth = {c.customer_id: holdout_truth(config, c) for c in customers}
    return summaries, truth, customers


def simulate_cohort(config: SimConfig, out_dir) -> tuple[str, str]:
    """Emit transactions.csv (pipeline input format) and ground_truth.csv.

    Deterministic given the config; returns the two file paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    txn_path = os.path.join(out_dir, TRANSACTIONS_FILENAME)
    truth_path = os.path.join(out_dir, GROUND_TRUTH_FILENAME)
    customers = simulate_population(config)

    with open(txn_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["customer_id", "date", "amount", "coupon"])
        for customer in customers:
            for txn in transactions_from(config, customer):
                writer.writerow(
                    [txn.customer_id, txn.date.isoformat(), repr(txn.amount),
                     int(txn.coupon_used)]
                )

    with open(truth_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(GROUND_TRUTH_HEADER.split(","))
        for customer in customers:
            count, revenue = holdout_truth(config, customer)
            writer.writerow(
                [customer.customer_id, repr(customer.lam), repr(customer.mu),
                 repr(customer.acquisition_day + customer.dropout_time),
                 count, repr(revenue)]
            )
    return txn_path, truth_path


def read_ground_truth(path) -> dict[str, dict[str, float]]:
    truth = {}
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            truth[row["customer_id"]] = {
                "lambda": float(row["lambda"]),
                "mu": float(row["mu"]),
                "dropout_day": float(row["dropout_day"]),
                "true_holdout_count": float(row["true_holdout_count"]),
                "true_holdout_revenue": float(row["true_holdout_revenue"]),
            }
    return truth
