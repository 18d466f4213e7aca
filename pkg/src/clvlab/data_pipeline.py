"""Transaction ingestion, cleaning, RFM-style summaries, features, and the
calibration/holdout split.

All time arithmetic is in days (as real numbers). Same-day purchases of one
customer are merged into a single transaction so that interarrival gaps are
strictly positive, and negative amounts (refunds) are dropped and counted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Sequence

FEATURE_NAMES = (
    "lifetime_duration",
    "num_purchases",
    "avg_gaps",
    "avg_revenue",
    "days_ago_first_buy",
    "days_ago_last_buy",
    "num_coupons",
)

REQUIRED_COLUMNS = ("customer_id", "date", "amount")
COUPON_COLUMN = "coupon"


class PipelineError(Exception):
    """Base class for ingestion and summarization errors."""


class InputFileError(PipelineError):
    """File missing or unreadable."""


class MissingColumnError(PipelineError):
    def __init__(self, column: str):
        super().__init__(f"input header is missing required column '{column}'")
        self.column = column


class MalformedRowError(PipelineError):
    def __init__(self, row_number: int, detail: str):
        super().__init__(f"row {row_number}: {detail}")
        self.row_number = row_number


@dataclass(frozen=True)
class Transaction:
    customer_id: str
    date: date
    amount: float
    coupon_used: bool = False


@dataclass(frozen=True)
class CleaningPolicy:
    """What cleaning does; defaults implement the documented conventions."""

    merge_same_day: bool = True
    drop_negative_amounts: bool = True


@dataclass
class CleaningStats:
    rows_read: int = 0
    merged_count: int = 0
    dropped_negative: int = 0


@dataclass(frozen=True)
class SplitConfig:
    calibration_end: date
    holdout_days: int = 182

    def __post_init__(self):
        if self.holdout_days <= 0:
            raise ValueError("holdout_days must be a positive integer")

    @property
    def holdout_end(self) -> date:
        return self.calibration_end + timedelta(days=self.holdout_days)

    def validate_against(self, max_date: date) -> None:
        if self.holdout_end > max_date:
            raise ValueError(
                f"holdout window ends {self.holdout_end} but the dataset "
                f"ends {max_date}"
            )


@dataclass
class CustomerSummary:
    """Per-customer sufficient statistics over the calibration window.

    x counts repeat transactions (the first purchase is excluded), t_x is
    days from first purchase to the last calibration purchase, T is days
    from first purchase to the calibration cutoff, m_bar the mean repeat
    spend (None when x == 0), and interarrivals the day gaps between
    consecutive calibration purchases (None when not loaded; the timing
    regularity model requires them).
    """

    customer_id: str
    x: int
    t_x: float
    T: float
    m_bar: float | None
    interarrivals: tuple[float, ...] | None = field(default=None)

    def __post_init__(self):
        if not (0.0 <= self.t_x <= self.T):
            raise ValueError(f"{self.customer_id}: need 0 <= t_x <= T")
        if self.interarrivals is not None and self.x != len(self.interarrivals):
            raise ValueError(f"{self.customer_id}: x != len(interarrivals)")
        if self.x == 0 and self.t_x != 0.0:
            raise ValueError(f"{self.customer_id}: x == 0 requires t_x == 0")


@dataclass(frozen=True)
class FeatureVector:
    lifetime_duration: float
    num_purchases: int
    avg_gaps: float
    avg_revenue: float
    days_ago_first_buy: float
    days_ago_last_buy: float
    num_coupons: int

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.lifetime_duration,
            float(self.num_purchases),
            self.avg_gaps,
            self.avg_revenue,
            self.days_ago_first_buy,
            self.days_ago_last_buy,
            float(self.num_coupons),
        )


@dataclass
class SummarizeResult:
    summaries: list[CustomerSummary]
    excluded_after_cutoff: int


def _parse_date(text: str, row_number: int) -> date:
    try:
        return date.fromisoformat(text.strip())
    except ValueError:
        raise MalformedRowError(row_number, f"malformed date {text!r}") from None


def _parse_amount(text: str, row_number: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise MalformedRowError(row_number, f"malformed amount {text!r}") from None


def _parse_coupon(text: str, row_number: int) -> bool:
    value = text.strip()
    if value in ("0", ""):
        return False
    if value == "1":
        return True
    raise MalformedRowError(row_number, f"coupon flag must be 0 or 1, got {text!r}")


def parse_transactions(
    path, cleaning: CleaningPolicy = CleaningPolicy()
) -> tuple[list[Transaction], CleaningStats]:
    """Read, clean, and sort a transaction CSV.

    Output is sorted by (customer_id, date). Same-day duplicates for one
    customer are merged (amounts summed, coupon flags OR-ed) and negative
    amounts dropped, both counted in CleaningStats.
    """
    stats = CleaningStats()
    try:
        handle = open(path, "r", newline="", encoding="utf-8")
    except OSError as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from None

    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumnError(REQUIRED_COLUMNS[0]) from None
        header = [h.strip() for h in header]
        for column in REQUIRED_COLUMNS:
            if column not in header:
                raise MissingColumnError(column)
        idx = {name: header.index(name) for name in header}
        has_coupon = COUPON_COLUMN in idx

        rows: list[Transaction] = []
        for row_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise MalformedRowError(row_number, f"expected {len(header)} fields")
            stats.rows_read += 1
            amount = _parse_amount(row[idx["amount"]], row_number)
            if amount < 0.0 and cleaning.drop_negative_amounts:
                stats.dropped_negative += 1
                continue
            rows.append(
                Transaction(
                    customer_id=row[idx["customer_id"]].strip(),
                    date=_parse_date(row[idx["date"]], row_number),
                    amount=amount,
                    coupon_used=(
                        _parse_coupon(row[idx[COUPON_COLUMN]], row_number)
                        if has_coupon
                        else False
                    ),
                )
            )

    rows.sort(key=lambda t: (t.customer_id, t.date))
    if not cleaning.merge_same_day:
        return rows, stats

    merged: list[Transaction] = []
    for txn in rows:
        if merged and merged[-1].customer_id == txn.customer_id and merged[-1].date == txn.date:
            prev = merged[-1]
            merged[-1] = Transaction(
                customer_id=prev.customer_id,
                date=prev.date,
                amount=prev.amount + txn.amount,
                coupon_used=prev.coupon_used or txn.coupon_used,
            )
            stats.merged_count += 1
        else:
            merged.append(txn)
    return merged, stats


def _by_customer(transactions: Iterable[Transaction]) -> dict[str, list[Transaction]]:
    grouped: dict[str, list[Transaction]] = {}
    for txn in transactions:
        grouped.setdefault(txn.customer_id, []).append(txn)
    for txns in grouped.values():
        txns.sort(key=lambda t: t.date)
    return grouped


def summarize(
    transactions: Sequence[Transaction], split: SplitConfig
) -> SummarizeResult:
    """Compute per-customer (x, t_x, T, m_bar, interarrivals) from the
    calibration window. Customers first seen after the cutoff are excluded
    and counted."""
    summaries: list[CustomerSummary] = []
    excluded = 0
    for customer_id, txns in sorted(_by_customer(transactions).items()):
        first = txns[0].date
        if first > split.calibration_end:
            excluded += 1
            continue
        calib = [t for t in txns if t.date <= split.calibration_end]
        gaps = tuple(
            float((b.date - a.date).days) for a, b in zip(calib[:-1], calib[1:])
        )
        repeat_amounts = [t.amount for t in calib[1:]]
        summaries.append(
            CustomerSummary(
                customer_id=customer_id,
                x=len(calib) - 1,
                t_x=float((calib[-1].date - first).days),
                T=float((split.calibration_end - first).days),
                m_bar=(sum(repeat_amounts) / len(repeat_amounts)) if repeat_amounts else None,
                interarrivals=gaps,
            )
        )
    return SummarizeResult(summaries, excluded)


def make_features(
    transactions: Sequence[Transaction], as_of: date
) -> FeatureVector:
    """Feature vector for one customer from transactions on or before as_of."""
    txns = sorted((t for t in transactions if t.date <= as_of), key=lambda t: t.date)
    if not txns:
        who = transactions[0].customer_id if transactions else "<unknown>"
        raise PipelineError(f"customer {who}: no transactions on or before {as_of}")
    first, last = txns[0].date, txns[-1].date
    gaps = [float((b.date - a.date).days) for a, b in zip(txns[:-1], txns[1:])]
    return FeatureVector(
        lifetime_duration=float((last - first).days),
        num_purchases=len(txns),
        avg_gaps=(sum(gaps) / len(gaps)) if gaps else 0.0,
        avg_revenue=sum(t.amount for t in txns) / len(txns),
        days_ago_first_buy=float((as_of - first).days),
        days_ago_last_buy=float((as_of - last).days),
        num_coupons=sum(1 for t in txns if t.coupon_used),
    )


def holdout_targets(
    transactions: Sequence[Transaction], split: SplitConfig
) -> dict[str, tuple[int, float]]:
    """Per retained calibration customer: (count, revenue) over the holdout
    window (calibration_end, calibration_end + holdout_days]. Customers with
    no holdout purchases map to (0, 0.0)."""
    targets: dict[str, tuple[int, float]] = {}
    for customer_id, txns in sorted(_by_customer(transactions).items()):
        if txns[0].date > split.calibration_end:
            continue
        inside = [
            t for t in txns
            if split.calibration_end < t.date <= split.holdout_end
        ]
        targets[customer_id] = (len(inside), sum(t.amount for t in inside))
    return targets


# ---------------------------------------------------------------------------
# file formats


def write_summaries(summaries: Sequence[CustomerSummary], path, sidecar_path) -> None:
    """summaries CSV `customer_id,x,t_x,T,m_bar` plus the interarrival
    sidecar, one `customer_id,g1;g2;...` line per customer."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["customer_id", "x", "t_x", "T", "m_bar"])
        for s in summaries:
            writer.writerow(
                [s.customer_id, s.x, repr(s.t_x), repr(s.T),
                 "" if s.m_bar is None else repr(s.m_bar)]
            )
    with open(sidecar_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        for s in summaries:
            writer.writerow([s.customer_id, ";".join(repr(g) for g in s.interarrivals)])


def read_summaries(path, sidecar_path=None) -> list[CustomerSummary]:
    gaps_by_id: dict[str, tuple[float, ...]] = {}
    if sidecar_path is not None:
        with open(sidecar_path, "r", newline="", encoding="utf-8") as handle:
            for row in csv.reader(handle):
                if not row:
                    continue
                cid, joined = row[0], row[1] if len(row) > 1 else ""
                gaps_by_id[cid] = tuple(
                    float(g) for g in joined.split(";") if g != ""
                )
    summaries = []
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        next(reader)
        for row in reader:
            if not row:
                continue
            cid, x, t_x, T, m_bar = row
            summaries.append(
                CustomerSummary(
                    customer_id=cid,
                    x=int(x),
                    t_x=float(t_x),
                    T=float(T),
                    m_bar=float(m_bar) if m_bar else None,
                    interarrivals=gaps_by_id.get(cid) if sidecar_path is not None else None,
                )
            )
    return summaries


def write_features(rows: Sequence[tuple[str, FeatureVector]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["customer_id", *FEATURE_NAMES])
        for customer_id, fv in rows:
            writer.writerow([customer_id, *[repr(v) for v in fv.as_tuple()]])


def read_features(path) -> tuple[list[str], list[list[float]]]:
    ids: list[str] = []
    rows: list[list[float]] = []
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        if header[1:] != list(FEATURE_NAMES):
            raise PipelineError(f"unexpected feature header in {path}")
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, rows
