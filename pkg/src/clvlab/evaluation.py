"""Holdout metrics and side-by-side model comparison reports.

The headline number is aggregate accuracy: one minus the clamped relative
error between total predicted and total actual holdout quantity. MAE,
RMSE, Spearman rank correlation (average ranks on ties), and top-decile
lift are reported alongside so any reasonable reading of "accuracy" is
covered; every report names its target kind.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

_ACCURACY_EPS = 1e-9

QUALITATIVE_NOTES = """\
Statistical model (buy-till-you-die family):
  + fast to fit, no long training runs
  + needs only purchase dates and amounts, no feature engineering
  + produces a per-customer probability of still being active
  + expected purchase counts and amounts are easy to explain
Neural network:
  + can absorb additional data fields about products or customers
  + quick to retrain when market conditions shift
"""


@dataclass
class EvalReport:
    model_name: str
    aggregate_accuracy: float
    mae: float
    rmse: float
    rank_correlation: float
    top_decile_lift: float
    n_customers: int
    target_kind: str
    window: str

    def __post_init__(self):
        if not 0.0 <= self.aggregate_accuracy <= 1.0:
            raise ValueError("aggregate_accuracy must lie in [0, 1]")
        if self.n_customers <= 0:
            raise ValueError("n_customers must be positive")


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; ties share the average of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_values = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman correlation with average ranks; 1.0 for identical vectors,
    0.0 when either side is constant (no ordering information)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.array_equal(a, b):
        return 1.0
    ra, rb = _average_ranks(a), _average_ranks(b)
    sa, sb = ra.std(), rb.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.mean((ra - ra.mean()) * (rb - rb.mean())) / (sa * sb))


def compute_metrics(predictions: dict[str, float], actuals: dict[str, float],
                    target_kind: str, model_name: str = "model",
                    window: str = "") -> EvalReport:
    """Metrics over customers aligned by id.

    aggregate_accuracy = max(0, 1 - |sum(pred) - sum(actual)| / max(sum(actual), eps))
    top_decile_lift = mean actual of the top 10% by prediction over the
    overall mean actual (1 when the overall mean is 0).
    """
    if len(predictions) == 0 or len(actuals) == 0:
        raise ValueError("need at least one customer")
    missing = sorted(set(predictions) ^ set(actuals))
    if missing:
        shown = ", ".join(missing[:5])
        raise ValueError(f"prediction/actual id mismatch; first missing: {shown}")

    ids = sorted(predictions)
    pred = np.array([predictions[i] for i in ids], dtype=float)
    act = np.array([actuals[i] for i in ids], dtype=float)

    total_actual = float(act.sum())
    accuracy = max(
        0.0, 1.0 - abs(float(pred.sum()) - total_actual) / max(total_actual, _ACCURACY_EPS)
    )
    errors = pred - act
    mae = float(np.mean(np.abs(errors)))
    rmse = float(np.sqrt(np.mean(errors ** 2)))

    n_top = max(1, int(round(len(ids) / 10.0)))
    by_prediction = sorted(range(len(ids)), key=lambda i: (-pred[i], ids[i]))
    top = np.array(by_prediction[:n_top])
    overall_mean = float(act.mean())
    lift = 1.0 if overall_mean == 0.0 else float(act[top].mean()) / overall_mean

    return EvalReport(
        model_name=model_name,
        aggregate_accuracy=accuracy,
        mae=mae,
        rmse=rmse,
        rank_correlation=spearman(pred, act),
        top_decile_lift=lift,
        n_customers=len(ids),
        target_kind=target_kind,
        window=window,
    )


@dataclass
class ComparisonDocument:
    reports: list[EvalReport]
    target_kind: str
    window: str
    calibration_end: str
    holdout_days: int
    timings: dict[str, dict[str, float]] = field(default_factory=dict)
    notes: str = QUALITATIVE_NOTES

    def to_json(self, include_timings: bool = False) -> str:
        payload = {
            "reports": [asdict(r) for r in self.reports],
            "target_kind": self.target_kind,
            "window": self.window,
            "calibration_end": self.calibration_end,
            "holdout_days": self.holdout_days,
            "notes": self.notes,
        }
        if include_timings:
            payload["timings"] = self.timings
        return json.dumps(payload, indent=2, sort_keys=True)


def render_accuracy_table(reports: list[EvalReport]) -> str:
    """Two-column layout: one column per model, accuracy row first."""
    names = [r.model_name for r in reports]
    widths = [max(len(n), 14) for n in names]
    label_width = max(len("% Accuracy on hold-out period"), 10)

    def row(label: str, cells: list[str]) -> str:
        body = "\t".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{label.ljust(label_width)}\t{body}"

    lines = [
        row("", names),
        row("% Accuracy on hold-out period",
            [f"{100.0 * r.aggregate_accuracy:.1f}%" for r in reports]),
    ]
    return "\n".join(lines)


def render_comparison(document: ComparisonDocument) -> str:
    reports = document.reports
    lines = [
        f"Holdout comparison ({document.window})",
        f"target: {document.target_kind}; calibration end {document.calibration_end}; "
        f"holdout {document.holdout_days} days; n={reports[0].n_customers if reports else 0}",
        "",
        render_accuracy_table(reports),
        "",
    ]
    header = f"{'model':24s} {'accuracy':>9s} {'mae':>10s} {'rmse':>10s} " \
             f"{'spearman':>9s} {'lift@10%':>9s}"
    lines.append(header)
    for r in reports:
        lines.append(
            f"{r.model_name:24s} {r.aggregate_accuracy:9.4f} {r.mae:10.4f} "
            f"{r.rmse:10.4f} {r.rank_correlation:9.4f} {r.top_decile_lift:9.4f}"
        )
    if document.timings:
        lines.append("")
        lines.append("wall-clock seconds (not byte-reproducible; kept out of "
                     "deterministic artifacts):")
        for model, spans in sorted(document.timings.items()):
            parts = ", ".join(f"{k}={v:.2f}s" for k, v in sorted(spans.items()))
            lines.append(f"  {model}: {parts}")
    lines.append("")
    lines.append(document.notes)
    return "\n".join(lines)


def compare(model_predictions: dict[str, dict[str, float]],
            actuals: dict[str, float], target_kind: str,
            calibration_end: str, holdout_days: int,
            timings: dict[str, dict[str, float]] | None = None
            ) -> ComparisonDocument:
    """One EvalReport per model over the identical holdout customer set."""
    window = f"holdout of {holdout_days} days after {calibration_end}"
    reports = [
        compute_metrics(preds, actuals, target_kind, model_name=name, window=window)
        for name, preds in sorted(model_predictions.items())
    ]
    return ComparisonDocument(
        reports=reports,
        target_kind=target_kind,
        window=window,
        calibration_end=calibration_end,
        holdout_days=holdout_days,
        timings=timings or {},
    )


def write_pairs_csv(predictions: dict[str, float], actuals: dict[str, float],
                    path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["customer_id", "prediction", "actual"])
        for cid in sorted(predictions):
            writer.writerow([cid, repr(predictions[cid]), repr(actuals[cid])])
