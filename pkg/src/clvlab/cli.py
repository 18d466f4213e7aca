"""Command-line surface: summarize, fit, train, predict, simulate, evaluate,
and the end-to-end compare pipeline.

Every run echoes its resolved configuration and seed. Artifacts are plain
CSV/JSON/text files; identical inputs, flags, and seed reproduce identical
bytes (wall-clock timings go to a separate timings.json that is documented
as non-reproducible). Exit codes: 0 success, 1 usage error, 2 data/model
error.

Heavy imports happen inside handlers so --threads can cap the BLAS pool
through environment variables before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import date, timedelta

USAGE_EXIT = 1
DATA_EXIT = 2

MODEL_PNBD = "pareto_nbd"
MODEL_GG = "gamma_gamma"
MODEL_PGGG = "pggg_global_k"
MODEL_NN = "neural_net"


def _parse_date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def read_config_file(path) -> dict[str, str]:
    """Flat key-value format: one `key = value` per line, # comments."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_number}: expected key = value")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clvlab",
        description="customer lifetime value laboratory",
    )
    parser.add_argument("--seed", type=int, default=None,
                        help="random seed (default 42; always echoed)")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP parallelism")
    parser.add_argument("--config", default=None,
                        help="flat key=value config file; flags override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="transactions -> summaries/features/targets")
    p.add_argument("--input", required=True)
    p.add_argument("--cutoff", type=_parse_date, required=True)
    p.add_argument("--holdout-days", type=int, default=182)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fit", help="fit a statistical model")
    p.add_argument("model", choices=["pnbd", "gg", "pggg"])
    p.add_argument("--summaries", required=True)
    p.add_argument("--sidecar", default=None,
                   help="interarrival sidecar (required for pggg)")
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=64)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--max-evaluations", type=int, default=20_000)

    p = sub.add_parser("train", help="train the neural network")
    p.add_argument("model", choices=["nn"])
    p.add_argument("--features", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--target-kind", choices=["count", "revenue"], default="count")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="score customers with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--spend-model", default=None,
                   help="gamma_gamma document for LTV output")
    p.add_argument("--summaries", default=None)
    p.add_argument("--sidecar", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--horizon-days", type=float, default=182.0)
    p.add_argument("--draws", type=int, default=10_000)
    p.add_argument("--grid-size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="simulate a cohort from a config file")
    p.add_argument("--config", dest="sim_config", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("evaluate", help="metrics for a prediction file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--actuals", required=True,
                   help="holdout_targets.csv from summarize")
    p.add_argument("--target-kind", choices=["count", "revenue"], default="count")
    p.add_argument("--model-name", default="model")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="full pipeline: fit all models and compare")
    p.add_argument("--input", required=True)
    p.add_argument("--cutoff", type=_parse_date, required=True)
    p.add_argument("--holdout-days", type=int, default=182)
    p.add_argument("--target-kind", choices=["count", "revenue"], default="count")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--draws", type=int, default=10_000)
    p.add_argument("--grid-size", type=int, default=64)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    return parser


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: str(v) for k, v in sorted(vars(args).items()) if v is not None}
    print(f"resolved configuration: {json.dumps(resolved, sort_keys=True)}")
    print(f"seed: {args.seed}")


def _apply_config_file(args: argparse.Namespace, parser_defaults: dict) -> None:
    if not args.config:
        return
    overrides = read_config_file(args.config)
    for key, raw in overrides.items():
        if not hasattr(args, key):
            raise ValueError(f"unknown config key {key!r} in {args.config}")
        current = getattr(args, key)
        default = parser_defaults.get(key)
        if current is None or current == default:
            caster = type(default) if default is not None else str
            if caster is date:
                setattr(args, key, date.fromisoformat(raw))
            elif caster is bool:
                setattr(args, key, raw.lower() in ("1", "true", "yes"))
            else:
                setattr(args, key, caster(raw))


# ---------------------------------------------------------------------------
# handlers


def _cmd_summarize(args) -> int:
    from . import data_pipeline as dp

    transactions, stats = dp.parse_transactions(args.input)
    if not transactions:
        raise dp.PipelineError(f"no usable transactions in {args.input}")
    split = dp.SplitConfig(args.cutoff, args.holdout_days)
    split.validate_against(max(t.date for t in transactions))
    result = dp.summarize(transactions, split)
    targets = dp.holdout_targets(transactions, split)

    os.makedirs(args.out_dir, exist_ok=True)
    dp.write_summaries(result.summaries,
                       os.path.join(args.out_dir, "summaries.csv"),
                       os.path.join(args.out_dir, "interarrivals.csv"))

    by_customer: dict[str, list] = {}
    for txn in transactions:
        by_customer.setdefault(txn.customer_id, []).append(txn)
    feature_rows = []
    for summary in result.summaries:
        fv = dp.make_features(by_customer[summary.customer_id], split.calibration_end)
        feature_rows.append((summary.customer_id, fv))
    dp.write_features(feature_rows, os.path.join(args.out_dir, "features.csv"))

    import csv as _csv
    with open(os.path.join(args.out_dir, "holdout_targets.csv"), "w",
              newline="", encoding="utf-8") as handle:
        writer = _csv.writer(handle)
        writer.writerow(["customer_id", "holdout_count", "holdout_revenue"])
        for cid in sorted(targets):
            count, revenue = targets[cid]
            writer.writerow([cid, count, repr(revenue)])

    with open(os.path.join(args.out_dir, "stats.json"), "w", encoding="utf-8") as handle:
        json.dump({
            "rows_read": stats.rows_read,
            "merged_count": stats.merged_count,
            "dropped_negative": stats.dropped_negative,
            "customers": len(result.summaries),
            "excluded_after_cutoff": result.excluded_after_cutoff,
            "calibration_end": split.calibration_end.isoformat(),
            "holdout_days": split.holdout_days,
        }, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(f"wrote summaries for {len(result.summaries)} customers to {args.out_dir}")
    return 0


def _fit_options(args):
    from ._optim import FitOptions

    return FitOptions(seed=args.seed, restarts=args.restarts,
                      max_evaluations=args.max_evaluations)


def _cmd_fit(args) -> int:
    from . import data_pipeline as dp

    opts = _fit_options(args)
    if args.model == "pnbd":
        from . import pareto_nbd

        summaries = dp.read_summaries(args.summaries, args.sidecar)
        result = pareto_nbd.fit_pnbd(summaries, opts)
        pareto_nbd.save_params(result, args.out)
    elif args.model == "gg":
        from . import spend_model

        summaries = dp.read_summaries(args.summaries, args.sidecar)
        result = spend_model.fit_gg(summaries, opts)
        spend_model.save_params(result, args.out)
    else:
        from . import regularity

        if args.sidecar is None:
            raise ValueError("fit pggg requires --sidecar (interarrival file)")
        summaries = dp.read_summaries(args.summaries, args.sidecar)
        result = regularity.fit_pggg(
            summaries, opts, grid_size=(args.grid_size, args.grid_size)
        )
        regularity.save_params(result, args.out)
    print(f"fitted {args.model}: log_likelihood={result.log_likelihood:.4f} "
          f"converged={result.converged} -> {args.out}")
    return 0


def _read_targets(path, kind: str) -> dict[str, float]:
    import csv as _csv

    column = "holdout_count" if kind == "count" else "holdout_revenue"
    out: dict[str, float] = {}
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = _csv.DictReader(handle)
        if reader.fieldnames is None or column not in reader.fieldnames:
            raise ValueError(f"{path} lacks a {column} column")
        for row in reader:
            out[row["customer_id"]] = float(row[column])
    return out


def _cmd_train(args) -> int:
    from . import data_pipeline as dp
    from . import neural_net as nn

    ids, rows = dp.read_features(args.features)
    targets = _read_targets(args.targets, args.target_kind)
    missing = [i for i in ids if i not in targets][:5]
    if missing:
        raise ValueError(f"targets missing for: {', '.join(missing)}")
    y = [targets[i] for i in ids]
    config = nn.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate, seed=args.seed,
        target_kind=args.target_kind,
    )
    model, history = nn.train(rows, y, config)
    nn.save_model(model, config, args.out)
    print(f"trained nn for {len(history.train_mse)} epochs; "
          f"best val MSE {min(history.val_mse):.6f} -> {args.out}")
    return 0


def _model_kind(path) -> str:
    with open(path, "r", encoding="utf-8") as handle:
        document = json.load(handle)
    return document.get("model") or document.get("format") or ""


def _write_predictions(path, rows: list[tuple], header: list[str]) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _cmd_predict(args) -> int:
    from . import data_pipeline as dp

    kind = _model_kind(args.model)
    gg = None
    if args.spend_model:
        from . import spend_model

        gg = spend_model.load_params(args.spend_model)

    if kind == MODEL_PNBD:
        from . import pareto_nbd, spend_model as sm
        import numpy as np

        if not args.summaries:
            raise ValueError("predict with a pareto_nbd model needs --summaries")
        summaries = dp.read_summaries(args.summaries, args.sidecar)
        params = pareto_nbd.load_params(args.model)
        x = np.array([s.x for s in summaries], dtype=float)
        t_x = np.array([s.t_x for s in summaries])
        T = np.array([s.T for s in summaries])
        expected = pareto_nbd.expected_transactions_arrays(
            params, x, t_x, T, args.horizon_days)
        alive = pareto_nbd.p_alive_arrays(params, x, t_x, T)
        rows, header = [], ["customer_id", "prediction", "p_alive"]
        if gg is not None:
            header.append("expected_ltv")
        for i, s in enumerate(summaries):
            row = [s.customer_id, repr(float(expected[i])), repr(float(alive[i]))]
            if gg is not None:
                row.append(repr(float(expected[i]) * sm.cond_expected_spend(gg, s.x, s.m_bar)))
            rows.append(row)
        _write_predictions(args.out, rows, header)
    elif kind == MODEL_PGGG:
        from . import regularity, spend_model as sm

        if not args.summaries or not args.sidecar:
            raise ValueError("predict with a pggg model needs --summaries and --sidecar")
        summaries = dp.read_summaries(args.summaries, args.sidecar)
        params = regularity.load_params(args.model)
        grid = regularity.build_grid(params, args.grid_size, args.grid_size)
        expected = regularity.forecast_mc_batch(
            params, summaries, args.horizon_days,
            draws=args.draws, seed=args.seed, grid=grid)
        alive = regularity.p_alive_k_batch(params, summaries, grid)
        rows, header = [], ["customer_id", "prediction", "p_alive"]
        if gg is not None:
            header.append("expected_ltv")
        for i, s in enumerate(summaries):
            row = [s.customer_id, repr(float(expected[i])), repr(float(alive[i]))]
            if gg is not None:
                row.append(repr(float(expected[i]) * sm.cond_expected_spend(gg, s.x, s.m_bar)))
            rows.append(row)
        _write_predictions(args.out, rows, header)
    elif kind == MODEL_NN:
        from . import neural_net as nn

        if not args.features:
            raise ValueError("predict with an mlp model needs --features")
        ids, feature_rows = dp.read_features(args.features)
        model, _ = nn.load_model(args.model)
        values = nn.predict(model, feature_rows)
        rows = [[cid, repr(float(v))] for cid, v in zip(ids, values)]
        _write_predictions(args.out, rows, ["customer_id", "prediction"])
    else:
        raise ValueError(f"unrecognized model document: {args.model}")
    print(f"wrote predictions -> {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    from . import regularity, simulation, spend_model

    raw = read_config_file(args.sim_config)

    def need(key):
        if key not in raw:
            raise ValueError(f"simulation config {args.sim_config} lacks {key!r}")
        return raw[key]

    config = simulation.SimConfig(
        n_customers=int(need("n_customers")),
        observation_days=float(need("observation_days")),
        holdout_days=float(need("holdout_days")),
        params=regularity.RegularityParams(
            r=float(need("r")), alpha=float(need("alpha")),
            s=float(need("s")), beta=float(need("beta")),
            k=float(raw.get("k", "1.0")),
        ),
        spend=spend_model.GgParams(
            p=float(need("p")), q=float(need("q")), gamma=float(need("gamma")),
        ),
        coupon_prob=float(raw.get("coupon_prob", "0.0")),
        acquisition_window_days=float(raw.get("acquisition_window_days", "0.0")),
        origin=date.fromisoformat(raw.get("origin", "2020-01-01")),
        seed=int(raw.get("seed", str(args.seed))),
    )
    txn_path, truth_path = simulation.simulate_cohort(config, args.out_dir)
    print(f"simulated {config.n_customers} customers -> {txn_path}, {truth_path}")
    return 0


def _read_prediction_column(path) -> dict[str, float]:
    import csv as _csv

    out: dict[str, float] = {}
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = _csv.DictReader(handle)
        if reader.fieldnames is None or "prediction" not in reader.fieldnames:
            raise ValueError(f"{path} lacks a prediction column")
        for row in reader:
            out[row["customer_id"]] = float(row["prediction"])
    return out


def _cmd_evaluate(args) -> int:
    from . import evaluation
    from dataclasses import asdict

    predictions = _read_prediction_column(args.predictions)
    actuals = _read_targets(args.actuals, args.target_kind)
    report = evaluation.compute_metrics(
        predictions, actuals, args.target_kind, model_name=args.model_name)
    with open(args.out, "w", encoding="utf-8") as handle:
        json.dump(asdict(report), handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(f"{report.model_name}: accuracy={report.aggregate_accuracy:.4f} "
          f"mae={report.mae:.4f} rmse={report.rmse:.4f} -> {args.out}")
    return 0


def _cmd_compare(args) -> int:
    from . import data_pipeline as dp
    from . import evaluation, neural_net as nn, pareto_nbd, regularity, spend_model
    from ._optim import FitOptions
    from dataclasses import asdict
    import numpy as np

    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    opts = FitOptions(seed=args.seed, restarts=args.restarts)
    timings: dict[str, dict[str, float]] = {}

    transactions, stats = dp.parse_transactions(args.input)
    if not transactions:
        raise dp.PipelineError(f"no usable transactions in {args.input}")
    split = dp.SplitConfig(args.cutoff, args.holdout_days)
    split.validate_against(max(t.date for t in transactions))

    calibration = [t for t in transactions if t.date <= split.calibration_end]
    result = dp.summarize(calibration, split)
    summaries = result.summaries
    actual_pairs = dp.holdout_targets(transactions, split)
    actuals = {
        cid: float(pair[0] if args.target_kind == "count" else pair[1])
        for cid, pair in actual_pairs.items()
    }

    dp.write_summaries(summaries, os.path.join(out_dir, "summaries.csv"),
                       os.path.join(out_dir, "interarrivals.csv"))

    # statistical fits on calibration-window summaries only
    t0 = time.perf_counter()
    pnbd_fit = pareto_nbd.fit_pnbd(summaries, opts)
    timings.setdefault(MODEL_PNBD, {})["fit"] = time.perf_counter() - t0
    pareto_nbd.save_params(pnbd_fit, os.path.join(out_dir, "model_pnbd.json"))

    t0 = time.perf_counter()
    gg_fit = spend_model.fit_gg(summaries, opts)
    timings.setdefault(MODEL_GG, {})["fit"] = time.perf_counter() - t0
    spend_model.save_params(gg_fit, os.path.join(out_dir, "model_gg.json"))

    t0 = time.perf_counter()
    pggg_fit = regularity.fit_pggg(
        summaries, opts, grid_size=(args.grid_size, args.grid_size),
        warm_start=pnbd_fit.params)
    timings.setdefault(MODEL_PGGG, {})["fit"] = time.perf_counter() - t0
    regularity.save_params(pggg_fit, os.path.join(out_dir, "model_pggg.json"))

    # neural network: nested calibration-only window so no holdout row is read
    by_customer: dict[str, list] = {}
    for txn in calibration:
        by_customer.setdefault(txn.customer_id, []).append(txn)
    inner_cutoff = split.calibration_end - timedelta(days=split.holdout_days)
    inner_split = dp.SplitConfig(inner_cutoff, split.holdout_days)
    inner_targets = dp.holdout_targets(calibration, inner_split)
    train_rows, train_targets = [], []
    for cid in sorted(inner_targets):
        fv = dp.make_features(by_customer[cid], inner_cutoff)
        train_rows.append(fv.as_tuple())
        pair = inner_targets[cid]
        train_targets.append(float(pair[0] if args.target_kind == "count" else pair[1]))

    config = nn.TrainConfig(epochs=args.epochs, seed=args.seed,
                            target_kind=args.target_kind)
    t0 = time.perf_counter()
    model, history = nn.train(train_rows, train_targets, config)
    timings.setdefault(MODEL_NN, {})["train"] = time.perf_counter() - t0
    nn.save_model(model, config, os.path.join(out_dir, "model_nn.json"))

    # predictions over the identical holdout customer set
    ids = [s.customer_id for s in summaries]
    x = np.array([s.x for s in summaries], dtype=float)
    t_x = np.array([s.t_x for s in summaries])
    T = np.array([s.T for s in summaries])
    horizon = float(split.holdout_days)

    def to_revenue(counts: np.ndarray) -> np.ndarray:
        spend = np.array([
            spend_model.cond_expected_spend(gg_fit.params, s.x, s.m_bar)
            for s in summaries
        ])
        return counts * spend

    t0 = time.perf_counter()
    counts_pnbd = pareto_nbd.expected_transactions_arrays(
        pnbd_fit.params, x, t_x, T, horizon)
    pred_pnbd = counts_pnbd if args.target_kind == "count" else to_revenue(counts_pnbd)
    timings[MODEL_PNBD]["predict"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    grid = regularity.build_grid(pggg_fit.params, args.grid_size, args.grid_size)
    counts_pggg = regularity.forecast_mc_batch(
        pggg_fit.params, summaries, horizon,
        draws=args.draws, seed=args.seed, grid=grid)
    pred_pggg = counts_pggg if args.target_kind == "count" else to_revenue(counts_pggg)
    timings[MODEL_PGGG]["predict"] = time.perf_counter() - t0

    score_rows = [
        dp.make_features(by_customer[cid], split.calibration_end).as_tuple()
        for cid in ids
    ]
    t0 = time.perf_counter()
    pred_nn = nn.predict(model, score_rows)
    timings[MODEL_NN]["predict"] = time.perf_counter() - t0

    model_predictions = {
        MODEL_PNBD: dict(zip(ids, map(float, pred_pnbd))),
        MODEL_PGGG: dict(zip(ids, map(float, pred_pggg))),
        MODEL_NN: dict(zip(ids, map(float, pred_nn))),
    }
    document = evaluation.compare(
        model_predictions, actuals, args.target_kind,
        split.calibration_end.isoformat(), split.holdout_days, timings)

    for name, predictions in model_predictions.items():
        evaluation.write_pairs_csv(
            predictions, actuals, os.path.join(out_dir, f"pairs_{name}.csv"))
    with open(os.path.join(out_dir, "comparison.json"), "w", encoding="utf-8") as handle:
        handle.write(document.to_json(include_timings=False))
        handle.write("\n")
    with open(os.path.join(out_dir, "comparison.txt"), "w", encoding="utf-8") as handle:
        deterministic = evaluation.ComparisonDocument(
            reports=document.reports, target_kind=document.target_kind,
            window=document.window, calibration_end=document.calibration_end,
            holdout_days=document.holdout_days, timings={})
        handle.write(evaluation.render_comparison(deterministic))
        handle.write("\n")
    with open(os.path.join(out_dir, "timings.json"), "w", encoding="utf-8") as handle:
        json.dump(timings, handle, indent=2, sort_keys=True)
        handle.write("\n")

    print(evaluation.render_comparison(document))
    return 0


_HANDLERS = {
    "summarize": _cmd_summarize,
    "fit": _cmd_fit,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "simulate": _cmd_simulate,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return USAGE_EXIT

    try:
        _apply_config_file(args, {})
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT

    if args.seed is None:
        args.seed = 42
    if args.threads is not None:
        for variable in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                         "MKL_NUM_THREADS"):
            os.environ[variable] = str(args.threads)
    _echo_config(args)

    from . import data_pipeline as dp
    from ._optim import DegenerateDataError

    try:
        return _HANDLERS[args.command](args)
    except (dp.PipelineError, DegenerateDataError, OSError, ValueError,
            ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
