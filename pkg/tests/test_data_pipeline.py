import csv
from datetime import date

import pytest

from clvlab.data_pipeline import (
    CleaningPolicy,
    CustomerSummary,
    FEATURE_NAMES,
    InputFileError,
    MalformedRowError,
    MissingColumnError,
    PipelineError,
    SplitConfig,
    Transaction,
    holdout_targets,
    make_features,
    parse_transactions,
    read_features,
    read_summaries,
    summarize,
    write_features,
    write_summaries,
)


def write_csv(path, rows, header="customer_id,date,amount,coupon"):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(header + "\n")
        for row in rows:
            handle.write(",".join(str(v) for v in row) + "\n")
    return path


class TestParseTransactions:
    def test_same_day_merge(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", [
            ("c1", "2020-01-05", 10.0, 0),
            ("c1", "2020-01-05", 5.0, 1),
        ])
        txns, stats = parse_transactions(path)
        assert len(txns) == 1
        assert txns[0].amount == 15.0
        assert txns[0].coupon_used is True
        assert stats.merged_count == 1

    def test_negative_amount_dropped(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", [("c1", "2020-01-05", -3.0, 0)])
        txns, stats = parse_transactions(path)
        assert txns == []
        assert stats.dropped_negative == 1

    def test_empty_file_with_header(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", [])
        txns, stats = parse_transactions(path)
        assert txns == []
        assert stats.rows_read == 0
        assert stats.merged_count == 0

    def test_rows_sorted_and_coupon_optional(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", [
            ("c2", "2020-02-01", 1.0),
            ("c1", "2020-03-01", 2.0),
            ("c1", "2020-01-01", 3.0),
        ], header="customer_id,date,amount")
        txns, _ = parse_transactions(path)
        assert [(t.customer_id, t.date.isoformat()) for t in txns] == [
            ("c1", "2020-01-01"), ("c1", "2020-03-01"), ("c2", "2020-02-01"),
        ]
        assert all(t.coupon_used is False for t in txns)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputFileError):
            parse_transactions(tmp_path / "absent.csv")

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", [], header="customer_id,when,amount")
        with pytest.raises(MissingColumnError) as info:
            parse_transactions(path)
        assert info.value.column == "date"

    def test_malformed_date_names_row(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", [
            ("c1", "2020-01-05", 1.0, 0),
            ("c1", "05/06/2020", 1.0, 0),
        ])
        with pytest.raises(MalformedRowError) as info:
            parse_transactions(path)
        assert info.value.row_number == 3

    def test_merge_can_be_disabled(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", [
            ("c1", "2020-01-05", 10.0, 0),
            ("c1", "2020-01-05", 5.0, 0),
        ])
        txns, stats = parse_transactions(path, CleaningPolicy(merge_same_day=False))
        assert len(txns) == 2
        assert stats.merged_count == 0


def txn(cid, iso, amount=1.0, coupon=False):
    return Transaction(cid, date.fromisoformat(iso), amount, coupon)


class TestSummarize:
    def test_direct_arithmetic(self):
        rows = [txn("c1", "2020-01-01", 5.0), txn("c1", "2020-01-11", 7.0),
                txn("c1", "2020-01-31", 9.0)]
        split = SplitConfig(date(2020, 2, 20), 30)
        result = summarize(rows, split)
        (s,) = result.summaries
        assert (s.x, s.t_x, s.T) == (2, 30.0, 50.0)
        assert s.interarrivals == (10.0, 20.0)
        assert s.m_bar == pytest.approx(8.0)

    def test_single_purchase(self):
        rows = [txn("c1", "2020-01-01")]
        result = summarize(rows, SplitConfig(date(2020, 4, 10), 30))
        (s,) = result.summaries
        assert (s.x, s.t_x, s.T) == (0, 0.0, 100.0)
        assert s.m_bar is None
        assert s.interarrivals == ()

    def test_customer_after_cutoff_excluded(self):
        rows = [txn("c1", "2020-01-01"), txn("c2", "2020-07-15")]
        result = summarize(rows, SplitConfig(date(2020, 6, 30), 182))
        assert [s.customer_id for s in result.summaries] == ["c1"]
        assert result.excluded_after_cutoff == 1

    def test_brute_force_agreement(self):
        # independent recomputation from an unsorted row list
        import random

        rng = random.Random(0)
        rows = []
        for cid in ("a", "b", "c"):
            days = sorted(rng.sample(range(0, 170), rng.randint(1, 12)))
            rows += [txn(cid, date(2020, 1, 1).fromordinal(
                date(2020, 1, 1).toordinal() + d).isoformat()) for d in days]
        rng.shuffle(rows)
        split = SplitConfig(date(2020, 5, 1), 30)
        result = summarize(sorted(rows, key=lambda t: (t.customer_id, t.date)), split)
        for s in result.summaries:
            mine = [t.date for t in rows
                    if t.customer_id == s.customer_id and t.date <= split.calibration_end]
            mine.sort()
            assert s.x == len(mine) - 1
            assert s.t_x == float((mine[-1] - mine[0]).days)
            assert s.T == float((split.calibration_end - mine[0]).days)
            assert sum(s.interarrivals) == pytest.approx(s.t_x)

    def test_invalid_summary_rejected(self):
        with pytest.raises(ValueError):
            CustomerSummary("bad", 1, 60.0, 50.0, 1.0, (60.0,))
        with pytest.raises(ValueError):
            CustomerSummary("bad", 0, 5.0, 50.0, None, ())


class TestMakeFeatures:
    def test_two_purchase_example(self):
        rows = [txn("c1", "2020-01-01", 100.0, coupon=True),
                txn("c1", "2020-03-01", 50.0)]
        fv = make_features(rows, date(2020, 6, 29))
        assert fv.as_tuple() == (60.0, 2.0, 60.0, 75.0, 180.0, 120.0, 1.0)

    def test_single_purchase_on_as_of(self):
        fv = make_features([txn("c1", "2020-06-29", 10.0)], date(2020, 6, 29))
        assert fv.as_tuple() == (0.0, 1.0, 0.0, 10.0, 0.0, 0.0, 0.0)

    def test_feature_order_matches_contract(self):
        assert FEATURE_NAMES == (
            "lifetime_duration", "num_purchases", "avg_gaps", "avg_revenue",
            "days_ago_first_buy", "days_ago_last_buy", "num_coupons",
        )

    def test_no_transactions_before_as_of(self):
        with pytest.raises(PipelineError, match="c1"):
            make_features([txn("c1", "2020-06-30")], date(2020, 6, 29))

    def test_pure_and_idempotent(self):
        rows = [txn("c1", "2020-01-01", 10.0), txn("c1", "2020-02-01", 20.0)]
        first = make_features(rows, date(2020, 3, 1))
        second = make_features(rows, date(2020, 3, 1))
        assert first == second
        assert first.lifetime_duration + first.days_ago_last_buy == \
            first.days_ago_first_buy


class TestHoldoutTargets:
    def test_single_holdout_purchase(self):
        rows = [txn("c1", "2020-01-01"), txn("c1", "2020-07-15", 40.0)]
        targets = holdout_targets(rows, SplitConfig(date(2020, 6, 30), 182))
        assert targets["c1"] == (1, 40.0)

    def test_no_holdout_purchases(self):
        rows = [txn("c1", "2020-01-01")]
        targets = holdout_targets(rows, SplitConfig(date(2020, 6, 30), 182))
        assert targets["c1"] == (0, 0.0)

    def test_paper_style_default_split(self):
        split = SplitConfig(date(2020, 6, 30))
        assert split.holdout_days == 182
        assert split.holdout_end == date(2020, 12, 29)
        split.validate_against(date(2020, 12, 29))
        with pytest.raises(ValueError):
            split.validate_against(date(2020, 12, 28))

    def test_total_count_matches_window_rows(self):
        rows = [txn("c1", "2020-01-01"), txn("c1", "2020-07-02"),
                txn("c2", "2020-02-01"), txn("c2", "2020-08-01"),
                txn("c2", "2020-09-01"), txn("c3", "2021-06-01")]
        split = SplitConfig(date(2020, 6, 30), 182)
        targets = holdout_targets(rows, split)
        in_window = [t for t in rows
                     if split.calibration_end < t.date <= split.holdout_end
                     and t.customer_id in targets]
        assert sum(c for c, _ in targets.values()) == len(in_window)


class TestFileFormats:
    def test_summaries_round_trip(self, tmp_path):
        summaries = [
            CustomerSummary("c1", 2, 30.0, 50.0, 8.0, (10.0, 20.0)),
            CustomerSummary("c2", 0, 0.0, 75.0, None, ()),
        ]
        write_summaries(summaries, tmp_path / "s.csv", tmp_path / "g.csv")
        back = read_summaries(tmp_path / "s.csv", tmp_path / "g.csv")
        assert back == summaries
        header = (tmp_path / "s.csv").read_text().splitlines()[0]
        assert header == "customer_id,x,t_x,T,m_bar"

    def test_features_round_trip(self, tmp_path):
        rows = [txn("c1", "2020-01-01", 100.0, coupon=True),
                txn("c1", "2020-03-01", 50.0)]
        fv = make_features(rows, date(2020, 6, 29))
        write_features([("c1", fv)], tmp_path / "f.csv")
        header = (tmp_path / "f.csv").read_text().splitlines()[0]
        assert header == "customer_id," + ",".join(FEATURE_NAMES)
        ids, values = read_features(tmp_path / "f.csv")
        assert ids == ["c1"]
        assert tuple(values[0]) == fv.as_tuple()
