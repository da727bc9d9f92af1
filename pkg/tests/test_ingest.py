import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ltvrec.ingest import (
    Dataset, EmptyDatasetError, IngestError, InteractionRecord, estimate_gamma,
    filter_users, group_users, parse_log, scale_rewards, with_gamma, write_log,
)


def _records(spec):
    """``spec`` maps user -> list of (item, reward)."""
    out = []
    for user, events in spec.items():
        for t, (item, r) in enumerate(events):
            out.append(InteractionRecord(user, item, float(r), t))
    return out


class TestParse:
    def test_roundtrip(self, tmp_path):
        recs = [InteractionRecord(1, "a", 1.0, 5), InteractionRecord("u2", 7, 0.25, 0)]
        write_log(recs, tmp_path / "log.csv")
        assert parse_log(tmp_path / "log.csv") == recs

    def test_column_order_and_delimiter(self, tmp_path):
        p = tmp_path / "log.tsv"
        p.write_text("timestamp\treward\titem_id\tuser_id\n3\t1\t10\t4\n")
        assert parse_log(p, "\t") == [InteractionRecord(4, 10, 1.0, 3)]

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestError, match="not found"):
            parse_log(tmp_path / "nope.csv")

    def test_bad_reward_names_line(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("user_id,item_id,reward,timestamp\n1,2,1,0\n1,3,abc,1\n")
        with pytest.raises(IngestError, match=":3:"):
            parse_log(p)

    def test_nan_reward_rejected(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("user_id,item_id,reward,timestamp\n1,2,nan,0\n")
        with pytest.raises(IngestError, match="non-finite"):
            parse_log(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "log.csv"
        p.write_text("user_id,item_id,timestamp\n1,2,0\n")
        with pytest.raises(IngestError, match="reward"):
            parse_log(p)

    def test_negative_timestamp(self):
        with pytest.raises(IngestError):
            InteractionRecord(1, 1, 0.0, -1)


class TestGroupAndFilter:
    def test_stable_sort_by_timestamp(self):
        recs = [InteractionRecord(1, "x", 0, 5), InteractionRecord(1, "y", 0, 2),
                InteractionRecord(1, "z", 0, 5)]
        (log,) = group_users(recs)
        assert [e.item_id for e in log.events] == ["y", "x", "z"]

    def test_count_filter(self):
        ds = filter_users(_records({1: [(0, 1)] * 19, 2: [(0, 1)] * 20}), 20)
        assert [log.user_id for log in ds.logs] == [2]
        assert ds.filter_counts == {"input_users": 2, "after_count_filter": 1,
                                    "after_positive_filter": 1}

    def test_zero_click_user_removed(self):
        spec = {1: [(0, 0)] * 30, 2: [(0, 0)] * 29 + [(1, 1)]}
        ds = filter_users(_records(spec), 20, require_positive=True)
        assert [log.user_id for log in ds.logs] == [2]

    def test_zero_click_rule_ignores_ratings(self):
        spec = {1: [(0, 0)] * 25, 2: [(0, 3.5)] * 25}
        ds = filter_users(_records(spec), 20, require_positive=True)
        assert ds.n_users == 2

    def test_everything_filtered(self):
        with pytest.raises(EmptyDatasetError):
            filter_users(_records({1: [(0, 1)] * 3}), 20)

    def test_item_index_first_appearance(self):
        ds = filter_users(_records({1: [("b", 1), ("a", 0)], 2: [("c", 1), ("b", 1)]}), 1)
        assert ds.item_index == {"b": 0, "a": 1, "c": 2}
        u, i, r = ds.to_triplets()
        np.testing.assert_array_equal(u, [0, 0, 1, 1])
        np.testing.assert_array_equal(i, [0, 1, 2, 0])
        np.testing.assert_array_equal(r, [1, 0, 1, 1])


class TestGamma:
    def test_movielens_figure(self):
        assert estimate_gamma(n_users=6000, n_samples=1_000_000) == pytest.approx(0.994, abs=1e-15)

    def test_one_event_per_user(self):
        ds = filter_users(_records({1: [(0, 1)], 2: [(0, 0)]}), 1)
        assert estimate_gamma(ds) == 0.0

    def test_override(self):
        ds = filter_users(_records({1: [(0, 1)] * 4}), 1)
        assert with_gamma(ds).gamma == pytest.approx(0.75)
        assert with_gamma(ds, 0.5).gamma == 0.5
        with pytest.raises(ValueError):
            with_gamma(ds, 1.0)

    @given(st.integers(1, 1000), st.integers(0, 10_000))
    def test_range(self, m, extra):
        g = estimate_gamma(n_users=m, n_samples=m + extra)
        assert 0.0 <= g < 1.0


class TestScale:
    def test_ratings_to_unit(self):
        ds = filter_users(_records({1: [(0, 1), (1, 3), (2, 5)]}), 1)
        out = scale_rewards(ds)
        np.testing.assert_allclose(out.logs[0].rewards, [0, 0.5, 1])
        assert out.reward_scale == (1.0, 5.0)

    def test_binary_identity(self):
        ds = filter_users(_records({1: [(0, 0), (1, 1)]}), 1)
        np.testing.assert_array_equal(scale_rewards(ds).logs[0].rewards, [0, 1])

    def test_degenerate_range(self):
        ds = filter_users(_records({1: [(0, 4), (1, 4)]}), 1)
        np.testing.assert_array_equal(scale_rewards(ds).logs[0].rewards, [0.5, 0.5])

    @settings(max_examples=50)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=30))
    def test_order_preserving_and_bounded(self, rewards):
        ds = filter_users(_records({1: [(i, r) for i, r in enumerate(rewards)]}), 1)
        out = scale_rewards(ds).logs[0].rewards
        assert out.min() >= 0.0 and out.max() <= 1.0
        r = np.asarray(rewards)
        greater = np.subtract.outer(r, r) > 0
        assert np.all(np.subtract.outer(out, out)[greater] >= 0)
