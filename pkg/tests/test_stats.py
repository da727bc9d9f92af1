import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import rankdata

from ltvrec.stats import (
    BootstrapResult, IndistinguishableError, bootstrap_value, compare_policies, draw_resamples,
    paired_test, sample_state_rows, wilcoxon_one_sided,
)


def brute_force_p(d):
    """P(W+ >= observed) by enumerating every sign assignment."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    obs = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        hits += ranks[np.array(signs, dtype=bool)].sum() >= obs - 1e-9
    return hits / 2 ** d.size


class TestSampleStates:
    def test_per_trajectory_counts(self):
        offsets = np.array([0, 2, 10, 17])
        rows = sample_state_rows(offsets, np.array([0, 1, 1, 2]), 5, np.random.default_rng(0))
        traj = np.searchsorted(offsets, rows, side="right") - 1
        np.testing.assert_array_equal(np.bincount(traj, minlength=3), [2, 10, 5])

    def test_distinct_within_copy(self):
        offsets = np.array([0, 9])
        rows = sample_state_rows(offsets, np.array([0]), 5, np.random.default_rng(1))
        assert np.unique(rows).size == 5

    def test_uniform(self):
        offsets = np.array([0, 10])
        rng = np.random.default_rng(2)
        rows = np.concatenate([sample_state_rows(offsets, np.array([0]), 3, rng) for _ in range(4000)])
        freq = np.bincount(rows, minlength=10) / rows.size
        np.testing.assert_allclose(freq, 0.1, atol=0.01)


class TestBootstrap:
    def test_constant_evaluator(self):
        res = bootstrap_value(10, lambda r: 3.0, B=20, seed=0)
        assert res.interval == (3.0, 3.0) and res.contains(3.0)

    def test_reproducible(self):
        ev = lambda r: float(np.sum(r.index ** 2) + r.state_rng().random())
        a, b = bootstrap_value(50, ev, 30, seed=7), bootstrap_value(50, ev, 30, seed=7)
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.array_equal(a.values, bootstrap_value(50, ev, 30, seed=8).values)

    def test_resample_shape(self):
        for res in draw_resamples(12, 3, seed=1):
            assert res.index.size == 12 and res.counts.sum() == 12

    def test_half_width_of_mean(self):
        x = np.random.default_rng(3).exponential(size=400)
        res = bootstrap_value(x.size, lambda r: float(x[r.index].mean()), B=2000, seed=0)
        expect = 1.959964 * x.std(ddof=0) / np.sqrt(x.size)
        assert res.half_width == pytest.approx(expect, rel=0.08)
        lo, hi = res.interval
        assert lo <= res.mean <= hi

    def test_percentile_interval(self):
        res = BootstrapResult(np.arange(101.0), 0)
        np.testing.assert_allclose(res.percentile_interval(), (2.5, 97.5))

    def test_error_names_resample(self):
        def ev(r):
            if r.b == 3:
                raise ValueError("boom")
            return 0.0
        with pytest.raises(RuntimeError, match="resample 3"):
            bootstrap_value(5, ev, 10)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            bootstrap_value(5, lambda r: 0.0, B=1)


class TestWilcoxon:
    def test_all_positive(self):
        res = wilcoxon_one_sided(np.arange(1, 11.0))
        assert res.p_value == pytest.approx(2.0 ** -10, abs=1e-15)
        assert res.method == "exact"

    def test_alternating(self):
        d = np.tile([1.0, -1.0], 5)
        assert wilcoxon_one_sided(d).p_value >= 0.4

    def test_listed_vector(self):
        d = [3, -1, 2, 4, -2, 5, 1, 6]
        assert wilcoxon_one_sided(d).p_value == pytest.approx(brute_force_p(d), abs=1e-9)

    def test_zeros_dropped(self):
        a = wilcoxon_one_sided([0, 0, 1, 2, -3, 4, 5])
        b = wilcoxon_one_sided([1, 2, -3, 4, 5])
        assert a == b

    def test_errors(self):
        with pytest.raises(IndistinguishableError):
            wilcoxon_one_sided(np.zeros(10))
        with pytest.raises(ValueError, match="at least 5"):
            wilcoxon_one_sided([1, 2, 0, 3])
        with pytest.raises(ValueError):
            wilcoxon_one_sided(np.arange(1, 8.0), method="magic")

    def test_normal_against_exact_large_n(self):
        d = np.random.default_rng(0).normal(0.2, 1, 25)
        ex = wilcoxon_one_sided(d, "exact").p_value
        assert wilcoxon_one_sided(d, "normal").p_value == pytest.approx(ex, abs=0.01)

    def test_normal_matches_scipy(self):
        from scipy.stats import wilcoxon
        d = np.round(np.random.default_rng(1).normal(0.1, 1, 60), 1)
        ours = wilcoxon_one_sided(d).p_value
        ref = wilcoxon(d, alternative="greater", zero_method="wilcox", correction=True,
                       method="approx").pvalue
        assert ours == pytest.approx(ref, rel=1e-9)

    @settings(max_examples=40)
    @given(st.lists(st.integers(-6, 6).filter(bool), min_size=5, max_size=11))
    def test_exact_matches_enumeration(self, d):
        assert wilcoxon_one_sided(d).p_value == pytest.approx(brute_force_p(d), abs=1e-9)

    @settings(max_examples=40)
    @given(st.lists(st.floats(-10, 10).filter(lambda x: abs(x) > 1e-3), min_size=5, max_size=40))
    def test_monotone_odd_transform(self, d):
        d = np.asarray(d)
        p1 = wilcoxon_one_sided(d).p_value
        p2 = wilcoxon_one_sided(np.sign(d) * np.abs(d) ** 3 + d).p_value
        assert p1 == pytest.approx(p2, abs=1e-12)
        assert 0.0 <= p1 <= 1.0

    @settings(max_examples=30)
    @given(st.lists(st.floats(-10, 10), min_size=5, max_size=40, unique=True))
    def test_swap_symmetry(self, a):
        a = np.asarray(a)
        b = a[::-1] + 0.5
        d = b - a
        if np.count_nonzero(d) < 5 or np.unique(np.abs(d[d != 0])).size < np.count_nonzero(d):
            return
        n = np.count_nonzero(d)
        fwd, back = paired_test(a, b).test, paired_test(b, a).test
        assert fwd.w_plus + back.w_plus == n * (n + 1) / 2


class TestCompare:
    def test_identical(self):
        ev = lambda r: float(r.index.mean())
        with pytest.raises(IndistinguishableError, match="indistinguishable"):
            compare_policies(20, ev, ev, B=20)

    def test_shift_by_one(self):
        ev = lambda r: float(r.index.mean())
        res = compare_policies(20, ev, lambda r: ev(r) + 1.0, B=20)
        assert res.p_value == pytest.approx(2.0 ** -20, abs=1e-15)
        np.testing.assert_allclose(res.values_b - res.values_a, 1.0)
