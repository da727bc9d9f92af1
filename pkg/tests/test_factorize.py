import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ltvrec.factorize import (
    LatentModel, SparseRatings, als_fit, als_objective, cross_validate, fit,
    fold_assignment, mean_predictor, svd_fit,
)


def random_ratings(m, n, density, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    mask = rng.random((m, n)) < density
    mask[np.arange(m), rng.integers(0, n, m)] = True  # no empty rows
    u, i = np.nonzero(mask)
    return SparseRatings.from_triplets(u, i, scale * rng.random(u.size), shape=(m, n))


class TestSparseRatings:
    def test_last_write_wins(self):
        r = SparseRatings.from_triplets([0, 0, 1], [1, 1, 0], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(r.to_dense(), [[0, 2], [3, 0]])

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            SparseRatings.from_triplets([0], [0], [np.nan])


class TestALS:
    def test_objective_monotone(self):
        trace = []
        als_fit(random_ratings(30, 20, 0.2, 1), k=4, lam=0.1, max_iters=15, seed=3, trace=trace)
        assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]))

    def test_fully_observed_rank1_recovered(self):
        a, b = np.arange(1, 6.0), np.arange(1, 5.0)
        full = np.outer(a, b)
        u, i = np.nonzero(np.ones_like(full))
        r = SparseRatings.from_triplets(u, i, full[u, i])
        model = als_fit(r, k=1, lam=1e-8, max_iters=200, tol=1e-14)
        np.testing.assert_allclose(model.U @ model.V, full, rtol=1e-5)

    def test_half_step_is_ridge_solution(self):
        r = random_ratings(8, 6, 0.5, 2)
        model = als_fit(r, k=2, lam=0.3, max_iters=3)
        # the final V is the exact ridge solution given U, column by column
        for j in range(6):
            sel = r.items == j
            Uj = model.U[r.users[sel]]
            expect = np.linalg.solve(Uj.T @ Uj + 0.3 * np.eye(2), Uj.T @ r.values[sel])
            np.testing.assert_allclose(model.V[:, j], expect, atol=1e-10)

    def test_seed_reproducible(self):
        r = random_ratings(10, 8, 0.3, 0)
        a, b = als_fit(r, 3, seed=5), als_fit(r, 3, seed=5)
        np.testing.assert_array_equal(a.U, b.U)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            als_fit(random_ratings(3, 3, 1.0, 0), k=4)

    def test_empty_row_gets_zero_vector(self):
        r = SparseRatings.from_triplets([0, 0], [0, 1], [1.0, 0.5], shape=(3, 2))
        model = als_fit(r, k=1, max_iters=3)
        np.testing.assert_array_equal(model.U[1:], 0.0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_property(self, seed):
        rng = np.random.default_rng(seed)
        m, n = rng.integers(3, 25, 2)
        trace = []
        als_fit(random_ratings(m, n, 0.3, seed), k=int(rng.integers(1, min(m, n) + 1)),
                lam=float(rng.uniform(0.01, 1)), max_iters=10, seed=seed, trace=trace, tol=0)
        assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]) + 1e-12)


class TestSVD:
    def test_rank_k_error_matches_dense(self):
        r = random_ratings(20, 15, 0.4, 4)
        dense = r.to_dense()
        s = np.linalg.svd(dense, compute_uv=False)
        model = svd_fit(r, k=5)
        err = np.linalg.norm(dense - model.U @ model.V)
        np.testing.assert_allclose(err, np.sqrt(np.sum(s[5:] ** 2)), rtol=1e-6)

    def test_identity(self):
        u, i = np.arange(4), np.arange(4)
        model = svd_fit(SparseRatings.from_triplets(u, i, np.ones(4)), k=4)
        np.testing.assert_allclose(model.U @ model.V, np.eye(4), atol=1e-12)

    def test_rank_deficient_pads(self):
        r = SparseRatings.from_triplets([0, 1], [0, 0], [1.0, 2.0], shape=(3, 3))
        with pytest.warns(UserWarning, match="numerical rank"):
            model = svd_fit(r, k=2)
        np.testing.assert_allclose(model.V[1], 0.0)

    def test_sparse_path_matches_dense(self):
        r = random_ratings(2100, 12, 0.05, 0)
        sparse = svd_fit(r, k=3)
        dense = np.linalg.svd(r.to_dense(), compute_uv=False)
        np.testing.assert_allclose(sparse.info["singular_values"], dense[:3], rtol=1e-8)


class TestCrossValidation:
    def test_folds_partition(self):
        labels = fold_assignment(103, 10, 0)
        counts = np.bincount(labels)
        assert counts.sum() == 103 and counts.max() - counts.min() <= 1

    def test_mean_predictor_oracle(self):
        r = random_ratings(15, 10, 0.5, 6)
        res = cross_validate(r, "mean", folds=5, seed=2)
        labels = fold_assignment(len(r), 5, 2)
        expect = [np.mean((r.values[labels == f] - r.values[labels != f].mean()) ** 2)
                  for f in range(5)]
        np.testing.assert_allclose(res.fold_mse, expect, rtol=1e-12)
        assert res.sd == pytest.approx(np.std(expect, ddof=1))

    def test_predictions_are_clipped(self):
        r = random_ratings(12, 10, 0.6, 1)
        res = cross_validate(r, "svd", k=3, folds=4, clip=(0.4, 0.4))
        labels = fold_assignment(len(r), 4, 0)
        expect = [np.mean((r.values[labels == f] - 0.4) ** 2) for f in range(4)]
        np.testing.assert_allclose(res.fold_mse, expect)

    def test_too_few_observations(self):
        with pytest.raises(ValueError):
            cross_validate(SparseRatings.from_triplets([0], [0], [1.0]), "mean", folds=10)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            fit(random_ratings(3, 3, 1, 0), "nmf")


class TestModelIO:
    def test_save_load(self, tmp_path):
        model = als_fit(random_ratings(6, 5, 0.5, 0), k=2, seed=9)
        model.save(tmp_path / "m.npz")
        back = LatentModel.load(tmp_path / "m.npz")
        np.testing.assert_array_equal(back.U, model.U)
        np.testing.assert_array_equal(back.V, model.V)
        assert (back.lam, back.method, back.seed) == (model.lam, "als", 9)

    def test_validation(self):
        with pytest.raises(ValueError):
            LatentModel(np.zeros((2, 2)), np.zeros((3, 2)), 0.1, "svd")
        with pytest.raises(ValueError):
            LatentModel(np.zeros((2, 2)), np.zeros((2, 2)), 0.0, "svd")

    def test_mean_model(self):
        r = SparseRatings.from_triplets([0, 1], [0, 1], [1.0, 3.0])
        np.testing.assert_array_equal(mean_predictor(r).predict([0, 1, 1], [1, 0, 0]), [2, 2, 2])

    def test_objective_value(self):
        r = SparseRatings.from_triplets([0], [0], [2.0])
        assert als_objective(r, np.array([[1.0]]), np.array([[1.0]]), 0.5) == pytest.approx(1 + 1.0)
