"""Matrix factorization back-ends: ALS, truncated SVD and the mean baseline.

Convention: ``U`` is ``m x k`` (one row per user) and ``V`` is ``k x n`` (one
column per item), so predictions are ``U @ V``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_logger = logging.getLogger(__name__)

DENSE_SVD_LIMIT = 2000


@dataclass(frozen=True)
class SparseRatings:
    """Observed ``(user, item, value)`` triplets of an ``m x n`` matrix.

    Duplicated cells are collapsed on construction, the last value winning.
    """

    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    shape: tuple[int, int]
    default_value: float = 0.0

    @classmethod
    def from_triplets(cls, users, items, values, shape=None, default_value=0.0):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if not (users.shape == items.shape == values.shape):
            raise ValueError("triplet arrays must have equal length")
        if np.isnan(values).any():
            raise ValueError("NaN in ratings")
        if shape is None:
            shape = (int(users.max()) + 1 if users.size else 0,
                     int(items.max()) + 1 if items.size else 0)
        m, n = shape
        if users.size and (users.min() < 0 or users.max() >= m or items.min() < 0 or items.max() >= n):
            raise ValueError("triplet index out of range")
        # last write wins: keep the final occurrence of each cell
        key = users * n + items
        _, last = np.unique(key[::-1], return_index=True)
        keep = np.sort(key.size - 1 - last)
        return cls(users[keep], items[keep], values[keep], (int(m), int(n)), float(default_value))

    @classmethod
    def from_dataset(cls, dataset):
        u, i, r = dataset.to_triplets()
        return cls.from_triplets(u, i, r, shape=(dataset.n_users, dataset.n_items))

    def __len__(self):
        return self.values.size

    def subset(self, mask) -> "SparseRatings":
        return SparseRatings(self.users[mask], self.items[mask], self.values[mask],
                             self.shape, self.default_value)

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, (self.users, self.items)), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.full(self.shape, self.default_value)
        out[self.users, self.items] = self.values
        return out


@dataclass(frozen=True)
class LatentModel:
    U: np.ndarray
    V: np.ndarray
    lam: float
    method: str
    seed: int | None = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.U.shape[1] != self.V.shape[0]:
            raise ValueError("U and V latent dimensions differ")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not (np.isfinite(self.U).all() and np.isfinite(self.V).all()):
            raise ValueError("non-finite latent factors")

    @property
    def k(self) -> int:
        return self.V.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[1]

    def predict(self, users, items) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        return np.einsum("ij,ji->i", self.U[users], self.V[:, items])

    def save(self, path) -> None:
        m, n = self.shape
        np.savez(path, U=self.U, V=self.V,
                 header=np.array([m, n, self.k, self.lam, -1 if self.seed is None else self.seed]),
                 method=np.array(self.method))

    @classmethod
    def load(cls, path) -> "LatentModel":
        with np.load(path) as z:
            m, n, k, lam, seed = z["header"]
            seed = None if seed < 0 else int(seed)
            return cls(z["U"], z["V"], float(lam), str(z["method"]), seed)


@dataclass(frozen=True)
class MeanModel:
    """Predicts the training mean everywhere."""

    mean: float
    method: str = "mean"

    def predict(self, users, items) -> np.ndarray:
        return np.full(np.shape(users), self.mean)


def mean_predictor(ratings: SparseRatings) -> MeanModel:
    if len(ratings) == 0:
        raise ValueError("mean predictor needs at least one observed entry")
    return MeanModel(float(ratings.values.mean()))


def _grouped(ratings: SparseRatings, axis: int):
    """Sort observations by row (axis 0) or column (axis 1)."""
    rows = ratings.users if axis == 0 else ratings.items
    cols = ratings.items if axis == 0 else ratings.users
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order], ratings.values[order]


def _ridge_rows(rows, cols, vals, n_rows, other, lam, chunk=200_000):
    """Solve ``(O_i^T O_i + lam I) x_i = O_i^T r_i`` for every row ``i``.

    ``other`` holds the fixed factor with one row per column index.  Rows
    without observations get the zero vector.
    """
    k = other.shape[1]
    gram = np.zeros((n_rows, k, k))
    rhs = np.zeros((n_rows, k))
    for start in range(0, rows.size, chunk):
        r = rows[start:start + chunk]
        o = other[cols[start:start + chunk]]
        np.add.at(rhs, r, o * vals[start:start + chunk, None])
        outer = o[:, :, None] * o[:, None, :]
        bounds = np.flatnonzero(np.r_[True, r[1:] != r[:-1]])
        gram[r[bounds]] += np.add.reduceat(outer, bounds, axis=0)
    gram += lam * np.eye(k)
    return np.linalg.solve(gram, rhs[:, :, None])[:, :, 0]


def als_objective(ratings: SparseRatings, U, V, lam) -> float:
    """Squared error on observed cells plus ``lam (|U|^2 + |V|^2)``."""
    pred = np.einsum("ij,ji->i", U[ratings.users], V[:, ratings.items])
    return float(np.sum((ratings.values - pred) ** 2) + lam * (np.sum(U * U) + np.sum(V * V)))


def als_fit(ratings: SparseRatings, k: int = 20, lam: float = 0.1, max_iters: int = 30,
            seed: int | None = 0, tol: float = 1e-4, trace: list | None = None) -> LatentModel:
    """Alternating least squares on the observed entries only.

    ``V`` starts i.i.d. uniform on ``[-0.5/sqrt(k), 0.5/sqrt(k)]``.  Each sweep
    solves for all user rows, then all item columns; iteration stops after
    ``max_iters`` sweeps or when the relative objective decrease drops below
    ``tol``.  If ``trace`` is a list, the objective after every half-step is
    appended to it.
    """
    m, n = ratings.shape
    if k < 1 or k > min(m, n):
        raise ValueError(f"k={k} must lie in [1, min(m, n)={min(m, n)}]")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if np.isnan(ratings.values).any():
        raise ValueError("NaN in ratings")
    rng = np.random.default_rng(seed)
    bound = 0.5 / np.sqrt(k)
    V = rng.uniform(-bound, bound, size=(k, n))
    U = np.zeros((m, k))
    by_user = _grouped(ratings, 0)
    by_item = _grouped(ratings, 1)
    prev = als_objective(ratings, U, V, lam)
    if trace is not None:
        trace.append(prev)
    it = 0
    for it in range(1, max_iters + 1):
        U = _ridge_rows(*by_user, m, V.T, lam)
        if trace is not None:
            trace.append(als_objective(ratings, U, V, lam))
        V = _ridge_rows(*by_item, n, U, lam).T
        obj = als_objective(ratings, U, V, lam)
        if trace is not None:
            trace.append(obj)
        if prev > 0 and (prev - obj) / prev < tol:
            break
        prev = obj
    _logger.debug("ALS stopped after %d sweeps", it)
    return LatentModel(U, np.ascontiguousarray(V), lam, "als", seed, {"iterations": it})


def svd_fit(ratings: SparseRatings, k: int = 20, lam: float = 0.1) -> LatentModel:
    """Rank-``k`` truncated SVD of the default-filled matrix.

    Singular values are folded into ``U``; ``V`` holds the right singular
    vectors.  ``lam`` is carried along for the state builder only.
    """
    m, n = ratings.shape
    if k < 1 or k > min(m, n):
        raise ValueError(f"k={k} must lie in [1, min(m, n)={min(m, n)}]")
    if max(m, n) < DENSE_SVD_LIMIT or k >= min(m, n) - 1:
        left, s, right = np.linalg.svd(ratings.to_dense(), full_matrices=False)
        left, s, right = left[:, :k], s[:k], right[:k]
    else:
        mat = ratings.to_csr()
        if ratings.default_value != 0.0:
            mat = mat.toarray()
            mat[mat == 0] = ratings.default_value
        left, s, right = spla.svds(mat, k=k, random_state=0)
        order = np.argsort(s)[::-1]
        left, s, right = left[:, order], s[order], right[order]
    # deterministic sign: largest-magnitude entry of each right vector positive
    flip = np.sign(right[np.arange(k), np.argmax(np.abs(right), axis=1)])
    flip[flip == 0] = 1.0
    left, right = left * flip, right * flip[:, None]
    tiny = s <= s.max(initial=0.0) * max(m, n) * np.finfo(float).eps
    if tiny.any():
        warnings.warn(f"k={k} exceeds numerical rank {int((~tiny).sum())}; padding with zero components")
        s = np.where(tiny, 0.0, s)
        right = np.where(tiny[:, None], 0.0, right)
    return LatentModel(left * s, np.ascontiguousarray(right), lam, "svd", None,
                       {"singular_values": s.tolist()})


def fit(ratings: SparseRatings, method: str, k: int = 20, lam: float = 0.1, seed: int | None = 0,
        max_iters: int = 30):
    if method == "als":
        return als_fit(ratings, k, lam, max_iters=max_iters, seed=seed)
    if method == "svd":
        return svd_fit(ratings, k, lam)
    if method == "mean":
        return mean_predictor(ratings)
    raise ValueError(f"unknown factorization method {method!r}")


def fold_assignment(n_obs: int, folds: int, seed: int | None) -> np.ndarray:
    """Uniformly random balanced fold labels in ``0..folds-1``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n_obs) % folds
    rng.shuffle(labels)
    return labels


@dataclass(frozen=True)
class CVResult:
    method: str
    fold_mse: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_mse))

    @property
    def sd(self) -> float:
        return float(np.std(self.fold_mse, ddof=1)) if len(self.fold_mse) > 1 else 0.0


def cross_validate(ratings: SparseRatings, method: str = "als", k: int = 20, lam: float = 0.1,
                   folds: int = 10, seed: int | None = 0, clip: tuple[float, float] | None = None,
                   max_iters: int = 30) -> CVResult:
    """K-fold held-out MSE.

    Predictions are clipped to ``clip``, which defaults to the observed
    reward range of the full ratings set.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if len(ratings) < folds:
        raise ValueError(f"{len(ratings)} observations cannot fill {folds} folds")
    if clip is None:
        clip = (float(ratings.values.min()), float(ratings.values.max()))
    labels = fold_assignment(len(ratings), folds, seed)
    mse = []
    for f in range(folds):
        test = labels == f
        if not test.any():
            raise ValueError(f"fold {f} has no held-out entries")
        train = ratings.subset(~test)
        held = ratings.subset(test)
        model = fit(train, method, k, lam, seed=seed, max_iters=max_iters)
        pred = np.clip(model.predict(held.users, held.items), *clip)
        mse.append(float(np.mean((held.values - pred) ** 2)))
    return CVResult(method, tuple(mse))


def load_model(path: str | Path):
    return LatentModel.load(path)
