"""Joint state-action features and the softmax policy family.

Joint features of state ``s`` and item vector ``v`` (both length ``k``) are
``(s, v, s * v, 1)``, dimension ``3k + 1``.  A policy with weights ``w``
picks item ``j`` with probability proportional to ``exp(w . phi(s, v_j))``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

_logger = logging.getLogger(__name__)

KINDS = ("behavior", "target", "myopic", "mixture")
CHUNK = 4096


def feature_dim(k: int) -> int:
    return 3 * k + 1


def joint_features(state, item) -> np.ndarray:
    """Joint features; broadcasts over leading dimensions."""
    state = np.asarray(state, dtype=float)
    item = np.asarray(item, dtype=float)
    if state.shape[-1] != item.shape[-1]:
        raise ValueError(f"state has dimension {state.shape[-1]}, item {item.shape[-1]}")
    state, item = np.broadcast_arrays(state, item)
    ones = np.ones(state.shape[:-1] + (1,))
    return np.concatenate([state, item, state * item, ones], axis=-1)


def split_weights(w: np.ndarray, k: int):
    """Blocks ``(state, item, product, constant)`` of a joint weight vector."""
    w = np.asarray(w, dtype=float)
    if w.size != feature_dim(k):
        raise ValueError(f"weight vector of size {w.size} does not match k={k}")
    return w[:k], w[k:2 * k], w[2 * k:3 * k], w[3 * k]


@dataclass(frozen=True)
class PolicyParams:
    w: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not np.isfinite(self.w).all():
            raise ValueError("non-finite policy weights")

    @property
    def d(self) -> int:
        return self.w.size

    def to_dict(self) -> dict:
        return {"d": self.d, "kind": self.kind, "w": [float(x) for x in self.w], "meta": self.meta}

    @classmethod
    def from_dict(cls, rec: dict) -> "PolicyParams":
        w = np.asarray(rec["w"], dtype=float)
        if w.size != rec["d"]:
            raise ValueError("policy record dimension mismatch")
        return cls(w, rec["kind"], dict(rec.get("meta", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _weights(w) -> np.ndarray:
    return w.w if isinstance(w, PolicyParams) else np.asarray(w, dtype=float)


def item_scores(w, states, V) -> np.ndarray:
    """Scores ``w . phi(s, v_j)`` for every state row and every catalog item.

    ``states`` is ``N x k`` (or a single k-vector), ``V`` is ``k x n``.
    """
    w = _weights(w)
    states = np.asarray(states, dtype=float)
    single = states.ndim == 1
    states = np.atleast_2d(states)
    k = V.shape[0]
    ws, wv, wp, wc = split_weights(w, k)
    scores = (wv + states * wp) @ V + (states @ ws + wc)[:, None]
    return scores[0] if single else scores


def _check(scores):
    if not np.isfinite(scores).all():
        raise FloatingPointError("non-finite policy score")


def policy_probabilities(w, states, V) -> np.ndarray:
    """Softmax over the catalog, computed with max-score subtraction."""
    if V.shape[1] == 0:
        raise ValueError("empty catalog")
    scores = item_scores(w, states, V)
    _check(scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    return p / p.sum(axis=-1, keepdims=True)


def action_log_probs(w, states, items, V, chunk: int = CHUNK) -> np.ndarray:
    """``log pi(item_t | state_t)`` for logged steps, chunked over rows."""
    states = np.atleast_2d(states)
    items = np.asarray(items)
    out = np.empty(items.size)
    for s in range(0, items.size, chunk):
        sc = item_scores(w, states[s:s + chunk], V)
        _check(sc)
        out[s:s + chunk] = sc[np.arange(sc.shape[0]), items[s:s + chunk]] - logsumexp(sc, axis=1)
    return out


def mean_kl(w_p, w_q, states, V, chunk: int = CHUNK) -> float:
    """Average over states of ``KL(pi_p(.|s) || pi_q(.|s))`` in nats."""
    states = np.atleast_2d(states)
    total = 0.0
    for s in range(0, states.shape[0], chunk):
        lp = item_scores(w_p, states[s:s + chunk], V)
        lq = item_scores(w_q, states[s:s + chunk], V)
        lp = lp - logsumexp(lp, axis=1, keepdims=True)
        lq = lq - logsumexp(lq, axis=1, keepdims=True)
        total += float(np.sum(np.exp(lp) * (lp - lq)))
    return total / states.shape[0]


def behavior_direction(traj, V) -> np.ndarray:
    """Sum of joint features of all logged (state, item) pairs."""
    return joint_features(traj.states, V[:, traj.items].T).sum(axis=0)


def c_grid(g_norm: float, n: int = 41, span: float = 1e4) -> np.ndarray:
    return np.logspace(-np.log10(span), np.log10(span), n) / g_norm


def fit_behavior_policy(traj, V, n_grid: int = 41, subsample: int = 10_000,
                        seed: int | None = 0) -> PolicyParams:
    """Estimate the logging policy as ``C * g`` with ``g`` the summed features.

    ``C`` maximizes the exact softmax log-likelihood of the logged items over a
    logarithmic grid; with more than ``subsample`` steps the likelihood is
    evaluated on a seeded random subset.
    """
    if traj.n_steps == 0:
        raise ValueError("no logged steps")
    g = behavior_direction(traj, V)
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        warnings.warn("degenerate behavior direction; returning the uniform policy")
        return PolicyParams(np.zeros_like(g), "behavior", {"C": 0.0})
    rows = np.arange(traj.n_steps)
    if rows.size > subsample:
        rows = np.sort(np.random.default_rng(seed).choice(rows, subsample, replace=False))
    states, items = traj.states[rows], traj.items[rows]
    grid = c_grid(norm, n_grid)
    ll = np.array([action_log_probs(c * g, states, items, V).sum() for c in grid])
    best = int(np.argmax(ll))
    _logger.info("behavior fit: C=%.4g (grid index %d), mean log-lik %.4f",
                 grid[best], best, ll[best] / rows.size)
    return PolicyParams(grid[best] * g, "behavior",
                        {"C": float(grid[best]), "grid_index": best,
                         "mean_loglik": float(ll[best] / rows.size)})


def make_target_policy(theta_q, alpha: float, kind: str = "target") -> PolicyParams:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return PolicyParams(alpha * np.asarray(theta_q, dtype=float), kind, {"alpha": float(alpha)})


def choose_alpha(theta_q, w_behavior, states, V, max_kl: float = 0.5,
                 span: float = 1e4, iters: int = 60) -> float:
    """Largest ``alpha`` whose policy stays within ``max_kl`` of the behavior.

    KL is the mean over ``states`` of ``KL(target || behavior)``.  A log grid
    spanning ``[1/span, span] / |theta_q|`` brackets the largest feasible grid point, which is then
    refined by bisection in log space.  If no grid point is feasible the
    KL-minimizing one is returned with a warning.
    """
    theta_q = np.asarray(theta_q, dtype=float)
    wb = _weights(w_behavior)

    def kl(a):
        return mean_kl(a * theta_q, wb, states, V)

    norm = float(np.linalg.norm(theta_q))
    if norm == 0.0:
        return 1.0
    grid = np.logspace(-np.log10(span), np.log10(span), 33) / norm
    vals = np.array([kl(a) for a in grid])
    feasible = np.flatnonzero(vals <= max_kl)
    if feasible.size == 0:
        best = int(np.argmin(vals))
        warnings.warn(f"no alpha reaches KL <= {max_kl}; using alpha={grid[best]:.3g} "
                      f"with KL={vals[best]:.3f}")
        return float(grid[best])
    i = int(feasible[-1])
    if i == grid.size - 1:
        return float(grid[-1])
    lo, hi = np.log(grid[i]), np.log(grid[i + 1])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if kl(np.exp(mid)) <= max_kl:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6:
            break
    return float(np.exp(lo))


def mix_policies(w_target, w_behavior, beta: float) -> PolicyParams:
    """Convex combination ``beta * target + (1 - beta) * behavior``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    wt, wb = _weights(w_target), _weights(w_behavior)
    if beta == 1.0:
        w = wt.copy()
    elif beta == 0.0:
        w = wb.copy()
    else:
        w = beta * wt + (1.0 - beta) * wb
    meta = {"beta": float(beta)}
    if isinstance(w_target, PolicyParams):
        meta.update({f"target_{k}": v for k, v in w_target.meta.items()})
    return PolicyParams(w, "mixture", meta)


def rank_of_action(w, state, V, item: int) -> int:
    """1-based descending rank of ``item``'s score; ties go to the lower index."""
    scores = item_scores(w, state, V)
    s = scores[item]
    return int(1 + np.sum(scores > s) + np.sum(scores[:item] == s))


def action_ranks(w, states, items, V, chunk: int = CHUNK) -> np.ndarray:
    """:func:`rank_of_action` for every logged step."""
    items = np.asarray(items)
    out = np.empty(items.size, dtype=np.int64)
    idx = np.arange(V.shape[1])
    for s in range(0, items.size, chunk):
        sc = item_scores(w, np.atleast_2d(states[s:s + chunk]), V)
        it = items[s:s + chunk]
        mine = sc[np.arange(sc.shape[0]), it][:, None]
        out[s:s + chunk] = 1 + np.sum(sc > mine, axis=1) + np.sum((sc == mine) & (idx < it[:, None]), axis=1)
    return out
