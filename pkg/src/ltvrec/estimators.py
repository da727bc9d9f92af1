"""Linear value estimation: LSTD(0), LSTDQ(0), per-step importance-weighted
off-policy LSTD(0) and Monte-Carlo return averaging.

All LSTD variants solve

    A = sum_t rho_t phi_t (phi_t - gamma phi'_t)^T + eps I,
    b = sum_t rho_t phi_t r_t,           theta = A^-1 b,

with ``rho_t = 1`` on-policy and ``phi'_t = 0`` at trajectory ends.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .policies import action_log_probs, joint_features

RIDGE_SCALE = 1e-6
BEHAVIOR_FLOOR = 1e-12


class EstimationError(ArithmeticError):
    """Raised when the normal equations cannot be solved reliably."""


@dataclass(frozen=True)
class TransitionBatch:
    """Rows of ``(phi_t, phi'_t, r_t, rho_t)``; terminal rows have ``phi'_t = 0``."""

    phi: np.ndarray
    phi_next: np.ndarray
    rewards: np.ndarray
    rho: np.ndarray | None = None

    def __post_init__(self):
        if self.phi.shape != self.phi_next.shape or self.phi.shape[0] != self.rewards.size:
            raise ValueError("inconsistent transition batch shapes")
        if self.rho is not None:
            if self.rho.size != self.rewards.size:
                raise ValueError("rho length mismatch")
            if not np.isfinite(self.rho).all():
                raise EstimationError("non-finite importance ratio")
            if (self.rho <= 0).any():
                raise ValueError("importance ratios must be positive")

    def __len__(self):
        return self.rewards.size

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    def with_rho(self, rho) -> "TransitionBatch":
        return TransitionBatch(self.phi, self.phi_next, self.rewards, np.asarray(rho, dtype=float))


@dataclass(frozen=True)
class ValueWeights:
    theta: np.ndarray
    gamma: float
    epsilon: float
    kind: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "epsilon": self.epsilon,
                "theta": [float(x) for x in self.theta], "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, rec) -> "ValueWeights":
        return cls(np.asarray(rec["theta"], dtype=float), float(rec["gamma"]),
                   float(rec["epsilon"]), rec["kind"], dict(rec.get("diagnostics", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "ValueWeights":
        return cls.from_dict(json.loads(Path(path).read_text()))


def state_batch(traj) -> TransitionBatch:
    """State-value transitions from a :class:`~ltvrec.states.TrajectorySet`."""
    nxt = traj.next_rows()
    phi_next = np.where((nxt >= 0)[:, None], traj.states[np.maximum(nxt, 0)], 0.0)
    return TransitionBatch(traj.states, phi_next, traj.rewards)


def q_batch(traj, V) -> TransitionBatch:
    """Joint-feature transitions; the successor action is the next logged item."""
    phi = joint_features(traj.states, V[:, traj.items].T)
    nxt = traj.next_rows()
    phi_next = np.where((nxt >= 0)[:, None], phi[np.maximum(nxt, 0)], 0.0)
    return TransitionBatch(phi, phi_next, traj.rewards)


def importance_ratios(traj, V, w_target, w_behavior, clip: float | None = None) -> np.ndarray:
    """Per-step ``pi_target(a_t|s_t) / pi_behavior(a_t|s_t)``.

    The behavior probability is floored at ``1e-12``; ``clip`` optionally caps
    the ratio from above.
    """
    lt = action_log_probs(w_target, traj.states, traj.items, V)
    lb = action_log_probs(w_behavior, traj.states, traj.items, V)
    if (lb < np.log(BEHAVIOR_FLOOR)).any():
        raise EstimationError("behavior probability below floor 1e-12 on a logged action")
    rho = np.exp(lt - lb)
    if not np.isfinite(rho).all():
        raise EstimationError("non-finite importance ratio")
    if clip is not None:
        rho = np.minimum(rho, clip)
    return rho


def default_epsilon(A: np.ndarray) -> float:
    """``1e-6 * |trace(A)| / dim``, or ``1e-6`` when the trace vanishes."""
    scale = abs(float(np.trace(A))) / A.shape[0]
    return RIDGE_SCALE * (scale if scale > 0 else 1.0)


def normal_equations(batch: TransitionBatch, gamma: float):
    """Un-regularized ``(A, b)`` of the (weighted) LSTD system."""
    phi = batch.phi if batch.rho is None else batch.phi * batch.rho[:, None]
    A = phi.T @ (batch.phi - gamma * batch.phi_next)
    b = phi.T @ batch.rewards
    return A, b


def solve_normal_equations(A, b, epsilon: float | None = None):
    """Ridge-regularized solve; returns ``(theta, epsilon)``."""
    if epsilon is None:
        epsilon = default_epsilon(A)
    A = A + epsilon * np.eye(A.shape[0])
    try:
        theta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise EstimationError(f"singular LSTD system (condition ~ {np.linalg.cond(A):.3g})") from None
    if not np.isfinite(theta).all():
        raise EstimationError(f"non-finite LSTD solution (condition ~ {np.linalg.cond(A):.3g})")
    return theta, float(epsilon)


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")


def lstd(batch: TransitionBatch, gamma: float, epsilon: float | None = None,
         kind: str = "onpolicy") -> ValueWeights:
    """LSTD(0); ``batch.rho`` must be unset (use :func:`off_policy_lstd`)."""
    _check_gamma(gamma)
    if len(batch) == 0:
        raise ValueError("empty transition batch")
    if batch.rho is not None:
        batch = TransitionBatch(batch.phi, batch.phi_next, batch.rewards)
    A, b = normal_equations(batch, gamma)
    theta, eps = solve_normal_equations(A, b, epsilon)
    return ValueWeights(theta, float(gamma), eps, kind)


def lstdq(batch: TransitionBatch, gamma: float, epsilon: float | None = None) -> ValueWeights:
    """LSTDQ(0) on joint features (see :func:`q_batch`)."""
    return lstd(batch, gamma, epsilon, kind="q")


def rho_diagnostics(rho: np.ndarray) -> dict:
    return {"rho_min": float(rho.min()), "rho_max": float(rho.max()),
            "rho_mean": float(rho.mean()),
            "ess": float(rho.sum() ** 2 / np.sum(rho * rho)), "n": int(rho.size)}


def off_policy_lstd(batch: TransitionBatch, gamma: float, rho=None,
                    epsilon: float | None = None) -> ValueWeights:
    """Importance-weighted LSTD(0) with per-step ratios ``rho``.

    ``rho`` defaults to ``batch.rho``.  Diagnostics report the ratio range and
    the effective sample size ``(sum rho)^2 / sum rho^2``.
    """
    _check_gamma(gamma)
    if len(batch) == 0:
        raise ValueError("empty transition batch")
    if rho is not None:
        batch = batch.with_rho(rho)
    if batch.rho is None:
        raise ValueError("off-policy LSTD needs importance ratios")
    A, b = normal_equations(batch, gamma)
    theta, eps = solve_normal_equations(A, b, epsilon)
    return ValueWeights(theta, float(gamma), eps, "offpolicy", rho_diagnostics(batch.rho))


def per_trajectory_stats(batch: TransitionBatch, gamma: float, offsets: np.ndarray,
                         max_elements: int = 20_000_000):
    """Per-trajectory contributions ``(A_i, b_i)`` to the normal equations.

    Summing them (with multiplicities) reproduces :func:`normal_equations` on
    any resample of whole trajectories, which is what the bootstrap needs.
    """
    d = batch.dim
    m = offsets.size - 1
    chunk_rows = max(1, max_elements // (d * d))
    A = np.zeros((m, d, d))
    b = np.zeros((m, d))
    phi = batch.phi if batch.rho is None else batch.phi * batch.rho[:, None]
    diff = batch.phi - gamma * batch.phi_next
    lengths = np.diff(offsets)
    nonempty = np.flatnonzero(lengths > 0)
    # group trajectories into row chunks
    start = 0
    while start < nonempty.size:
        stop = start
        rows = 0
        while stop < nonempty.size and (rows == 0 or rows + lengths[nonempty[stop]] <= chunk_rows):
            rows += lengths[nonempty[stop]]
            stop += 1
        ids = nonempty[start:stop]
        lo, hi = offsets[ids[0]], offsets[ids[-1] + 1]
        bounds = offsets[ids] - lo
        outer = phi[lo:hi, :, None] * diff[lo:hi, None, :]
        A[ids] = np.add.reduceat(outer, bounds, axis=0)
        b[ids] = np.add.reduceat(phi[lo:hi] * batch.rewards[lo:hi, None], bounds, axis=0)
        start = stop
    return A, b


def discounted_returns(traj, gamma: float) -> np.ndarray:
    """Per-trajectory ``sum_t gamma^t r_t``."""
    disc = gamma ** traj.step_index.astype(float)
    return np.bincount(traj.traj_index, weights=disc * traj.rewards, minlength=traj.n_trajectories)


def monte_carlo_value(traj, gamma: float) -> float:
    """Mean discounted return over trajectories."""
    if traj.n_trajectories == 0:
        raise ValueError("no trajectories")
    return float(discounted_returns(traj, gamma).mean())


def value_from_theta(theta, states) -> float:
    """Average of ``theta . phi(s)`` over a sample of state features."""
    theta = np.asarray(theta, dtype=float)
    states = np.atleast_2d(states)
    if states.shape[1] != theta.size:
        raise ValueError(f"theta has dimension {theta.size}, states {states.shape[1]}")
    return float(np.mean(states @ theta))


class LSTDValueEvaluator:
    """Bootstrap evaluator: LSTD on a trajectory resample, averaged over sampled states.

    Per-trajectory contributions to ``(A, b)`` are computed once; a resample
    only re-weights them by its multiplicities.  ``value_states`` (default:
    the state features of the batch rows) are the features averaged after
    sampling up to ``per_traj`` steps from every drawn trajectory.
    """

    def __init__(self, traj, batch: TransitionBatch, gamma: float, epsilon: float | None = None,
                 per_traj: int = 5, value_states: np.ndarray | None = None, kind: str = "onpolicy"):
        _check_gamma(gamma)
        self.offsets = traj.offsets
        self.gamma = gamma
        self.epsilon = epsilon
        self.per_traj = per_traj
        self.kind = kind
        self.value_states = traj.states if value_states is None else value_states
        self.A, self.b = per_trajectory_stats(batch, gamma, traj.offsets)
        self._full = batch

    def fit(self, counts=None) -> ValueWeights:
        if counts is None:
            A, b = normal_equations(self._full, self.gamma)
        else:
            A = np.tensordot(counts, self.A, axes=1)
            b = counts @ self.b
        theta, eps = solve_normal_equations(A, b, self.epsilon)
        diag = rho_diagnostics(self._full.rho) if self._full.rho is not None else {}
        return ValueWeights(theta, self.gamma, eps, self.kind, diag)

    def value(self, theta, traj_ids, rng) -> float:
        from .stats import sample_state_rows
        rows = sample_state_rows(self.offsets, traj_ids, self.per_traj, rng)
        return value_from_theta(theta, self.value_states[rows])

    def __call__(self, res) -> float:
        theta = self.fit(res.counts).theta
        return self.value(theta, res.index, res.state_rng())


class MonteCarloEvaluator:
    """Bootstrap evaluator returning the mean discounted return of the draw."""

    def __init__(self, traj, gamma: float):
        self.returns = discounted_returns(traj, gamma)

    def __call__(self, res) -> float:
        return float(self.returns[res.index].mean())
