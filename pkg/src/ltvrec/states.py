"""Latent user states from interaction-history prefixes.

A user's state after events ``(v_1, r_1) ... (v_t, r_t)`` is the ridge solve

    u_t = (lam I + sum_l v_l v_l^T)^-1 sum_l r_l v_l

kept current with Sherman-Morrison updates of the cached inverse.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class UserState:
    u: np.ndarray
    inverse: np.ndarray
    rhs: np.ndarray
    gram: np.ndarray  # lam I + sum v v^T, used only by the fault branch

    @property
    def k(self) -> int:
        return self.u.size


def cold_state(model_or_k, lam: float | None = None) -> UserState:
    """State of a user with no history: zero vector, inverse ``I / lam``."""
    if lam is None:
        k, lam = model_or_k.k, model_or_k.lam
    else:
        k = int(model_or_k)
    eye = np.eye(k)
    return UserState(np.zeros(k), eye / lam, np.zeros(k), eye * lam)


def direct_state(items: np.ndarray, rewards: np.ndarray, lam: float) -> np.ndarray:
    """Fresh dense solve of the ridge state for a full history.

    ``items`` is ``T x k`` (one item vector per event, repeats allowed).
    """
    items = np.atleast_2d(np.asarray(items, dtype=float))
    k = items.shape[1]
    gram = lam * np.eye(k) + items.T @ items
    return np.linalg.solve(gram, items.T @ np.asarray(rewards, dtype=float))


def update_state(state: UserState, v: np.ndarray, r: float) -> UserState:
    """Add one consumed item with reward ``r`` in ``O(k^2)``."""
    v = np.asarray(v, dtype=float)
    a_v = state.inverse @ v
    denom = 1.0 + v @ a_v
    gram = state.gram + np.outer(v, v)
    rhs = state.rhs + r * v
    if not np.isfinite(denom) or denom <= 0.0:
        inverse = np.linalg.inv(gram)
    else:
        inverse = state.inverse - np.outer(a_v, a_v) / denom
    inverse = 0.5 * (inverse + inverse.T)
    return UserState(inverse @ rhs, inverse, rhs, gram)


def _batched_update(inverse, rhs, vs, rs):
    """Vectorized Sherman-Morrison over a batch of independent users."""
    a_v = np.einsum("bij,bj->bi", inverse, vs)
    denom = 1.0 + np.einsum("bi,bi->b", vs, a_v)
    inverse = inverse - a_v[:, :, None] * a_v[:, None, :] / denom[:, None, None]
    inverse = 0.5 * (inverse + inverse.transpose(0, 2, 1))
    rhs = rhs + rs[:, None] * vs
    return inverse, rhs, denom


@dataclass(frozen=True)
class Trajectory:
    """One user's steps: pre-event state, item vector, item index, reward."""

    user_id: object
    states: np.ndarray
    actions: np.ndarray
    items: np.ndarray
    rewards: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return self.rewards.size


@dataclass(frozen=True)
class TrajectorySet:
    """All trajectories in flat columnar form.

    Steps of trajectory ``i`` occupy rows ``offsets[i]:offsets[i+1]``.
    """

    user_ids: tuple
    offsets: np.ndarray
    states: np.ndarray
    items: np.ndarray
    rewards: np.ndarray
    timestamps: np.ndarray

    @property
    def n_trajectories(self) -> int:
        return len(self.user_ids)

    @property
    def n_steps(self) -> int:
        return int(self.rewards.size)

    @property
    def k(self) -> int:
        return self.states.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def traj_index(self) -> np.ndarray:
        """Trajectory number of every step."""
        return np.repeat(np.arange(self.n_trajectories), self.lengths)

    @property
    def step_index(self) -> np.ndarray:
        """Position of every step inside its trajectory."""
        return np.arange(self.n_steps) - np.repeat(self.offsets[:-1], self.lengths)

    @property
    def is_last(self) -> np.ndarray:
        last = np.zeros(self.n_steps, dtype=bool)
        last[self.offsets[1:] - 1] = True
        return last

    def next_rows(self) -> np.ndarray:
        """Row of each step's successor, ``-1`` at trajectory ends."""
        nxt = np.arange(1, self.n_steps + 1)
        nxt[self.is_last] = -1
        return nxt

    def __getitem__(self, i) -> Trajectory:
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return Trajectory(self.user_ids[i], self.states[sl], None, self.items[sl],
                          self.rewards[sl], self.timestamps[sl])

    def with_actions(self, V: np.ndarray, i: int) -> Trajectory:
        t = self[i]
        return Trajectory(t.user_id, t.states, V[:, t.items].T, t.items, t.rewards, t.timestamps)

    def subset(self, traj) -> "TrajectorySet":
        """Trajectories ``traj`` (repeats allowed) in the given order."""
        traj = np.asarray(traj, dtype=np.int64)
        lengths = self.lengths[traj]
        starts = self.offsets[:-1][traj]
        rows = np.repeat(starts - np.r_[0, np.cumsum(lengths)[:-1]], lengths) + np.arange(lengths.sum())
        return TrajectorySet(tuple(self.user_ids[i] for i in traj), np.r_[0, np.cumsum(lengths)],
                             self.states[rows], self.items[rows], self.rewards[rows],
                             self.timestamps[rows])

    def save(self, path) -> None:
        """Columnar ``.npz``: user id, step, state columns, item, reward, timestamp."""
        np.savez(path, user_id=np.asarray([str(u) for u in self.user_ids]),
                 offsets=self.offsets, step=self.step_index, state=self.states,
                 item_index=self.items, reward=self.rewards, timestamp=self.timestamps)

    @classmethod
    def load(cls, path) -> "TrajectorySet":
        with np.load(Path(path)) as z:
            return cls(tuple(z["user_id"].tolist()), z["offsets"], z["state"], z["item_index"],
                       z["reward"], z["timestamp"])


def build_trajectories(dataset, model) -> TrajectorySet:
    """Pre-event latent states for every logged step of every user.

    Users are advanced in lockstep, one event per round, so each round is a
    batched rank-one update.  Repeated items apply repeated updates.
    """
    index = dataset.item_index
    V = model.V
    k, n = V.shape
    lengths = np.array([len(log) for log in dataset.logs], dtype=np.int64)
    offsets = np.r_[0, np.cumsum(lengths)]
    items = np.empty(offsets[-1], dtype=np.int64)
    rewards = np.empty(offsets[-1])
    stamps = np.empty(offsets[-1], dtype=np.int64)
    for i, log in enumerate(dataset.logs):
        for t, e in enumerate(log.events):
            j = index.get(e.item_id)
            if j is None or j >= n:
                raise StateError(f"item {e.item_id!r} has no column in the model")
            items[offsets[i] + t] = j
            rewards[offsets[i] + t] = e.reward
            stamps[offsets[i] + t] = e.timestamp
    states = build_states(offsets, items, rewards, V, model.lam)
    return TrajectorySet(tuple(log.user_id for log in dataset.logs), offsets, states, items,
                         rewards, stamps)


def build_states(offsets, items, rewards, V, lam) -> np.ndarray:
    """Pre-event states for flat columnar trajectories (see :class:`TrajectorySet`)."""
    k = V.shape[0]
    lengths = np.diff(offsets)
    m = lengths.size
    states = np.zeros((offsets[-1], k))
    inverse = np.broadcast_to(np.eye(k) / lam, (m, k, k)).copy()
    rhs = np.zeros((m, k))
    order = np.argsort(-lengths, kind="stable")
    for t in range(int(lengths.max(initial=0))):
        active = order[: np.searchsorted(-lengths[order], -t, side="left")]
        rows = offsets[active] + t
        states[rows] = np.einsum("bij,bj->bi", inverse[active], rhs[active])
        vs = V[:, items[rows]].T
        inv, r, denom = _batched_update(inverse[active], rhs[active], vs, rewards[rows])
        bad = ~np.isfinite(denom) | (denom <= 0)
        for b in np.flatnonzero(bad):
            u = active[b]
            hist = V[:, items[offsets[u]:offsets[u] + t + 1]]
            inv[b] = np.linalg.inv(lam * np.eye(k) + hist @ hist.T)
        inverse[active] = inv
        rhs[active] = r
    return states

