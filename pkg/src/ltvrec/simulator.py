"""Synthetic environments with known values for validating the estimators.

Two kinds of world are provided:

* :class:`TabularMDP`: finite states and actions, values by a direct
  linear solve.
* :class:`LatentWorld`: users and items live in a latent space, an item is
  accepted with probability ``clip(x . v, 0, 1)``, and consuming an item pulls
  the user vector towards it.  Each item has its own continuation
  probability, which is how "self-preservation" items are scripted.

Episodes terminate after every step with probability ``1 - continue_prob``;
logs emitted here use the same interaction-file format as real data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import TransitionBatch
from .ingest import InteractionRecord, filter_users, write_log
from .policies import item_scores
from .states import TrajectorySet, _batched_update


@dataclass(frozen=True)
class TabularMDP:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    nu: np.ndarray  # (S,)
    gamma: float

    def __post_init__(self):
        S, A, S2 = self.P.shape
        if S != S2 or self.R.shape != (S, A) or self.nu.shape != (S,):
            raise ValueError("inconsistent MDP shapes")
        if not np.allclose(self.P.sum(axis=2), 1.0) or not np.isclose(self.nu.sum(), 1.0):
            raise ValueError("transition rows and initial distribution must sum to 1")
        if (self.P < 0).any() or (self.nu < 0).any():
            raise ValueError("negative probabilities")
        if not np.isfinite(self.R).all():
            raise ValueError("non-finite rewards")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @classmethod
    def random(cls, n_states, n_actions, gamma, seed=0, sparsity=0.0) -> "TabularMDP":
        rng = np.random.default_rng(seed)
        P = rng.random((n_states, n_actions, n_states))
        if sparsity:
            P *= rng.random(P.shape) >= sparsity
            P[..., 0] += 1e-3
        P /= P.sum(axis=2, keepdims=True)
        R = rng.random((n_states, n_actions))
        nu = rng.random(n_states)
        return cls(P, R, nu / nu.sum(), gamma)


def _check_policy(mdp: TabularMDP, pi: np.ndarray):
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions) or not np.allclose(pi.sum(axis=1), 1.0) or (pi < 0).any():
        raise ValueError("policy must be a row-stochastic (S, A) table")
    return pi


def policy_model(mdp: TabularMDP, pi) -> tuple[np.ndarray, np.ndarray]:
    """State-to-state transition matrix and expected reward under ``pi``."""
    pi = _check_policy(mdp, pi)
    return np.einsum("sa,sat->st", pi, mdp.P), np.einsum("sa,sa->s", pi, mdp.R)


def exact_value(mdp: TabularMDP, pi) -> tuple[np.ndarray, float]:
    """Solve ``(I - gamma P_pi) V = r_pi``; also return ``J = nu . V``."""
    P_pi, r_pi = policy_model(mdp, pi)
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    return V, float(mdp.nu @ V)


def exact_q(mdp: TabularMDP, pi) -> np.ndarray:
    """``Q(s, a) = R(s, a) + gamma sum_s' P(s'|s, a) V(s')``."""
    V, _ = exact_value(mdp, pi)
    return mdp.R + mdp.gamma * mdp.P @ V


def greedy_policy(q: np.ndarray) -> np.ndarray:
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


def expected_state_batch(mdp: TabularMDP, pi) -> TransitionBatch:
    """One-hot rows ``(e_s, P_pi[s], r_pi[s])``, the expected-model batch."""
    P_pi, r_pi = policy_model(mdp, pi)
    return TransitionBatch(np.eye(mdp.n_states), P_pi, r_pi)


def expected_q_batch(mdp: TabularMDP, pi) -> TransitionBatch:
    """Indicator joint features, one row per ``(s, a)`` with on-policy successor."""
    pi = _check_policy(mdp, pi)
    S, A = mdp.n_states, mdp.n_actions
    nxt = np.einsum("sat,tb->satb", mdp.P, pi).reshape(S * A, S * A)
    return TransitionBatch(np.eye(S * A), nxt, mdp.R.reshape(-1))


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of a probability matrix."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)


@dataclass
class SimulatedLog:
    """Records in ingest format plus per-step ground truth.

    ``truth`` holds JSON-serializable facts (exact values, parameters);
    ``states`` and ``behavior_probs`` are aligned with ``records``.
    """

    records: list
    states: np.ndarray
    behavior_probs: np.ndarray
    truth: dict = field(default_factory=dict)

    def dataset(self, gamma=None):
        from .ingest import with_gamma
        return with_gamma(filter_users(self.records, min_interactions=1), gamma)

    def trajectories(self) -> TrajectorySet:
        """Trajectories whose state features are the simulator's true states."""
        users = np.array([r.user_id for r in self.records])
        bounds = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
        offsets = np.r_[bounds, users.size]
        return TrajectorySet(tuple(int(u) for u in users[bounds]), offsets, self.states,
                             np.array([r.item_id for r in self.records], dtype=np.int64),
                             np.array([r.reward for r in self.records]),
                             np.array([r.timestamp for r in self.records], dtype=np.int64))

    def save(self, log_path, truth_path) -> None:
        write_log(self.records, log_path)
        Path(truth_path).write_text(json.dumps(self.truth, sort_keys=True, indent=1))


def generate_tabular_log(mdp: TabularMDP, pi, n_users: int, seed=0,
                         continue_prob: float | None = None) -> SimulatedLog:
    """Episodes of a tabular MDP under behavior table ``pi``.

    Items are action indices; states are recorded one-hot.  Each step is
    followed by termination with probability ``1 - continue_prob`` (default
    ``mdp.gamma``).
    """
    pi = _check_policy(mdp, pi)
    c = mdp.gamma if continue_prob is None else continue_prob
    rng = np.random.default_rng(seed)
    records, states, probs = [], [], []
    for user in range(n_users):
        s = rng.choice(mdp.n_states, p=mdp.nu)
        t = 0
        while True:
            a = rng.choice(mdp.n_actions, p=pi[s])
            records.append(InteractionRecord(user, int(a), float(mdp.R[s, a]), t))
            states.append(s)
            probs.append(pi[s, a])
            s = rng.choice(mdp.n_states, p=mdp.P[s, a])
            t += 1
            if rng.random() >= c:
                break
    onehot = np.eye(mdp.n_states)[np.asarray(states, dtype=np.int64)] if states else np.zeros((0, mdp.n_states))
    _, J = exact_value(TabularMDP(mdp.P, mdp.R, mdp.nu, c), pi)
    return SimulatedLog(records, onehot, np.asarray(probs),
                        {"world": "tabular", "continue_prob": c, "J_undiscounted_behavior": J,
                         "n_users": n_users, "seed": seed})


@dataclass(frozen=True)
class LatentWorld:
    """Latent-factor recommendation world.

    ``items`` is ``n x k``.  Users start at ``user_mean + user_sd * N(0, I)``
    (masked coordinates held fixed).  After consuming item ``v`` the unmasked
    coordinates move ``drift`` of the way towards ``v``, on success only, or
    after every step when ``drift_rule='always'``.
    """

    items: np.ndarray
    continue_prob: np.ndarray
    user_mean: np.ndarray
    user_sd: float = 0.1
    drift: float = 0.1
    drift_rule: str = "success"
    drift_mask: np.ndarray | None = None
    name: str = "latent"

    def __post_init__(self):
        n, k = self.items.shape
        if self.continue_prob.shape != (n,) or self.user_mean.shape != (k,):
            raise ValueError("inconsistent world shapes")
        if ((self.continue_prob < 0) | (self.continue_prob >= 1)).any():
            raise ValueError("continuation probabilities must lie in [0, 1)")
        if self.drift_rule not in ("success", "always"):
            raise ValueError(f"unknown drift rule {self.drift_rule!r}")

    @property
    def n_items(self) -> int:
        return self.items.shape[0]

    @property
    def k(self) -> int:
        return self.items.shape[1]

    @property
    def V(self) -> np.ndarray:
        """Item matrix in the ``k x n`` layout used by the policy code."""
        return self.items.T

    @property
    def mask(self) -> np.ndarray:
        return np.ones(self.k) if self.drift_mask is None else self.drift_mask.astype(float)

    def initial_states(self, n: int, rng) -> np.ndarray:
        x = self.user_mean + self.user_sd * rng.standard_normal((n, self.k)) * self.mask
        return x

    def success_prob(self, x: np.ndarray, items: np.ndarray) -> np.ndarray:
        return np.clip(np.einsum("ij,ij->i", x, self.items[items]), 0.0, 1.0)

    def step(self, x, items, rng):
        """Advance users ``x`` that consumed ``items``; returns ``(reward, x', alive)``."""
        r = (rng.random(items.size) < self.success_prob(x, items)).astype(float)
        move = np.ones_like(r) if self.drift_rule == "always" else r
        x = x + self.drift * move[:, None] * self.mask * (self.items[items] - x)
        alive = rng.random(items.size) < self.continue_prob[items]
        return r, x, alive


def _world_probs(world: LatentWorld, w, x):
    scores = item_scores(w, x, world.V)
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    return p / p.sum(axis=1, keepdims=True)


def generate_log(world: LatentWorld, w_behavior, n_users: int, seed=0,
                 max_steps: int | None = None) -> SimulatedLog:
    """Simulate ``n_users`` episodes under a softmax policy on true features.

    ``w_behavior`` weighs joint features of (true user vector, true item
    vector).  All users advance in lockstep; records come out grouped by user.
    """
    rng = np.random.default_rng(seed)
    x = world.initial_states(n_users, rng)
    alive = np.arange(n_users)
    cols = {"user": [], "item": [], "reward": [], "t": [], "state": [], "prob": []}
    t = 0
    while alive.size and (max_steps is None or t < max_steps):
        xa = x[alive]
        probs = _world_probs(world, w_behavior, xa)
        items = _sample_rows(probs, rng)
        r, x_new, cont = world.step(xa, items, rng)
        cols["user"].append(alive)
        cols["item"].append(items)
        cols["reward"].append(r)
        cols["t"].append(np.full(alive.size, t))
        cols["state"].append(xa)
        cols["prob"].append(probs[np.arange(items.size), items])
        x[alive] = x_new
        alive = alive[cont]
        t += 1
    if not cols["user"]:
        return SimulatedLog([], np.zeros((0, world.k)), np.zeros(0), _world_truth(world, n_users, seed))
    user = np.concatenate(cols["user"])
    order = np.lexsort((np.concatenate(cols["t"]), user))
    user = user[order]
    item = np.concatenate(cols["item"])[order]
    reward = np.concatenate(cols["reward"])[order]
    tt = np.concatenate(cols["t"])[order]
    records = [InteractionRecord(int(u), int(i), float(r), int(s))
               for u, i, r, s in zip(user, item, reward, tt)]
    return SimulatedLog(records, np.concatenate(cols["state"])[order],
                        np.concatenate(cols["prob"])[order], _world_truth(world, n_users, seed))


def _world_truth(world, n_users, seed):
    return {"world": world.name, "n_users": n_users, "seed": seed, "k": world.k,
            "n_items": world.n_items, "drift": world.drift, "drift_rule": world.drift_rule}


def rollout_returns(world: LatentWorld, w, start_states: np.ndarray, gamma: float, seed=0,
                    n_rollouts: int = 1, max_steps: int = 10_000) -> np.ndarray:
    """Discounted return of policy ``w`` from each start state (true features).

    Returns an array ``(len(start_states),)`` averaged over ``n_rollouts``.
    """
    rng = np.random.default_rng(seed)
    m = start_states.shape[0]
    x = np.repeat(start_states, n_rollouts, axis=0)
    ret = np.zeros(x.shape[0])
    alive = np.arange(x.shape[0])
    disc = 1.0
    for _ in range(max_steps):
        if not alive.size:
            break
        probs = _world_probs(world, w, x[alive])
        items = _sample_rows(probs, rng)
        r, x_new, cont = world.step(x[alive], items, rng)
        ret[alive] += disc * r
        x[alive] = x_new
        alive = alive[cont]
        disc *= gamma
    return ret.reshape(m, n_rollouts).mean(axis=1)


def rollout_feature_policy(world: LatentWorld, w, V_hat: np.ndarray, lam: float,
                           item_columns: np.ndarray, n_users: int, gamma: float, seed=0,
                           max_steps: int = 10_000) -> np.ndarray:
    """Per-user discounted returns of a policy acting on learned features.

    The policy sees the ridge state built from the user's history with the
    learned item matrix ``V_hat`` (``k' x n'``) and chooses among learned
    columns; ``item_columns[j]`` is the world item behind learned column ``j``.
    """
    rng = np.random.default_rng(seed)
    kh = V_hat.shape[0]
    x = world.initial_states(n_users, rng)
    inverse = np.broadcast_to(np.eye(kh) / lam, (n_users, kh, kh)).copy()
    rhs = np.zeros((n_users, kh))
    ret = np.zeros(n_users)
    alive = np.arange(n_users)
    disc = 1.0
    for _ in range(max_steps):
        if not alive.size:
            break
        u = np.einsum("bij,bj->bi", inverse[alive], rhs[alive])
        scores = item_scores(w, u, V_hat)
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        cols = _sample_rows(p / p.sum(axis=1, keepdims=True), rng)
        items = item_columns[cols]
        r, x_new, cont = world.step(x[alive], items, rng)
        inv, rh, _ = _batched_update(inverse[alive], rhs[alive], V_hat[:, cols].T, r)
        inverse[alive], rhs[alive] = inv, rh
        ret[alive] += disc * r
        x[alive] = x_new
        alive = alive[cont]
        disc *= gamma
    return ret


def item_policy(world: LatentWorld, logits) -> np.ndarray:
    """Joint-feature weights of a state-independent policy with given item logits.

    Requires the item vectors to span the logits, i.e. solves
    ``items @ w_item = logits`` in the least-squares sense.
    """
    k = world.k
    w_item, *_ = np.linalg.lstsq(world.items, np.asarray(logits, dtype=float), rcond=None)
    w = np.zeros(3 * k + 1)
    w[k:2 * k] = w_item
    return w


def linear_value_weights(world: LatentWorld, w, gamma: float) -> np.ndarray:
    """Exact ``theta`` with ``V(x) = theta . x`` for a state-independent policy.

    Valid when drift is unconditional and coordinate 0 is a fixed bias
    (mask 0, every user has ``x_0 = 1``), in which case the value is exactly
    linear in the true user vector.
    """
    if world.drift_rule != "always" or world.mask[0] != 0 or world.user_mean[0] != 1.0:
        raise ValueError("linear values need unconditional drift and a fixed bias coordinate")
    probs = _world_probs(world, w, world.user_mean[None, :])[0]
    k = world.k
    M = np.diag(world.mask)
    D = np.eye(k) - world.drift * M
    G = gamma * world.continue_prob
    vbar = probs @ world.items
    # theta = vbar + sum_a p_a G_a (D^T theta + drift * (theta . M v_a) e_0)
    pg = probs * G
    lhs = np.eye(k) - pg.sum() * D.T
    e0 = np.zeros(k)
    e0[0] = 1.0
    lhs -= world.drift * np.outer(e0, (pg @ world.items) @ M)
    return np.linalg.solve(lhs, vbar)


def linear_world(seed=0, n_items=30, k=4, drift=0.1, continue_prob=0.9) -> LatentWorld:
    """World whose values are exactly linear in the user vector.

    Coordinate 0 is a constant bias (items carry a base acceptance rate
    there); the remaining coordinates drift after every step.
    """
    rng = np.random.default_rng(seed)
    items = np.empty((n_items, k))
    items[:, 0] = rng.uniform(0.2, 0.4, n_items)
    items[:, 1:] = rng.uniform(-0.25, 0.25, (n_items, k - 1))
    mask = np.ones(k)
    mask[0] = 0.0
    mean = np.zeros(k)
    mean[0] = 1.0
    return LatentWorld(items, np.full(n_items, continue_prob), mean, user_sd=0.15,
                       drift=drift, drift_rule="always", drift_mask=mask, name="linear")


def self_preservation_world(seed=0, n_normal=40, n_trap=10, k=4, normal_continue=0.95,
                            trap_continue=0.3, drift=0.1) -> LatentWorld:
    """World with 'trap' items: high acceptance, but users often leave afterwards.

    Normal items are accepted with probability about 0.25, traps about 0.6.
    A myopic recommender favours traps; a lifetime-value recommender avoids
    them.
    """
    rng = np.random.default_rng(seed)
    n = n_normal + n_trap
    items = np.empty((n, k))
    items[:n_normal, 0] = rng.uniform(0.15, 0.35, n_normal)
    items[n_normal:, 0] = rng.uniform(0.5, 0.7, n_trap)
    items[:, 1:] = rng.uniform(-0.2, 0.2, (n, k - 1))
    cont = np.r_[np.full(n_normal, normal_continue), np.full(n_trap, trap_continue)]
    mask = np.ones(k)
    mask[0] = 0.0
    mean = np.zeros(k)
    mean[0] = 1.0
    return LatentWorld(items, cont, mean, user_sd=0.2, drift=drift, drift_rule="success",
                       drift_mask=mask, name="self_preservation")


def scripted_policies(world: LatentWorld, strength: float = 3.0) -> dict:
    """Behavior, myopic-optimal-leaning and LTV-leaning item-logit policies.

    Behavior is uniform.  The myopic policy up-weights items by expected
    immediate acceptance at the mean user; the LTV policy up-weights items by
    acceptance plus the value of staying, using the one-step lookahead
    ``p_j + c_j * J_uniform``.
    """
    n = world.n_items
    p = world.success_prob(np.repeat(world.user_mean[None, :], n, axis=0), np.arange(n))
    stay = world.continue_prob * p.mean() / max(1e-9, 1.0 - world.continue_prob.mean())
    myopic = strength * (p - p.mean()) / (p.std() + 1e-12)
    ltv_score = p + stay
    ltv = strength * (ltv_score - ltv_score.mean()) / (ltv_score.std() + 1e-12)

    return {"behavior": np.zeros(n), "myopic": myopic, "ltv": ltv}


def logit_returns(world: LatentWorld, logits, n_users: int, gamma: float, seed=0) -> np.ndarray:
    """Per-user discounted returns of a fixed item-logit policy."""
    rng = np.random.default_rng(seed)
    p = np.exp(logits - np.max(logits))
    p /= p.sum()
    x = world.initial_states(n_users, rng)
    ret = np.zeros(n_users)
    alive = np.arange(n_users)
    disc = 1.0
    while alive.size:
        items = rng.choice(world.n_items, size=alive.size, p=p)
        r, x_new, cont = world.step(x[alive], items, rng)
        ret[alive] += disc * r
        x[alive] = x_new
        alive = alive[cont]
        disc *= gamma
    return ret


def truth_for(world: LatentWorld, gamma: float, n_users: int = 20_000, seed=0) -> dict:
    """Monte-Carlo J (mean discounted return) of the scripted policies."""
    out = {}
    for name, logits in scripted_policies(world).items():
        ret = logit_returns(world, logits, n_users, gamma, seed)
        out[name] = {"J": float(ret.mean()), "se": float(ret.std(ddof=1) / np.sqrt(n_users))}
    return out
