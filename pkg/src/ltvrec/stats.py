"""Trajectory bootstrap and the one-sided Wilcoxon signed-rank test."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 25
STATES_PER_TRAJECTORY = 5


class IndistinguishableError(ValueError):
    """All paired differences are zero."""


def derived_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def sample_state_rows(offsets: np.ndarray, traj_ids: np.ndarray, per_traj: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Rows of up to ``per_traj`` distinct uniformly chosen steps per trajectory.

    ``traj_ids`` may repeat; every occurrence draws its own states.  Shorter
    trajectories contribute all of their steps.
    """
    traj_ids = np.asarray(traj_ids, dtype=np.int64)
    lengths = np.diff(offsets)[traj_ids]
    total = int(lengths.sum())
    copy = np.repeat(np.arange(traj_ids.size), lengths)
    pos = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    keys = rng.random(total)
    order = np.lexsort((keys, copy))
    # order keeps copies contiguous; rank of each row inside its copy
    rank = np.empty(total, dtype=np.int64)
    rank[order] = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    keep = rank < per_traj
    rows = offsets[traj_ids][copy] + pos
    return rows[keep]


@dataclass(frozen=True)
class Resample:
    """One bootstrap draw of whole trajectories.

    ``index`` lists the drawn trajectories (with repeats); ``state_seed``
    seeds the state-sampling step, identical for every evaluator of the draw.
    """

    b: int
    index: np.ndarray
    counts: np.ndarray
    state_seed: tuple

    def state_rng(self) -> np.random.Generator:
        return derived_rng(*self.state_seed)


def draw_resamples(n_traj: int, B: int, seed: int):
    for b in range(B):
        rng = derived_rng(seed, b, 0)
        index = rng.integers(0, n_traj, size=n_traj)
        yield Resample(b, index, np.bincount(index, minlength=n_traj), (seed, b, 1))


@dataclass(frozen=True)
class BootstrapResult:
    values: np.ndarray
    seed: int
    level: float = 0.95

    @property
    def B(self) -> int:
        return self.values.size

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def sd(self) -> float:
        return float(self.values.std(ddof=1))

    @property
    def half_width(self) -> float:
        return float(norm.ppf(0.5 + self.level / 2)) * self.sd

    @property
    def interval(self) -> tuple[float, float]:
        return self.mean - self.half_width, self.mean + self.half_width

    def percentile_interval(self) -> tuple[float, float]:
        a = (1 - self.level) / 2
        lo, hi = np.quantile(self.values, [a, 1 - a])
        return float(lo), float(hi)

    def contains(self, x: float) -> bool:
        lo, hi = self.interval
        return lo <= x <= hi


def bootstrap_value(n_traj: int, evaluator: Callable[[Resample], float], B: int = 200,
                    seed: int = 0) -> BootstrapResult:
    """Evaluate ``evaluator`` on ``B`` trajectory-level resamples.

    Resample ``b`` is drawn from a generator seeded by ``(seed, b)``, so
    results are reproducible and independent of evaluation order.
    """
    if B < 2:
        raise ValueError("need at least two resamples")
    values = np.empty(B)
    for res in draw_resamples(n_traj, B, seed):
        try:
            values[res.b] = evaluator(res)
        except Exception as exc:
            raise RuntimeError(f"evaluator failed on resample {res.b}: {exc}") from exc
    return BootstrapResult(values, seed)


def _exact_upper_tail(doubled_ranks: np.ndarray, stat2: int) -> float:
    """``P(W+ >= stat)`` under random signs; ranks and statistic doubled to integers."""
    total = int(doubled_ranks.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:-r] if r else dist
        dist = 0.5 * (dist + shifted)
    return float(min(1.0, dist[stat2:].sum()))


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    w_plus: float
    n: int
    method: str


def wilcoxon_one_sided(differences, method: str = "auto") -> WilcoxonResult:
    """Signed-rank test of H1: differences tend to be positive.

    Zeros are dropped, ties get midranks.  ``method='auto'`` uses the exact
    null distribution up to 25 non-zero differences and the tie- and
    continuity-corrected normal approximation beyond.
    """
    d = np.asarray(differences, dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise IndistinguishableError("all differences are zero")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = _exact_upper_tail(doubled, int(round(2 * w_plus)))
    elif method == "normal":
        _, tie_counts = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        z = (w_plus - mean - 0.5) / np.sqrt(var)
        p = float(norm.sf(z))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(p, w_plus, n, method)


@dataclass(frozen=True)
class PairedComparison:
    values_a: np.ndarray
    values_b: np.ndarray
    test: WilcoxonResult

    @property
    def p_value(self) -> float:
        return self.test.p_value


def compare_policies(n_traj: int, evaluator_a, evaluator_b, B: int = 200,
                     seed: int = 0) -> PairedComparison:
    """Test whether B's value exceeds A's on shared resamples."""
    a = bootstrap_value(n_traj, evaluator_a, B, seed).values
    b = bootstrap_value(n_traj, evaluator_b, B, seed).values
    return paired_test(a, b)


def paired_test(values_a, values_b) -> PairedComparison:
    values_a, values_b = np.asarray(values_a), np.asarray(values_b)
    try:
        test = wilcoxon_one_sided(values_b - values_a)
    except IndistinguishableError:
        raise IndistinguishableError("policies are indistinguishable on every resample") from None
    return PairedComparison(values_a, values_b, test)
