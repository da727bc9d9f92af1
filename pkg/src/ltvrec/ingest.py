"""Interaction-log ingestion.

Raw logs are delimiter-separated text with a header naming the columns
``user_id``, ``item_id``, ``reward`` and ``timestamp`` (any order, extra
columns ignored).  The output of this module is a :class:`Dataset`: per-user
time-ordered event lists over a dense item index.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

_logger = logging.getLogger(__name__)

COLUMNS = ("user_id", "item_id", "reward", "timestamp")


class IngestError(ValueError):
    """Raised for unreadable or malformed interaction logs."""


class EmptyDatasetError(IngestError):
    """Raised when filtering leaves no users."""


@dataclass(frozen=True)
class InteractionRecord:
    user_id: Hashable
    item_id: Hashable
    reward: float
    timestamp: int

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise IngestError(f"non-finite reward {self.reward!r}")
        if self.timestamp < 0:
            raise IngestError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class UserLog:
    """Events of one user sorted by timestamp; ties keep input order."""

    user_id: Hashable
    events: tuple[InteractionRecord, ...]

    def __len__(self):
        return len(self.events)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([e.reward for e in self.events], dtype=float)


@dataclass(frozen=True)
class Dataset:
    """Filtered logs plus the dense item index and the discount factor.

    ``item_index`` maps raw item ids to columns ``0..n_items-1`` in order of
    first appearance.  ``filter_counts`` records how many users survived each
    filtering stage.
    """

    logs: tuple[UserLog, ...]
    item_ids: tuple[Hashable, ...]
    gamma: float | None = None
    reward_scale: tuple[float, float] | None = None
    filter_counts: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.logs)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_samples(self) -> int:
        return sum(len(log) for log in self.logs)

    @property
    def item_index(self) -> dict:
        return {item: j for j, item in enumerate(self.item_ids)}

    def to_triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(user_index, item_index, reward)`` arrays in log order."""
        index = self.item_index
        users, items, rewards = [], [], []
        for i, log in enumerate(self.logs):
            for e in log.events:
                users.append(i)
                items.append(index[e.item_id])
                rewards.append(e.reward)
        return (
            np.asarray(users, dtype=np.int64),
            np.asarray(items, dtype=np.int64),
            np.asarray(rewards, dtype=float),
        )


def _parse_id(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def parse_log(path, delimiter: str = ",") -> list[InteractionRecord]:
    """Read an interaction log.

    Parameters
    ----------
    path : str or Path
        Delimited UTF-8 text file with a header row.
    delimiter : str
        Field separator.

    Returns
    -------
    list of InteractionRecord
        One record per data row, in file order.  Repeated
        ``(user, item, timestamp)`` rows are kept.

    Raises
    ------
    IngestError
        If the file is missing, the header lacks a required column, or a
        field cannot be parsed.  The message names the offending line.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"input file not found: {path}")
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            return records
        header = [h.strip() for h in header]
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise IngestError(f"{path}: header missing columns {missing}")
        pos = [header.index(c) for c in COLUMNS]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) < len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            u, it, r, t = (row[p].strip() for p in pos)
            try:
                reward = float(r)
            except ValueError:
                raise IngestError(f"{path}:{lineno}: unparseable reward {r!r}") from None
            try:
                ts = int(float(t)) if "." in t or "e" in t.lower() else int(t)
            except ValueError:
                raise IngestError(f"{path}:{lineno}: unparseable timestamp {t!r}") from None
            try:
                records.append(InteractionRecord(_parse_id(u), _parse_id(it), reward, ts))
            except IngestError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
    return records


def write_log(records: Iterable[InteractionRecord], path, delimiter: str = ",") -> None:
    """Write records in the format read by :func:`parse_log`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(COLUMNS)
        for rec in records:
            writer.writerow([rec.user_id, rec.item_id, repr(float(rec.reward)), rec.timestamp])


def _is_binary(rewards: Sequence[float]) -> bool:
    return all(r == 0.0 or r == 1.0 for r in rewards)


def group_users(records: Sequence[InteractionRecord]) -> list[UserLog]:
    """Group records by user, sort each user's events by timestamp (stable)."""
    by_user: dict = {}
    for rec in records:
        by_user.setdefault(rec.user_id, []).append(rec)
    logs = []
    for user, events in by_user.items():
        events = sorted(events, key=lambda e: e.timestamp)
        logs.append(UserLog(user, tuple(events)))
    return logs


def filter_users(
    records: Sequence[InteractionRecord] | Dataset,
    min_interactions: int = 20,
    require_positive: bool = False,
) -> Dataset:
    """Drop light users and, for click data, users without a single click.

    The count filter runs first.  The zero-click filter only applies when all
    rewards are binary; graded ratings pass through it untouched.
    """
    if min_interactions < 1:
        raise ValueError("min_interactions must be >= 1")
    if isinstance(records, Dataset):
        records = [e for log in records.logs for e in log.events]
    logs = group_users(records)
    counts = {"input_users": len(logs)}
    logs = [log for log in logs if len(log) >= min_interactions]
    counts["after_count_filter"] = len(logs)
    if require_positive and _is_binary([r.reward for r in records]):
        logs = [log for log in logs if any(e.reward != 0 for e in log.events)]
    counts["after_positive_filter"] = len(logs)
    if not logs:
        raise EmptyDatasetError(
            f"no users left after filtering (min_interactions={min_interactions}, "
            f"require_positive={require_positive})"
        )
    items = {}
    for log in logs:
        for e in log.events:
            items.setdefault(e.item_id, None)
    return Dataset(tuple(logs), tuple(items), filter_counts=counts)


def estimate_gamma(dataset: Dataset | None = None, *, n_users: int | None = None,
                   n_samples: int | None = None) -> float:
    """Drop-out based discount: ``1 - n_users / n_samples``.

    Either pass a dataset or the two counts.  ``n_samples == n_users`` (one
    event per user) gives 0.
    """
    if dataset is not None:
        n_users, n_samples = dataset.n_users, dataset.n_samples
    if not n_users or n_users <= 0:
        raise ValueError("need at least one user")
    if n_samples < n_users:
        raise ValueError(f"n_samples={n_samples} < n_users={n_users}")
    return 1.0 - n_users / n_samples


def with_gamma(dataset: Dataset, gamma: float | None = None) -> Dataset:
    """Attach a discount factor (estimated when ``gamma`` is None)."""
    if gamma is None:
        gamma = estimate_gamma(dataset)
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return replace(dataset, gamma=float(gamma))


def scale_rewards(dataset: Dataset, target: tuple[float, float] = (0.0, 1.0),
                  source: tuple[float, float] | None = None) -> Dataset:
    """Affinely map rewards onto ``target``.

    ``source`` defaults to the observed (min, max).  A degenerate source range
    maps every reward to the midpoint of ``target``.
    """
    rewards = np.concatenate([log.rewards for log in dataset.logs])
    lo, hi = source if source is not None else (float(rewards.min()), float(rewards.max()))
    t_lo, t_hi = target
    if hi > lo:
        def f(r):
            return t_lo + (r - lo) * (t_hi - t_lo) / (hi - lo)
    else:
        mid = 0.5 * (t_lo + t_hi)

        def f(r):
            return mid
    logs = tuple(
        UserLog(log.user_id, tuple(replace(e, reward=float(f(e.reward))) for e in log.events))
        for log in dataset.logs
    )
    return replace(dataset, logs=logs, reward_scale=(lo, hi))
