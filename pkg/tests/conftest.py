import numpy as np
import pytest

from ltvrec.states import TrajectorySet, build_states

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    skipped = call.excinfo is not None and call.excinfo.errisinstance(pytest.skip.Exception)
    prev = _ACCEPTANCE.get(number, (title, []))
    status = "FAIL" if failed else ("SKIP" if skipped else "PASS")
    if call.when == "call" or status != "PASS":
        prev[1].append((item.name, status))
    _ACCEPTANCE[number] = prev


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcomes = _ACCEPTANCE[number]
        statuses = {s for _, s in outcomes}
        if "FAIL" in statuses:
            verdict = "FAIL"
        elif statuses == {"SKIP"}:
            verdict = "SKIP"
        else:
            verdict = "PASS"
        parts = ", ".join(f"{name}={s}" for name, s in outcomes if s != "PASS")
        extra = f"  ({parts})" if parts and verdict == "PASS" else ""
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}{extra}")


def random_trajectories(n_users=30, k=3, n_items=12, max_len=8, seed=0, lam=0.5):
    """A TrajectorySet with ridge states built from random item vectors."""
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, max_len + 1, n_users)
    offsets = np.r_[0, np.cumsum(lengths)]
    items = rng.integers(0, n_items, offsets[-1])
    rewards = (rng.random(offsets[-1]) < 0.4).astype(float)
    V = rng.normal(0, 0.5, (k, n_items))
    states = build_states(offsets, items, rewards, V, lam)
    stamps = np.concatenate([np.arange(n) for n in lengths]).astype(np.int64)
    traj = TrajectorySet(tuple(range(n_users)), offsets, states, items, rewards, stamps)
    return traj, V


@pytest.fixture
def small_traj():
    return random_trajectories()
