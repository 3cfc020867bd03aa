import time
from contextlib import contextmanager

import numpy as np
import pytest

from vodkit import kernels
from vodkit.ingest import ObservationMatrix

# (number, title) -> (status, seconds, detail), filled by test_acceptance.py
ACCEPTANCE: dict = {}


@contextmanager
def criterion(number: int, title: str, limit_s: float | None = None):
    """Record one acceptance criterion; fails it if the body raises or runs long."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - t0
        if limit_s is not None:
            assert elapsed < limit_s, f"took {elapsed:.1f}s, limit {limit_s}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        ACCEPTANCE[number] = ("FAIL", title, elapsed, f"{type(exc).__name__}: {exc}".splitlines()[0][:160])
        print(f"\n[A{number}] FAIL {title} ({elapsed:.1f}s)")
        raise
    ACCEPTANCE[number] = ("PASS", title, elapsed, info["detail"])
    print(f"\n[A{number}] PASS {title} ({elapsed:.1f}s) {info['detail']}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        status, title, secs, detail = ACCEPTANCE[num]
        tr.write_line(f"A{num:<3d}{status}  {title}  [{secs:.1f}s]  {detail}")
    passed = sum(v[0] == "PASS" for v in ACCEPTANCE.values())
    tr.write_line(f"{passed}/{len(ACCEPTANCE)} acceptance criteria passed")


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_obs(rng, m, n, fill=0.5, low_rank=None):
    """Random [0,1] matrix (optionally exact low rank) with at least one observed cell."""
    if low_rank:
        a = rng.uniform(0, 1, (m, low_rank)) @ rng.uniform(0, 1, (low_rank, n))
        vals = a / a.max()
    else:
        vals = rng.uniform(0, 1, (m, n))
    mask = rng.random((m, n)) < fill
    mask.flat[rng.integers(m * n)] = True
    return ObservationMatrix.from_dense(vals, mask)
