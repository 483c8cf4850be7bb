"""Shared fixtures: the paired 2000-step training runs are done once per session."""

import time
from concurrent.futures import ProcessPoolExecutor

import pytest

from garmentedit import trainer as tr


def _train(architecture):
    start = time.perf_counter()
    result = tr.train(tr.TrainConfig(architecture=architecture))
    return result, time.perf_counter() - start


@pytest.fixture(scope="session")
def trained():
    """Attention and baseline mappers trained with identical data, budget and losses.

    The two runs are independent, so they train in two worker processes.
    Returns ``{arch: TrainResult}`` plus the wall time under ``"seconds"``.
    """
    start = time.perf_counter()
    with ProcessPoolExecutor(max_workers=2) as pool:
        futures = {a: pool.submit(_train, a) for a in ("attention", "baseline")}
        runs = {a: f.result() for a, f in futures.items()}
    out = {a: r for a, (r, _) in runs.items()}
    out["seconds"] = time.perf_counter() - start
    return out
