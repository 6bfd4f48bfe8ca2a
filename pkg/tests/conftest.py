import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trajdistill.config import RunConfig
from trajdistill.schedule import linear_beta_schedule

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

DESK_OMEGAS = (0.8, 1.0)


def pytest_configure(config):
    config.addinivalue_line("markers", "desk: runs the full desk-scale teacher/student pipeline (minutes)")


@pytest.fixture(scope="session")
def sched():
    return linear_beta_schedule()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Two identical full desk pipelines; the first also feeds the quality checks."""
    from trajdistill.pipeline import run_desk

    cfg = RunConfig()
    runs = []
    for name in ("run_a", "run_b"):
        out = str(tmp_path_factory.mktemp(name))
        t0 = time.perf_counter()
        res = run_desk(cfg, out_dir=out, omegas=DESK_OMEGAS)
        runs.append((out, res, time.perf_counter() - t0))
    return cfg, runs


def tree_bytes(root):
    files = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            p = os.path.join(dirpath, n)
            with open(p, "rb") as fh:
                files[os.path.relpath(p, root)] = fh.read()
    return files


ACCEPTANCE_LINES = []


def report(name, passed, detail, soft=False):
    """Record one acceptance line; printed again in the session summary."""
    tag = "PASS" if passed else ("WARN" if soft else "FAIL")
    line = f"{tag} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
