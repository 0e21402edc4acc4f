import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fedroute.vrp_core import Instance, make_variant  # noqa: E402


def build_instance(depot, coords, demands, open=False, backhaul=False, limit=None,
                   tw=None, service=None, capacity=1.0, linehaul_first=False):
    """Hand-made instance; ``tw`` is a list of (e, l) pairs including the depot."""
    spec = make_variant(open, backhaul, limit is not None, tw is not None)
    tw_start = tw_end = None
    if tw is not None:
        tw_start = np.array([a for a, _ in tw], dtype=float)
        tw_end = np.array([b for _, b in tw], dtype=float)
        service = np.asarray(service if service is not None else [0.0] * len(coords), dtype=float)
    return Instance(np.asarray(depot, dtype=float), np.asarray(coords, dtype=float).reshape(-1, 2),
                    np.asarray(demands, dtype=float), spec, capacity=capacity, duration_limit=limit,
                    tw_start=tw_start, tw_end=tw_end, service=service,
                    linehaul_first=linehaul_first)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
