import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eventgrad import KernelSpec, Parameters, Topology

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_params(sizes, w, d, A=None, kernel=None, theta0=0.5, tau_a=30.0, window_T=100.0):
    """Parameters from explicit per-block arrays."""
    topo = Topology(tuple(sizes))
    shapes = topo.block_shapes()
    w = tuple(np.asarray(b, dtype=float).reshape(s) for b, s in zip(w, shapes))
    d = tuple(np.asarray(b, dtype=float).reshape(s) for b, s in zip(d, shapes))
    if A is None:
        A = tuple(np.zeros(b) for _, b in shapes)
    else:
        A = tuple(np.asarray(a, dtype=float).reshape(b) for a, (_, b) in zip(A, shapes))
    return Parameters(topo, w, d, A, kernel=kernel or KernelSpec(), theta0=theta0,
                      tau_a=tau_a, window_T=window_T)


@pytest.fixture
def double_kernel():
    return KernelSpec.double()


@pytest.fixture
def causal_kernel():
    return KernelSpec.causal()


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash.setdefault(ACCEPTANCE, {})[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
