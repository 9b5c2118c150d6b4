import functools

import numpy as np
import pytest

from clk import phantom


@functools.lru_cache(maxsize=None)
def _suite(seed=42):
    return {name: phantom.rasterize(spec) for name, spec in phantom.standard_suite(seed)}


@pytest.fixture(scope="session")
def suite():
    """Rasterized standard phantoms keyed by name: ``(mask, truth)``."""
    return _suite()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_net():
    """Default desk-scale network trained on the suite with the straight tube held out (several minutes)."""
    import time

    from clk import pipeline

    t0 = time.perf_counter()
    result = pipeline.train_net(pipeline.PipelineConfig(), exclude=("straight",))
    result.seconds = time.perf_counter() - t0
    return result


_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)``; printed in the terminal summary."""

    def record(n, passed, detail):
        line = f"acceptance {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
