import os
from pathlib import Path

import numpy as np
import pytest

from prism_rm.phantom import PhantomSpec, cached_phantom, generate

SMALL = PhantomSpec(dims=(16, 16, 16), a_max=4.0, h_max=1.0, n_landmarks=12, render_steps=8)


def cache_dir(config) -> Path:
    env = os.environ.get("PRISM_CACHE")
    return Path(env) if env else config.cache.mkdir("prism")


@pytest.fixture(scope="session")
def phantom_cache(pytestconfig):
    return cache_dir(pytestconfig)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(SMALL)


@pytest.fixture(scope="session")
def default_dataset(phantom_cache):
    return cached_phantom(PhantomSpec(), phantom_cache)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


AC_LINES: list[str] = []


@pytest.fixture(scope="session")
def ac_record():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        AC_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if AC_LINES:
        terminalreporter.section("acceptance criteria")
        for line in AC_LINES:
            terminalreporter.write_line(line)
