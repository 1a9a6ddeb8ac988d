import numpy as np
import pytest

from dpolab.data.pool import build_pool, desk_datasets


def central_difference(f, x, index, h=1e-5):
    xp, xm = x.copy(), x.copy()
    xp[index] += h
    xm[index] -= h
    return (f(xp) - f(xm)) / (2 * h)


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def random_indices(shape, count, seed):
    rng = np.random.default_rng(seed)
    return [tuple(int(rng.integers(0, s)) for s in shape) for _ in range(count)]


@pytest.fixture(scope="session")
def desk_data():
    return desk_datasets()


@pytest.fixture(scope="session")
def pool_cache(tmp_path_factory):
    """Model cache shared by the fixtures and CLI runs so the pool trains once."""
    return str(tmp_path_factory.mktemp("pool"))


@pytest.fixture(scope="session")
def desk_pool(desk_data, pool_cache):
    return build_pool(desk_data[0], cache_dir=pool_cache)


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
