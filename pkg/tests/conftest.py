import numpy as np
import pytest

from relaxed_align.distributions import make_discrete


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full training reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def _random_pair(rng: np.random.Generator, max_atoms: int = 10, dim: int = 1):
    """Two distributions over a shared random integer grid; either may miss some atoms"""
    n = int(rng.integers(1, max_atoms + 1))
    atoms = np.unique(rng.integers(-20, 21, size=(n, dim)).astype(float), axis=0)
    n = atoms.shape[0]
    p_mass = rng.random(n) * (rng.random(n) < 0.9)
    q_mass = rng.random(n) * (rng.random(n) < 0.8)
    if p_mass.sum() == 0:
        p_mass[0] = 1.0
    if q_mass.sum() == 0:
        q_mass[-1] = 1.0
    p = make_discrete(atoms[p_mass > 0], p_mass[p_mass > 0])
    q = make_discrete(atoms[q_mass > 0], q_mass[q_mass > 0])
    return p, q


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def random_pair():
    return _random_pair


@pytest.fixture
def two_atom_pair():
    """p = [0.5, 0.5], q = [0.25, 0.75] on {0, 1}"""
    return make_discrete([[0.0], [1.0]], [0.5, 0.5]), make_discrete([[0.0], [1.0]], [0.25, 0.75])
