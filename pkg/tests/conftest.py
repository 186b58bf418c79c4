import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import spbe
from spbe.stage import SolverConfig


def pytest_addoption(parser):
    parser.addoption(
        "--fast", action="store_true", default=False,
        help="skip the slow end-to-end solves",
    )


@pytest.fixture(scope="session")
def pubgoods_d0():
    return spbe.public_goods_spec(1.2, 0.2, 0.0)


@pytest.fixture(scope="session")
def pubgoods_d05():
    return spbe.public_goods_spec(1.2, 0.2, 0.5)


@pytest.fixture(scope="session")
def pubgoods_d095():
    return spbe.public_goods_spec(1.2, 0.2, 0.95)


@pytest.fixture(scope="session")
def grid_02(pubgoods_d0):
    return spbe.BeliefGrid.for_spec(pubgoods_d0, h=0.02)


@pytest.fixture(scope="session")
def solved_d0(pubgoods_d0, grid_02):
    cfg = SolverConfig(symmetric=True)
    return spbe.solve_fixed_point(pubgoods_d0, grid_02, cfg=cfg)


@pytest.fixture(scope="session")
def solved_d05(pubgoods_d05, grid_02):
    cfg = SolverConfig(symmetric=True)
    return spbe.solve_fixed_point(pubgoods_d05, grid_02, cfg=cfg)


@pytest.fixture(scope="session")
def solved_d095(pubgoods_d095, grid_02):
    cfg = SolverConfig(symmetric=True)
    return spbe.solve_fixed_point(pubgoods_d095, grid_02, cfg=cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240613)


def random_game(rng, n_agents=2, nx_max=3, na_max=3, delta=None, static=False):
    """Random valid game spec for property tests."""
    nx = [int(rng.integers(1, nx_max + 1)) for _ in range(n_agents)]
    na = [int(rng.integers(1, na_max + 1)) for _ in range(n_agents)]
    nja = int(np.prod(na))
    njt = int(np.prod(nx))
    types = [[f"t{i}_{k}" for k in range(nx[i])] for i in range(n_agents)]
    actions = [[f"a{i}_{k}" for k in range(na[i])] for i in range(n_agents)]
    q0 = []
    for i in range(n_agents):
        v = rng.random(nx[i]) + 0.05
        q0.append((v / v.sum()).tolist())
    q = []
    for i in range(n_agents):
        if static:
            t = np.zeros((nx[i], nja, nx[i]))
            for x in range(nx[i]):
                t[x, :, x] = 1.0
        else:
            t = rng.random((nx[i], nja, nx[i])) + 0.02
            t /= t.sum(axis=-1, keepdims=True)
        q.append(t.tolist())
    reward = [(rng.random((njt, nja)) * 2 - 1).tolist() for _ in range(n_agents)]
    if delta is None:
        delta = float(rng.random() * 0.9)
    return spbe.make_spec(types, actions, q0, q, reward, delta)
