import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def pytest_addoption(parser):
    parser.addoption("--seed", type=int, default=20240607, help="seed of the rng fixture")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: convergence runs taking minutes")


@pytest.fixture
def rng(request):
    return np.random.default_rng(request.config.getoption("--seed"))


@pytest.fixture
def manufactured_error():
    """|||(w_h - grad u, u_h - u)|||_lambda for u = cos(2 pi x) cos(2 pi y), at the problem quadrature."""
    def error(problem, state):
        Dw, gu, u, _, _, _ = problem.qp_data(state.vector())
        x = problem.points.reshape(-1, 2)
        k = 2 * np.pi
        c1, c2 = np.cos(k * x[:, 0]), np.cos(k * x[:, 1])
        s1, s2 = np.sin(k * x[:, 0]), np.sin(k * x[:, 1])
        ue = c1 * c2
        ge = np.column_stack([-k * s1 * c2, -k * c1 * s2])
        He = np.empty((x.shape[0], 2, 2))
        He[:, 0, 0] = He[:, 1, 1] = -k ** 2 * c1 * c2
        He[:, 0, 1] = He[:, 1, 0] = k ** 2 * s1 * s2
        w = problem.weights.ravel()
        lam = problem.lam
        sq = (np.sum((Dw - He) ** 2, axis=(1, 2)) + 2 * lam * np.sum((gu - ge) ** 2, axis=1)
              + lam ** 2 * (u - ue) ** 2)
        return float(np.sqrt(np.sum(w * sq)))
    return error
