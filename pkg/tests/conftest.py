import numpy as np
import pytest

from cmdpgrad import io as cio
from cmdpgrad import policy as pol
from cmdpgrad.mdp import MdpModel


@pytest.fixture(scope="session")
def est_model():
    return cio.load_model("estimation")


@pytest.fixture(scope="session")
def est_theta(est_model):
    return est_model.flat_theta(cio.load_theta("estimation"))


@pytest.fixture(scope="session")
def est_alpha(est_model, est_theta):
    return pol.alpha_from_theta_table(est_theta, est_model.action_counts)


@pytest.fixture(scope="session")
def track_a():
    return cio.load_model("tracking_a")


@pytest.fixture(scope="session")
def track_b():
    return cio.load_model("tracking_b")


def random_model(rng, n_states=None, n_actions=None, n_constraints=1, ragged=False):
    """Dense random MDP with strictly positive transitions (unichain for every policy)."""
    S = int(rng.integers(2, 5)) if n_states is None else n_states
    U = int(rng.integers(2, 4)) if n_actions is None else n_actions
    A = rng.dirichlet(np.ones(S), size=(U, S)) * 0.9 + 0.1 / S
    cost = rng.normal(0, 10, size=(S, U))
    cons = rng.normal(0, 5, size=(n_constraints, S, U))
    counts = rng.integers(1, U + 1, size=S) if ragged else None
    if counts is not None:
        counts[0] = U
    return MdpModel.from_dense(A, cost, cons, rng.normal(0, 1, n_constraints), counts)


def interior_alpha(rng, model, margin=0.05):
    return rng.uniform(margin, np.pi / 2 - margin, model.num_components)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
