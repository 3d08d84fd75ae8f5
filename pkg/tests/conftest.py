import os
import sys

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from discretize import DiscreteSystem, build_fd_interval  # noqa: E402
from stepper import SolverConfig, Termination, Trajectory  # noqa: E402


def single_node(a=4.0, m=0.5):
    """One node with M=[m], A=[[a]]; a tiny ``a`` switches diffusion off for ODE checks."""
    return DiscreteSystem(dim=1, nodes=[[0.5]], mass=[m], stiffness=sp.csr_matrix([[a]]),
                          h=0.5, label='single')


def synthetic_trajectory(sys, p, t, states, lam=1e-3, termination=Termination.W_THRESHOLD):
    """Trajectory with every step stored, built from given times and states."""
    t = np.asarray(t, dtype=float)
    states = np.asarray(states, dtype=float)
    w = states @ sys.mass
    tau = np.append(np.diff(t), lam / w[-1] ** p)
    return Trajectory(
        system=sys, config=SolverConfig(p=p, lam=lam), t=t, tau=tau, w=w,
        phi=-np.ones(len(t)), max_u=states.max(axis=1), argmax=states.argmax(axis=1),
        halvings=np.zeros(len(t), dtype=int), snapshot_index=np.arange(len(t)), snapshots=states,
        termination=termination)


@pytest.fixture
def single():
    return single_node()


@pytest.fixture
def interval2():
    return build_fd_interval(2)


@pytest.fixture
def interval3():
    return build_fd_interval(3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
