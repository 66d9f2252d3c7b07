"""
Shared fixtures: the 50-state lazy chain, the killed random walk family and
random nonnegative matrices with controlled block structure.
"""

import logging

import numpy as np
import pytest

from kernel_core import Kernel, killed_walk_spec, truncate
from qsd_sim import AbsorbedModel, compile_model

LAZY_STATES = 50
STICKY = {5: (0.025, 0.025, 0.95)}
THETA1_WALK = 0.2 + 2 * np.sqrt(0.2 * 0.6)


def lazy_chain_model(rho_delta=0.3, rho_partial=0.2, n=LAZY_STATES) -> AbsorbedModel:
    R = np.full((n, n), 1.0 / n)
    rho_delta = np.broadcast_to(np.asarray(rho_delta, dtype=float), (n,))
    rho_partial = np.broadcast_to(np.asarray(rho_partial, dtype=float), (n,))
    return AbsorbedModel.lazy_chain(R, 1.0 - rho_delta - rho_partial, rho_delta, rho_partial)


def walk_kernel(N: int, sticky: bool = False) -> Kernel:
    return truncate(killed_walk_spec(sticky=STICKY if sticky else None), N)


def random_positive(rng: np.random.Generator, n: int, low: float = 0.1, high: float = 1.0) -> np.ndarray:
    return rng.uniform(low, high, size=(n, n))


def cyclic_block(rng: np.random.Generator, sizes) -> np.ndarray:
    """Irreducible block whose period is len(sizes): group g only feeds group g+1"""
    n = sum(sizes)
    starts = np.cumsum([0] + list(sizes))
    block = np.zeros((n, n))
    for g in range(len(sizes)):
        h = (g + 1) % len(sizes)
        block[starts[g]:starts[g + 1], starts[h]:starts[h + 1]] = rng.uniform(
            0.2, 1.0, size=(sizes[g], sizes[h])
        )
    return block


def normalize_radius(block: np.ndarray, radius: float) -> np.ndarray:
    rho = float(np.max(np.abs(np.linalg.eigvals(block))))
    return block * (radius / rho)


def reducible_instance(rng: np.random.Generator, period: int = 1, weak_upstream: bool = True) -> np.ndarray:
    """Dominant block (radius 1, given period) coupled one way to a weaker aperiodic block (radius 0.5)"""
    sizes = list(rng.integers(1, 3, size=period)) if period > 1 else [int(rng.integers(2, 5))]
    strong = normalize_radius(cyclic_block(rng, sizes) if period > 1 else random_positive(rng, sizes[0]), 1.0)
    m = int(rng.integers(2, 5))
    weak = normalize_radius(random_positive(rng, m), 0.5)
    n_s = strong.shape[0]
    P = np.zeros((n_s + m, n_s + m))
    if weak_upstream:
        P[:m, :m] = weak
        P[m:, m:] = strong
        P[:m, m:] = rng.uniform(0.0, 0.3, size=(m, n_s))
    else:
        P[:n_s, :n_s] = strong
        P[n_s:, n_s:] = weak
        P[:n_s, n_s:] = rng.uniform(0.0, 0.3, size=(n_s, m))
    return P


@pytest.fixture
def restore_logging():
    """Undo handlers installed by setup_logging"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def lazy_model():
    return lazy_chain_model()


@pytest.fixture
def lazy_kernel(lazy_model):
    return compile_model(lazy_model)


@pytest.fixture
def two_cycle():
    return Kernel.from_matrix([[0.0, 0.9], [0.9, 0.0]], name='two-cycle')


@pytest.fixture
def triangular():
    return Kernel.from_matrix([[0.5, 0.5], [0.0, 0.5]], name='triangular')


@pytest.fixture
def triangular_chain():
    return Kernel.from_matrix([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 0.5]], name='chain-3')


@pytest.fixture
def two_state():
    return Kernel.from_matrix([[0.675, 0.225], [0.225, 0.675]], name='two-state')
