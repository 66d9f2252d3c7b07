#!/usr/bin/env python3
"""
Weighted-Space Kernel Algebra
=============================
Nonnegative kernels on finite (or truncated countable) state spaces acting on
L∞(V), the functions with |f| <= C·V:

- weighted operator norms, positive parts and meets
- spectral radius through the strongly connected block structure
- Doob (eigenfunction) transforms and V-transforms
- finite windows of countable birth-death models

Every space is atomic, so measurability questions about the σ-field do not
arise.

All values are immutable after construction.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigs

import config

logger = logging.getLogger(__name__)


class QsdError(Exception):
    """Base class for every error raised by the toolkit"""


class KernelError(QsdError, ValueError):
    """Shape, sign, weight or label violations and failed eigen-relations"""


def _frozen(values: Any, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class WeightedSpace:
    """Ordered state labels with a strictly positive weight V"""
    states: Tuple[Any, ...]
    V: np.ndarray

    def __post_init__(self):
        states = tuple(self.states)
        V = _frozen(self.V)
        if V.ndim != 1 or len(V) != len(states):
            raise KernelError(f"weight has shape {V.shape}, expected ({len(states)},)")
        if len(set(states)) != len(states):
            raise KernelError("state labels must be unique")
        if not np.all(np.isfinite(V)) or np.any(V <= 0):
            bad = int(np.argmin(np.where(np.isfinite(V), V, -np.inf)))
            raise KernelError(f"weight must be strictly positive, V({states[bad]!r}) = {V[bad]}")
        object.__setattr__(self, 'states', states)
        object.__setattr__(self, 'V', V)

    @classmethod
    def uniform(cls, n: int) -> 'WeightedSpace':
        return cls(tuple(range(n)), np.ones(n))

    @classmethod
    def from_weights(cls, V: Sequence[float], states: Optional[Sequence[Any]] = None) -> 'WeightedSpace':
        V = np.asarray(V, dtype=float)
        if states is None:
            states = range(len(V))
        return cls(tuple(states), V)

    @property
    def n(self) -> int:
        return len(self.states)

    def index(self, label: Any) -> int:
        try:
            return self.states.index(label)
        except ValueError:
            raise KernelError(f"unknown state {label!r}")

    def subspace(self, idx: Iterable[int]) -> 'WeightedSpace':
        idx = np.asarray(list(idx), dtype=int)
        return WeightedSpace(tuple(self.states[i] for i in idx), self.V[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightedSpace):
            return NotImplemented
        return self.states == other.states and np.array_equal(self.V, other.V)

    __hash__ = object.__hash__


def _check_square(space: WeightedSpace, entries: np.ndarray, what: str):
    if entries.shape != (space.n, space.n):
        raise KernelError(f"{what} has shape {entries.shape}, space has {space.n} states")
    if not np.all(np.isfinite(entries)):
        raise KernelError(f"{what} has non-finite entries")


@dataclass(frozen=True, eq=False)
class Kernel:
    """Nonnegative matrix; row x is the measure P(x, ·)"""
    space: WeightedSpace
    entries: np.ndarray
    name: str = ''

    def __post_init__(self):
        entries = _frozen(self.entries)
        _check_square(self.space, entries, 'kernel')
        if np.any(entries < 0):
            x, y = np.unravel_index(int(np.argmin(entries)), entries.shape)
            raise KernelError(
                f"kernel entries must be nonnegative, P({self.space.states[x]!r}, "
                f"{self.space.states[y]!r}) = {entries[x, y]}"
            )
        object.__setattr__(self, 'entries', entries)

    @classmethod
    def from_matrix(cls, matrix: Any, V: Optional[Sequence[float]] = None, name: str = '') -> 'Kernel':
        matrix = np.asarray(matrix, dtype=float)
        n = matrix.shape[0]
        space = WeightedSpace.uniform(n) if V is None else WeightedSpace.from_weights(V)
        return cls(space, matrix, name)

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def V(self) -> np.ndarray:
        return self.space.V

    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    def is_sub_markov(self, tol: float = config.ORDER_TOL) -> bool:
        return bool(np.all(self.row_sums() <= 1.0 + tol))

    def with_entries(self, entries: np.ndarray, name: Optional[str] = None) -> 'Kernel':
        return Kernel(self.space, entries, self.name if name is None else name)


@dataclass(frozen=True, eq=False)
class SignedKernel:
    space: WeightedSpace
    entries: np.ndarray

    def __post_init__(self):
        entries = _frozen(self.entries)
        _check_square(self.space, entries, 'signed kernel')
        object.__setattr__(self, 'entries', entries)


@dataclass(frozen=True, eq=False)
class FunctionV:
    space: WeightedSpace
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != (self.space.n,):
            raise KernelError(f"function has shape {values.shape}, space has {self.space.n} states")
        object.__setattr__(self, 'values', values)

    @property
    def norm(self) -> float:
        """‖f‖_V = max |f|/V"""
        return float(np.max(np.abs(self.values) / self.space.V)) if self.space.n else 0.0


@dataclass(frozen=True, eq=False)
class MeasureV:
    space: WeightedSpace
    masses: np.ndarray

    def __post_init__(self):
        masses = _frozen(self.masses)
        if masses.shape != (self.space.n,):
            raise KernelError(f"measure has shape {masses.shape}, space has {self.space.n} states")
        if np.any(masses < 0):
            bad = int(np.argmin(masses))
            raise KernelError(f"measure must be nonnegative, mass at {self.space.states[bad]!r} is {masses[bad]}")
        object.__setattr__(self, 'masses', masses)

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    @property
    def mass_V(self) -> float:
        """ν(V)"""
        return float(self.masses @ self.space.V)

    def integrate(self, f: Union[FunctionV, np.ndarray]) -> float:
        values = f.values if isinstance(f, FunctionV) else np.asarray(f, dtype=float)
        return float(self.masses @ values)

    def normalized(self) -> 'MeasureV':
        total = self.total
        if total <= 0:
            raise KernelError("cannot normalize a zero measure")
        return MeasureV(self.space, self.masses / total)


AnyKernel = Union[Kernel, SignedKernel]


def _same_space(*kernels) -> WeightedSpace:
    space = kernels[0].space
    for other in kernels[1:]:
        if other.space.n != space.n or not np.array_equal(other.space.V, space.V):
            raise KernelError(f"kernels live on different spaces ({space.n} vs {other.space.n} states)")
    return space


def entrywise_leq(A: np.ndarray, B: np.ndarray, tol: float = config.ORDER_TOL) -> Tuple[bool, Optional[Tuple[int, int]], float]:
    """A <= B with relative tolerance on the larger entry; returns (ok, worst index, worst excess)"""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    excess = A - B - tol * np.maximum(np.abs(A), np.abs(B))
    if excess.size == 0:
        return True, None, 0.0
    worst = np.unravel_index(int(np.argmax(excess)), excess.shape)
    worst_excess = float((A - B)[worst])
    if excess[worst] > 0:
        return False, tuple(int(i) for i in worst), worst_excess
    return True, None, max(worst_excess, 0.0)


def weighted_norm(P: Kernel) -> float:
    """Operator norm on L∞(V) of a nonnegative kernel: max_x (PV)(x)/V(x)"""
    if P.n == 0:
        return 0.0
    return float(np.max(P.entries @ P.V / P.V))


def signed_norm(R: AnyKernel) -> float:
    """Exact operator norm on L∞(V) of a signed kernel: max_x Σ_y |R(x,y)| V(y)/V(x)"""
    if R.space.n == 0:
        return 0.0
    return float(np.max(np.abs(R.entries) @ R.space.V / R.space.V))


def matrix_weighted_norm(M: np.ndarray, V: np.ndarray) -> float:
    """signed_norm for a bare matrix on weight V"""
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(M) @ V / V))


def positive_part(R: AnyKernel) -> Kernel:
    return Kernel(R.space, np.maximum(R.entries, 0.0))


def difference(P: AnyKernel, S: AnyKernel) -> SignedKernel:
    space = _same_space(P, S)
    return SignedKernel(space, P.entries - S.entries)


def meet(P: Kernel, S: Kernel) -> Kernel:
    """Entrywise minimum; P = (P - S)_+ + P ∧ S"""
    space = _same_space(P, S)
    return Kernel(space, np.minimum(P.entries, S.entries))


def compose(P: Kernel, Q: Kernel) -> Kernel:
    space = _same_space(P, Q)
    return Kernel(space, P.entries @ Q.entries)


def power(P: Kernel, n: int) -> Kernel:
    if n < 0:
        raise KernelError(f"power must be nonnegative, got {n}")
    return Kernel(P.space, np.linalg.matrix_power(P.entries, n), P.name)


def restrict(P: Kernel, idx: Iterable[int]) -> Kernel:
    idx = np.asarray(list(idx), dtype=int)
    return Kernel(P.space.subspace(idx), P.entries[np.ix_(idx, idx)], P.name)


def conjugated(entries: np.ndarray, V: np.ndarray) -> np.ndarray:
    """diag(1/V) M diag(V): same spectrum, unit-weight geometry"""
    return entries * V[None, :] / V[:, None]


def strong_components(entries: np.ndarray) -> Tuple[int, np.ndarray]:
    graph = csr_matrix(entries > 0)
    return connected_components(graph, directed=True, connection='strong')


def _block_eigvals(block: np.ndarray, how_many: Optional[int] = None) -> np.ndarray:
    m = block.shape[0]
    if m == 1:
        return block.reshape(1).astype(complex)
    if m <= config.DENSE_LIMIT:
        return linalg.eigvals(block)
    k = min(how_many or 6, m - 2)
    logger.debug(f"Sparse eigensolver on block of size {m} (k={k})")
    return eigs(csr_matrix(block), k=k, which='LM', return_eigenvectors=False)


def spectrum(P: Kernel) -> np.ndarray:
    """Eigenvalues as the union of the strongly connected diagonal blocks' spectra

    Blocks are V-conjugated first; above the dense limit only the largest
    eigenvalues of each block are returned.
    """
    if P.n == 0:
        return np.zeros(0, dtype=complex)
    M = conjugated(P.entries, P.V)
    n_comp, labels = strong_components(M)
    values = []
    for c in range(n_comp):
        idx = np.flatnonzero(labels == c)
        values.append(_block_eigvals(M[np.ix_(idx, idx)]))
    values = np.concatenate(values)
    return values[np.argsort(-np.abs(values), kind='stable')]


def block_radius(entries: np.ndarray, V: Optional[np.ndarray] = None) -> float:
    """Spectral radius of one (irreducible) block"""
    if entries.size == 0:
        return 0.0
    M = entries if V is None else conjugated(entries, V)
    if M.shape[0] > config.DENSE_LIMIT:
        return float(np.max(np.abs(eigs(csr_matrix(M), k=1, which='LM', return_eigenvectors=False))))
    return float(np.max(np.abs(_block_eigvals(M))))


def spectral_radius(P: Kernel) -> float:
    """Largest eigenvalue modulus, the max over strongly connected blocks"""
    if P.n == 0:
        return 0.0
    M = conjugated(P.entries, P.V)
    n_comp, labels = strong_components(M)
    radius = 0.0
    for c in range(n_comp):
        idx = np.flatnonzero(labels == c)
        radius = max(radius, block_radius(M[np.ix_(idx, idx)]))
    return radius


def doob_transform(P: Kernel, eta: FunctionV, lam: float, tol: float = config.EIG_RESIDUAL) -> Kernel:
    """Tf = P(η f)/(λ η) on {η > 0}, returned as a Markov kernel on that set"""
    if lam <= 0:
        raise KernelError(f"eigenvalue must be positive, got {lam}")
    values = np.asarray(eta.values, dtype=float)
    if np.any(values < 0):
        raise KernelError("eigenfunction must be nonnegative")
    support = np.flatnonzero(values > 0)
    if len(support) == 0:
        raise KernelError("eigenfunction vanishes everywhere")

    P_eta = P.entries @ values
    scale = lam * FunctionV(P.space, values).norm
    residual = float(np.max(np.abs(P_eta[support] - lam * values[support]) / P.V[support]))
    if residual > tol * scale:
        raise KernelError(f"eigen-relation residual {residual:.3e} exceeds {tol:.1e} on {{η > 0}}")

    sub = P.entries[np.ix_(support, support)]
    T = sub * values[support][None, :] / (lam * values[support][:, None])
    sums = T.sum(axis=1)
    T = T / sums[:, None]
    logger.debug(f"Doob transform on {len(support)} states, max row drift {np.max(np.abs(sums - 1)):.2e}")
    space = WeightedSpace(tuple(P.space.states[i] for i in support), np.ones(len(support)))
    return Kernel(space, T, f'doob({P.name})' if P.name else 'doob')


def v_transform(P: Kernel) -> Kernel:
    """f ↦ P(Vf)/(V‖P‖_V): sub-Markov, spectral radius r(P)/‖P‖_V"""
    norm = weighted_norm(P)
    if norm <= 0:
        raise KernelError("v_transform of the zero kernel is undefined")
    space = WeightedSpace(P.space.states, np.ones(P.n))
    return Kernel(space, conjugated(P.entries, P.V) / norm, f'v({P.name})' if P.name else 'v')


@dataclass(frozen=True)
class CountableModelSpec:
    """Countable-state kernel given row by row on {0, 1, 2, ...}"""
    row: Callable[[int], Dict[int, float]]
    weight: Callable[[int], float] = field(default=lambda x: 1.0)
    min_support: int = 2
    name: str = 'countable'


def birth_death_spec(p_up: float, p_down: float, p_stay: float = 0.0,
                     weight_base: Optional[float] = None,
                     overrides: Optional[Dict[int, Tuple[float, float, float]]] = None,
                     name: str = 'birth-death') -> CountableModelSpec:
    """Walk on {0,1,...}: down-moves from 0 are killed, as is any leftover mass

    overrides maps a state to its own (p_up, p_down, p_stay).
    weight_base gives V(x) = weight_base**x (default V ≡ 1).
    """
    overrides = dict(overrides or {})
    for x, probs in [(None, (p_up, p_down, p_stay))] + list(overrides.items()):
        if min(probs) < 0 or sum(probs) > 1 + config.ORDER_TOL:
            where = 'default' if x is None else f'state {x}'
            raise KernelError(f"birth-death probabilities {probs} ({where}) must be >= 0 and sum to <= 1")

    def row(x: int) -> Dict[int, float]:
        up, down, stay = overrides.get(x, (p_up, p_down, p_stay))
        out = {x + 1: up, x: stay}
        if x > 0:
            out[x - 1] = down
        return {y: m for y, m in out.items() if m > 0}

    if weight_base is None:
        weight = lambda x: 1.0
    else:
        weight = lambda x: float(weight_base) ** x
    return CountableModelSpec(row=row, weight=weight, min_support=2, name=name)


def killed_walk_spec(p_up: float = 0.2, p_down: float = 0.6, laziness: float = 0.2,
                     sticky: Optional[Dict[int, Tuple[float, float, float]]] = None) -> CountableModelSpec:
    """Lazy walk killed below 0 with V(x) = (q/p)^(x/2)"""
    return birth_death_spec(p_up, p_down, laziness, weight_base=np.sqrt(p_down / p_up),
                            overrides=sticky, name='killed-walk')


def truncate(model: CountableModelSpec, N: int) -> Kernel:
    """Kernel on {0..N-1}; mass leaving the window is killed"""
    if N < max(2, model.min_support):
        raise KernelError(f"truncation size {N} below minimal support {max(2, model.min_support)}")
    entries = np.zeros((N, N))
    for x in range(N):
        for y, mass in model.row(x).items():
            if 0 <= y < N:
                entries[x, y] += mass
    V = np.array([model.weight(x) for x in range(N)], dtype=float)
    return Kernel(WeightedSpace(tuple(range(N)), V), entries, f'{model.name}[N={N}]')


def indicator(space: WeightedSpace, subset: Iterable[int]) -> np.ndarray:
    mask = np.zeros(space.n, dtype=bool)
    mask[list(subset)] = True
    return mask
