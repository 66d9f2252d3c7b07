#!/usr/bin/env python3
"""
Absorbed Chains and Quasi-Stationary Distributions
==================================================
Builds sub-Markov kernels from declarative absorbed-chain models, computes
conditioned laws and quasi-stationary distributions (QSDs) exactly, and
checks them against Monte Carlo simulation.

Model variants:
- explicit:    a sub-Markov matrix
- lazy_chain:  ρ_R(x) R(x,·) + ρ_δ(x) δ_x + ρ_∂(x) δ_∂
- birth_death: nearest-neighbour moves with per-state killing
- density:     P(x,y) = p(x,y) ν(y)
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from certify import (Certificate, CertificateError, CertificateKind, check_domination, check_H1,
                     lower_bound_r)
from decomposition import DecompositionError, PeripheralDecomposition, peel_decomposition, second_modulus_ratio
from kernel_core import Kernel, KernelError, MeasureV, QsdError, WeightedSpace

logger = logging.getLogger(__name__)

VARIANTS = ('explicit', 'lazy_chain', 'birth_death', 'density')
PROBABILITY_TOL = 1e-12
TV_FLOOR = 1e-13


class ModelError(QsdError, ValueError):
    """An absorbed-chain model violates one of its invariants"""


class ExtinctionError(QsdError):
    """The conditioned law is undefined: no mass survives"""


def _vector(values: Any, n: int, what: str) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if array.ndim == 0:
        array = np.full(n, float(array))
    if array.shape != (n,):
        raise ModelError(f"{what} has shape {array.shape}, expected ({n},)")
    array = array.copy()
    array.setflags(write=False)
    return array


def _matrix(values: Any, what: str) -> np.ndarray:
    array = np.array(values, dtype=float, copy=True)
    if array.ndim != 2 or array.shape[0] != array.shape[1]:
        raise ModelError(f"{what} must be a square matrix, got shape {array.shape}")
    array.setflags(write=False)
    return array


def _check_probabilities(values: np.ndarray, what: str, labels: Sequence[Any]):
    bad = np.flatnonzero((values < -PROBABILITY_TOL) | (values > 1 + PROBABILITY_TOL))
    if len(bad):
        raise ModelError(f"{what} at state {labels[bad[0]]!r} is {values[bad[0]]}, not a probability")


@dataclass(frozen=True, eq=False)
class AbsorbedModel:
    variant: str
    V: np.ndarray
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    labels: Tuple[Any, ...] = ()
    name: str = ''

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown model variant {self.variant!r}")
        n = len(self.V)
        labels = tuple(self.labels) or tuple(range(n))
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'V', _vector(self.V, n, 'V'))
        if np.any(self.V <= 0):
            bad = int(np.argmin(self.V))
            raise ModelError(f"weight V at state {labels[bad]!r} must be positive")
        getattr(self, f'_validate_{self.variant}')()
        rows = compile_model(self).row_sums()
        over = np.flatnonzero(rows > 1 + PROBABILITY_TOL)
        if len(over):
            raise ModelError(f"row mass {rows[over[0]]:.15g} at state {labels[over[0]]!r} exceeds 1")

    @property
    def n(self) -> int:
        return len(self.V)

    def _validate_explicit(self):
        matrix = self.arrays['matrix']
        if np.any(matrix < 0):
            x = np.unravel_index(int(np.argmin(matrix)), matrix.shape)[0]
            raise ModelError(f"negative transition mass at state {self.labels[x]!r}")

    def _validate_lazy_chain(self):
        R = self.arrays['R']
        for key in ('rho_R', 'rho_delta', 'rho_partial'):
            _check_probabilities(self.arrays[key], key, self.labels)
        if np.any(R < 0):
            x = np.unravel_index(int(np.argmin(R)), R.shape)[0]
            raise ModelError(f"R has a negative entry in the row of state {self.labels[x]!r}")
        off = np.flatnonzero(np.abs(R.sum(axis=1) - 1.0) > PROBABILITY_TOL)
        if len(off):
            raise ModelError(f"R row of state {self.labels[off[0]]!r} sums to {R[off[0]].sum():.15g}, not 1")
        total = self.arrays['rho_R'] + self.arrays['rho_delta'] + self.arrays['rho_partial']
        off = np.flatnonzero(np.abs(total - 1.0) > PROBABILITY_TOL)
        if len(off):
            raise ModelError(f"ρ_R + ρ_δ + ρ_∂ = {total[off[0]]:.15g} at state {self.labels[off[0]]!r}, not 1")

    def _validate_birth_death(self):
        for key in ('p_up', 'p_down', 'p_kill'):
            _check_probabilities(self.arrays[key], key, self.labels)
        total = self.arrays['p_up'] + self.arrays['p_down'] + self.arrays['p_kill']
        over = np.flatnonzero(total > 1 + PROBABILITY_TOL)
        if len(over):
            raise ModelError(f"p_up + p_down + p_kill = {total[over[0]]:.15g} at state {self.labels[over[0]]!r}")

    def _validate_density(self):
        p, nu = self.arrays['p'], self.arrays['nu']
        if np.any(p < 0):
            x = np.unravel_index(int(np.argmin(p)), p.shape)[0]
            raise ModelError(f"density is negative in the row of state {self.labels[x]!r}")
        if np.any(nu < 0):
            raise ModelError(f"ν has negative mass at state {self.labels[int(np.argmin(nu))]!r}")

    @classmethod
    def explicit(cls, matrix: Any, V: Optional[Sequence[float]] = None, name: str = 'explicit') -> 'AbsorbedModel':
        if isinstance(matrix, Kernel):
            V = matrix.V if V is None else V
            labels = matrix.space.states
            matrix = matrix.entries
        else:
            labels = ()
        matrix = _matrix(matrix, 'matrix')
        n = matrix.shape[0]
        return cls('explicit', np.ones(n) if V is None else V, {'matrix': matrix}, labels, name)

    @classmethod
    def lazy_chain(cls, R: Any, rho_R: Any, rho_delta: Any, rho_partial: Any,
                   V: Optional[Sequence[float]] = None, name: str = 'lazy_chain') -> 'AbsorbedModel':
        R = _matrix(R, 'R')
        n = R.shape[0]
        arrays = {
            'R': R,
            'rho_R': _vector(rho_R, n, 'rho_R'),
            'rho_delta': _vector(rho_delta, n, 'rho_delta'),
            'rho_partial': _vector(rho_partial, n, 'rho_partial'),
        }
        return cls('lazy_chain', np.ones(n) if V is None else V, arrays, (), name)

    @classmethod
    def birth_death(cls, N: int, p_up: Any, p_down: Any, p_kill: Any = 0.0,
                    V: Optional[Sequence[float]] = None, weight_base: Optional[float] = None,
                    name: str = 'birth_death') -> 'AbsorbedModel':
        if N < 2:
            raise ModelError(f"birth-death model needs N >= 2, got {N}")
        arrays = {
            'p_up': _vector(p_up, N, 'p_up'),
            'p_down': _vector(p_down, N, 'p_down'),
            'p_kill': _vector(p_kill, N, 'p_kill'),
        }
        if V is None:
            V = np.ones(N) if weight_base is None else float(weight_base) ** np.arange(N)
        return cls('birth_death', V, arrays, (), name)

    @classmethod
    def density(cls, p: Any, nu: Any, V: Optional[Sequence[float]] = None, name: str = 'density') -> 'AbsorbedModel':
        p = _matrix(p, 'p')
        n = p.shape[0]
        return cls('density', np.ones(n) if V is None else V, {'p': p, 'nu': _vector(nu, n, 'nu')}, (), name)


@dataclass(frozen=True, eq=False)
class ConditionedLaw:
    masses: np.ndarray
    survival: float
    n: int


@dataclass(frozen=True, eq=False)
class SimulationResult:
    paths: int
    seed: int
    horizon: int
    checkpoints: Tuple[int, ...]
    laws: Dict[int, Optional[ConditionedLaw]]
    survival_curve: np.ndarray
    extinct: bool


@dataclass(frozen=True)
class ConvergenceReport:
    rate: float
    predicted: float
    below_resolution: bool
    window: Tuple[int, int]
    distances: Tuple[float, ...]


def compile_model(model: AbsorbedModel) -> Kernel:
    """Sub-Markov kernel of the chain killed at ∂"""
    n = model.n
    a = model.arrays
    if model.variant == 'explicit':
        entries = np.array(a['matrix'])
    elif model.variant == 'lazy_chain':
        entries = a['rho_R'][:, None] * a['R'] + np.diag(a['rho_delta'])
    elif model.variant == 'birth_death':
        up, down, kill = a['p_up'], a['p_down'], a['p_kill']
        stay = np.clip(1.0 - up - down - kill, 0.0, None)
        entries = np.diag(stay)
        entries += np.diag(up[:-1], 1)
        entries += np.diag(down[1:], -1)
    else:
        entries = a['p'] * a['nu'][None, :]
    space = WeightedSpace(model.labels, model.V)
    return Kernel(space, entries, model.name or model.variant)


def total_variation(mu: np.ndarray, nu: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(mu) - np.asarray(nu)).sum())


def _initial_law(mu0: Union[MeasureV, np.ndarray, Sequence[float]], n: int) -> np.ndarray:
    masses = mu0.masses if isinstance(mu0, MeasureV) else np.asarray(mu0, dtype=float)
    if masses.shape != (n,):
        raise KernelError(f"initial law has shape {masses.shape}, expected ({n},)")
    if np.any(masses < 0) or abs(masses.sum() - 1.0) > PROBABILITY_TOL:
        raise KernelError("initial law must be a probability vector")
    return masses


def conditioned_law(mu0: Union[MeasureV, np.ndarray], P: Kernel, n: int) -> ConditionedLaw:
    """Law of X_n given n < τ_∂, with the survival probability"""
    law = _initial_law(mu0, P.n).copy()
    log_survival = 0.0
    for step in range(n):
        law = law @ P.entries
        mass = law.sum()
        if mass <= 0:
            raise ExtinctionError(f"all mass absorbed by step {step + 1}")
        log_survival += np.log(mass)
        law /= mass
    return ConditionedLaw(masses=law, survival=float(np.exp(log_survival)), n=n)


def qsd_from_decomposition(dec: PeripheralDecomposition) -> List[MeasureV]:
    """One QSD per final basic class: the normalized orbit Σ_k r^-k ν P^k over k < d"""
    P = dec.kernel
    if np.any(P.V < 1.0):
        raise KernelError("QSDs are probability measures; they need V >= 1")
    qsds = []
    seen = set()
    for item in dec.items:
        if item.basic_class in seen:
            continue
        seen.add(item.basic_class)
        orbit = item.nu.masses.copy()
        step = item.nu.masses.copy()
        for k in range(1, dec.d):
            step = step @ P.entries / dec.r
            orbit += step
        qsds.append(MeasureV(P.space, orbit / orbit.sum()))
    logger.info(f"📊 {len(qsds)} quasi-stationary distribution(s)")
    return qsds


def lazy_chain_certificate(model: AbsorbedModel, mu: Union[MeasureV, np.ndarray],
                           a: Optional[float] = None) -> Certificate:
    """Domination by K = a·1⊗μ and S = diag(ρ_δ); valid when max ρ_δ + max ρ_∂ < 1"""
    if model.variant != 'lazy_chain':
        raise ModelError(f"lazy-chain certificate needs a lazy_chain model, got {model.variant!r}")
    R = model.arrays['R']
    masses = mu.masses if isinstance(mu, MeasureV) else np.asarray(mu, dtype=float)
    if masses.shape != (model.n,) or np.any(masses < 0):
        raise CertificateError("μ must be a nonnegative measure on the model's states")

    with np.errstate(divide='ignore', invalid='ignore'):
        ratios = np.where(masses[None, :] > 0, R / masses[None, :], np.where(R > 0, np.inf, 0.0))
    needed = float(ratios.max())
    if a is None and np.isfinite(needed):
        a = needed
    if a is None or needed > a * (1 + config.ORDER_TOL):
        x, y = np.unravel_index(int(np.argmax(ratios)), ratios.shape)
        bound = "any finite a" if a is None else f"a = {a:.6g}"
        raise CertificateError(
            f"density bound violated: R({model.labels[x]!r}, {model.labels[y]!r}) / μ = {ratios[x, y]:.6g} > {bound}"
        )

    P = compile_model(model)
    K = Kernel(P.space, a * np.outer(np.ones(model.n), masses), 'a·1⊗μ')
    S = Kernel(P.space, np.diag(model.arrays['rho_delta']), 'diag(ρ_δ)')
    dom = check_domination(P, K, S)
    lower = lower_bound_r(P, np.ones(model.n))

    max_delta = float(model.arrays['rho_delta'].max())
    max_partial = float(model.arrays['rho_partial'].max())
    violations = [v for v in dom.violations if not v.startswith('vacuous')]
    if not max_delta + max_partial < 1:
        violations.append(f"max ρ_δ + max ρ_∂ = {max_delta + max_partial:.6g} is not below 1")

    parameters = {
        'a': float(a),
        'r_ess_upper': dom.parameters['r_ess_upper'],
        'r_lower': lower.parameters['r_lower'],
    }
    margin = parameters['r_lower'] - parameters['r_ess_upper']
    return Certificate(
        kind=CertificateKind.DOMINATION,
        parameters=parameters,
        witness={'K': K, 'S': S, 'mu': [float(m) for m in masses], 'phi': 'ones'},
        valid=not violations,
        margin=margin,
        strict=margin > 0,
        violations=tuple(violations),
    )


def _simulate_block(cumulative: np.ndarray, start: int, size: int, horizon: int,
                    checkpoints: Sequence[int], seed_seq: np.random.SeedSequence) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    rng = np.random.default_rng(seed_seq)
    n = cumulative.shape[0]
    states = np.full(size, start, dtype=np.int64)
    alive_counts = np.zeros(horizon + 1, dtype=np.int64)
    alive_counts[0] = size
    wanted = set(checkpoints)
    counts: Dict[int, np.ndarray] = {}
    absorbing_row = np.zeros((1, cumulative.shape[1]))
    table = np.vstack([cumulative, absorbing_row])
    for step in range(1, horizon + 1):
        u = rng.random(size)
        rows = table[states]
        moved = (rows < u[:, None]).sum(axis=1)
        states = np.where(states < n, np.minimum(moved, n), n)
        alive = states < n
        alive_counts[step] = int(alive.sum())
        if step in wanted:
            counts[step] = np.bincount(states[alive], minlength=n)
    return alive_counts, counts


def simulate_absorbed(model: Union[AbsorbedModel, Kernel], x0: int, horizon: int, paths: int, seed: int,
                      checkpoints: Optional[Sequence[int]] = None, workers: int = config.WORKERS,
                      block_size: int = config.BLOCK_SIZE) -> SimulationResult:
    """Monte Carlo conditioned laws at checkpoints plus the survival curve

    Paths run in fixed-size blocks, each with its own stream spawned from the
    master seed, so the result does not depend on the worker count.
    """
    if paths < 1:
        raise ModelError(f"paths must be at least 1, got {paths}")
    P = model if isinstance(model, Kernel) else compile_model(model)
    n = P.n
    if not 0 <= x0 < n:
        raise ModelError(f"start state {x0} outside 0..{n - 1}")
    if checkpoints is None:
        checkpoints = config.CHECKPOINTS
    checkpoints = tuple(sorted(c for c in set(checkpoints) if 1 <= c <= horizon))

    cumulative = np.cumsum(np.hstack([P.entries, (1.0 - P.row_sums())[:, None]]), axis=1)
    cumulative[:, -1] = 1.0
    sizes = [block_size] * (paths // block_size)
    if paths % block_size:
        sizes.append(paths % block_size)
    streams = np.random.SeedSequence(seed).spawn(len(sizes))

    alive = np.zeros(horizon + 1, dtype=np.int64)
    totals = {c: np.zeros(n, dtype=np.int64) for c in checkpoints}
    logger.info(f"🎲 Simulating {paths} paths in {len(sizes)} blocks on {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [
            executor.submit(_simulate_block, cumulative, x0, size, horizon, checkpoints, stream)
            for size, stream in zip(sizes, streams)
        ]
        for future in as_completed(futures):
            block_alive, block_counts = future.result()
            alive += block_alive
            for c, counts in block_counts.items():
                totals[c] += counts

    laws: Dict[int, Optional[ConditionedLaw]] = {}
    for c in checkpoints:
        survivors = int(totals[c].sum())
        if survivors == 0:
            laws[c] = None
        else:
            laws[c] = ConditionedLaw(masses=totals[c] / survivors, survival=survivors / paths, n=c)

    extinct = bool(checkpoints) and laws[checkpoints[0]] is None
    if extinct:
        logger.warning(f"⚠️  All paths absorbed before the first checkpoint (n = {checkpoints[0]})")
    return SimulationResult(paths=paths, seed=seed, horizon=horizon, checkpoints=checkpoints,
                            laws=laws, survival_curve=alive / paths, extinct=extinct)


def convergence_rate(P: Kernel, dec: PeripheralDecomposition, mu0: Union[MeasureV, np.ndarray],
                     window: Tuple[int, int] = (1, 20)) -> ConvergenceReport:
    """Per-step geometric rate of the conditioned law towards the QSD, fitted on log TV"""
    qsds = qsd_from_decomposition(dec)
    if len(qsds) > 1:
        logger.warning(f"⚠️  {len(qsds)} QSDs; measuring against the first")
    target = qsds[0].masses
    predicted = second_modulus_ratio(P)

    ns = np.arange(window[0], window[1] + 1)
    distances = []
    for m in ns:
        try:
            law = conditioned_law(mu0, P, int(m) * dec.d)
        except ExtinctionError:
            break
        distances.append(total_variation(law.masses, target))
    distances = np.array(distances)
    usable = distances > TV_FLOOR
    if usable.sum() < 2:
        return ConvergenceReport(rate=0.0, predicted=predicted, below_resolution=True,
                                 window=window, distances=tuple(float(v) for v in distances))
    slope = np.polyfit(ns[:len(distances)][usable], np.log(distances[usable]), 1)[0]
    rate = float(np.exp(slope / dec.d))
    logger.info(f"📈 Fitted rate {rate:.6g} (spectral prediction {predicted:.6g})")
    return ConvergenceReport(rate=rate, predicted=predicted, below_resolution=False,
                             window=window, distances=tuple(float(v) for v in distances))


def density_positivity(p: np.ndarray, nu: np.ndarray, E_K: Sequence[int]) -> bool:
    """p(x, ·) > 0 ν-almost everywhere on E_K, for every x in E_K"""
    E_K = np.asarray(sorted(set(int(x) for x in E_K)), dtype=int)
    charged = E_K[np.asarray(nu)[E_K] > 0]
    if len(charged) == 0:
        return False
    return bool(np.all(np.asarray(p)[np.ix_(E_K, charged)] > 0))


def unique_qsd_check(P: Kernel, p: np.ndarray, nu: np.ndarray, E_K: Sequence[int],
                     dec: Optional[PeripheralDecomposition] = None) -> Dict[str, Any]:
    """Positive density on E_K with θ1 < r(P) leaves a single limit pair"""
    dec = dec or peel_decomposition(P)
    positive = density_positivity(p, nu, E_K)
    theta1 = check_H1(P, E_K)
    applies = positive and theta1 < dec.r
    if applies and len(dec.items) != 1:
        raise DecompositionError(f"positive density on E_K but |I| = {len(dec.items)}")
    return {'positive': positive, 'theta1': theta1, 'applies': applies, 'items': len(dec.items)}


def model_to_dict(model: AbsorbedModel) -> Dict[str, Any]:
    doc: Dict[str, Any] = {'variant': model.variant, 'V': [float(v) for v in model.V]}
    if model.name and model.name != model.variant:
        doc['name'] = model.name
    if model.labels != tuple(range(model.n)):
        doc['states'] = list(model.labels)
    for key, array in model.arrays.items():
        doc[key] = array.tolist()
    if model.variant == 'birth_death':
        doc['N'] = model.n
    return doc


def model_from_dict(doc: Dict[str, Any]) -> AbsorbedModel:
    variant = doc['variant']
    V = doc.get('V')
    name = doc.get('name', variant)
    if variant == 'explicit':
        model = AbsorbedModel.explicit(doc['matrix'], V, name)
    elif variant == 'lazy_chain':
        model = AbsorbedModel.lazy_chain(doc['R'], doc['rho_R'], doc['rho_delta'], doc['rho_partial'], V, name)
    elif variant == 'birth_death':
        model = AbsorbedModel.birth_death(int(doc['N']), doc['p_up'], doc['p_down'], doc.get('p_kill', 0.0),
                                          V, doc.get('weight_base'), name)
    elif variant == 'density':
        model = AbsorbedModel.density(doc['p'], doc['nu'], V, name)
    else:
        raise ModelError(f"unknown model variant {variant!r}")
    if 'states' in doc:
        model = AbsorbedModel(model.variant, model.V, dict(model.arrays), tuple(doc['states']), model.name)
    return model
