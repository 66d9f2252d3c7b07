#!/usr/bin/env python3
"""
Continuous-Time Sub-Markov Semigroups
=====================================
P_t = exp(tL) for a bounded-rate generator L, evaluated by uniformization so
that every P_t is entrywise nonnegative. Checks the continuous-time picture:
time-uniform Lyapunov bound, aperiodicity of P_T, flow invariance of the
eigenmeasures and convergence of r^-t (1+t)^-j P_t to the peripheral limit.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import poisson

import config
from decomposition import (DecompositionError, PeripheralDecomposition, decomposition_to_dict,
                           peel_decomposition, peripheral_eigenvalues)
from kernel_core import Kernel, KernelError, WeightedSpace, conjugated, weighted_norm

logger = logging.getLogger(__name__)

MAX_POISSON_MEAN = 50.0
FLOW_TOL = 1e-8
ROTATION_TOL = 1e-9
PROPAGATION_TOL = 1e-9


class AperiodicityError(DecompositionError):
    """P_T came out periodic, which a continuous-time semigroup cannot be"""


@dataclass(frozen=True, eq=False)
class SubMarkovGenerator:
    space: WeightedSpace
    rates: np.ndarray
    name: str = ''

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float, copy=True)
        n = self.space.n
        if rates.shape != (n, n):
            raise KernelError(f"generator has shape {rates.shape}, space has {n} states")
        off = rates - np.diag(np.diag(rates))
        if np.any(off < 0):
            x, y = np.unravel_index(int(np.argmin(off)), off.shape)
            raise KernelError(f"negative jump rate from {self.space.states[x]!r} to {self.space.states[y]!r}")
        sums = rates.sum(axis=1)
        if np.any(sums > 1e-12):
            x = int(np.argmax(sums))
            raise KernelError(f"row of state {self.space.states[x]!r} sums to {sums[x]:.3e} > 0")
        rates.setflags(write=False)
        object.__setattr__(self, 'rates', rates)

    @classmethod
    def from_matrix(cls, rates, V: Optional[Sequence[float]] = None, name: str = '') -> 'SubMarkovGenerator':
        rates = np.asarray(rates, dtype=float)
        n = rates.shape[0]
        space = WeightedSpace.uniform(n) if V is None else WeightedSpace.from_weights(V)
        return cls(space, rates, name)

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def uniform_rate(self) -> float:
        return float(np.max(-np.diag(self.rates))) if self.n else 0.0


@dataclass(frozen=True, eq=False)
class SemigroupReport:
    T: float
    C_T: float
    dec: PeripheralDecomposition
    r1: float
    flow_grid: Tuple[float, ...]
    flow_residuals: Tuple[float, ...]
    alpha_grid: Tuple[float, ...]
    alpha_t: Tuple[float, ...]
    rotation_free: bool

    @property
    def flow_ok(self) -> bool:
        return all(res <= FLOW_TOL for res in self.flow_residuals)


@dataclass(frozen=True)
class LyapunovReport:
    C_T: float
    grid: Tuple[float, ...]
    norms: Tuple[float, ...]


@dataclass(frozen=True)
class PropagationReport:
    consistent: bool
    r_T1: float
    r_T2: float
    expected_r_T2: float
    relative_error: float
    partitions_match: bool

    def __bool__(self) -> bool:
        return self.consistent


def killed_birth_death_generator(N: int, birth: float, death: float, kill: float = 0.0,
                                 weight_base: Optional[float] = None) -> SubMarkovGenerator:
    """Birth-death rates on {0..N-1}; jumps out of the window are killed"""
    rates = np.zeros((N, N))
    rates += np.diag(np.full(N - 1, birth), 1)
    rates += np.diag(np.full(N - 1, death), -1)
    rates -= np.diag(np.full(N, birth + death + kill))
    V = None if weight_base is None else float(weight_base) ** np.arange(N)
    return SubMarkovGenerator.from_matrix(rates, V, 'killed-birth-death')


def _uniformized(R: np.ndarray, mean: float, tol: float) -> np.ndarray:
    """Σ_k Poisson(mean)(k) R^k, truncated where the Poisson tail drops below tol"""
    cutoff = int(poisson.isf(tol, mean)) + 1
    weights = poisson.pmf(np.arange(cutoff + 1), mean)
    out = weights[0] * np.eye(R.shape[0])
    term = np.eye(R.shape[0])
    for k in range(1, cutoff + 1):
        term = term @ R
        out += weights[k] * term
    return out


def transition(L: SubMarkovGenerator, t: float, tol: float = config.SERIES_TOL) -> Kernel:
    """P_t by uniformization, splitting t so each Poisson mean stays moderate"""
    if t < 0:
        raise KernelError(f"time must be nonnegative, got {t}")
    lam = L.uniform_rate
    if t == 0 or lam == 0:
        return Kernel(L.space, np.eye(L.n), f'P_{t:g}')
    R = np.eye(L.n) + L.rates / lam
    R = np.clip(R, 0.0, None)
    pieces = max(1, math.ceil(lam * t / MAX_POISSON_MEAN))
    step = _uniformized(R, lam * t / pieces, tol / pieces)
    entries = np.linalg.matrix_power(step, pieces) if pieces > 1 else step
    return Kernel(L.space, entries, f'P_{t:g}')


def _transitions(L: SubMarkovGenerator, times: Sequence[float], tol: float,
                 workers: int = config.WORKERS) -> Dict[float, Kernel]:
    out: Dict[float, Kernel] = {}
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(transition, L, t, tol): t for t in times}
        for future in as_completed(futures):
            out[futures[future]] = future.result()
    return out


def default_lyapunov_grid(T: float) -> List[float]:
    return [0.0] + [T / 2 ** k for k in range(4, -1, -1)]


def check_time_lyapunov(L: SubMarkovGenerator, T: float, grid: Optional[Sequence[float]] = None,
                        tol: float = config.SERIES_TOL) -> LyapunovReport:
    """C_T = max over the grid of ‖P_t‖_V"""
    grid = sorted(set(default_lyapunov_grid(T) if grid is None else grid))
    if grid[0] < 0 or grid[-1] > T * (1 + 1e-12):
        raise KernelError(f"Lyapunov grid must lie in [0, {T}]")
    kernels = _transitions(L, grid, tol)
    norms = tuple(weighted_norm(kernels[t]) for t in grid)
    return LyapunovReport(C_T=max(norms), grid=tuple(grid), norms=norms)


def rotation_free(P_T: Kernel) -> bool:
    """Every peripheral eigenvalue equals r(P_T)"""
    peripheral = peripheral_eigenvalues(P_T)
    if peripheral.size == 0:
        return True
    r = float(np.abs(peripheral).max())
    return bool(np.all(np.abs(peripheral - r) <= ROTATION_TOL * max(r, 1e-300)))


def continuous_decomposition(L: SubMarkovGenerator, T: float = 1.0, h_points: int = 32,
                             t_grid: Optional[Sequence[float]] = None,
                             tol: float = config.SERIES_TOL) -> SemigroupReport:
    """Peripheral decomposition of P_T and the continuous-time checks built on it"""
    if T <= 0:
        raise KernelError(f"reference time must be positive, got {T}")
    P_T = transition(L, T, tol)
    dec = peel_decomposition(P_T)
    if dec.d != 1:
        raise AperiodicityError(f"P_T has period {dec.d}; expected 1")
    r1 = dec.r ** (1.0 / T)
    lyapunov = check_time_lyapunov(L, T, tol=tol)

    flow_grid = tuple(float(h) for h in np.linspace(0.0, T, h_points))
    if t_grid is None:
        t_grid = [T * k / 2 for k in range(1, 41)]
    t_grid = tuple(float(t) for t in t_grid)
    kernels = _transitions(L, sorted(set(flow_grid) | set(t_grid)), tol)

    flow_residuals = []
    for h in flow_grid:
        worst = 0.0
        for item in dec.items:
            nu = item.nu.masses
            gap = np.abs(nu @ kernels[h].entries - r1 ** h * nu) @ L.space.V
            worst = max(worst, float(gap) / max(item.nu.mass_V, 1e-300))
        flow_residuals.append(worst)
    if max(flow_residuals, default=0.0) > FLOW_TOL:
        logger.warning(f"⚠️  Eigenmeasure flow residual {max(flow_residuals):.3e} exceeds {FLOW_TOL:.0e}")

    j = dec.j.astype(float)
    limit = conjugated(dec.limit_matrix(), L.space.V) * (T ** -j)[:, None]
    alpha_t = []
    for t in t_grid:
        scaled = conjugated(kernels[t].entries, L.space.V) / r1 ** t / ((1 + t) ** j)[:, None]
        alpha_t.append(float(np.max(np.abs(scaled - limit).sum(axis=1))))

    free = rotation_free(P_T)
    logger.info(f"✅ Semigroup: r(P_1) = {r1:.12g}, |I| = {len(dec.items)}, C_T = {lyapunov.C_T:.6g}, "
                f"α_t at t = {t_grid[-1]:g}: {alpha_t[-1]:.3e}")
    return SemigroupReport(T=T, C_T=lyapunov.C_T, dec=dec, r1=r1, flow_grid=flow_grid,
                           flow_residuals=tuple(flow_residuals), alpha_grid=t_grid,
                           alpha_t=tuple(alpha_t), rotation_free=free)


def propagation_check(L: SubMarkovGenerator, T1: float, T2: float,
                      tol: float = config.SERIES_TOL) -> PropagationReport:
    """r(P_T2) = r(P_T1)^(T2/T1) and identical E_i partitions"""
    if T1 <= 0 or T2 <= 0:
        raise KernelError("propagation times must be positive")
    dec1 = peel_decomposition(transition(L, T1, tol))
    dec2 = peel_decomposition(transition(L, T2, tol))
    expected = dec1.r ** (T2 / T1)
    rel = abs(dec2.r - expected) / max(expected, 1e-300)
    parts1 = sorted(item.E for item in dec1.items)
    parts2 = sorted(item.E for item in dec2.items)
    match = parts1 == parts2
    consistent = rel <= PROPAGATION_TOL and match
    if not consistent:
        logger.warning(f"⚠️  Propagation mismatch: relative r error {rel:.3e}, partitions match = {match}")
    return PropagationReport(consistent=consistent, r_T1=dec1.r, r_T2=dec2.r, expected_r_T2=expected,
                             relative_error=rel, partitions_match=match)


def semigroup_to_dict(report: SemigroupReport) -> Dict:
    return {
        'T': report.T,
        'C_T': report.C_T,
        'r1': report.r1,
        'rotation_free': report.rotation_free,
        'flow_ok': report.flow_ok,
        'max_flow_residual': max(report.flow_residuals, default=0.0),
        'decomposition': decomposition_to_dict(report.dec),
    }
