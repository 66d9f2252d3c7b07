#!/usr/bin/env python3
"""
Quasi-Compactness Certificates
==============================
Machine-checkable upper bounds on the essential spectral radius and lower
bounds on the spectral radius of a nonnegative kernel:

- Domination:       P <= K + S with K compact gives r_ess(P) <= r(S)
- OrderDomination:  P <= Q transfers any r_ess bound of Q to P
- Lyapunov:         (H1) drift outside E_K plus (H2) local domination on E_K
- LocalizedG:       local domination through a kernel G with G^k compact
- LocalizedMoment:  local domination on {V <= A} plus a moment tail
- Density:          locally uniformly integrable transition densities
- LowerBound:       Pφ >= θφ gives r(P) >= θ

Suprema over the unit ball of L∞(V) are taken in closed form (f = V on the
positive set), never by sampling. In finite dimension every kernel is
compact, so certificates record the rank and structure of their witnesses.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from kernel_core import (FunctionV, Kernel, MeasureV, QsdError, entrywise_leq, indicator,
                         matrix_weighted_norm, power, spectral_radius, weighted_norm)

logger = logging.getLogger(__name__)

EXPANSION_TOL = 1e-10
RECONSTRUCTION_TOL = 1e-12


class CertificateError(QsdError):
    """Dimension mismatch, reconstruction mismatch or unattainable target"""


class CertificateKind(Enum):
    DOMINATION = 'Domination'
    ORDER_DOMINATION = 'OrderDomination'
    LYAPUNOV = 'Lyapunov'
    LOCALIZED_G = 'LocalizedG'
    LOCALIZED_MOMENT = 'LocalizedMoment'
    DENSITY = 'Density'
    LOWER_BOUND = 'LowerBound'


def summarize_kernel(K: Kernel) -> Dict[str, Any]:
    return {
        'name': K.name,
        'shape': list(K.entries.shape),
        'rank': int(np.linalg.matrix_rank(K.entries)) if K.n else 0,
        'norm': weighted_norm(K),
    }


def _jsonable(value: Any) -> Any:
    if isinstance(value, Kernel):
        return summarize_kernel(value)
    if isinstance(value, (FunctionV, MeasureV)):
        array = value.values if isinstance(value, FunctionV) else value.masses
        return [float(v) for v in array]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(int(v) for v in value)
    if isinstance(value, (tuple, list)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


@dataclass(frozen=True)
class Certificate:
    kind: CertificateKind
    parameters: Dict[str, float]
    witness: Dict[str, Any] = field(default_factory=dict)
    valid: bool = False
    margin: Optional[float] = None
    strict: bool = True
    violations: Tuple[str, ...] = ()

    @property
    def r_ess_upper(self) -> Optional[float]:
        return self.parameters.get('r_ess_upper')

    @property
    def r_lower(self) -> Optional[float]:
        return self.parameters.get('r_lower')

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'parameters': {k: float(v) for k, v in sorted(self.parameters.items())},
            'witness': _jsonable(self.witness),
            'valid': bool(self.valid),
            'margin': None if self.margin is None else float(self.margin),
            'strict': bool(self.strict),
            'violations': list(self.violations),
        }


def _margin(parameters: Dict[str, float]) -> Optional[float]:
    if 'r_lower' in parameters and 'r_ess_upper' in parameters:
        return parameters['r_lower'] - parameters['r_ess_upper']
    return None


def _check_dims(*kernels: Kernel):
    n = kernels[0].n
    for K in kernels[1:]:
        if K.n != n:
            raise CertificateError(f"dimension mismatch: {n} vs {K.n} states")
        if not np.array_equal(K.V, kernels[0].V):
            raise CertificateError("kernels carry different weights V")


def _mask(P: Kernel, E_K: Iterable[int]) -> np.ndarray:
    try:
        return indicator(P.space, E_K)
    except IndexError:
        raise CertificateError(f"E_K has states outside 0..{P.n - 1}")


def _describe_entry(P: Kernel, where: Tuple[int, int], excess: float) -> str:
    x, y = where
    return f"entry ({P.space.states[x]!r}, {P.space.states[y]!r}) exceeds the bound by {excess:.3e}"


def check_order_domination(P: Kernel, Q: Kernel, q_certificate: Optional[Certificate] = None) -> Certificate:
    """0 <= P <= Q entrywise; a certified r_ess bound for Q transfers to P"""
    _check_dims(P, Q)
    ok, worst, excess = entrywise_leq(P.entries, Q.entries)
    parameters: Dict[str, float] = {}
    if q_certificate is not None and q_certificate.valid and q_certificate.r_ess_upper is not None:
        parameters['r_ess_upper'] = q_certificate.r_ess_upper
    violations = () if ok else (_describe_entry(P, worst, excess),)
    return Certificate(
        kind=CertificateKind.ORDER_DOMINATION,
        parameters=parameters,
        witness={'Q': Q, 'transferred_from': None if q_certificate is None else q_certificate.kind.value},
        valid=ok,
        violations=violations,
    )


def check_domination(P: Kernel, K: Kernel, S: Kernel) -> Certificate:
    """P <= K + S entrywise gives r_ess(P) <= r(S)"""
    _check_dims(P, K, S)
    ok, worst, excess = entrywise_leq(P.entries, K.entries + S.entries)
    bound = spectral_radius(S)
    r = spectral_radius(P)
    strict = bound < r * (1 - config.ORDER_TOL)
    violations = [] if ok else [_describe_entry(P, worst, excess)]
    if ok and not strict:
        violations.append(f"vacuous: r(S) = {bound:.6g} is not below r(P) = {r:.6g}")
    return Certificate(
        kind=CertificateKind.DOMINATION,
        parameters={'r_ess_upper': bound},
        witness={'K': K, 'S': S, 'rank_K': int(np.linalg.matrix_rank(K.entries)), 'r': r},
        valid=ok,
        strict=strict,
        violations=tuple(violations),
    )


@dataclass(frozen=True)
class ExpansionCheck:
    holds: bool
    slack: float
    lhs: float
    rhs: float


def expansion_terms(P: Kernel, S: Kernel, n: int) -> List[np.ndarray]:
    """Words of ((P-S)_+ + S∧P)^n grouped by the number of (P-S)_+ factors"""
    _check_dims(P, S)
    D = np.maximum(P.entries - S.entries, 0.0)
    M = np.minimum(P.entries, S.entries)
    terms = [np.eye(P.n)]
    for _ in range(n):
        grown = [terms[0] @ M]
        for k in range(1, len(terms)):
            grown.append(terms[k] @ M + terms[k - 1] @ D)
        grown.append(terms[-1] @ D)
        terms = grown
    return terms


def expansion_bound_check(P: Kernel, S: Kernel, n: int) -> ExpansionCheck:
    """‖P^n - R_n‖ <= ‖S‖^n + n‖D‖‖S‖^(n-1) + C(n,2)‖D‖²‖S‖^(n-2), D = (P-S)_+

    R_n collects the words with three or more factors D.
    """
    if n < 3:
        raise CertificateError(f"expansion check needs n >= 3, got {n}")
    terms = expansion_terms(P, S, n)
    head = terms[0] + terms[1] + terms[2]
    lhs = matrix_weighted_norm(head, P.V)
    s = weighted_norm(S)
    dn = weighted_norm(Kernel(P.space, np.maximum(P.entries - S.entries, 0.0)))
    rhs = s ** n + n * dn * s ** (n - 1) + n * (n - 1) / 2 * dn ** 2 * s ** (n - 2)
    holds = lhs <= rhs + EXPANSION_TOL * max(rhs, lhs, 1e-300)
    return ExpansionCheck(holds=holds, slack=rhs - lhs, lhs=lhs, rhs=rhs)


def _ratio_max(values: np.ndarray, V: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    return float(np.max(values[mask] / V[mask]))


def check_H1(P: Kernel, E_K: Iterable[int]) -> float:
    """Smallest θ1 with PV <= θ1 V outside E_K (0 when E_K is everything)"""
    inside = _mask(P, E_K)
    return _ratio_max(P.entries @ P.V, P.V, ~inside)


def check_H2(P: Kernel, E_K: Iterable[int], K: Kernel) -> float:
    """Smallest θ2 with Pf <= Kf + θ2 V‖f‖ on E_K"""
    _check_dims(P, K)
    inside = _mask(P, E_K)
    excess = np.maximum(P.entries - K.entries, 0.0) @ P.V
    return _ratio_max(excess, P.V, inside)


def prop9_certificate(P: Kernel, E_K: Iterable[int], K: Kernel, power_n: int = 1) -> Certificate:
    """(H1) + (H2) give r_ess(P) <= θ1 ∨ θ2; with power_n > 1 the criteria run on P^power_n"""
    E_K = sorted(set(int(x) for x in E_K))
    base = P
    if power_n > 1:
        P = power(P, power_n)
    theta1 = check_H1(P, E_K)
    theta2 = check_H2(P, E_K, K)
    r = spectral_radius(P)
    bound = max(theta1, theta2)

    inside = _mask(P, E_K)
    S = np.where(inside[:, None], np.maximum(P.entries - K.entries, 0.0), P.entries)
    K_masked = np.where(inside[:, None], K.entries, 0.0)

    violations = []
    if theta1 >= r:
        violations.append(f"θ1 = {theta1:.6g} is not below r(P) = {r:.6g}")
    if theta2 >= r:
        violations.append(f"θ2 = {theta2:.6g} is not below r(P) = {r:.6g}")

    root = 1.0 / power_n
    parameters = {
        'theta1': theta1,
        'theta2': theta2,
        'r_ess_upper': bound ** root,
        'r_lower': r ** root,
    }
    if power_n > 1:
        parameters['k'] = float(power_n)
    valid = not violations
    logger.debug(f"Lyapunov check on {base.name or 'kernel'}: θ1 = {theta1:.6g}, θ2 = {theta2:.6g}, r = {r:.6g}")
    return Certificate(
        kind=CertificateKind.LYAPUNOV,
        parameters=parameters,
        witness={'E_K': E_K, 'K': K, 'K_masked': Kernel(P.space, K_masked, 'K_masked'),
                 'S': Kernel(P.space, S, 'S')},
        valid=valid,
        margin=_margin(parameters),
        violations=tuple(violations),
    )


def lower_bound_r(P: Kernel, phi: Union[FunctionV, Sequence[float], np.ndarray]) -> Certificate:
    """Pφ >= θφ gives r(P) >= θ"""
    values = phi.values if isinstance(phi, FunctionV) else np.asarray(phi, dtype=float)
    if values.shape != (P.n,):
        raise CertificateError(f"φ has shape {values.shape}, kernel has {P.n} states")
    if np.any(values < 0):
        raise CertificateError(f"φ must be nonnegative, φ({int(np.argmin(values))}) = {values.min()}")
    positive = values > 0
    if not positive.any():
        raise CertificateError("φ must not vanish identically")
    theta = float(np.min((P.entries @ values)[positive] / values[positive]))
    return Certificate(
        kind=CertificateKind.LOWER_BOUND,
        parameters={'theta': theta, 'r_lower': theta},
        witness={'phi': [float(v) for v in values]},
        valid=True,
        strict=theta > 0,
    )


def cor12_certificate(P: Kernel, E_K: Iterable[int], G: Kernel, k: int, theta3: float) -> Certificate:
    """Local domination P(1_{E_K} f) <= Gf + θ3 V‖f‖ on E_K with G^k compact"""
    _check_dims(P, G)
    if k < 1:
        raise CertificateError(f"k must be at least 1, got {k}")
    E_K = sorted(set(int(x) for x in E_K))
    inside = _mask(P, E_K)
    theta1 = check_H1(P, E_K)
    r = spectral_radius(P)

    column_masked = np.where(inside[None, :], P.entries, 0.0)
    needed = _ratio_max(np.maximum(column_masked - G.entries, 0.0) @ P.V, P.V, inside)

    theta = 0.0
    G_power = np.eye(P.n)
    for i in range(k):
        theta += matrix_weighted_norm(G_power, P.V) * weighted_norm(power(P, k - i))
        G_power = G_power @ G.entries
    theta *= theta3 + theta1

    violations = []
    if needed > theta3 * (1 + config.ORDER_TOL) + config.ORDER_TOL:
        violations.append(f"local domination needs θ3 >= {needed:.6g}, given {theta3:.6g}")
    if theta >= r ** (k + 1):
        violations.append(f"θ = {theta:.6g} is not below r(P)^{k + 1} = {r ** (k + 1):.6g}")

    parameters = {
        'theta1': theta1,
        'theta3': theta3,
        'theta': theta,
        'k': float(k),
        'r_ess_upper': max(theta1, theta ** (1.0 / (k + 1))),
        'r_lower': r,
    }
    return Certificate(
        kind=CertificateKind.LOCALIZED_G,
        parameters=parameters,
        witness={'E_K': E_K, 'G': G, 'rank_G_k': int(np.linalg.matrix_rank(G_power)),
                 'theta3_needed': needed},
        valid=not violations,
        margin=_margin(parameters),
        violations=tuple(violations),
    )


def cor14_certificate(P: Kernel, E_K: Iterable[int], A: float, K_A: Kernel, theta4: float) -> Certificate:
    """(H2) through a moment tail: θ2 = sup_{E_K} P(V 1_{V>A})/V + θ4"""
    _check_dims(P, K_A)
    E_K = sorted(set(int(x) for x in E_K))
    inside = _mask(P, E_K)
    low = P.V <= A
    theta1 = check_H1(P, E_K)
    r = spectral_radius(P)

    tail = _ratio_max(P.entries @ np.where(low, 0.0, P.V), P.V, inside)
    column_masked = np.where(low[None, :], P.entries, 0.0)
    needed = _ratio_max(np.maximum(column_masked - K_A.entries, 0.0) @ P.V, P.V, inside)
    theta2 = tail + theta4

    violations = []
    if needed > theta4 * (1 + config.ORDER_TOL) + config.ORDER_TOL:
        violations.append(f"domination on {{V <= A}} needs θ4 >= {needed:.6g}, given {theta4:.6g}")
    if theta2 >= r:
        violations.append(f"θ2 = {theta2:.6g} is not below r(P) = {r:.6g}")
    if theta1 >= r:
        violations.append(f"θ1 = {theta1:.6g} is not below r(P) = {r:.6g}")

    parameters = {
        'theta1': theta1,
        'theta2': theta2,
        'theta4': theta4,
        'A': float(A),
        'tail': tail,
        'r_ess_upper': max(theta1, theta2),
        'r_lower': r,
    }
    return Certificate(
        kind=CertificateKind.LOCALIZED_MOMENT,
        parameters=parameters,
        witness={'E_K': E_K, 'K_A': K_A, 'theta4_needed': needed},
        valid=not violations,
        margin=_margin(parameters),
        violations=tuple(violations),
    )


def density_b_grid(p: np.ndarray) -> np.ndarray:
    """Geometric grid with ratio 2 from max(1, median p) up past max p"""
    top = float(np.max(p)) if p.size else 0.0
    start = max(1.0, float(np.median(p))) if p.size else 1.0
    grid = [start]
    while grid[-1] < top:
        grid.append(grid[-1] * 2.0)
    return np.array(grid)


def density_tail(p: np.ndarray, nu: np.ndarray, V: np.ndarray, rows: np.ndarray,
                 columns: np.ndarray, B: float) -> float:
    """sup over rows of (1/V(x)) Σ_{y in columns} p(x,y) 1_{p(x,y) > B} V(y) ν(y)"""
    if not rows.any():
        return 0.0
    weights = np.where(columns, V * nu, 0.0)
    heavy = np.where(p > B, p, 0.0)
    return float(np.max((heavy @ weights)[rows] / V[rows]))


def density_certificate(P: Kernel, p: np.ndarray, nu: Union[MeasureV, np.ndarray], E_K: Iterable[int],
                        variant: str = 'i', target: Optional[float] = None, A: Optional[float] = None,
                        C_T: Optional[float] = None, phi: Optional[np.ndarray] = None) -> Certificate:
    """Quasi-compactness from locally uniformly integrable densities Pf(x) = Σ_y p(x,y) f(y) ν(y) on E_K"""
    p = np.asarray(p, dtype=float)
    masses = nu.masses if isinstance(nu, MeasureV) else np.asarray(nu, dtype=float)
    if p.shape != (P.n, P.n) or masses.shape != (P.n,):
        raise CertificateError(f"density {p.shape} / measure {masses.shape} do not match {P.n} states")
    if variant not in ('i', 'ii'):
        raise CertificateError(f"unknown density variant {variant!r}")
    E_K = sorted(set(int(x) for x in E_K))
    inside = _mask(P, E_K)

    rebuilt = p * masses[None, :]
    scale = np.maximum(np.abs(rebuilt[inside]), np.abs(P.entries[inside]))
    mismatch = np.abs(rebuilt[inside] - P.entries[inside]) - RECONSTRUCTION_TOL * np.maximum(scale, 1.0)
    if mismatch.size and mismatch.max() > 0:
        raise CertificateError(f"density does not reproduce P on E_K (worst gap {mismatch.max():.3e})")

    theta1 = check_H1(P, E_K)
    r = spectral_radius(P)
    norm = weighted_norm(P)
    preconditions = {'theta1_norm': theta1 * norm}
    violations: List[str] = []
    user_target = target is not None

    if variant == 'i':
        columns = inside
        if not theta1 * norm < r:
            violations.append(f"θ1‖P‖ = {theta1 * norm:.6g} is not below r(P) = {r:.6g}")
        if C_T is not None and phi is not None:
            theta_prime = lower_bound_r(P, phi).parameters['theta']
            preconditions['theta_prime'] = theta_prime
            preconditions['C_T'] = float(C_T)
            if not theta1 * C_T < theta_prime:
                violations.append(f"θ1·C_T = {theta1 * C_T:.6g} is not below θ'1 = {theta_prime:.6g}")
        if target is None:
            # room left for θ3 in (θ3 + θ1)‖P‖ < r²
            target = 0.5 * (r ** 2 - theta1 * norm) / norm if norm > 0 else 0.0
    else:
        if A is None:
            raise CertificateError("variant ii needs a level A")
        columns = P.V <= A
        if target is None:
            moment = _ratio_max(P.entries @ np.where(columns, 0.0, P.V), P.V, inside)
            target = 0.5 * (r - moment)

    if target < 0:
        if user_target:
            raise CertificateError(f"target {target:.6g} is unattainable")
        violations.append(f"no room for the local term (target {target:.6g} < 0)")
        return Certificate(
            kind=CertificateKind.DENSITY,
            parameters={'theta1': theta1, 'r_lower': r, **preconditions},
            witness={'E_K': E_K, 'variant': variant},
            valid=False,
            violations=tuple(violations),
        )

    grid = density_b_grid(p[inside] if inside.any() else p)
    tails = np.array([density_tail(p, masses, P.V, inside, columns, B) for B in grid])
    hits = np.flatnonzero(tails <= target)
    if len(hits) == 0:
        raise CertificateError(f"tail plateaus at {tails.min():.6g} above target {target:.6g}")
    B = float(grid[hits[0]])
    tail = float(tails[hits[0]])
    logger.debug(f"Density tail {tail:.3e} <= {target:.3e} at B = {B:g}")

    if variant == 'i':
        G = np.where(np.outer(inside, inside), B * masses[None, :], 0.0)
        inner = cor12_certificate(P, E_K, Kernel(P.space, G, 'G_B'), 1, tail)
    else:
        K_A = np.where(np.outer(inside, columns), B * masses[None, :], 0.0)
        inner = cor14_certificate(P, E_K, A, Kernel(P.space, K_A, 'K_A'), tail)

    parameters = dict(inner.parameters)
    parameters.update(preconditions)
    parameters['B'] = B
    parameters['target'] = float(target)
    all_violations = tuple(violations) + inner.violations
    return Certificate(
        kind=CertificateKind.DENSITY,
        parameters=parameters,
        witness={'E_K': E_K, 'variant': variant, 'inner': inner.kind.value,
                 'B_grid': [float(b) for b in grid], 'tails': [float(t) for t in tails]},
        valid=not all_violations,
        margin=_margin(parameters),
        violations=all_violations,
    )


def verdict_table(certificates: Sequence[Certificate]) -> str:
    """Fixed-width verdict table for the console"""
    lines = [f"{'KIND':<18}{'VALID':<8}{'r_ess_upper':>16}{'r_lower':>16}{'margin':>14}",
             '-' * 72]
    for cert in certificates:
        upper = cert.r_ess_upper
        lower = cert.r_lower
        lines.append(
            f"{cert.kind.value:<18}{('✅' if cert.valid else '❌'):<8}"
            f"{('-' if upper is None else f'{upper:.10g}'):>16}"
            f"{('-' if lower is None else f'{lower:.10g}'):>16}"
            f"{('-' if cert.margin is None else f'{cert.margin:.6g}'):>14}"
        )
        for violation in cert.violations:
            lines.append(f"    ⚠️  {violation}")
    return '\n'.join(lines)
