#!/usr/bin/env python3
"""
Peripheral Decomposition
========================
Splits a nonnegative kernel into its peripheral part:

    r^(-nd-k) (nd+k)^(-j(x)) P^(nd+k) f(x)  ->  Σ_i r^(-k) η_i(x) ν_i(P^k f)

Steps:
1. Strongly connected classes, their spectral radii, basic flags and periods
2. Peeling rounds: Perron eigenfunction, Doob transform, invariant laws per cyclic class
3. Limit pairs (η_i, ν_i) for the cyclic classes of the final basic classes
4. Numerical verification of the limit through the error curve α
"""

import heapq
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order
from scipy.sparse.linalg import eigs

import config
from kernel_core import (FunctionV, Kernel, KernelError, MeasureV, QsdError, block_radius,
                         conjugated, doob_transform, restrict, spectrum, strong_components)

logger = logging.getLogger(__name__)


class DecompositionError(QsdError):
    """Eigensolver residual failures and structural inconsistencies"""


class ZeroSpectralRadiusError(DecompositionError):
    """r(P) = 0: there is no peripheral spectrum to normalize by"""


@dataclass(frozen=True, eq=False)
class ClassStructure:
    """Strongly connected classes in topological order of the condensation"""
    n: int
    r: float
    labels: np.ndarray                  # state -> class index
    classes: Tuple[np.ndarray, ...]     # class index -> sorted state indices
    dag: np.ndarray                     # dag[a, b]: an edge from class a to class b != a
    reach: np.ndarray                   # reach[a, b]: b accessible from a (reflexive)
    class_rho: np.ndarray
    basic: np.ndarray
    period: np.ndarray                  # 0 for non-basic classes
    cyclic: np.ndarray                  # cyclic class index per state, -1 outside basic classes

    @property
    def basic_classes(self) -> List[int]:
        return [c for c in range(len(self.classes)) if self.basic[c]]

    @property
    def final_basic_classes(self) -> List[int]:
        """Basic classes with no other basic class downstream"""
        out = []
        for c in self.basic_classes:
            downstream = [b for b in self.basic_classes if b != c and self.reach[c, b]]
            if not downstream:
                out.append(c)
        return out

    @property
    def d(self) -> int:
        periods = [int(self.period[c]) for c in self.basic_classes]
        return int(np.lcm.reduce(periods)) if periods else 1


@dataclass(frozen=True, eq=False)
class PeelingRound:
    index: int
    peeled_class: int
    period: int
    eta: np.ndarray                     # on the full space, zero off the round's support
    support: Tuple[int, ...]            # {η > 0}
    transform: Kernel                   # Doob transform on the support
    stationary: np.ndarray              # invariant law of the transform, on the support
    measures: Tuple[np.ndarray, ...]    # m_δ(·/η) per cyclic class, on the full space


@dataclass(frozen=True, eq=False)
class DecompositionItem:
    eta: FunctionV
    nu: MeasureV
    E: Tuple[int, ...]
    F: Tuple[int, ...]
    basic_class: int
    cyclic_class: int


@dataclass(frozen=True)
class AlphaCurve:
    """α_{nd+k} for n = 1..n_max and k < d"""
    d: int
    rows: Tuple[Tuple[int, int, float], ...]

    @property
    def values(self) -> np.ndarray:
        return np.array([alpha for _, _, alpha in self.rows])

    @property
    def envelope(self) -> np.ndarray:
        """Smallest nonincreasing sequence above α"""
        return np.maximum.accumulate(self.values[::-1])[::-1]

    @property
    def final(self) -> float:
        return float(self.values[-1]) if self.rows else 0.0

    def at(self, n: int, k: int = 0) -> float:
        for row_n, row_k, alpha in self.rows:
            if row_n == n and row_k == k:
                return alpha
        raise KeyError((n, k))

    def to_csv_rows(self) -> List[Tuple[int, int, float]]:
        return list(self.rows)


@dataclass(frozen=True, eq=False)
class PeripheralDecomposition:
    kernel: Kernel
    r: float
    d: int
    j: np.ndarray
    items: Tuple[DecompositionItem, ...]
    rounds: Tuple[PeelingRound, ...]
    structure: ClassStructure
    alpha: Optional[AlphaCurve] = None

    def nu_k(self, i: int, k: int) -> np.ndarray:
        """ν_{i,k} = ν_i P^k"""
        return self.items[i].nu.masses @ np.linalg.matrix_power(self.kernel.entries, k)

    def eta_k(self, i: int, k: int) -> np.ndarray:
        """η_{i,k} = r^-k η_i"""
        return self.items[i].eta.values / self.r ** k

    def limit_matrix(self, k: int = 0) -> np.ndarray:
        """Σ_i η_{i,k} ⊗ ν_{i,k}"""
        L = np.zeros((self.kernel.n, self.kernel.n))
        for item in self.items:
            L += np.outer(item.eta.values, item.nu.masses)
        if k:
            L = L @ np.linalg.matrix_power(self.kernel.entries / self.r, k)
        return L


def _reach_from(support: csr_matrix, sources: Sequence[int]) -> np.ndarray:
    """States reachable from sources in zero or more steps"""
    n = support.shape[0]
    sources = np.asarray(sources, dtype=int)
    edges = support.tocoo()
    rows = np.concatenate([edges.row, np.full(len(sources), n)])
    cols = np.concatenate([edges.col, sources])
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n + 1, n + 1))
    order = breadth_first_order(graph, n, directed=True, return_predecessors=False)
    mask = np.zeros(n, dtype=bool)
    mask[order[order < n]] = True
    return mask


def _topological_classes(labels: np.ndarray, n_comp: int, entries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Kahn's algorithm on the condensation, ties broken by smallest state index"""
    adjacency = np.zeros((n_comp, n_comp), dtype=bool)
    xs, ys = np.nonzero(entries > 0)
    adjacency[labels[xs], labels[ys]] = True
    np.fill_diagonal(adjacency, False)

    first_state = np.full(n_comp, np.iinfo(int).max)
    np.minimum.at(first_state, labels, np.arange(len(labels)))

    indegree = adjacency.sum(axis=0)
    heap = [(int(first_state[c]), c) for c in range(n_comp) if indegree[c] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, c = heapq.heappop(heap)
        order.append(c)
        for succ in np.flatnonzero(adjacency[c]):
            indegree[succ] -= 1
            if indegree[succ] == 0:
                heapq.heappush(heap, (int(first_state[succ]), int(succ)))
    if len(order) != n_comp:
        raise DecompositionError("condensation is not acyclic")

    rank = np.empty(n_comp, dtype=int)
    rank[order] = np.arange(n_comp)
    return rank[labels], adjacency[np.ix_(order, order)]


def _period(block: np.ndarray) -> Tuple[int, np.ndarray]:
    """gcd of closed-walk lengths from breadth-first levels; returns (period, level per state)"""
    graph = csr_matrix(block > 0)
    order, predecessors = breadth_first_order(graph, 0, directed=True, return_predecessors=True)
    level = np.zeros(block.shape[0], dtype=int)
    for v in order[1:]:
        level[v] = level[predecessors[v]] + 1
    xs, ys = np.nonzero(block > 0)
    g = 0
    for x, y in zip(xs, ys):
        g = math.gcd(g, int(level[x] + 1 - level[y]))
    return max(g, 1), level


def class_structure(P: Kernel) -> ClassStructure:
    """Classes, condensation, per-class spectral radius, basic flags, periods and cyclic classes"""
    n = P.n
    n_comp, raw_labels = strong_components(P.entries)
    labels, dag = _topological_classes(raw_labels, n_comp, P.entries)
    classes = tuple(np.flatnonzero(labels == c) for c in range(n_comp))

    reach = np.eye(n_comp, dtype=bool)
    for c in reversed(range(n_comp)):
        for succ in np.flatnonzero(dag[c]):
            reach[c] |= reach[succ]

    class_rho = np.array([
        block_radius(P.entries[np.ix_(idx, idx)], P.V[idx]) for idx in classes
    ])
    r = float(class_rho.max()) if n_comp else 0.0
    basic = (class_rho > 0) & (np.abs(class_rho - r) <= config.BASIC_TOL * r) if r > 0 \
        else np.zeros(n_comp, dtype=bool)

    period = np.zeros(n_comp, dtype=int)
    cyclic = np.full(n, -1, dtype=int)
    for c in np.flatnonzero(basic):
        idx = classes[c]
        p, level = _period(P.entries[np.ix_(idx, idx)])
        period[c] = p
        cyclic[idx] = level % p

    logger.debug(f"{n_comp} classes, {int(basic.sum())} basic, r = {r:.12g}")
    return ClassStructure(n=n, r=r, labels=labels, classes=classes, dag=dag, reach=reach,
                          class_rho=class_rho, basic=basic, period=period, cyclic=cyclic)


def growth_exponent(cs: ClassStructure) -> np.ndarray:
    """j(x) = (longest chain of basic classes accessible from x's class) - 1, floored at 0"""
    n_comp = len(cs.classes)
    best = np.zeros(n_comp, dtype=int)
    for c in reversed(range(n_comp)):
        downstream = [best[s] for s in np.flatnonzero(cs.dag[c])]
        best[c] = int(cs.basic[c]) + (max(downstream) if downstream else 0)
    return np.maximum(best[cs.labels] - 1, 0)


def _perron_vector(M: np.ndarray, target: float) -> Tuple[float, np.ndarray]:
    """Nonnegative right eigenvector of an irreducible block for the eigenvalue nearest target"""
    m = M.shape[0]
    if m == 1:
        return float(M[0, 0]), np.ones(1)
    if m <= config.DENSE_LIMIT:
        values, vectors = linalg.eig(M)
        i = int(np.argmin(np.abs(values - target)))
        lam, vec = values[i], vectors[:, i]
    else:
        values, vectors = eigs(csr_matrix(M), k=1, which='LR')
        lam, vec = values[0], vectors[:, 0]
    vec = np.abs(vec)
    vec = vec / vec.max()
    lam = float(np.real(lam))
    residual = float(np.max(np.abs(M @ vec - lam * vec)))
    if residual > config.EIG_RESIDUAL * max(target, 1e-300):
        raise DecompositionError(f"Perron vector residual {residual:.3e} exceeds {config.EIG_RESIDUAL:.1e}·r")
    return lam, vec


def _stationary(T: np.ndarray) -> np.ndarray:
    """Invariant probability of an irreducible Markov matrix"""
    m = T.shape[0]
    system = np.vstack([T.T - np.eye(m), np.ones((1, m))])
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    law, *_ = linalg.lstsq(system, rhs)
    law = np.clip(law, 0.0, None)
    return law / law.sum()


def _snap(values: np.ndarray, scale: np.ndarray) -> np.ndarray:
    ratio = values / scale
    top = ratio.max() if ratio.size else 0.0
    out = np.where(ratio < config.SNAP_TOL * top, 0.0, values)
    return np.clip(out, 0.0, None)


def _peel_rounds(P: Kernel, cs: ClassStructure) -> List[PeelingRound]:
    M = conjugated(P.entries, P.V)
    remaining = np.ones(P.n, dtype=bool)
    rounds: List[PeelingRound] = []
    r = cs.r

    while True:
        left = [c for c in cs.basic_classes if remaining[cs.classes[c][0]]]
        if not left:
            break
        c = left[0]
        idx_c = cs.classes[c]
        ancestors = [a for a in range(len(cs.classes))
                     if a != c and cs.reach[a, c] and remaining[cs.classes[a][0]]]
        idx_u = np.concatenate([cs.classes[a] for a in ancestors]) if ancestors else np.zeros(0, dtype=int)

        _, u_c = _perron_vector(M[np.ix_(idx_c, idx_c)], r)
        u = np.zeros(P.n)
        u[idx_c] = u_c
        if len(idx_u):
            lhs = r * np.eye(len(idx_u)) - M[np.ix_(idx_u, idx_u)]
            u[idx_u] = linalg.solve(lhs, M[np.ix_(idx_u, idx_c)] @ u_c)
        eta = _snap(u * P.V, P.V)
        eta[idx_c] = u_c * P.V[idx_c]

        live = np.flatnonzero(remaining)
        P_live = restrict(P, live)
        try:
            T = doob_transform(P_live, FunctionV(P_live.space, eta[live]), r)
        except KernelError as exc:
            raise DecompositionError(f"peeling round {len(rounds) + 1}: {exc}") from exc

        support = np.flatnonzero(eta > 0)
        position = {int(x): i for i, x in enumerate(support)}
        c_live = idx_c[eta[idx_c] > 0]
        local_c = np.array([position[int(x)] for x in c_live], dtype=int)
        law = np.zeros(len(support))
        law[local_c] = _stationary(T.entries[np.ix_(local_c, local_c)])

        p = int(cs.period[c])
        measures = []
        for delta in range(p):
            m_delta = np.zeros(P.n)
            members = c_live[cs.cyclic[c_live] == delta]
            m_delta[members] = law[[position[int(x)] for x in members]] * p / eta[members]
            measures.append(m_delta)

        rounds.append(PeelingRound(
            index=len(rounds) + 1, peeled_class=c, period=p, eta=eta,
            support=tuple(int(x) for x in support), transform=T,
            stationary=law, measures=tuple(measures)
        ))
        logger.debug(f"Round {len(rounds)}: peeled class {c} ({len(idx_c)} states, period {p}), "
                     f"support {len(support)}")
        remaining[support] = False
        remaining[idx_c] = False

    return rounds


def _limit_projection(A: np.ndarray, j: np.ndarray, d: int, multiplicity: int) -> np.ndarray:
    """Peripheral limit of A^n with row x scaled by (nd)^-j(x); A = conj(P)^d / r^d"""
    n = A.shape[0]
    m = int(j.max()) + 1 if n else 1
    I = np.eye(n)
    nilpotent_power = np.linalg.matrix_power(A - I, m)
    U, s, Vh = linalg.svd(nilpotent_power)
    a = multiplicity
    if a < n and s[n - a - 1] <= config.EIG_RESIDUAL * max(s[0], 1.0):
        logger.warning(f"⚠️  Weak spectral gap around the peripheral eigenspace (σ = {s[n - a - 1]:.3e})")
    W = Vh[n - a:].T
    Ul = U[:, n - a:]
    Z = W @ linalg.solve(Ul.T @ W, Ul.T)
    N = (A - I) @ Z

    L = np.zeros_like(A)
    powers = [Z]
    for _ in range(int(j.max()) if n else 0):
        powers.append(N @ powers[-1])
    for x in range(n):
        jx = int(j[x])
        L[x] = powers[jx][x] / (math.factorial(jx) * d ** jx)
    return L


def peel_decomposition(P: Kernel) -> PeripheralDecomposition:
    """Peripheral decomposition through the peeling construction"""
    cs = class_structure(P)
    if cs.r <= 0:
        raise ZeroSpectralRadiusError("spectral radius is 0, no peripheral spectrum")
    r, d = cs.r, cs.d
    j = growth_exponent(cs)
    rounds = _peel_rounds(P, cs)

    M = conjugated(P.entries, P.V)
    B = np.linalg.matrix_power(M, d)
    support_B = csr_matrix(B > 0)
    rd = r ** d
    V_ge_1 = bool(np.all(P.V >= 1.0))

    round_of = {rnd.peeled_class: rnd for rnd in rounds}
    round_d = int(np.lcm.reduce([rnd.period for rnd in rounds]))
    if round_d != d:
        raise DecompositionError(f"peeling rounds give period {round_d}, class structure gives {d}")

    finals = []
    for c in cs.final_basic_classes:
        if c not in round_of:
            raise DecompositionError(f"final basic class {c} was never peeled")
        idx_c = cs.classes[c]
        for delta in range(int(cs.period[c])):
            finals.append((c, delta, idx_c[cs.cyclic[idx_c] == delta]))

    pairs = []
    for c, delta, E in finals:
        F_mask = _reach_from(support_B, E)
        F_mask[E] = True
        E_mask = np.zeros(P.n, dtype=bool)
        E_mask[E] = True
        D = np.flatnonzero(F_mask & ~E_mask)

        # ν = m_δ(·/η) on the cyclic class, then carried down to the rest of F
        m_delta = round_of[c].measures[delta]
        if not np.all(m_delta[E] > 0):
            raise DecompositionError(f"round measure of class {c} vanishes on cyclic class {delta}")
        w_E = m_delta[E] * P.V[E]
        w = np.zeros(P.n)
        w[E] = w_E
        if len(D):
            lhs = rd * np.eye(len(D)) - B[np.ix_(D, D)]
            w[D] = linalg.solve(lhs.T, B[np.ix_(E, D)].T @ w_E)
        nu = _snap(w / P.V, 1.0 / P.V)
        nu = nu / (nu.sum() if V_ge_1 else nu @ P.V)
        pairs.append((c, delta, E, np.flatnonzero(F_mask), nu))

    multiplicity = int(sum(cs.period[c] for c in cs.basic_classes))
    Lc = _limit_projection(B / rd, j, d, multiplicity)
    upstream_support = csr_matrix(B.T > 0)

    items = []
    for c, delta, E, F, nu in pairs:
        w = nu * P.V
        s = int(E[np.argmax(w[E])])
        u = Lc[:, s] / w[s]
        can_reach = _reach_from(upstream_support, E)
        u = np.where(can_reach, u, 0.0)
        eta = _snap(u * P.V, P.V)
        items.append(DecompositionItem(
            eta=FunctionV(P.space, eta), nu=MeasureV(P.space, nu),
            E=tuple(int(x) for x in E), F=tuple(int(x) for x in F),
            basic_class=c, cyclic_class=delta
        ))

    dec = PeripheralDecomposition(kernel=P, r=r, d=d, j=j, items=tuple(items),
                                  rounds=tuple(rounds), structure=cs)
    _check_eigen_relations(dec)
    logger.info(f"✅ Decomposition: r = {r:.12g}, d = {d}, |I| = {len(items)}, max j = {int(j.max())}")
    return dec


def _check_eigen_relations(dec: PeripheralDecomposition):
    P = dec.kernel
    Pd = np.linalg.matrix_power(P.entries, dec.d)
    rd = dec.r ** dec.d
    for i, item in enumerate(dec.items):
        nu = item.nu.masses
        left = float(np.abs(nu @ Pd - rd * nu) @ P.V)
        if left > config.EIG_RESIDUAL * rd * max(nu @ P.V, 1e-300):
            raise DecompositionError(f"item {i}: ν P^d = r^d ν residual {left:.3e}")
        E = np.asarray(item.E)
        eta = item.eta.values
        right = float(np.max(np.abs((Pd @ eta)[E] - rd * eta[E]) / P.V[E]))
        if right > config.EIG_RESIDUAL * rd * max(item.eta.norm, 1e-300):
            raise DecompositionError(f"item {i}: P^d η = r^d η residual {right:.3e} on E")


def _alpha_at(Mr: np.ndarray, Lc: np.ndarray, j: np.ndarray, d: int, n: int, k: int) -> float:
    t = n * d + k
    scaled = np.linalg.matrix_power(Mr, t) / (float(t) ** j)[:, None]
    target = Lc @ np.linalg.matrix_power(Mr, k)
    return float(np.max(np.abs(scaled - target).sum(axis=1)))


def verify_decomposition(P: Kernel, dec: PeripheralDecomposition, n_max: int,
                         workers: int = config.WORKERS) -> AlphaCurve:
    """Weighted error of the peripheral limit for n = 1..n_max, k < d

    Each α is the exact L∞(V) operator norm of the signed error matrix.
    """
    Mr = conjugated(P.entries, P.V) / dec.r
    Lc = conjugated(dec.limit_matrix(), P.V)
    jobs = [(n, k) for n in range(1, n_max + 1) for k in range(dec.d)]
    results: Dict[Tuple[int, int], float] = {}
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(_alpha_at, Mr, Lc, dec.j, dec.d, n, k): (n, k) for n, k in jobs}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    curve = AlphaCurve(d=dec.d, rows=tuple((n, k, results[(n, k)]) for n, k in jobs))
    logger.info(f"📊 α at n = {n_max}: {curve.final:.3e}")
    return curve


def with_alpha(dec: PeripheralDecomposition, n_max: int) -> PeripheralDecomposition:
    return replace(dec, alpha=verify_decomposition(dec.kernel, dec, n_max))


def is_totally_irreducible(P: Kernel) -> bool:
    """Every state reaches (in one step or more) every state reachable from anywhere"""
    n = P.n
    if n == 0:
        return True
    support = csr_matrix(P.entries > 0)
    reach1 = np.zeros((n, n), dtype=bool)
    for x in range(n):
        successors = np.flatnonzero(P.entries[x] > 0)
        if len(successors):
            reach1[x] = _reach_from(support, successors)
    reachable = reach1.any(axis=0)
    return bool(np.all(reach1[:, reachable]))


def peripheral_eigenvalues(P: Kernel, rel_tol: float = config.BASIC_TOL) -> np.ndarray:
    values = spectrum(P)
    if values.size == 0:
        return values
    r = np.abs(values).max()
    return values[np.abs(values) >= r * (1 - rel_tol)]


def second_modulus_ratio(P: Kernel) -> float:
    """Largest non-peripheral eigenvalue modulus over r"""
    values = spectrum(P)
    r = float(np.abs(values).max()) if values.size else 0.0
    if r <= 0:
        raise ZeroSpectralRadiusError("spectral radius is 0")
    inner = np.abs(values)[np.abs(values) < r * (1 - 1e-7)]
    return float(inner.max() / r) if inner.size else 0.0


def growth_regression(P: Kernel, dec: PeripheralDecomposition, n_range: Tuple[int, int] = (20, 60)) -> np.ndarray:
    """Least-squares slope of log(P^(nd)V(x) / r^(nd)) against log(nd), per state"""
    Mr = conjugated(P.entries, P.V) / dec.r
    B = np.linalg.matrix_power(Mr, dec.d)
    ns = np.arange(n_range[0], n_range[1] + 1)
    current = np.linalg.matrix_power(B, int(ns[0])) @ np.ones(P.n)
    series = []
    for _ in ns:
        series.append(current.copy())
        current = B @ current
    series = np.array(series)
    logs_t = np.log(ns * dec.d)
    slopes = np.full(P.n, np.nan)
    for x in range(P.n):
        if np.all(series[:, x] > 0):
            slopes[x] = np.polyfit(logs_t, np.log(series[:, x]), 1)[0]
    return slopes


def decomposition_to_dict(dec: PeripheralDecomposition) -> Dict:
    report = {
        'r': dec.r,
        'd': dec.d,
        'j': [int(v) for v in dec.j],
        'states': [str(s) for s in dec.kernel.space.states],
        'items': [
            {
                'eta': [float(v) for v in item.eta.values],
                'nu': [float(v) for v in item.nu.masses],
                'E': list(item.E),
                'F': list(item.F),
                'basic_class': int(item.basic_class),
                'cyclic_class': int(item.cyclic_class),
            }
            for item in dec.items
        ],
        'rounds': [
            {
                'index': rnd.index,
                'peeled_class': int(rnd.peeled_class),
                'period': rnd.period,
                'support': list(rnd.support),
            }
            for rnd in dec.rounds
        ],
    }
    if dec.alpha is not None:
        report['alpha'] = [{'n': n, 'k': k, 'alpha': a} for n, k, a in dec.alpha.rows]
    return report
