"""
Tests for the quasi-compactness certificates
"""
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from certify import (CertificateError, CertificateKind, check_domination, check_H1, check_H2, check_order_domination,
                     cor12_certificate, cor14_certificate, density_b_grid, density_certificate, density_tail,
                     expansion_bound_check, expansion_terms, lower_bound_r, prop9_certificate, verdict_table)
from conftest import THETA1_WALK, lazy_chain_model, random_positive, walk_kernel
from kernel_core import Kernel, power, spectral_radius, spectrum, weighted_norm
from qsd_sim import AbsorbedModel, ModelError, compile_model, lazy_chain_certificate

N_LAZY = 50
small_matrices = arrays(np.float64, (3, 3), elements=st.floats(0.0, 1.0))


def _zero_like(P: Kernel) -> Kernel:
    return P.with_entries(np.zeros_like(P.entries))


def _masked_rows(P: Kernel, E_K) -> Kernel:
    inside = np.zeros(P.n, dtype=bool)
    inside[list(E_K)] = True
    return P.with_entries(np.where(inside[:, None], P.entries, 0.0))


# Domination and the lazy chain

def test_lazy_chain_certificate_margin(lazy_model):
    cert = lazy_chain_certificate(lazy_model, np.full(N_LAZY, 1.0 / N_LAZY))
    assert cert.kind is CertificateKind.DOMINATION
    assert cert.valid
    assert cert.parameters['a'] == pytest.approx(1.0)
    assert cert.r_ess_upper == pytest.approx(0.3, abs=1e-12)
    assert cert.r_lower == pytest.approx(0.8, abs=1e-12)
    assert cert.margin == pytest.approx(0.5, abs=1e-12)


def test_lazy_chain_certificate_without_holding_is_compact():
    cert = lazy_chain_certificate(lazy_chain_model(rho_delta=0.0), np.full(N_LAZY, 1.0 / N_LAZY))
    assert cert.valid
    assert cert.r_ess_upper == pytest.approx(0.0, abs=1e-15)


def test_lazy_chain_certificate_flags_too_much_holding_and_killing():
    rho_delta = np.full(N_LAZY, 0.3)
    rho_partial = np.full(N_LAZY, 0.2)
    rho_delta[0] = 0.6
    rho_partial[1] = 0.5
    cert = lazy_chain_certificate(lazy_chain_model(rho_delta, rho_partial), np.full(N_LAZY, 1.0 / N_LAZY))
    assert not cert.valid
    assert any('max ρ_δ + max ρ_∂' in v for v in cert.violations)


def test_lazy_chain_certificate_rejects_small_density_bound(lazy_model):
    with pytest.raises(CertificateError, match='density bound violated'):
        lazy_chain_certificate(lazy_model, np.full(N_LAZY, 1.0 / N_LAZY), a=0.5)


@pytest.mark.parametrize("a", [None, 10.0])
def test_lazy_chain_certificate_rejects_measure_missing_a_column(a):
    model = AbsorbedModel.lazy_chain([[0.5, 0.5], [0.5, 0.5]], 0.5, 0.3, 0.2)
    with pytest.raises(CertificateError, match='density bound violated'):
        lazy_chain_certificate(model, [1.0, 0.0], a=a)


def test_lazy_chain_certificate_needs_lazy_model(two_state):
    with pytest.raises(ModelError):
        lazy_chain_certificate(AbsorbedModel.explicit(two_state), [0.5, 0.5])


def test_order_domination_transfers_bound(lazy_kernel):
    upper_model = lazy_chain_model(rho_delta=0.5, rho_partial=0.0)
    Q = compile_model(upper_model)
    np.testing.assert_allclose(Q.entries, lazy_kernel.entries + 0.2 * np.eye(N_LAZY), atol=1e-15)
    q_cert = lazy_chain_certificate(upper_model, np.full(N_LAZY, 1.0 / N_LAZY))
    assert q_cert.r_ess_upper == pytest.approx(0.5)

    cert = check_order_domination(lazy_kernel, Q, q_cert)
    assert cert.valid
    assert cert.r_ess_upper == pytest.approx(0.5)

    backwards = check_order_domination(Q, lazy_kernel)
    assert not backwards.valid
    assert 'exceeds the bound' in backwards.violations[0]


def test_domination_by_itself_is_compact(lazy_kernel):
    cert = check_domination(lazy_kernel, lazy_kernel, _zero_like(lazy_kernel))
    assert cert.valid
    assert cert.strict
    assert cert.r_ess_upper == 0.0


def test_domination_by_whole_kernel_is_vacuous(lazy_kernel):
    cert = check_domination(lazy_kernel, _zero_like(lazy_kernel), lazy_kernel)
    assert cert.valid
    assert not cert.strict
    assert cert.violations[0].startswith('vacuous')


def test_domination_failure_and_dimension_mismatch(lazy_kernel, two_state):
    cert = check_domination(lazy_kernel, _zero_like(lazy_kernel), lazy_kernel.with_entries(0.5 * lazy_kernel.entries))
    assert not cert.valid
    with pytest.raises(CertificateError, match='dimension mismatch'):
        check_domination(lazy_kernel, two_state, two_state)


# Expansion bound

def test_expansion_with_full_domination_is_plain_power(lazy_kernel):
    for n in (3, 5, 8):
        check = expansion_bound_check(lazy_kernel, lazy_kernel, n)
        assert check.holds
        assert check.lhs == pytest.approx(weighted_norm(power(lazy_kernel, n)), rel=1e-12)


def test_expansion_with_zero_domination_is_empty(lazy_kernel):
    check = expansion_bound_check(lazy_kernel, _zero_like(lazy_kernel), 4)
    assert check.holds
    assert check.lhs == 0.0
    assert check.rhs == 0.0


def test_expansion_rejects_short_words(lazy_kernel):
    with pytest.raises(CertificateError):
        expansion_bound_check(lazy_kernel, lazy_kernel, 2)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6])
def test_expansion_terms_match_word_enumeration(rng, n):
    P = Kernel.from_matrix(rng.uniform(0, 1, size=(3, 3)))
    S = Kernel.from_matrix(rng.uniform(0, 1, size=(3, 3)))
    D = np.maximum(P.entries - S.entries, 0.0)
    M = np.minimum(P.entries, S.entries)
    expected = [np.zeros((3, 3)) for _ in range(n + 1)]
    for word in itertools.product((0, 1), repeat=n):
        product = np.eye(3)
        for letter in word:
            product = product @ (D if letter else M)
        expected[sum(word)] += product
    terms = expansion_terms(P, S, n)
    assert len(terms) == n + 1
    for got, want in zip(terms, expected):
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(small_matrices, small_matrices, st.integers(3, 10))
def test_expansion_bound_always_holds(p, s, n):
    check = expansion_bound_check(Kernel.from_matrix(p), Kernel.from_matrix(s), n)
    assert check.holds


# Lyapunov criteria

def test_H1_and_H2_on_lazy_chain(lazy_kernel):
    everything = range(N_LAZY)
    assert check_H1(lazy_kernel, everything) == 0.0
    assert check_H1(lazy_kernel, []) == pytest.approx(0.8)
    K = lazy_kernel.with_entries(np.full((N_LAZY, N_LAZY), 1.0 / N_LAZY))
    assert check_H2(lazy_kernel, everything, K) == pytest.approx(0.29)
    K_half = lazy_kernel.with_entries(np.full((N_LAZY, N_LAZY), 0.5 / N_LAZY))
    assert check_H2(lazy_kernel, everything, K_half) == pytest.approx(0.3)


def test_H1_on_walk_is_the_drift_constant():
    P = walk_kernel(60)
    assert check_H1(P, range(10)) == pytest.approx(THETA1_WALK, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.sets(st.integers(0, 29)), st.sets(st.integers(0, 29)))
def test_H1_shrinks_as_E_K_grows(a, b):
    P = walk_kernel(30, sticky=True)
    assert check_H1(P, a | b) <= check_H1(P, a) + 1e-15


def test_lyapunov_certificate_on_lazy_chain(lazy_kernel):
    K = lazy_kernel.with_entries(np.full((N_LAZY, N_LAZY), 1.0 / N_LAZY))
    cert = prop9_certificate(lazy_kernel, range(N_LAZY), K)
    assert cert.kind is CertificateKind.LYAPUNOV
    assert cert.valid
    assert cert.parameters['theta1'] == 0.0
    assert cert.r_ess_upper == pytest.approx(0.29)
    assert cert.margin == pytest.approx(0.51)
    json.dumps(cert.to_dict())


def test_lyapunov_certificate_on_sticky_walk():
    E_K = range(10)
    P = walk_kernel(400, sticky=True)
    cert = prop9_certificate(P, E_K, _masked_rows(P, E_K))
    assert cert.valid
    assert cert.parameters['theta2'] == 0.0
    assert cert.r_ess_upper == pytest.approx(THETA1_WALK, rel=1e-12)
    assert cert.r_lower >= 0.95
    rebuilt = cert.witness['S'].entries + cert.witness['K_masked'].entries
    assert np.all(rebuilt >= P.entries - 1e-15)


def test_lyapunov_certificate_on_plain_walk_is_vacuous():
    E_K = range(10)
    P = walk_kernel(200)
    cert = prop9_certificate(P, E_K, _masked_rows(P, E_K))
    assert not cert.valid
    assert any(v.startswith('θ1') for v in cert.violations)


def test_lyapunov_certificate_on_power(lazy_kernel):
    P2 = power(lazy_kernel, 2)
    cert = prop9_certificate(lazy_kernel, range(N_LAZY), P2, power_n=2)
    assert cert.valid
    assert cert.parameters['k'] == 2.0
    assert cert.r_ess_upper == 0.0
    assert cert.r_lower == pytest.approx(0.8)


def test_lower_bound_from_perron_vector(rng):
    M = random_positive(rng, 5)
    values, vectors = np.linalg.eig(M)
    top = int(np.argmax(values.real))
    phi = np.abs(vectors[:, top].real)
    cert = lower_bound_r(Kernel.from_matrix(M), phi)
    assert cert.valid
    assert cert.r_lower == pytest.approx(values[top].real, rel=1e-9)


def test_lower_bound_from_sticky_state():
    P = walk_kernel(50, sticky=True)
    phi = np.zeros(50)
    phi[5] = 1.0
    cert = lower_bound_r(P, phi)
    assert cert.r_lower == pytest.approx(0.95)
    assert spectral_radius(P) >= cert.r_lower


def test_lower_bound_rejects_bad_phi(two_state):
    with pytest.raises(CertificateError, match='nonnegative'):
        lower_bound_r(two_state, [1.0, -1.0])
    with pytest.raises(CertificateError, match='vanish'):
        lower_bound_r(two_state, [0.0, 0.0])
    with pytest.raises(CertificateError, match='shape'):
        lower_bound_r(two_state, [1.0])


# Localized criteria

def test_localized_g_on_lazy_chain(lazy_kernel):
    G = lazy_kernel.with_entries(np.full((N_LAZY, N_LAZY), 1.0 / N_LAZY))
    cert = cor12_certificate(lazy_kernel, range(N_LAZY), G, 1, 0.29)
    assert cert.valid
    assert cert.parameters['theta'] == pytest.approx(0.232)
    assert cert.r_ess_upper == pytest.approx(np.sqrt(0.232))

    short = cor12_certificate(lazy_kernel, range(N_LAZY), G, 1, 0.1)
    assert not short.valid
    assert 'local domination needs' in short.violations[0]


def test_localized_g_on_sticky_walk_matches_drift_times_norm():
    E_K = range(10)
    P = walk_kernel(200, sticky=True)
    inside = np.zeros(P.n, dtype=bool)
    inside[list(E_K)] = True
    G = P.with_entries(np.where(np.outer(inside, inside), P.entries, 0.0))
    cert = cor12_certificate(P, E_K, G, 1, 0.0)
    theta = THETA1_WALK * weighted_norm(P)
    assert cert.parameters['theta'] == pytest.approx(theta, rel=1e-12)
    assert cert.valid == (theta < spectral_radius(P) ** 2)


def test_localized_g_rejects_bad_k(lazy_kernel):
    with pytest.raises(CertificateError):
        cor12_certificate(lazy_kernel, range(N_LAZY), lazy_kernel, 0, 0.0)


def test_localized_moment_above_all_weights(lazy_kernel):
    K_A = lazy_kernel.with_entries(np.full((N_LAZY, N_LAZY), 1.0 / N_LAZY))
    cert = cor14_certificate(lazy_kernel, range(N_LAZY), 1.0, K_A, 0.29)
    assert cert.valid
    assert cert.parameters['tail'] == 0.0
    assert cert.parameters['theta2'] == pytest.approx(0.29)


def test_localized_moment_below_all_weights(lazy_kernel):
    cert = cor14_certificate(lazy_kernel, range(N_LAZY), 0.5, _zero_like(lazy_kernel), 0.0)
    assert not cert.valid
    assert cert.parameters['theta2'] == pytest.approx(0.8)


def test_localized_moment_tail_on_walk():
    P = walk_kernel(200)
    cert = cor14_certificate(P, range(10), float(P.V[9]), _zero_like(P), 0.0)
    assert cert.parameters['tail'] == pytest.approx(0.2 * np.sqrt(3.0), abs=1e-10)


# Density certificates

def _lazy_density(lazy_kernel):
    nu = np.full(N_LAZY, 1.0 / N_LAZY)
    return lazy_kernel.entries / nu[None, :], nu


def test_density_certificate_bounded_density(lazy_kernel):
    p, nu = _lazy_density(lazy_kernel)
    cert = density_certificate(lazy_kernel, p, nu, range(N_LAZY))
    assert cert.kind is CertificateKind.DENSITY
    assert cert.valid
    assert cert.parameters['B'] == 1.0
    assert cert.parameters['target'] == pytest.approx(0.4)
    assert cert.parameters['theta3'] == pytest.approx(0.31)
    assert cert.r_ess_upper == pytest.approx(np.sqrt(0.31 * 0.8))


def test_density_certificate_variant_ii(lazy_kernel):
    p, nu = _lazy_density(lazy_kernel)
    cert = density_certificate(lazy_kernel, p, nu, range(N_LAZY), variant='ii', A=1.0)
    assert cert.valid
    assert cert.witness['inner'] == CertificateKind.LOCALIZED_MOMENT.value
    assert cert.r_ess_upper == pytest.approx(0.31)


def test_density_certificate_unbounded_column_with_tiny_mass():
    n = 5
    nu = np.array([1e-8, 0.25, 0.25, 0.25, 0.25])
    p = np.full((n, n), 0.8)
    p[:, 0] = 1e6
    P = Kernel.from_matrix(p * nu[None, :])
    cert = density_certificate(P, p, nu, range(n))
    assert cert.valid
    assert cert.witness['tails'][0] == pytest.approx(0.01)


def test_density_certificate_errors(lazy_kernel):
    p, nu = _lazy_density(lazy_kernel)
    with pytest.raises(CertificateError, match='does not reproduce'):
        density_certificate(lazy_kernel, 2 * p, nu, range(N_LAZY))
    with pytest.raises(CertificateError, match='unattainable'):
        density_certificate(lazy_kernel, p, nu, range(N_LAZY), target=-0.1)
    with pytest.raises(CertificateError, match='needs a level A'):
        density_certificate(lazy_kernel, p, nu, range(N_LAZY), variant='ii')
    with pytest.raises(CertificateError, match='unknown density variant'):
        density_certificate(lazy_kernel, p, nu, range(N_LAZY), variant='iii')


def test_density_grid_covers_the_largest_value():
    p = np.array([[0.5, 0.2], [20.0, 0.1]])
    grid = density_b_grid(p)
    assert grid[0] == 1.0
    assert grid[-1] >= 20.0
    np.testing.assert_allclose(grid[1:] / grid[:-1], 2.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0.0, 100.0)),
       arrays(np.float64, (4,), elements=st.floats(0.0, 1.0)))
def test_density_tail_is_nonincreasing_in_B(p, nu):
    V = np.ones(4)
    rows = np.array([True, True, False, True])
    tails = [density_tail(p, nu, V, rows, rows, B) for B in density_b_grid(p)]
    assert all(b <= a + 1e-12 for a, b in zip(tails, tails[1:]))


def test_verdict_table_lists_every_certificate(lazy_model, lazy_kernel):
    certs = [
        lazy_chain_certificate(lazy_model, np.full(N_LAZY, 1.0 / N_LAZY)),
        check_domination(lazy_kernel, _zero_like(lazy_kernel), lazy_kernel),
    ]
    table = verdict_table(certs)
    assert table.count('Domination') == 2
    assert '✅' in table
    assert 'vacuous' in table


@pytest.mark.slow
def test_truncation_stability_of_lyapunov_bound():
    E_K = range(10)
    leading = []
    for N in (200, 400, 800):
        P = walk_kernel(N, sticky=True)
        assert check_H1(P, E_K) == pytest.approx(THETA1_WALK, rel=0, abs=1e-10)
        cert = prop9_certificate(P, E_K, _masked_rows(P, E_K))
        assert cert.valid
        assert cert.r_ess_upper <= THETA1_WALK + 0.01
        values = spectrum(P)
        above = np.sort(np.abs(values[np.abs(values) > cert.r_ess_upper + 0.01]))[::-1]
        leading.append(above)
    assert len(leading[0]) >= 1
    assert len({len(above) for above in leading}) == 1
    for above in leading[1:]:
        np.testing.assert_allclose(above, leading[0], rtol=0, atol=1e-6)
