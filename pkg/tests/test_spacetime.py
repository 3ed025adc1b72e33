import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gmrf_fusion.geometry import Domain, build_mesh
from gmrf_fusion.linalg import SparseCholesky
from gmrf_fusion.spacetime import ar1_logdet, ar1_precision, ar1_terms, st_precision
from gmrf_fusion.spde import MaternParams, spde_precision


@pytest.fixture(scope="module")
def Qs():
    m = build_mesh(Domain.rectangle(0, 0, 1, 1), 1.0)
    assert m.n_vertices <= 10
    return spde_precision(m, MaternParams(0.8, 1.5))


def dense_cov(Qs, phi, T):
    S = np.linalg.inv(Qs.toarray())
    lag = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    return np.kron(phi**lag / (1 - phi**2), S)


def test_phi_zero_block_diagonal(Qs):
    Q = st_precision(Qs, 0.0, 3)
    ref = sp.block_diag([Qs] * 3)
    assert abs(Q - ref).max() == 0.0


def test_single_time(Qs):
    assert abs(st_precision(Qs, 0.5, 1) - 0.75 * Qs).max() < 1e-15


@pytest.mark.parametrize("T", [1, 2, 3])
@pytest.mark.parametrize("phi", [-0.7, 0.0, 0.5, 0.95])
def test_inverse_matches_dense_covariance(Qs, T, phi):
    C = np.linalg.inv(st_precision(Qs, phi, T).toarray())
    ref = dense_cov(Qs, phi, T)
    assert np.max(np.abs(C - ref)) <= 1e-8 * np.max(np.abs(ref))


def test_stationary_marginal_variance(Qs):
    phi, T = 0.6, 3
    C = np.linalg.inv(st_precision(Qs, phi, T).toarray())
    n = Qs.shape[0]
    S = np.linalg.inv(Qs.toarray())
    for t in range(T):
        blk = C[t * n : (t + 1) * n, t * n : (t + 1) * n]
        np.testing.assert_allclose(np.diag(blk), np.diag(S) / (1 - phi**2), rtol=1e-9)


@pytest.mark.parametrize("phi", [-0.99, -0.5, 0.3, 0.99])
def test_symmetric_and_factorizable(Qs, phi):
    Q = st_precision(Qs, phi, 4)
    assert abs(Q - Q.T).max() == 0.0
    SparseCholesky(Q)


def test_time_reversal(Qs):
    T, n = 4, Qs.shape[0]
    Q = st_precision(Qs, 0.4, T).toarray()
    perm = np.concatenate([np.arange(n) + (T - 1 - t) * n for t in range(T)])
    np.testing.assert_array_equal(Q[np.ix_(perm, perm)], Q)


@pytest.mark.parametrize("phi", [1.0, -1.0, 1.5])
def test_phi_out_of_range(Qs, phi):
    with pytest.raises(ValueError):
        st_precision(Qs, phi, 2)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.98, 0.98), st.integers(1, 6))
def test_ar1_terms_and_logdet(phi, T):
    M0, M1, M2 = ar1_terms(T)
    M = ar1_precision(phi, T).toarray()
    np.testing.assert_allclose((M0 + phi * M1 + phi**2 * M2).toarray(), M, atol=1e-14)
    assert ar1_logdet(phi, T) == pytest.approx(np.linalg.slogdet(M)[1], abs=1e-10)
