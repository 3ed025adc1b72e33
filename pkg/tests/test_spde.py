import numpy as np
import pytest
import scipy.sparse as sp

from gmrf_fusion.geometry import Domain, build_mesh
from gmrf_fusion.linalg import SparseCholesky
from gmrf_fusion.spde import MaternParams, fem_matrices, matern_corr, matern_cov, spde_precision, write_coo

# sqrt(8) K_1(sqrt(8)) evaluated with 30-digit arithmetic (mpmath.besselk)
MATERN_NU1_AT_RANGE = 0.139667474015293142857519612486


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(Domain.rectangle(0, 0, 2, 2), 0.2, 0.5)


def test_cov_at_zero():
    assert matern_cov(0.0, MaternParams(2.0, 3.0)) == pytest.approx(9.0)


def test_exponential_case():
    p = MaternParams(1.7, 2.0, nu=0.5)
    assert matern_cov(1.7, p) == pytest.approx(4.0 * np.exp(-2.0), rel=1e-12)


def test_nu1_at_range():
    assert matern_cov(3.0, MaternParams(3.0, 1.0)) == pytest.approx(MATERN_NU1_AT_RANGE, rel=1e-12)


def test_corr_monotone_and_far_tail():
    d = np.linspace(0, 10, 200)
    r = matern_corr(d, 1.0)
    assert np.all(np.diff(r) <= 0)
    assert matern_corr(1e4, 1.0) == 0.0


def test_negative_distance():
    with pytest.raises(ValueError):
        matern_corr(-1.0, 1.0)


def test_precision_symmetric_pd(mesh):
    Q = spde_precision(mesh, MaternParams(0.7, 1.3))
    assert abs(Q - Q.T).max() == 0.0
    SparseCholesky(Q)


def test_sigma_scaling(mesh):
    Q1 = spde_precision(mesh, MaternParams(0.7, 1.0))
    Q2 = spde_precision(mesh, MaternParams(0.7, 2.0))
    np.testing.assert_allclose((Q2 - Q1 / 4).data, 0.0, atol=1e-12 * abs(Q1).max())


def test_fem_mass_and_stiffness(mesh):
    c, G = fem_matrices(mesh)
    assert c.sum() == pytest.approx(mesh.areas.sum(), abs=1e-10)
    third = np.zeros(mesh.n_vertices)
    np.add.at(third, mesh.triangles.ravel(), np.repeat(mesh.areas / 3, 3))
    np.testing.assert_allclose(c, third, rtol=1e-12)
    assert abs(G - G.T).max() < 1e-10
    np.testing.assert_allclose(np.asarray(G.sum(axis=1)).ravel(), 0.0, atol=1e-10)


def test_unsupported_nu(mesh):
    with pytest.raises(NotImplementedError):
        spde_precision(mesh, MaternParams(1.0, 1.0, nu=1.5))


def test_write_coo(tmp_path):
    Q = sp.csc_matrix(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    p = tmp_path / "q.txt"
    write_coo(Q, p)
    lines = p.read_text().splitlines()
    assert lines[:2] == ["# shape 2 2", "row,col,value"]
    assert lines[2:] == ["0,0,2.0", "0,1,-1.0", "1,0,-1.0", "1,1,2.0"]


@pytest.fixture(scope="module")
def fine():
    # rho = 1 on a 6 x 6 square, edge rho/10, extension 2 rho
    m = build_mesh(Domain.rectangle(0, 0, 6, 6), 0.1, 2.0)
    return m, SparseCholesky(spde_precision(m, MaternParams(1.0, 1.0)))


@pytest.mark.slow
def test_interior_correlation_matches_matern(fine):
    m, F = fine
    v = m.vertices
    centre = np.linalg.norm(v - 3.0, axis=1)
    near = np.flatnonzero(centre < 2.0)
    var = F.inv_diag_of(sp.identity(m.n_vertices, format="csr")[near])
    var_of = dict(zip(near, var))
    worst = 0.0
    for i in np.flatnonzero(centre < 0.5)[:10]:
        e = np.zeros(m.n_vertices)
        e[i] = 1.0
        col = F.solve(e)
        d = np.linalg.norm(v[near] - v[i], axis=1)
        sel = (d >= 0.25) & (d <= 1.0)
        j = near[sel]
        corr = col[j] / np.sqrt(var_of[i] * np.array([var_of[k] for k in j]))
        ref = matern_corr(d[sel], 1.0)
        worst = max(worst, np.max(np.abs(corr - ref) / ref))
    assert worst < 0.05


@pytest.mark.slow
def test_sample_variance_interior(fine):
    m, F = fine
    i = int(np.argmin(np.linalg.norm(m.vertices - 3.0, axis=1)))
    x = F.sample(np.random.default_rng(0), 10_000)
    assert np.var(x[i]) == pytest.approx(1.0, rel=0.10)
