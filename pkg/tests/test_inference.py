import numpy as np
import pytest
import scipy.sparse as sp
from scipy.integrate import quad
from scipy.stats import norm

from gmrf_fusion.geometry import Domain, build_mesh, project
from gmrf_fusion.inference import (
    FitError,
    LogMLEvaluator,
    PosteriorEnsemble,
    bma_fit,
    bma_predict,
    bma_weights,
    calibrate_grid,
    condition,
    fit_map,
    fit_model,
    log_marginal_likelihood,
    mixture_moments,
    restore_ensemble,
)
from gmrf_fusion.linalg import NotPositiveDefiniteError, SparseCholesky
from gmrf_fusion.models import AffineForm, GaussianSystem, ObservationSet, StationsOnlyModel, Targets, make_model
from gmrf_fusion.priors import HyperPriorSet
from gmrf_fusion.spde import MaternParams, spde_precision

from oracles import dense_posterior, generative, random_theta, tiny_instance

# reference table for a temperature model: log p(Y | alpha1) for alpha1 = 0.5, ..., 1.5
TEMPERATURE_LOG_ML = [-978.295, -914.791, -849.673, -778.493, -697.501, -688.142, -811.927, -899.762, -949.719, -2265.074, -2329.848]


def scalar_system(Q=1.0, d=1.0, y=(2.0,), rows=1):
    A = sp.csr_matrix(np.ones((rows, 1)))
    return GaussianSystem(
        sp.csc_matrix([[Q]]), A, np.full(rows, d), np.array(y, float), {"u": slice(0, 1)}
    )


def test_scalar_conjugate_update():
    post = condition(scalar_system())
    assert post.mean[0] == pytest.approx(1.0)
    assert post.marginal_variances()[0] == pytest.approx(0.5)
    assert post.log_ml == pytest.approx(-0.5 * np.log(4 * np.pi) - 1.0, rel=1e-14)


def test_no_observations_recovers_prior():
    Q = sp.csc_matrix(np.array([[2.0, -0.5], [-0.5, 1.0]]))
    s = GaussianSystem(Q, sp.csr_matrix((0, 2)), np.zeros(0), np.zeros(0), {"u": slice(0, 2)})
    post = condition(s)
    np.testing.assert_array_equal(post.mean, 0.0)
    assert abs(post.Q_post - Q).max() == 0.0
    assert post.log_ml == pytest.approx(0.0, abs=1e-14)


def test_duplicate_row_changes_log_ml():
    one = log_marginal_likelihood(scalar_system())
    two = log_marginal_likelihood(scalar_system(y=(2.0, 2.0), rows=2))
    assert one != two


def test_indefinite_reports_pivot():
    Q = sp.csc_matrix(np.diag([1.0, -1.0, 2.0]))
    s = GaussianSystem(Q, sp.csr_matrix((0, 3)), np.zeros(0), np.zeros(0), {"u": slice(0, 3)})
    with pytest.raises(NotPositiveDefiniteError) as err:
        condition(s)
    assert err.value.index == 1


@pytest.mark.parametrize("seed", range(6))
def test_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    fam = ("fusion", "stations_only", "regcalib")[seed % 3]
    data, mesh = tiny_instance(rng)
    th = random_theta(fam, rng, data.T)
    a = 1.2 if fam == "fusion" else None
    m = make_model(fam, data, mesh)
    post = condition(m.system(th, a))
    mu, var, lml, _ = dense_posterior(*generative(fam, data, mesh, th, a))
    assert np.max(np.abs(post.mean - mu)) <= 1e-8 * np.max(np.abs(mu))
    np.testing.assert_allclose(post.marginal_variances(), var, rtol=1e-8)
    assert post.log_ml == pytest.approx(lml, rel=1e-8)
    # precision identities
    s = post.system
    b = s.A.T @ (s.noise_prec * s.y)
    assert abs(post.Q_post - (s.Q_prior + s.A.T @ sp.diags(s.noise_prec) @ s.A)).max() < 1e-9 * abs(post.Q_post).max()
    assert np.linalg.norm(post.Q_post @ post.mean - b) <= 1e-8 * np.linalg.norm(b)


@pytest.mark.parametrize("fam", ["fusion", "stations_only", "regcalib"])
def test_evaluator_methods_agree(fam):
    rng = np.random.default_rng(7)
    data, mesh = tiny_instance(rng, T=2)
    m = make_model(fam, data, mesh)
    a = 0.9 if fam == "fusion" else None
    form = m.affine(a)
    ref = condition(m.system(random_theta(fam, rng, 2), a))
    th = ref.system.theta
    for method in ("banded", "sparse", "auto"):
        assert LogMLEvaluator(form, method)(th) == pytest.approx(ref.log_ml, rel=1e-10)
    with pytest.raises(ValueError):
        LogMLEvaluator(form, "dense")


def test_banded_matches_sparse_factor():
    from gmrf_fusion.linalg import BorderedBandPattern

    rng = np.random.default_rng(2)
    mesh = build_mesh(Domain.rectangle(0, 0, 1, 1), 0.3, 0.2)
    Qs = spde_precision(mesh, MaternParams(0.6, 1.0))
    n = Qs.shape[0]
    B = sp.csr_matrix(rng.normal(size=(2, n)) * (rng.random((2, n)) < 0.2))
    Q = sp.bmat([[sp.identity(2) * 50.0, B], [B.T, Qs + sp.identity(n)]], format="csc")
    Q.sort_indices()
    f = BorderedBandPattern(Q, 2).factor(Q.data)
    ref = SparseCholesky(Q)
    assert f.logdet() == pytest.approx(ref.logdet(), rel=1e-12)
    b = rng.normal(size=n + 2)
    np.testing.assert_allclose(f.solve(b), ref.solve(b), rtol=1e-9)


def test_bma_weight_properties():
    lm = np.array([-3.0, -1.0, -2.5, -1.0 + np.log(2)])
    w = bma_weights(lm)
    assert np.all(w > 0) and w.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(bma_weights(lm + 1e4), w, rtol=1e-12)
    assert np.argmax(w) == np.argmax(lm)
    np.testing.assert_allclose(bma_weights([-5.0, -5.0]), [0.5, 0.5])


def test_temperature_table_weights():
    w = bma_weights(TEMPERATURE_LOG_ML, np.full(11, -np.log(11)))
    assert w[5] >= 0.9999
    assert np.all(np.delete(w, 5) <= 1e-4)
    # the table prints 0.0001 at alpha1 = 0.9
    assert round(w[4], 4) == 0.0001


def test_mixture_moments():
    m, v = mixture_moments([0.5, 0.5], [[1.0], [-1.0]], [[0.0], [0.0]])
    assert m[0] == 0.0 and v[0] == 1.0
    m, v = mixture_moments([1.0], [[0.3, 2.0]], [[0.5, 0.1]])
    np.testing.assert_allclose(m, [0.3, 2.0], rtol=1e-14)
    np.testing.assert_allclose(v, [0.5, 0.1], rtol=1e-13)


def test_mixture_expectation_identity():
    """Mean of the mixed density equals the mixed member means."""
    w, mu, sd = np.array([0.2, 0.5, 0.3]), np.array([-1.0, 0.4, 2.5]), np.array([0.3, 1.1, 0.7])
    dens = lambda x: np.sum(w * norm.pdf(x, mu, sd))
    e1 = quad(lambda x: x * dens(x), -30, 30, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    e2 = quad(lambda x: x * x * dens(x), -30, 30, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    m, v = mixture_moments(w, mu[:, None], sd[:, None] ** 2)
    assert m[0] == pytest.approx(e1, abs=1e-10)
    assert v[0] == pytest.approx(e2 - e1**2, abs=1e-10)


class _NoDataModel(StationsOnlyModel):
    """Stations-only model whose likelihood has no rows."""

    def _build_form(self, alpha1=None):
        f = super()._build_form(alpha1)
        return AffineForm(self, None, f.A[:0], f.y[:0], [], f.row_source[:0], f.row_index[:0])


def test_fit_without_data_returns_prior_mode():
    rng = np.random.default_rng(0)
    data, mesh = tiny_instance(rng, T=1)
    pri = HyperPriorSet.simple(sigma_e1=0.7, sigma1=2.0, range1=0.8)
    m = _NoDataModel(data, mesh, pri)
    fit = fit_model(m, theta_init=dict(sigma_e1=1.0, sigma1=1.0, range1=1.0), ftol=1e-10)
    for k in m.param_names:
        assert fit.theta[k] == pytest.approx(pri[k].mode_in_log_coords(), rel=2e-3)


@pytest.fixture(scope="module")
def fused():
    """Small fusion data set generated from the model itself."""
    rng = np.random.default_rng(11)
    mesh = build_mesh(Domain.rectangle(0, 0, 2, 2), 0.4, 0.4)
    Q = spde_precision(mesh, MaternParams(1.0, 1.0))
    F = SparseCholesky(Q)
    xi = F.sample(rng)
    a0 = SparseCholesky(spde_precision(mesh, MaternParams(1.0, 0.5))).sample(rng)
    sxy = rng.uniform(0.1, 1.9, size=(15, 2))
    g = np.linspace(0.1, 1.9, 6)
    gxy = np.array([[x, y] for x in g for y in g])
    x_s = 2.0 + project(mesh, sxy) @ xi
    x_g = 2.0 + project(mesh, gxy) @ xi
    data = ObservationSet(
        station_id=np.arange(15),
        station_xy=sxy,
        station_t=np.ones(15, int),
        station_value=x_s + rng.normal(0, 0.3, 15),
        grid_id=np.arange(len(gxy)),
        grid_xy=gxy,
        grid_t=np.ones(len(gxy), int),
        grid_value=project(mesh, gxy) @ a0 + 1.2 * x_g + rng.normal(0, 0.1, len(gxy)),
    )
    pri = HyperPriorSet.simple(sigma_e1=0.3, sigma1=1.0, range1=1.0, sigma_e2=0.1, sigma2=0.5, range2=1.0)
    ens = bma_fit(data, mesh, pri, alpha1_grid=(1.0, 1.2, 1.4), max_iter=150, restarts=1)
    return data, mesh, pri, ens


def test_bma_fit_members(fused):
    _, _, _, ens = fused
    assert isinstance(ens, PosteriorEnsemble)
    np.testing.assert_array_equal(ens.alpha1_grid, [1.0, 1.2, 1.4])
    assert ens.weights.sum() == pytest.approx(1.0, abs=1e-12)
    lm = np.array([m.log_ml for m in ens.members])
    np.testing.assert_allclose(ens.weights, bma_weights(lm), rtol=1e-12)
    for m in ens.members:
        assert m.log_ml == pytest.approx(m.fit.posterior.log_ml)
        assert m.fit.log_posterior >= -m.fit.trace[0] - 1e-9


def test_bma_predict_single_member_and_mixture(fused):
    data, _, _, ens = fused
    tg = Targets(data.station_xy, 1)
    mean, sd = bma_predict(ens, tg)
    R = ens.model.predictor(tg)
    ms, vs = zip(*[m.fit.posterior.linear(R) for m in ens.members])
    m_ref, v_ref = mixture_moments(ens.weights, ms, vs)
    np.testing.assert_allclose(mean, m_ref, rtol=1e-12)
    np.testing.assert_allclose(sd, np.sqrt(v_ref), rtol=1e-12)
    one = PosteriorEnsemble(ens.family, [ens.members[0]], ens.model)
    one.members[0] = type(ens.members[0])(1.0, ens.members[0].fit, 0.0, 0.0, 1.0)
    m1, s1 = bma_predict(one, tg)
    np.testing.assert_allclose(m1, ms[0], rtol=1e-12)
    np.testing.assert_allclose(s1, np.sqrt(vs[0]), rtol=1e-12)


def test_calibrate_grid(fused):
    data, _, _, ens = fused
    tg = Targets(data.grid_xy, 1)
    out = calibrate_grid(ens, tg, data.grid_value)
    R = ens.model.error_field_predictor(tg)
    a0 = sum(m.weight * m.fit.posterior.linear(R)[0] for m in ens.members)
    np.testing.assert_allclose(out, (data.grid_value - a0) / ens.alpha1_hat, rtol=1e-12)


def test_calibrate_arithmetic(fused):
    """alpha0 = 0 and alpha1 = 1.1 turn 2.2 into 2.0."""
    data, _, _, ens = fused
    tg = Targets(data.grid_xy[:1], 1)

    class Flat:
        family = "fusion"
        alpha1_hat = 1.1
        model = ens.model

        def linear(self, fn):
            return np.zeros(1), np.zeros(1)

    assert calibrate_grid(Flat(), tg, [2.2])[0] == pytest.approx(2.0)
    Flat.alpha1_hat = 1e-8
    with pytest.raises(ValueError):
        calibrate_grid(Flat(), tg, [2.2])


def test_restore_ensemble_roundtrip(fused):
    data, mesh, pri, ens = fused
    back = restore_ensemble(ens.to_dict(), make_model("fusion", data, mesh, pri))
    tg = Targets(data.grid_xy, 1)
    m1, s1 = bma_predict(ens, tg)
    m2, s2 = bma_predict(back, tg)
    np.testing.assert_allclose(m2, m1, rtol=1e-12)
    np.testing.assert_allclose(s2, s1, rtol=1e-12)
    with pytest.raises(ValueError):
        restore_ensemble(ens.to_dict(), make_model("stations_only", data, mesh, pri))


def test_theta_grid_components(fused):
    data, mesh, pri, _ = fused
    ens = bma_fit(data, mesh, pri, alpha1_grid=(1.0, 1.2), max_iter=100, restarts=0, theta_grid=True)
    comps = ens.components()
    n_par = len(ens.model.param_names)
    assert len(comps) > 2
    assert all(len(m.components) <= 2 * n_par + 1 for m in ens.members)
    w = np.array([c[0] for c in comps])
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    for m in ens.members:
        assert m.weight == pytest.approx(sum(c[0] for c in m.components))
        # the mode carries the largest weight within its member
        assert m.components[0][0] == max(c[0] for c in m.components)
    back = restore_ensemble(ens.to_dict(), ens.model)
    tg = Targets(data.grid_xy[:5], 1)
    np.testing.assert_allclose(bma_predict(back, tg)[0], bma_predict(ens, tg)[0], rtol=1e-10)


def test_fit_monotone_and_deterministic(fused):
    data, mesh, pri, _ = fused
    a = fit_map("stations_only", data, mesh, pri, max_iter=80, restarts=1, seed=3)
    b = fit_map("stations_only", data, mesh, pri, max_iter=80, restarts=1, seed=3)
    assert a.theta == b.theta
    assert a.log_posterior >= -a.trace[0]
    assert set(a.diagnostics()) == {"converged", "n_iter", "n_eval", "log_posterior"}


def test_fit_bad_start(fused):
    data, mesh, pri, _ = fused
    with pytest.raises(ValueError):
        fit_map("stations_only", data, mesh, pri, theta_init=dict(sigma_e1=-1.0, sigma1=1.0, range1=1.0))
    assert issubclass(FitError, RuntimeError)


@pytest.mark.slow
def test_map_recovers_field_parameters():
    """Stations-only fit on generous data: sigma1, range1 within 30% on average."""
    mesh = build_mesh(Domain.rectangle(0, 0, 4, 4), 0.3, 0.8)
    truth = dict(sigma_e1=0.3, sigma1=1.0, range1=1.2)
    F = SparseCholesky(spde_precision(mesh, MaternParams(truth["range1"], truth["sigma1"])))
    pri = HyperPriorSet.simple(sigma_e1=0.3, sigma1=1.0, range1=1.2)
    errs = []
    for seed in range(4):
        rng = np.random.default_rng(100 + seed)
        xy = rng.uniform(0, 4, size=(200, 2))
        y = 1.0 + project(mesh, xy) @ F.sample(rng) + rng.normal(0, truth["sigma_e1"], 200)
        data = ObservationSet(station_id=np.arange(200), station_xy=xy, station_t=np.ones(200, int), station_value=y)
        th = fit_map("stations_only", data, mesh, pri, seed=seed).theta
        errs.append([abs(th[k] / truth[k] - 1) for k in ("sigma1", "range1")])
    assert np.all(np.mean(errs, axis=0) < 0.30)
