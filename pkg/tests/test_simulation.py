import dataclasses

import numpy as np
import pytest
from scipy.spatial import cKDTree

from gmrf_fusion.geometry import Domain, build_mesh
from gmrf_fusion.linalg import SparseCholesky
from gmrf_fusion.simulation import (
    PRIOR_SCENARIOS,
    SCENARIOS,
    SimConfig,
    fit_mesh,
    generate_layouts,
    run_study,
    simulate_replicate,
    station_layouts,
    study_priors,
    write_layouts,
)
from gmrf_fusion.spde import MaternParams, spde_precision


@pytest.fixture(scope="module")
def cfg():
    return SimConfig()


def test_defaults_follow_generating_values(cfg):
    assert (cfg.xi_range, cfg.xi_sigma, cfg.beta, cfg.var_e1, cfg.var_e2, cfg.alpha1) == (
        2.0,
        3.16,
        (10.0, 3.0),
        0.25,
        0.01,
        1.1,
    )
    assert (cfg.z_range, cfg.z_sigma, cfg.a0_range, cfg.a0_sigma) == (3.0, 1.0, 1.0, 1.0)
    np.testing.assert_allclose(cfg.alpha1_grid, np.arange(5, 16) / 10)


def test_same_seed_identical(cfg):
    a = simulate_replicate(cfg, 5)
    b = simulate_replicate(cfg, 5)
    for f in ("x", "z", "alpha0", "grid_xy", "station_x"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    np.testing.assert_array_equal(a.data.station_value, b.data.station_value)
    np.testing.assert_array_equal(a.data.grid_value, b.data.grid_value)
    c = simulate_replicate(cfg, 6)
    assert not np.array_equal(a.x, c.x)


def test_replicate_shapes(cfg):
    r = simulate_replicate(cfg, 1)
    assert len(r.x) == 900
    assert len(r.data.station_value) == 10
    assert len(r.data.grid_value) == 100
    assert r.data.T == 1
    np.testing.assert_array_equal(r.data.grid_xy, r.grid_xy[r.forecast_index])


@pytest.mark.slow
def test_latent_field_sd(cfg):
    mesh = build_mesh(Domain.rectangle(*cfg.domain), cfg.sim_max_edge, cfg.mesh_extension)
    F = SparseCholesky(spde_precision(mesh, MaternParams(cfg.xi_range, cfg.xi_sigma)))
    x = F.sample(np.random.default_rng(0), 1000)
    i = int(np.argmin(np.linalg.norm(mesh.vertices - [1.6, 1.2], axis=1)))
    assert np.std(x[i]) == pytest.approx(cfg.xi_sigma, rel=0.10)


def test_forecast_ratio_without_error_field(cfg):
    c = dataclasses.replace(cfg, a0_sigma=1e-9, var_e2=1e-12)
    ratios = []
    for s in range(20):
        r = simulate_replicate(c, s)
        ratios.append(np.mean(r.data.grid_value / r.x[r.forecast_index]))
    assert np.mean(ratios) == pytest.approx(1.1, abs=1e-3)


def test_layouts_fixed_and_inside(cfg):
    dom = Domain.rectangle(*cfg.domain)
    for s in SCENARIOS:
        a, b = station_layouts(s), station_layouts(s)
        np.testing.assert_array_equal(a, b)
        assert len(a) == int(s[1:])
        assert np.all(dom.contains(a))
    x0, y0, x1, y1 = cfg.domain
    n10 = station_layouts("n10")
    assert np.all((n10[:, 0] > x0) & (n10[:, 0] < x1) & (n10[:, 1] > y0) & (n10[:, 1] < y1))
    with pytest.raises(ValueError):
        station_layouts("n99")


def test_n40_more_uniform_than_n10():
    def cv(p):
        d = cKDTree(p).query(p, 2)[0][:, 1]
        return d.std() / d.mean()

    assert cv(station_layouts("n40")) < cv(station_layouts("n10"))


def test_shipped_layouts_match_generator(tmp_path):
    paths = write_layouts(tmp_path)
    gen = generate_layouts()
    for p in paths:
        s = p.stem
        np.testing.assert_array_equal(gen[s], station_layouts(s))


def test_prior_scenarios(cfg):
    m = study_priors(cfg, "matching")
    n = study_priors(cfg, "nonmatching")
    assert m.sigma1.threshold == pytest.approx(3.16) and m.range1.threshold == 2.0
    assert m.sigma_e1.threshold == pytest.approx(0.5) and m.sigma_e2.threshold == pytest.approx(0.1)
    got = {k: n[k].threshold for k in ("sigma_e1", "sigma_e2", "sigma1", "range1", "sigma2", "range2")}
    assert got == dict(sigma_e1=1.5, sigma_e2=0.5, sigma1=1.0, range1=0.5, sigma2=0.5, range2=0.5)
    for h in (m, n):
        assert {h[k].prob for k in got} == {0.5}
    # everything else is shared
    diff = [f.name for f in dataclasses.fields(m) if getattr(m, f.name) != getattr(n, f.name)]
    assert set(diff) <= set(got) | {"sigma_a0", "range_a0", "range_a1"}
    assert set(PRIOR_SCENARIOS) == {"matching", "nonmatching"}


def test_fit_mesh_desk_scale(cfg):
    assert 250 <= fit_mesh(cfg).n_vertices <= 400


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(var_e1=0.0)
    with pytest.raises(ValueError):
        SimConfig(scenario="n5")
    with pytest.raises(KeyError):
        SimConfig.from_dict({"bogus": 1})
    assert SimConfig.from_dict(SimConfig().to_dict()) == SimConfig()


def test_run_study_one_replicate(cfg):
    reps = list(run_study(cfg, ["stations_only"], replicates=1))
    assert len(reps) == 1
    names = [r.score_name for r in reps[0]]
    assert len(names) == len(set(names))
    assert {"avg_squared_error", "avg_posterior_sd", "avg_ds_score", "failed"} <= set(names)
    assert reps[0].as_dict()["failed"] == 0.0
    assert {r.replicate for r in reps[0]} == {cfg.base_seed}


def test_run_study_records_failures(cfg, monkeypatch):
    import gmrf_fusion.simulation as sim

    def boom(*a, **k):
        raise RuntimeError("no convergence")

    monkeypatch.setattr(sim, "bma_fit", boom)
    rep = list(run_study(cfg, ["stations_only", "regcalib"], replicates=2))
    failed = [r for x in rep for r in x if r.score_name == "failed"]
    assert len(failed) == 4 and all(r.value == 1.0 for r in failed)
    with pytest.raises(ValueError):
        list(run_study(cfg, ["nope"], replicates=1))
