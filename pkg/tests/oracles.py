"""Dense reference implementations used as test oracles.

Everything here is built from the generative definitions with dense
covariance matrices, independently of the sparse assembly code paths.
"""

import numpy as np
from scipy.linalg import block_diag
from scipy.stats import multivariate_normal

from gmrf_fusion.geometry import Domain, build_mesh, project
from gmrf_fusion.models import ObservationSet
from gmrf_fusion.spde import MaternParams, spde_precision

BETA_VAR = 1e6  # inverse of the default fixed-effect precision


def field_cov(mesh, sigma, rho, phi, T):
    """Dense covariance of a stationary AR(1) x SPDE field, time-major."""
    S = np.linalg.inv(spde_precision(mesh, MaternParams(rho, sigma)).toarray())
    lag = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    return np.kron(phi**lag / (1.0 - phi**2), S)


def time_projection(mesh, xy, t, T):
    P = project(mesh, xy).toarray()
    n = mesh.n_vertices
    out = np.zeros((len(xy), n * T))
    for i in range(len(xy)):
        out[i, (t[i] - 1) * n : t[i] * n] = P[i]
    return out


def nearest_value(src_xy, src_t, src_v, xy, t):
    """Brute-force nearest centroid at the same time."""
    out = np.empty(len(xy))
    for i in range(len(xy)):
        cand = np.flatnonzero(src_t == t[i])
        d = np.sum((src_xy[cand] - xy[i]) ** 2, axis=1)
        out[i] = src_v[cand[np.argmin(d)]]
    return out


def generative(family, data, mesh, theta, alpha1=None):
    """Loadings ``L``, latent covariance ``C_u`` and noise variances.

    Observed rows (non-missing, stations first) satisfy
    ``y = L u + e`` with ``u ~ N(0, C_u)`` and ``e ~ N(0, diag(noise))``.
    """
    T = data.T
    d = data
    phi = lambda k: theta.get(k, 0.0)
    s = np.flatnonzero(np.isfinite(d.station_value))
    Z1 = np.column_stack([np.ones(len(s)), d.station_z[s]])
    A1 = time_projection(mesh, d.station_xy[s], d.station_t[s], T)
    nT = mesh.n_vertices * T
    if family == "stations_only":
        L = np.hstack([Z1, A1])
        Cu = block_diag(BETA_VAR * np.eye(Z1.shape[1]), field_cov(mesh, theta["sigma1"], theta["range1"], phi("phi1"), T))
        return L, Cu, np.full(len(s), theta["sigma_e1"] ** 2), d.station_value[s]
    if family == "fusion":
        g = np.flatnonzero(np.isfinite(d.grid_value))
        Z2 = np.column_stack([np.ones(len(g)), d.grid_z[g]])
        A2 = time_projection(mesh, d.grid_xy[g], d.grid_t[g], T)
        L = np.vstack(
            [
                np.hstack([Z1, A1, np.zeros((len(s), nT))]),
                np.hstack([alpha1 * Z2, alpha1 * A2, A2]),
            ]
        )
        Cu = block_diag(
            BETA_VAR * np.eye(Z1.shape[1]),
            field_cov(mesh, theta["sigma1"], theta["range1"], phi("phi1"), T),
            field_cov(mesh, theta["sigma2"], theta["range2"], phi("phi2"), T),
        )
        noise = np.r_[np.full(len(s), theta["sigma_e1"] ** 2), np.full(len(g), theta["sigma_e2"] ** 2)]
        return L, Cu, noise, np.r_[d.station_value[s], d.grid_value[g]]
    if family == "regcalib":
        w2 = nearest_value(d.grid_xy, d.grid_t, d.grid_value, d.station_xy[s], d.station_t[s])
        L = np.hstack([np.ones((len(s), 1)), w2[:, None], A1, w2[:, None] * A1])
        Cu = block_diag(
            BETA_VAR * np.eye(2),
            field_cov(mesh, theta["sigma_a0"], theta["range_a0"], phi("phi_a0"), T),
            field_cov(mesh, theta["sigma_a1"], theta["range_a1"], phi("phi_a1"), T),
        )
        return L, Cu, np.full(len(s), theta["sigma_e1"] ** 2), d.station_value[s]
    raise ValueError(family)


def dense_posterior(L, Cu, noise, y):
    """Posterior mean, marginal variances and log marginal likelihood.

    Moments use the dense precision form (the covariance form cancels
    badly against the vague fixed-effect prior); the log marginal
    likelihood is the Gaussian density of ``y`` under its covariance.
    """
    C = L @ Cu @ L.T + np.diag(noise)
    Qpost = np.linalg.inv(Cu) + L.T @ (L / noise[:, None])
    Qpost = 0.5 * (Qpost + Qpost.T)
    V = np.linalg.inv(Qpost)
    mean = V @ (L.T @ (y / noise))
    var = np.diag(V)
    log_ml = multivariate_normal(np.zeros(len(y)), C).logpdf(y)
    return mean, var, float(log_ml), C


def random_theta(family, rng, T):
    th = {"sigma_e1": rng.uniform(0.3, 1.0)}
    if family in ("fusion", "stations_only"):
        th.update(sigma1=rng.uniform(0.5, 2.0), range1=rng.uniform(0.4, 1.5))
        if T > 1:
            th["phi1"] = rng.uniform(-0.8, 0.8)
    if family == "fusion":
        th.update(sigma_e2=rng.uniform(0.1, 0.6), sigma2=rng.uniform(0.3, 1.5), range2=rng.uniform(0.4, 1.5))
        if T > 1:
            th["phi2"] = rng.uniform(-0.8, 0.8)
    if family == "regcalib":
        th.update(
            sigma_a0=rng.uniform(0.3, 1.5),
            range_a0=rng.uniform(0.4, 1.5),
            sigma_a1=rng.uniform(0.05, 0.5),
            range_a1=rng.uniform(0.4, 1.5),
        )
        if T > 1:
            th.update(phi_a0=rng.uniform(-0.8, 0.8), phi_a1=rng.uniform(-0.8, 0.8))
    return th


def tiny_instance(rng, T=None, n_st=None, n_gr=None, q=1, missing=True):
    """Random small data set on the unit square with a coarse mesh."""
    T = int(rng.integers(1, 4)) if T is None else T
    n_st = int(rng.integers(2, 6)) if n_st is None else n_st
    n_gr = int(rng.integers(3, 7)) if n_gr is None else n_gr
    mesh = build_mesh(Domain.rectangle(0, 0, 1, 1), float(rng.choice([0.6, 0.8, 1.5])), 0.3)
    st_xy = rng.uniform(0.05, 0.95, size=(n_st, 2))
    gr_xy = rng.uniform(0.05, 0.95, size=(n_gr, 2))
    sv = rng.normal(size=n_st * T)
    if missing and n_st * T > 2:
        sv[rng.integers(0, n_st * T)] = np.nan
    data = ObservationSet(
        station_id=np.tile([f"s{i}" for i in range(n_st)], T),
        station_xy=np.tile(st_xy, (T, 1)),
        station_t=np.repeat(np.arange(1, T + 1), n_st),
        station_value=sv,
        station_z=rng.normal(size=(n_st * T, q)),
        grid_id=np.tile([f"g{i}" for i in range(n_gr)], T),
        grid_xy=np.tile(gr_xy, (T, 1)),
        grid_t=np.repeat(np.arange(1, T + 1), n_gr),
        grid_value=rng.normal(size=n_gr * T),
        grid_z=rng.normal(size=(n_gr * T, q)),
        covariate_names=tuple(f"z{j}" for j in range(q)),
    )
    return data, mesh
