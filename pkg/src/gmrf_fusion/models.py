"""Latent-Gaussian observation systems for the three model families.

Every family maps data, a mesh and hyperparameters to a
:class:`GaussianSystem` ``y = A u + e`` with ``u ~ N(0, Q_prior^-1)`` and
``e ~ N(0, diag(noise_prec)^-1)``. Latent blocks are stacked as
``[beta, field_1 (time-major), field_2 (time-major)]``:

* ``fusion``: ``beta``, ``xi`` (latent field), ``alpha0`` (error field).
  Station rows ``Z beta + A xi``; grid rows ``A alpha0 + alpha1 (Z beta + A xi)``.
* ``stations_only``: ``beta``, ``xi``; station rows only.
* ``regcalib``: ``b = (b0, b1)``, ``a0``, ``a1``; station rows
  ``b0 + b1 w2 + A a0 + w2 A a1`` with ``w2`` the forecast value at the
  nearest grid centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import Mesh, project
from .linalg import SparseCholesky
from .priors import HyperPriorSet
from .spacetime import ar1_logdet, ar1_terms
from .spde import fem_matrices

__all__ = [
    "ObservationSet",
    "GaussianSystem",
    "Targets",
    "DataError",
    "FAMILIES",
    "family_params",
    "make_model",
    "FusionModel",
    "StationsOnlyModel",
    "RegCalibModel",
    "AffineForm",
    "assemble_fusion",
    "assemble_stations_only",
    "assemble_regcalib",
]

FAMILIES = ("fusion", "stations_only", "regcalib")

_PARAMS = {
    "stations_only": ("sigma_e1", "sigma1", "range1", "phi1"),
    "fusion": ("sigma_e1", "sigma_e2", "sigma1", "range1", "phi1", "sigma2", "range2", "phi2"),
    "regcalib": ("sigma_e1", "sigma_a0", "range_a0", "phi_a0", "sigma_a1", "range_a1", "phi_a1"),
}


class DataError(ValueError):
    """Observation data violate an ingestion or model precondition."""


def family_params(family: str, T: int) -> tuple[str, ...]:
    """Hyperparameter names of ``family``; AR coefficients only when T > 1."""
    if family not in _PARAMS:
        raise ValueError(f"unknown model family {family!r}")
    names = _PARAMS[family]
    if T == 1:
        names = tuple(n for n in names if not n.startswith("phi"))
    return names


def _as2d(a, ncol=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1) if ncol is None or ncol == 1 else a.reshape(-1, ncol)
    return a


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Station and gridded observations on a shared time index ``1..T``.

    Missing values are NaN. Covariate columns exclude the intercept, which
    is added by the models when ``intercept`` is true.
    """

    station_id: np.ndarray
    station_xy: np.ndarray
    station_t: np.ndarray
    station_value: np.ndarray
    station_z: np.ndarray = None
    grid_id: np.ndarray = None
    grid_xy: np.ndarray = None
    grid_t: np.ndarray = None
    grid_value: np.ndarray = None
    grid_z: np.ndarray = None
    covariate_names: tuple = ()
    intercept: bool = True
    unit: str = ""

    def __post_init__(self):
        q = len(self.covariate_names)
        ns = len(np.asarray(self.station_value))
        s = object.__setattr__
        s(self, "station_id", np.asarray(self.station_id).astype(str))
        s(self, "station_xy", np.asarray(self.station_xy, float).reshape(-1, 2))
        s(self, "station_t", np.asarray(self.station_t).astype(np.int64))
        s(self, "station_value", np.asarray(self.station_value, float))
        s(self, "station_z", np.zeros((ns, 0)) if self.station_z is None else _as2d(self.station_z, q))
        if self.grid_value is None:
            s(self, "grid_id", np.zeros(0, str))
            s(self, "grid_xy", np.zeros((0, 2)))
            s(self, "grid_t", np.zeros(0, np.int64))
            s(self, "grid_value", np.zeros(0))
            s(self, "grid_z", np.zeros((0, q)))
        else:
            ng = len(np.asarray(self.grid_value))
            s(self, "grid_id", np.asarray(self.grid_id).astype(str))
            s(self, "grid_xy", np.asarray(self.grid_xy, float).reshape(-1, 2))
            s(self, "grid_t", np.asarray(self.grid_t).astype(np.int64))
            s(self, "grid_value", np.asarray(self.grid_value, float))
            s(self, "grid_z", np.zeros((ng, 0)) if self.grid_z is None else _as2d(self.grid_z, q))
        self._validate()

    def _validate(self):
        ns = len(self.station_value)
        for name in ("station_id", "station_xy", "station_t", "station_z"):
            if len(getattr(self, name)) != ns:
                raise DataError(f"{name} has {len(getattr(self, name))} rows, expected {ns}")
        ng = len(self.grid_value)
        for name in ("grid_id", "grid_xy", "grid_t", "grid_z"):
            if len(getattr(self, name)) != ng:
                raise DataError(f"{name} has {len(getattr(self, name))} rows, expected {ng}")
        q = len(self.covariate_names)
        if self.station_z.shape[1] != q or self.grid_z.shape[1] != q:
            raise DataError("covariate columns do not match covariate_names")
        for label, t in (("station", self.station_t), ("grid", self.grid_t)):
            if len(t) and t.min() < 1:
                raise DataError(f"{label} time indices must start at 1")
        T = self.T
        if ns:
            missing = sorted(set(range(1, T + 1)) - set(self.station_t.tolist()))
            if missing and ng:
                raise DataError(f"time indices {missing} missing from station data")
        if ng:
            st = set(self.station_t.tolist())
            gt = set(self.grid_t.tolist())
            if st != gt:
                raise DataError(
                    f"stations and grid are misaligned in time: only in stations {sorted(st - gt)}, "
                    f"only in grid {sorted(gt - st)}"
                )
        for label, ids, xy in (("station", self.station_id, self.station_xy), ("grid", self.grid_id, self.grid_xy)):
            if not len(ids):
                continue
            uid, first = np.unique(ids, return_index=True)
            loc = xy[first]
            inv = np.unique(ids, return_inverse=True)[1]
            if np.any(np.abs(xy - loc[inv]) > 1e-12):
                raise DataError(f"{label} ids with inconsistent coordinates")
            if len(np.unique(np.round(loc, 12), axis=0)) != len(uid):
                raise DataError(f"{label} locations are not distinct")
            dup = np.unique(np.column_stack([inv, (self.station_t if label == "station" else self.grid_t)]), axis=0)
            if len(dup) != len(ids):
                raise DataError(f"duplicate ({label} id, t) records")

    @property
    def T(self) -> int:
        ts = np.concatenate([self.station_t, self.grid_t])
        return int(ts.max()) if len(ts) else 1

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def design(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, float).reshape(len(z), self.n_covariates)
        return np.column_stack([np.ones(len(z)), z]) if self.intercept else z

    @property
    def beta_names(self) -> tuple:
        return (("intercept",) if self.intercept else ()) + tuple(self.covariate_names)

    def stations(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique station ids and their coordinates."""
        uid, first = np.unique(self.station_id, return_index=True)
        return uid, self.station_xy[first]

    def drop_stations(self, ids) -> "ObservationSet":
        """Copy with all records of the given stations marked missing."""
        mask = np.isin(self.station_id, np.asarray(list(ids)).astype(str))
        value = self.station_value.copy()
        value[mask] = np.nan
        return self.replace(station_value=value)

    def replace(self, **kw) -> "ObservationSet":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return ObservationSet(**d)

    def without_grid(self) -> "ObservationSet":
        return self.replace(grid_id=None, grid_xy=None, grid_t=None, grid_value=None, grid_z=None)


@dataclass(frozen=True)
class Targets:
    """Prediction locations with time index and covariates."""

    xy: np.ndarray
    t: np.ndarray
    z: np.ndarray = None

    def __post_init__(self):
        xy = np.asarray(self.xy, float).reshape(-1, 2)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "t", np.broadcast_to(np.asarray(self.t, np.int64), (len(xy),)).copy())
        z = np.zeros((len(xy), 0)) if self.z is None else np.asarray(self.z, float).reshape(len(xy), -1)
        object.__setattr__(self, "z", z)

    def __len__(self):
        return len(self.xy)


@dataclass(frozen=True, eq=False)
class GaussianSystem:
    """``y = A u + e`` with ``u ~ N(0, Q_prior^-1)`` and diagonal noise precision."""

    Q_prior: sp.csc_matrix
    A: sp.csr_matrix
    noise_prec: np.ndarray
    y: np.ndarray
    blocks: dict
    family: str = ""
    alpha1: float | None = None
    theta: dict = field(default_factory=dict)
    prior_logdet: float | None = None
    row_source: np.ndarray = None  # 1 for station rows, 2 for grid rows
    row_index: np.ndarray = None  # index into the ObservationSet arrays

    def __post_init__(self):
        m, n = self.A.shape
        if self.Q_prior.shape != (n, n):
            raise ValueError("A and Q_prior dimensions disagree")
        if len(self.y) != m or len(self.noise_prec) != m:
            raise ValueError("y and noise precision must have one entry per row of A")
        if np.any(~(self.noise_prec > 0)):
            raise ValueError("noise precisions must be positive")

    @property
    def n_latent(self) -> int:
        return self.Q_prior.shape[0]

    @property
    def n_obs(self) -> int:
        return self.A.shape[0]

    def dense_blocks(self) -> dict:
        return {k: (v.start, v.stop) for k, v in self.blocks.items()}

    def subset_rows(self, keep: np.ndarray) -> "GaussianSystem":
        """System restricted to the rows where ``keep`` is true."""
        keep = np.asarray(keep, bool)
        return GaussianSystem(
            self.Q_prior,
            self.A[keep],
            self.noise_prec[keep],
            self.y[keep],
            self.blocks,
            self.family,
            self.alpha1,
            self.theta,
            self.prior_logdet,
            None if self.row_source is None else self.row_source[keep],
            None if self.row_index is None else self.row_index[keep],
        )


def _time_block_projection(P: sp.csr_matrix, t: np.ndarray, n: int, T: int) -> sp.csr_matrix:
    """Place row ``i`` of ``P`` in the columns of time slice ``t[i]``."""
    P = sp.coo_matrix(P)
    cols = P.col + (t[P.row] - 1) * n
    return sp.csr_matrix((P.data, (P.row, cols)), shape=(P.shape[0], n * T))


def _embed(M: sp.spmatrix, offset: int, size: int) -> sp.csc_matrix:
    M = sp.coo_matrix(M)
    return sp.csc_matrix((M.data, (M.row + offset, M.col + offset)), shape=(size, size))


# dense generalized eigenvalues are used for log-determinants up to this size
_EIG_MAX = 3000


class _FieldPrior:
    """AR(1) x SPDE precision written as a sum of fixed matrices.

    ``Q = s * sum_ij a_i(phi) b_j(kappa) kron(M_i, S_j)`` with
    ``(S_0, S_1, S_2) = (C, G, G C^-1 G)``, ``b = (kappa^4, 2 kappa^2, 1)``,
    ``a = (1, phi, phi^2)`` and ``s = tau^2 / sigma^2``.
    """

    def __init__(self, mesh: Mesh, T: int):
        self.mesh = mesh
        self.T = T
        self.n = mesh.n_vertices
        c, G = fem_matrices(mesh)
        self.c = c
        H = G @ sp.diags(1.0 / c) @ G
        S = [sp.diags(c, format="csc"), G.tocsc(), ((H + H.T) * 0.5).tocsc()]
        M = ar1_terms(T)
        self._ij = [(i, j) for i in range(3) for j in range(3) if M[i].nnz]
        self._S = S
        self.terms = [sp.kron(M[i], S[j], format="csc") for i, j in self._ij]
        self._logc = float(np.sum(np.log(c)))
        self._lam = None
        if self.n <= _EIG_MAX:
            d = 1.0 / np.sqrt(c)
            Gs = (G.toarray() * d[:, None]) * d[None, :]
            self._lam = np.linalg.eigvalsh((Gs + Gs.T) * 0.5)

    def _spatial_logdet(self, kappa):
        """``log det(kappa^4 C + 2 kappa^2 G + G C^-1 G)``."""
        if self._lam is not None:
            return self._logc + 2.0 * float(np.sum(np.log(kappa**2 + np.maximum(self._lam, 0.0))))
        C, G, H = self._S
        return SparseCholesky(kappa**4 * C + 2 * kappa**2 * G + H).logdet()

    def coefs(self, sigma: float, range_: float, phi: float) -> tuple[np.ndarray, float]:
        if not abs(phi) < 1:
            raise ValueError(f"AR(1) coefficient must satisfy |phi| < 1, got {phi}")
        kappa = np.sqrt(8.0) / range_
        s = 1.0 / (4.0 * np.pi * kappa**2 * sigma**2)
        a = (1.0, phi, phi**2)
        b = (kappa**4, 2.0 * kappa**2, 1.0)
        coef = np.array([s * a[i] * b[j] for i, j in self._ij])
        ld = self.n * ar1_logdet(phi, self.T) + self.T * (self.n * np.log(s) + self._spatial_logdet(kappa))
        return coef, float(ld)

    def precision(self, sigma: float, range_: float, phi: float) -> tuple[sp.csc_matrix, float]:
        coef, ld = self.coefs(sigma, range_, phi)
        Q = coef[0] * self.terms[0]
        for ck, Pk in zip(coef[1:], self.terms[1:]):
            Q = Q + ck * Pk
        return Q.tocsc(), ld


class AffineForm:
    """Hyperparameter dependence of a system in linear form.

    ``Q_prior(theta) = sum_k c_k(theta) P_k`` and the noise precision of
    row group ``g`` is ``1 / theta[g]^2``. ``A`` and ``y`` do not depend on
    ``theta`` (``alpha1`` is fixed when the form is built).
    """

    def __init__(self, model, alpha1, A, y, groups, row_source, row_index):
        self.model = model
        self.alpha1 = alpha1
        self.A = sp.csr_matrix(A)
        self.y = np.asarray(y, float)
        self.groups = groups  # list of (sd name, row index array)
        self.row_source = row_source
        self.row_index = row_index
        self.blocks = model.blocks
        n = model.n_latent
        self.n_latent = n
        # fixed-effect block
        p = model.n_beta
        self.terms = [_embed(sp.identity(p), 0, n)] if p else []
        self._parts = []
        for name, fp, params in model.field_blocks():
            off = self.blocks[name].start
            self._parts.append((len(self.terms), fp, params))
            self.terms.extend(_embed(P, off, n) for P in fp.terms)

    def prior_coefs(self, theta: dict) -> tuple[np.ndarray, float]:
        th = self.model._theta(theta)
        out = []
        ld = 0.0
        p = self.model.n_beta
        if p:
            tau = self.model.priors.fixed_effect_precision
            out.append(tau)
            ld += p * np.log(tau)
        for _, fp, (sn, rn, pn) in self._parts:
            c, l = fp.coefs(th[sn], th[rn], th[pn])
            out.extend(c)
            ld += l
        return np.array(out), float(ld)

    def noise(self, theta: dict) -> np.ndarray:
        d = np.empty(len(self.y))
        for name, rows in self.groups:
            d[rows] = 1.0 / theta[name] ** 2
        return d

    def system(self, theta: dict) -> GaussianSystem:
        coef, ld = self.prior_coefs(theta)
        Q = coef[0] * self.terms[0]
        for ck, Pk in zip(coef[1:], self.terms[1:]):
            Q = Q + ck * Pk
        return GaussianSystem(
            Q.tocsc(),
            self.A,
            self.noise(theta),
            self.y,
            self.blocks,
            self.model.family,
            self.alpha1,
            dict(theta),
            ld,
            self.row_source,
            self.row_index,
        )


class _Model:
    family = ""

    def __init__(self, data: ObservationSet, mesh: Mesh, priors: HyperPriorSet | None = None):
        self.data = data
        self.mesh = mesh
        self.priors = priors or HyperPriorSet()
        self.T = data.T
        self.n = mesh.n_vertices
        self.param_names = family_params(self.family, self.T)
        self.fields = _FieldPrior(mesh, self.T)
        self._forms = {}

    # rows of station observations that are present
    def _station_rows(self):
        keep = np.flatnonzero(np.isfinite(self.data.station_value))
        if len(keep) == 0:
            raise DataError("empty observation set: no station observations")
        return keep

    def _theta(self, theta: dict) -> dict:
        th = dict(theta)
        missing = [k for k in self.param_names if k not in th]
        if missing:
            raise ValueError(f"missing hyperparameters {missing} for {self.family}")
        for k in self.param_names:
            v = th[k]
            if k.startswith("phi"):
                if not abs(v) < 1:
                    raise ValueError(f"{k} must satisfy |phi| < 1, got {v}")
            elif not v > 0:
                raise ValueError(f"{k} must be positive, got {v}")
        for k in ("phi1", "phi2", "phi_a0", "phi_a1"):
            th.setdefault(k, 0.0)
        return th

    def log_prior(self, theta: dict) -> float:
        return float(sum(self.priors[k].logpdf(theta[k]) for k in self.param_names))

    @property
    def n_beta(self) -> int:
        return self.data.n_covariates + int(self.data.intercept)

    @property
    def n_latent(self) -> int:
        return max(sl.stop for sl in self.blocks.values())

    def field_blocks(self):
        """``(block name, field prior, (sd, range, phi) names)`` per field."""
        raise NotImplementedError

    def _build_form(self, alpha1) -> AffineForm:
        raise NotImplementedError

    def affine(self, alpha1: float | None = None) -> AffineForm:
        key = None if alpha1 is None else float(alpha1)
        form = self._forms.get(key)
        if form is None:
            form = self._build_form(alpha1)
            self._forms[key] = form
        return form

    def system(self, theta: dict, alpha1: float | None = None) -> GaussianSystem:
        return self.affine(alpha1).system(theta)

    def predictor(self, targets: Targets) -> sp.csr_matrix:
        raise NotImplementedError

    def predictor_at_stations(self, rows=None) -> sp.csr_matrix:
        """Latent predictor of x at station records (all records by default)."""
        d = self.data
        rows = np.arange(len(d.station_value)) if rows is None else np.asarray(rows)
        return self.predictor(Targets(d.station_xy[rows], d.station_t[rows], d.station_z[rows]))


class StationsOnlyModel(_Model):
    family = "stations_only"

    def __init__(self, data, mesh, priors=None):
        super().__init__(data, mesh, priors)
        d = data
        self.rows1 = self._station_rows()
        P1 = project(mesh, d.station_xy[self.rows1])
        self.A_xi1 = _time_block_projection(P1, d.station_t[self.rows1], self.n, self.T)
        self.Z1 = d.design(d.station_z[self.rows1])

    @property
    def blocks(self):
        p, nT = self.n_beta, self.n * self.T
        return {"beta": slice(0, p), "xi": slice(p, p + nT)}

    def field_blocks(self):
        return [("xi", self.fields, ("sigma1", "range1", "phi1"))]

    def _build_form(self, alpha1=None):
        A = sp.hstack([sp.csr_matrix(self.Z1), self.A_xi1], format="csr")
        y = self.data.station_value[self.rows1]
        m = len(y)
        return AffineForm(self, None, A, y, [("sigma_e1", np.arange(m))], np.ones(m, np.int8), self.rows1)

    def affine(self, alpha1=None):
        return super().affine(None)

    def predictor(self, targets):
        P = project(self.mesh, targets.xy)
        Axi = _time_block_projection(P, targets.t, self.n, self.T)
        Z = self.data.design(targets.z)
        return sp.hstack([sp.csr_matrix(Z), Axi], format="csr")


class FusionModel(StationsOnlyModel):
    family = "fusion"

    def __init__(self, data, mesh, priors=None):
        super().__init__(data, mesh, priors)
        d = data
        self.rows2 = np.flatnonzero(np.isfinite(d.grid_value))
        if len(self.rows2) == 0:
            raise DataError("the fusion model needs gridded forecast values; use stations_only without them")
        P2 = project(mesh, d.grid_xy[self.rows2])
        self.A_f2 = _time_block_projection(P2, d.grid_t[self.rows2], self.n, self.T)
        self.Z2 = d.design(d.grid_z[self.rows2])
        nT = self.n * self.T
        self._A_station = sp.hstack(
            [sp.csr_matrix(self.Z1), self.A_xi1, sp.csr_matrix((len(self.rows1), nT))], format="csr"
        )
        self._A_grid_scaled = sp.hstack(
            [sp.csr_matrix(self.Z2), self.A_f2, sp.csr_matrix((len(self.rows2), nT))], format="csr"
        )
        self._A_grid_error = sp.hstack(
            [sp.csr_matrix((len(self.rows2), self.n_beta + nT)), self.A_f2], format="csr"
        )

    @property
    def blocks(self):
        p, nT = self.n_beta, self.n * self.T
        return {"beta": slice(0, p), "xi": slice(p, p + nT), "alpha0": slice(p + nT, p + 2 * nT)}

    def field_blocks(self):
        return [
            ("xi", self.fields, ("sigma1", "range1", "phi1")),
            ("alpha0", self.fields, ("sigma2", "range2", "phi2")),
        ]

    def affine(self, alpha1=1.0):
        if alpha1 is None:
            raise ValueError("fusion system needs a multiplicative bias alpha1")
        return _Model.affine(self, alpha1)

    def system(self, theta, alpha1=1.0):
        return self.affine(alpha1).system(theta)

    def _build_form(self, alpha1):
        A_grid = alpha1 * self._A_grid_scaled + self._A_grid_error
        A = sp.vstack([self._A_station, A_grid], format="csr")
        y = np.concatenate([self.data.station_value[self.rows1], self.data.grid_value[self.rows2]])
        m1, m2 = len(self.rows1), len(self.rows2)
        groups = [("sigma_e1", np.arange(m1)), ("sigma_e2", m1 + np.arange(m2))]
        src = np.concatenate([np.ones(m1, np.int8), np.full(m2, 2, np.int8)])
        idx = np.concatenate([self.rows1, self.rows2])
        return AffineForm(self, float(alpha1), A, y, groups, src, idx)

    def predictor(self, targets):
        base = super().predictor(targets)
        return sp.hstack([base, sp.csr_matrix((len(targets), self.n * self.T))], format="csr")

    def error_field_predictor(self, targets):
        """Rows extracting the error field alpha0 at ``targets``."""
        P = project(self.mesh, targets.xy)
        A = _time_block_projection(P, targets.t, self.n, self.T)
        return sp.hstack([sp.csr_matrix((len(targets), self.n_beta + self.n * self.T)), A], format="csr")


class RegCalibModel(_Model):
    family = "regcalib"

    def __init__(self, data, mesh, priors=None):
        super().__init__(data, mesh, priors)
        d = data
        if len(d.grid_value) == 0:
            raise DataError("regression calibration needs gridded forecast values")
        self._trees = {}
        self.rows1 = self._station_rows()
        w2 = self.matched_forecast(d.station_xy[self.rows1], d.station_t[self.rows1])
        P1 = project(mesh, d.station_xy[self.rows1])
        Af = _time_block_projection(P1, d.station_t[self.rows1], self.n, self.T)
        self.w2_station = w2
        self._A = sp.hstack(
            [sp.csr_matrix(np.column_stack([np.ones(len(w2)), w2])), Af, sp.diags(w2) @ Af], format="csr"
        )

    @property
    def n_beta(self):
        return 2

    @property
    def blocks(self):
        nT = self.n * self.T
        return {"beta": slice(0, 2), "a0": slice(2, 2 + nT), "a1": slice(2 + nT, 2 + 2 * nT)}

    def field_blocks(self):
        return [
            ("a0", self.fields, ("sigma_a0", "range_a0", "phi_a0")),
            ("a1", self.fields, ("sigma_a1", "range_a1", "phi_a1")),
        ]

    def affine(self, alpha1=None):
        return super().affine(None)

    def _build_form(self, alpha1=None):
        y = self.data.station_value[self.rows1]
        m = len(y)
        return AffineForm(self, None, self._A, y, [("sigma_e1", np.arange(m))], np.ones(m, np.int8), self.rows1)

    def matched_forecast(self, xy, t) -> np.ndarray:
        """Forecast value of the nearest grid centroid at the same time."""
        xy = np.asarray(xy, float).reshape(-1, 2)
        t = np.asarray(t, np.int64)
        out = np.empty(len(xy))
        for tt in np.unique(t):
            tree, vals = self._tree(tt)
            sel = t == tt
            _, j = tree.query(xy[sel])
            v = vals[j]
            if np.any(~np.isfinite(v)):
                bad = np.flatnonzero(sel)[~np.isfinite(v)]
                raise DataError(f"missing forecast predictor for records {bad.tolist()} at t={tt}")
            out[sel] = v
        return out

    def _tree(self, t):
        if t not in self._trees:
            d = self.data
            sel = d.grid_t == t
            if not np.any(sel):
                raise DataError(f"no grid cells at t={t} to match stations against")
            self._trees[t] = (cKDTree(d.grid_xy[sel]), d.grid_value[sel])
        return self._trees[t]

    def predictor(self, targets, w2=None):
        """Rows of ``b0 + b1 w2 + a0 + w2 a1`` at ``targets``.

        ``w2`` defaults to the forecast at the nearest grid centroid.
        """
        w2 = self.matched_forecast(targets.xy, targets.t) if w2 is None else np.asarray(w2, float)
        P = project(self.mesh, targets.xy)
        Af = _time_block_projection(P, targets.t, self.n, self.T)
        return sp.hstack(
            [sp.csr_matrix(np.column_stack([np.ones(len(w2)), w2])), Af, sp.diags(w2) @ Af], format="csr"
        )


_CLASSES = {"fusion": FusionModel, "stations_only": StationsOnlyModel, "regcalib": RegCalibModel}


def make_model(family: str, data: ObservationSet, mesh: Mesh, priors: HyperPriorSet | None = None) -> _Model:
    if family not in _CLASSES:
        raise ValueError(f"unknown model family {family!r}; choose from {FAMILIES}")
    return _CLASSES[family](data, mesh, priors)


def assemble_fusion(data, mesh, theta, alpha1) -> GaussianSystem:
    return FusionModel(data, mesh).system(theta, alpha1)


def assemble_stations_only(data, mesh, theta) -> GaussianSystem:
    return StationsOnlyModel(data, mesh).system(theta)


def assemble_regcalib(data, mesh, theta) -> GaussianSystem:
    return RegCalibModel(data, mesh).system(theta)
