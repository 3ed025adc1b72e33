"""Matérn covariance and its finite-element GMRF approximation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma, kv

from .geometry import Mesh

__all__ = [
    "MaternParams",
    "matern_cov",
    "matern_corr",
    "fem_matrices",
    "spde_precision",
    "write_coo",
]


@dataclass(frozen=True)
class MaternParams:
    """Matérn field parameters.

    ``range`` is the effective range ``sqrt(8 nu) / kappa``.
    """

    range: float
    sigma: float
    nu: float = 1.0

    def __post_init__(self):
        if not (self.range > 0 and self.sigma > 0 and self.nu > 0):
            raise ValueError(f"invalid Matérn parameters {self}")

    @property
    def kappa(self) -> float:
        return np.sqrt(8.0 * self.nu) / self.range


def matern_corr(dist, range: float, nu: float = 1.0) -> np.ndarray:
    d = np.asarray(dist, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    kd = np.sqrt(8.0 * nu) / range * d
    with np.errstate(invalid="ignore", over="ignore"):
        r = 2.0 ** (1.0 - nu) / gamma(nu) * kd**nu * kv(nu, kd)
    r = np.where(kd == 0, 1.0, r)
    # K_nu underflows far out; correlation is zero there anyway
    return np.where(np.isfinite(r), r, 0.0)


def matern_cov(dist, params: MaternParams) -> np.ndarray:
    """Matérn covariance at distance ``dist`` (``sigma**2`` at zero)."""
    return params.sigma**2 * matern_corr(dist, params.range, params.nu)


def fem_matrices(mesh: Mesh) -> tuple[sp.csc_matrix, sp.csc_matrix]:
    """Lumped mass diagonal ``C`` and stiffness ``G`` for P1 elements.

    Returns
    -------
    c : ndarray
        Diagonal of the lumped mass matrix (one third of adjacent triangle
        areas per vertex).
    G : scipy.sparse.csc_matrix
    """
    v = mesh.vertices
    t = mesh.triangles
    n = mesh.n_vertices
    area = np.abs(mesh.areas)

    c = np.bincount(t.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)

    # edge vectors opposite each local vertex
    e0 = v[t[:, 2]] - v[t[:, 1]]
    e1 = v[t[:, 0]] - v[t[:, 2]]
    e2 = v[t[:, 1]] - v[t[:, 0]]
    E = np.stack([e0, e1, e2], axis=1)  # (m, 3, 2)
    local = np.einsum("mik,mjk->mij", E, E) / (4.0 * area)[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    G = sp.csc_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    G.sum_duplicates()
    return c, G


def _precision_unit_sigma(c, G, kappa):
    cinv = sp.diags(1.0 / c)
    K = kappa**4 * sp.diags(c) + 2.0 * kappa**2 * G + G @ cinv @ G
    tau2 = 1.0 / (4.0 * np.pi * kappa**2)
    return (tau2 * K).tocsc()


def spde_precision(mesh: Mesh, params: MaternParams, fem=None) -> sp.csc_matrix:
    """Sparse precision of the nu = 1 Matérn field on ``mesh``.

    ``Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G)`` with ``tau`` set so
    the nominal marginal variance is ``sigma**2``.

    Parameters
    ----------
    fem : tuple, optional
        Precomputed ``fem_matrices(mesh)`` output.
    """
    if params.nu != 1.0:
        raise NotImplementedError(
            f"only nu = 1 is supported by the finite-element construction, got nu = {params.nu}"
        )
    c, G = fem_matrices(mesh) if fem is None else fem
    Q = _precision_unit_sigma(c, G, params.kappa) / params.sigma**2
    # exact symmetry
    return ((Q + Q.T) * 0.5).tocsc()


def write_coo(Q: sp.spmatrix, path) -> None:
    """Write a sparse matrix as ``row,col,value`` lines with a header."""
    Q = sp.coo_matrix(Q)
    with Path(path).open("w") as fh:
        fh.write(f"# shape {Q.shape[0]} {Q.shape[1]}\nrow,col,value\n")
        order = np.lexsort((Q.col, Q.row))
        for i, j, x in zip(Q.row[order], Q.col[order], Q.data[order]):
            fh.write(f"{int(i)},{int(j)},{float(x)!r}\n")
