"""AR(1)-in-time, Matérn-in-space precision with stationary start."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = ["ar1_precision", "ar1_logdet", "ar1_terms", "st_precision"]


def _check_phi(phi: float) -> None:
    if not abs(phi) < 1:
        raise ValueError(f"AR(1) coefficient must satisfy |phi| < 1, got {phi}")


def ar1_precision(phi: float, T: int) -> sp.csc_matrix:
    """Precision of a stationary AR(1) chain with unit innovation variance."""
    _check_phi(phi)
    if T < 1:
        raise ValueError("T must be at least 1")
    if T == 1:
        return sp.csc_matrix(np.array([[1.0 - phi**2]]))
    diag = np.full(T, 1.0 + phi**2)
    diag[0] = diag[-1] = 1.0
    off = np.full(T - 1, -phi)
    return sp.diags([off, diag, off], [-1, 0, 1], format="csc")


def ar1_terms(T: int) -> tuple[sp.csc_matrix, sp.csc_matrix, sp.csc_matrix]:
    """Matrices ``(M0, M1, M2)`` with ``ar1_precision(phi, T) = M0 + phi M1 + phi^2 M2``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if T == 1:
        one = sp.csc_matrix(np.array([[1.0]]))
        return one, sp.csc_matrix((1, 1)), -one
    off = np.full(T - 1, -1.0)
    d2 = np.ones(T)
    d2[0] = d2[-1] = 0.0
    M0 = sp.identity(T, format="csc")
    M1 = sp.diags([off, off], [-1, 1], format="csc")
    M2 = sp.diags(d2, format="csc")
    return M0, M1, M2


def ar1_logdet(phi: float, T: int) -> float:
    """``log det`` of :func:`ar1_precision`, equal to ``log(1 - phi^2)`` for any T."""
    _check_phi(phi)
    return float(np.log1p(-phi**2))


def st_precision(Qs: sp.spmatrix, phi: float, T: int) -> sp.csc_matrix:
    """Kronecker precision ``M(phi, T) ⊗ Qs``, time-major block order.

    Innovations have precision ``Qs``; every time slice has stationary
    covariance ``Qs^-1 / (1 - phi^2)``.
    """
    M = ar1_precision(phi, T)
    return sp.kron(M, sp.csc_matrix(Qs), format="csc")
