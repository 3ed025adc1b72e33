"""Sparse symmetric positive-definite factorization.

SuperLU is run in symmetric mode with diagonal pivoting only, so the
factorization is ``P Q P' = L D L'`` with ``U = D L'``; a non-positive
pivot means ``Q`` is not positive definite.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

__all__ = ["NotPositiveDefiniteError", "SparseCholesky", "BorderedBandPattern", "logdet"]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, index: int, pivot: float):
        self.index = int(index)
        self.pivot = float(pivot)
        super().__init__(f"matrix is not positive definite: pivot {pivot:.3g} at index {index}")


class SparseCholesky:
    """Factorization of a sparse SPD matrix with fill-reducing ordering."""

    def __init__(self, Q: sp.spmatrix, permc_spec: str = "MMD_AT_PLUS_A"):
        Q = sp.csc_matrix(Q)
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise ValueError("matrix must be square")
        self.n = n
        if n == 0:
            self._lu = None
            self._d = np.zeros(0)
            return
        try:
            lu = spla.splu(
                Q,
                permc_spec=permc_spec,
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:  # exactly singular
            raise NotPositiveDefiniteError(-1, 0.0) from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise np.linalg.LinAlgError("symmetric pivoting failed")
        d = lu.U.diagonal()
        bad = np.flatnonzero(~(d > 0))
        if len(bad):
            k = bad[0]
            orig = int(np.flatnonzero(lu.perm_c == k)[0])
            raise NotPositiveDefiniteError(orig, d[k])
        self._lu = lu
        self._d = d

    @property
    def perm(self) -> np.ndarray:
        """Fill-reducing ordering: row ``k`` of the factor is ``perm[k]`` of ``Q``."""
        if self._lu is None:
            return np.zeros(0, int)
        return np.argsort(self._lu.perm_c)

    def logdet(self) -> float:
        return float(np.sum(np.log(self._d)))

    def factor_flops(self) -> float:
        """Flop proxy ``sum_j c_j^2`` from the column counts of ``L``."""
        if self._lu is None:
            return 0.0
        c = np.diff(self._lu.L.tocsc().indptr).astype(float)
        return float(np.sum(c**2))

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(np.asarray(b, dtype=float))
        return self._lu.solve(np.asarray(b, dtype=float))

    def inv_diag_of(self, A: sp.spmatrix) -> np.ndarray:
        """Diagonal of ``A Q^-1 A'`` by per-column solves."""
        A = sp.csr_matrix(A)
        if A.shape[0] == 0:
            return np.zeros(0)
        out = np.empty(A.shape[0])
        step = 512
        for s in range(0, A.shape[0], step):
            blk = A[s : s + step]
            X = self.solve(blk.T.toarray())
            out[s : s + step] = np.asarray(blk.multiply(X.T).sum(axis=1)).ravel()
        return out

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draws from ``N(0, Q^-1)``; shape ``(n,)`` or ``(n, size)``."""
        k = 1 if size is None else int(size)
        z = rng.standard_normal((self.n, k))
        if self.n == 0:
            return z[:, 0] if size is None else z
        y = z / np.sqrt(self._d)[:, None]
        w = spla.spsolve_triangular(self._lu.L.T.tocsr(), y, lower=False, unit_diagonal=True)
        x = w[self._lu.perm_c]
        return x[:, 0] if size is None else x


class BorderedBandPattern:
    """Banded Cholesky for a fixed pattern with a few dense leading rows.

    The trailing ``n - nb`` indices are reordered by reverse Cuthill-McKee
    and factorized with LAPACK's banded Cholesky; the leading ``nb``
    indices (dense fixed-effect columns) are eliminated through their
    Schur complement. Built once per pattern, then :meth:`factor` takes
    the values of the pattern in its ``data`` order.

    Parameters
    ----------
    pattern : sparse matrix
        Symmetric pattern in CSC form with sorted indices.
    nb : int
        Number of leading border indices.
    """

    def __init__(self, pattern: sp.csc_matrix, nb: int):
        U = sp.csc_matrix(pattern)
        n = U.shape[0]
        self.n, self.nb = n, int(nb)
        nr = n - self.nb
        R = U[self.nb :, self.nb :]
        p = reverse_cuthill_mckee(sp.csr_matrix(R), symmetric_mode=True).astype(np.int64)
        pos = np.empty(nr, np.int64)
        pos[p] = np.arange(nr)
        self.order = p + self.nb  # band position k holds original index order[k]

        rows = U.indices.astype(np.int64)
        cols = np.repeat(np.arange(n), np.diff(U.indptr))
        in_r, in_c = rows >= self.nb, cols >= self.nb
        i = np.where(in_r, pos[np.clip(rows - self.nb, 0, nr - 1)], -1)
        j = np.where(in_c, pos[np.clip(cols - self.nb, 0, nr - 1)], -1)
        band = in_r & in_c
        self.bw = int(np.max(np.abs(i[band] - j[band]))) if np.any(band) else 0
        upper = band & (i <= j)
        self._band_src = np.flatnonzero(upper)
        self._band_dst = (self.bw + i[upper] - j[upper]) * nr + j[upper]
        cross = in_r & ~in_c
        self._c_src = np.flatnonzero(cross)
        self._c_dst = i[cross] * self.nb + cols[cross]
        border = ~in_r & ~in_c
        self._e_src = np.flatnonzero(border)
        self._e_dst = rows[border] * self.nb + cols[border]
        self.nr = nr

    def flops(self) -> float:
        return float(self.nr) * (self.bw + 1) ** 2

    def factor(self, data: np.ndarray) -> "_BorderedBandFactor":
        return _BorderedBandFactor(self, np.asarray(data, float))


class _BorderedBandFactor:
    def __init__(self, pat: BorderedBandPattern, data):
        self.pat = pat
        nr, nb, bw = pat.nr, pat.nb, pat.bw
        ab = np.zeros((bw + 1) * nr)
        ab[pat._band_dst] = data[pat._band_src]
        ab = ab.reshape(bw + 1, nr)
        try:
            self.cb = sla.cholesky_banded(ab, lower=False, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(-1, np.nan) from exc
        C = np.zeros(nr * nb)
        C[pat._c_dst] = data[pat._c_src]
        self.C = C.reshape(nr, nb)
        E = np.zeros(nb * nb)
        E[pat._e_dst] = data[pat._e_src]
        E = E.reshape(nb, nb)
        if nb:
            self.W = sla.cho_solve_banded((self.cb, False), self.C, check_finite=False)
            S = E - self.C.T @ self.W
            try:
                self.Ls = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError(-1, np.nan) from exc
        else:
            self.Ls = np.zeros((0, 0))

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(self.cb[-1])) + 2.0 * np.sum(np.log(np.diag(self.Ls))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        pat = self.pat
        b = np.asarray(b, float)
        bb, br = b[: pat.nb], b[pat.order]
        xr = sla.cho_solve_banded((self.cb, False), br, check_finite=False)
        out = np.empty(pat.n)
        if pat.nb:
            rhs = bb - self.C.T @ xr
            xb = sla.cho_solve((self.Ls, True), rhs, check_finite=False)
            xr = xr - self.W @ xb
            out[: pat.nb] = xb
        out[pat.order] = xr
        return out


def logdet(Q: sp.spmatrix) -> float:
    return SparseCholesky(Q).logdet()
