"""Dense and sparse matrix substrate used by every other module.

Dense matrices are plain ``numpy.ndarray``; sparse matrices are SciPy CSR/CSC
arrays.  The module provides the symmetric top-k eigensolver, a reusable SPD
factorization handle, small dense solves, norm and condition estimates, and
MatrixMarket import/export.  All tolerances are module constants and can be
overridden per call.  Matrices are treated as immutable after construction;
factorization handles are read-only and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io as sio
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DimensionMismatchError,
    NoConvergenceError,
    NonSymmetricError,
    NotPositiveDefiniteError,
    SingularMatrixError,
)

#: Max asymmetry tolerated, relative to the Frobenius norm.
SYM_TOL = 1e-10
#: Per-pair eigen residual target, relative to the Frobenius norm.
EIG_RESIDUAL_TOL = 1e-8
#: Relative residual target for factorized solves.
SOLVE_TOL = 1e-10
#: Relative accuracy target of the power-iteration spectral norm.
SPECTRAL_NORM_TOL = 1e-6
#: Dense symmetric eigendecomposition up to this dimension, Lanczos above.
DENSE_EIG_MAX_DIM = 2000
#: Dense Cholesky below this dimension, sparse factorization above.
DENSE_CHOLESKY_MAX_DIM = 200

_TINY = 1e-300


def is_sparse(a) -> bool:
    return sp.issparse(a)


def to_dense(a) -> np.ndarray:
    """Return ``a`` as a float ndarray, densifying sparse input."""
    if sp.issparse(a):
        return np.asarray(a.toarray(), dtype=float)
    return np.asarray(a, dtype=float)


def to_csr(a):
    """Return ``a`` as a CSR array with summed duplicates."""
    if sp.issparse(a):
        out = sp.csr_array(a)
        out.sum_duplicates()
        return out
    return sp.csr_array(np.asarray(a, dtype=float))


def frobenius_norm(a) -> float:
    """Frobenius norm, exact to round-off."""
    if sp.issparse(a):
        return float(spla.norm(a, "fro"))
    return float(np.linalg.norm(np.asarray(a, dtype=float), "fro"))


def spectral_norm_estimate(a, rel_tol=SPECTRAL_NORM_TOL, max_iters=10_000, seed=0) -> float:
    """Largest singular value via power iteration on ``A^T A``.

    The returned estimate never exceeds the true spectral norm, so the
    inequality ``||A||_2 <= ||A||_F`` is preserved for every input.
    """
    rows, cols = a.shape
    if rows == 0 or cols == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(cols)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iters):
        w = a @ v
        est_new = float(np.linalg.norm(w))
        if est_new == 0.0:
            return 0.0
        z = a.T @ w
        nz = float(np.linalg.norm(z))
        if nz == 0.0:
            return est_new
        v = z / nz
        if abs(est_new - est) <= 0.1 * rel_tol * max(est_new, _TINY):
            return est_new
        est = est_new
    return est


def _asymmetry(a) -> float:
    if sp.issparse(a):
        return float(spla.norm((a - a.T).tocsr(), "fro"))
    ad = np.asarray(a, dtype=float)
    return float(np.linalg.norm(ad - ad.T, "fro"))


def _require_square(a):
    rows, cols = a.shape
    if rows != cols:
        raise DimensionMismatchError(f"expected a square matrix, got {rows}x{cols}")
    return rows


@dataclass(frozen=True, eq=False)
class EigenPairs:
    """Top-k eigenvalues in descending order with paired orthonormal vectors."""

    values: np.ndarray   # (k,), non-increasing
    vectors: np.ndarray  # (n, k), column j pairs with values[j]


def _fix_column_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so each one's first nonzero entry is positive.

    Makes eigenvector output deterministic so downstream factorizations and
    golden files are stable.
    """
    out = np.array(vectors, copy=True)
    for j in range(out.shape[1]):
        col = out[:, j]
        scale = max(float(np.max(np.abs(col))), _TINY)
        idx = int(np.argmax(np.abs(col) > 1e-12 * scale))
        if col[idx] < 0:
            out[:, j] = -col
    return out


def sym_eig_topk(s, k, sym_tol=SYM_TOL) -> EigenPairs:
    """Return the ``k`` largest eigenvalues and eigenvectors of a symmetric matrix.

    Uses a dense LAPACK decomposition up to ``DENSE_EIG_MAX_DIM`` and a Lanczos
    solver above.  Raises ``NonSymmetricError`` if the asymmetry exceeds
    ``sym_tol * ||S||_F`` and ``NoConvergenceError`` if the iterative solver
    stalls.
    """
    n = _require_square(s)
    if not 1 <= k <= n:
        raise DimensionMismatchError(f"k={k} outside [1, {n}]")
    fro = frobenius_norm(s)
    if _asymmetry(s) > sym_tol * max(fro, _TINY):
        raise NonSymmetricError(f"asymmetry exceeds {sym_tol:g} * ||S||_F")

    if n <= DENSE_EIG_MAX_DIM or k == n:
        sd = to_dense(s)
        sd = 0.5 * (sd + sd.T)
        w, v = sla.eigh(sd)
        w = w[::-1][:k].copy()
        v = v[:, ::-1][:, :k]
    else:
        try:
            w, v = spla.eigsh(s, k=k, which="LA")
        except spla.ArpackNoConvergence as exc:
            got = len(exc.eigenvalues)
            raise NoConvergenceError(
                f"Lanczos solver converged for {got} of {k} pairs"
            ) from exc
        order = np.argsort(w)[::-1]
        w = w[order]
        v = v[:, order]
    return EigenPairs(values=np.asarray(w, dtype=float),
                      vectors=_fix_column_signs(np.ascontiguousarray(v)))


class SpdFactorization:
    """Opaque, reusable factorization of a symmetric positive definite matrix.

    The handle is read-only after construction: concurrent ``solve`` calls
    against one handle are safe.
    """

    def __init__(self, solver, dim, kind):
        self._solver = solver
        self.dim = dim
        self.kind = kind

    def solve(self, rhs):
        """Solve ``A x = rhs`` for a vector or a stack of columns."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"rhs has leading dimension {rhs.shape[0]}, expected {self.dim}"
            )
        return self._solver(rhs)


def factorize_spd(a, sym_tol=SYM_TOL, dense_max_dim=DENSE_CHOLESKY_MAX_DIM) -> SpdFactorization:
    """Factor an SPD matrix once for repeated solves.

    Below ``dense_max_dim`` a dense Cholesky is used; at and above it, a sparse
    LU in symmetric mode with a fill-reducing ordering and diagonal pivoting,
    whose pivots certify positive definiteness.
    """
    n = _require_square(a)
    fro = frobenius_norm(a)
    if _asymmetry(a) > sym_tol * max(fro, _TINY):
        raise NonSymmetricError(f"asymmetry exceeds {sym_tol:g} * ||A||_F")

    if n < dense_max_dim:
        ad = to_dense(a)
        try:
            cf = sla.cho_factor(ad, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise NotPositiveDefiniteError(str(exc)) from exc
        return SpdFactorization(
            lambda b: sla.cho_solve(cf, b, check_finite=False), n, "dense-cholesky"
        )

    acsc = to_csr(a).tocsc()
    try:
        lu = spla.splu(
            acsc,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True, "Equil": False},
        )
    except RuntimeError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc
    pivots = lu.U.diagonal()
    if not np.all(pivots > 0):
        raise NotPositiveDefiniteError("nonpositive pivot encountered")
    return SpdFactorization(lu.solve, n, "sparse-lu-symmetric")


def dense_solve(a, b, rel_tol=SOLVE_TOL) -> np.ndarray:
    """Solve the dense system ``A X = B`` and verify the residual.

    Raises ``SingularMatrixError`` (carrying a condition estimate) when the
    matrix is singular or the residual exceeds ``rel_tol * ||B||``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = _require_square(a)
    if b.shape[0] != n:
        raise DimensionMismatchError(f"rhs leading dimension {b.shape[0]} != {n}")
    try:
        x = sla.solve(a, b)
    except sla.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from exc
    resid = float(np.linalg.norm(a @ x - b))
    scale = float(np.linalg.norm(b))
    if resid > rel_tol * max(scale, _TINY):
        raise SingularMatrixError(
            f"residual {resid:.3e} exceeds {rel_tol:g} * ||B||",
            cond=float(np.linalg.cond(a)),
        )
    return x


def condition_estimate(a, iters=100, seed=0) -> float:
    """Estimate the 2-norm condition number within a factor of 10.

    Power iteration on ``A`` gives the largest singular value; power iteration
    against the factorized inverse gives the smallest.  Returns ``inf`` for
    singular input.
    """
    n = _require_square(a)
    sigma_max = spectral_norm_estimate(a, seed=seed)
    if sigma_max == 0.0:
        return float("inf")
    try:
        lu = spla.splu(to_csr(a).tocsc())
    except RuntimeError:
        return float("inf")
    rng = np.random.default_rng(seed + 1)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = lu.solve(v)
        z = lu.solve(w, trans="T")
        if not np.all(np.isfinite(z)):
            return float("inf")
        nz = float(np.linalg.norm(z))
        if nz == 0.0:
            return float("inf")
        lam = nz
        v = z / nz
    return float(sigma_max * np.sqrt(lam))


def save_matrix_market(path, a) -> None:
    """Write a sparse matrix in MatrixMarket coordinate format (ASCII, 1-based)."""
    sio.mmwrite(str(path), to_csr(a), precision=17)


def load_matrix_market(path):
    """Read a MatrixMarket file, returning a CSR array."""
    return to_csr(sio.mmread(str(path)))
