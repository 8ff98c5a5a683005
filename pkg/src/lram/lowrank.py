"""Shared-basis low-rank compression of matrix ensembles.

Given samples A_1..A_M of one N-by-N perturbation matrix, find a single
orthonormal basis (N-by-k) and per-sample coefficient matrices (k-by-N) so
that A_m is approximated by ``basis @ coeffs[m]`` with minimal summed squared
Frobenius error.  The optimal basis consists of the leading eigenvectors of
the accumulated Gram matrix ``sum_m A_m A_m^T``, and the optimal coefficients
are ``basis^T A_m``.  A two-sided alternating baseline and spectral
diagnostics (energy ratios, compression ratio) are included, plus binary and
MatrixMarket serialization of the factors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import numerics
from .errors import (
    ConfigRangeError,
    DimensionMismatchError,
    EmptyEnsembleError,
    ZeroEnsembleError,
)

_FACTORS_MAGIC = b"LRFB"
_FACTORS_VERSION = 1


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    """Shared orthonormal basis plus per-sample coefficient matrices.

    ``basis`` is N-by-k with orthonormal columns; ``coeffs[m]`` is k-by-N and
    the reconstruction of sample m is ``basis @ coeffs[m]``.
    """

    basis: np.ndarray
    coeffs: list[np.ndarray]
    rank: int
    ratio: float

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def num_samples(self) -> int:
        return len(self.coeffs)

    @property
    def stored_scalars(self) -> int:
        return int(self.basis.size) + int(sum(c.size for c in self.coeffs))

    def reconstruct(self, m: int) -> np.ndarray:
        return self.basis @ self.coeffs[m]


@dataclass(frozen=True, eq=False)
class GlramFactors:
    """Two-sided factorization with shared left/right bases and k-by-k cores."""

    left: np.ndarray
    right: np.ndarray
    cores: list[np.ndarray]
    iterations: int
    rmsre_history: list[float]


def _check_ensemble(ensemble) -> int:
    if len(ensemble) == 0:
        raise EmptyEnsembleError("ensemble has no members")
    first = ensemble[0]
    rows, cols = first.shape
    if rows != cols:
        raise DimensionMismatchError(f"ensemble members must be square, got {rows}x{cols}")
    for a in ensemble:
        if a.shape != (rows, cols):
            raise DimensionMismatchError("ensemble members differ in shape")
    return rows


def rank_from_ratio(ratio: float, dim: int) -> int:
    """Rank k = ceil(ratio * dim), clamped to [1, dim].

    A small slack keeps ratio = k/dim round-tripping to k despite floating
    point.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigRangeError(f"reduction ratio must lie in (0, 1], got {ratio}")
    return min(dim, max(1, math.ceil(ratio * dim - 1e-9)))


def ensemble_gram(ensemble) -> np.ndarray:
    """Accumulated Gram matrix ``sum_m A_m A_m^T`` in dense form.

    Dense accumulation is deliberate: the product densifies even for sparse
    inputs at the dimensions this library targets.
    """
    n = _check_ensemble(ensemble)
    gram = np.zeros((n, n))
    for a in ensemble:
        if sp.issparse(a):
            gram += (a @ a.T).toarray()
        else:
            ad = np.asarray(a, dtype=float)
            gram += ad @ ad.T
    return gram


def _sample_coeffs(basis: np.ndarray, a) -> np.ndarray:
    if sp.issparse(a):
        return np.asarray((a.T @ basis).T)
    return basis.T @ np.asarray(a, dtype=float)


def _compress_at(ensemble, rank: int, ratio: float) -> LowRankFactors:
    n = _check_ensemble(ensemble)
    if not 1 <= rank <= n:
        raise DimensionMismatchError(f"rank={rank} outside [1, {n}]")
    gram = ensemble_gram(ensemble)
    pairs = numerics.sym_eig_topk(gram, rank)
    basis = pairs.vectors
    coeffs = [_sample_coeffs(basis, a) for a in ensemble]
    return LowRankFactors(basis=basis, coeffs=coeffs, rank=rank, ratio=float(ratio))


def compress_rank(ensemble, rank: int) -> LowRankFactors:
    """Optimal shared-basis factorization at an explicit rank."""
    n = _check_ensemble(ensemble)
    return _compress_at(ensemble, rank, rank / n)


def compress(ensemble, ratio: float) -> LowRankFactors:
    """Optimal shared-basis factorization at reduction ratio ``ratio``.

    The rank is ``ceil(ratio * N)``.  Among all rank-k factorizations with a
    shared orthonormal left factor, the result minimizes
    ``sum_m ||A_m - basis @ coeffs[m]||_F^2``.
    """
    n = _check_ensemble(ensemble)
    return _compress_at(ensemble, rank_from_ratio(ratio, n), ratio)


def rmsre(ensemble, factors: LowRankFactors) -> float:
    """Root mean square reconstruction error of the factorization.

    sqrt( (1/M) * sum_m ||A_m - basis @ coeffs[m]||_F^2 ), computed by
    explicit reconstruction so it is valid for arbitrary (not only optimal)
    factors.
    """
    n = _check_ensemble(ensemble)
    if factors.basis.shape[0] != n or factors.num_samples != len(ensemble):
        raise DimensionMismatchError("factors do not match the ensemble")
    total = 0.0
    for a, c in zip(ensemble, factors.coeffs):
        diff = numerics.to_dense(a) - factors.basis @ c
        total += float(np.linalg.norm(diff, "fro")) ** 2
    return math.sqrt(total / len(ensemble))


def _descending_gram_eigenvalues(ensemble) -> np.ndarray:
    gram = ensemble_gram(ensemble)
    n = gram.shape[0]
    values = numerics.sym_eig_topk(gram, n).values
    return np.maximum(values, 0.0)


def energy_ratio_eigen(ensemble) -> list[tuple[int, float]]:
    """Energy curve e(k) from plain partial sums of the Gram eigenvalues.

    e(k) is non-decreasing and e(N) equals 1 exactly, since both partial and
    total sums come from the same accumulation.
    """
    values = _descending_gram_eigenvalues(ensemble)
    partial = np.cumsum(values)
    total = partial[-1]
    if total == 0.0:
        raise ZeroEnsembleError("all ensemble members are zero")
    return [(k + 1, float(partial[k] / total)) for k in range(values.shape[0])]


def energy_ratio_eigensq(ensemble) -> list[tuple[int, float]]:
    """Energy curve from squared Gram eigenvalues (alternative convention)."""
    values = _descending_gram_eigenvalues(ensemble) ** 2
    partial = np.cumsum(values)
    total = partial[-1]
    if total == 0.0:
        raise ZeroEnsembleError("all ensemble members are zero")
    return [(k + 1, float(partial[k] / total)) for k in range(values.shape[0])]


def energy_ratio(ensemble) -> list[tuple[int, float]]:
    """Default energy curve; plain eigenvalue partial sums."""
    return energy_ratio_eigen(ensemble)


def compression_ratio(dim: int, rank: int, num_samples: int) -> float:
    """Stored-scalar fraction (N*k + M*N*k) / (M*N*N) = (k/N) * (1 + 1/M)."""
    if dim < 1 or rank < 1 or num_samples < 1:
        raise ConfigRangeError("dim, rank and num_samples must be positive")
    if rank > dim:
        raise ConfigRangeError(f"rank={rank} exceeds dim={dim}")
    return (dim * rank + num_samples * dim * rank) / (num_samples * dim * dim)


def glram_compress(ensemble, rank: int, max_iters: int = 50,
                   rel_tol: float = 1e-10) -> GlramFactors:
    """Two-sided alternating factorization A_m ~ left @ cores[m] @ right^T.

    Starts from the first ``rank`` identity columns and alternates
    eigenvector updates of the right and left bases; the recorded
    reconstruction-error history is non-increasing.  Stops when the relative
    change drops below ``rel_tol`` or after ``max_iters`` iterations.
    """
    n = _check_ensemble(ensemble)
    if not 1 <= rank <= n:
        raise DimensionMismatchError(f"rank={rank} outside [1, {n}]")
    if max_iters < 1:
        raise ConfigRangeError("max_iters must be >= 1")

    dense = [numerics.to_dense(a) for a in ensemble]
    m_count = len(dense)

    left = np.eye(n)[:, :rank]
    right = None
    history: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        ar_gram = np.zeros((n, n))
        for a in dense:
            p = a.T @ left
            ar_gram += p @ p.T
        right = numerics.sym_eig_topk(ar_gram, rank).vectors

        al_gram = np.zeros((n, n))
        for a in dense:
            p = a @ right
            al_gram += p @ p.T
        left = numerics.sym_eig_topk(al_gram, rank).vectors

        total = 0.0
        for a in dense:
            recon = left @ (left.T @ a @ right) @ right.T
            total += float(np.linalg.norm(a - recon, "fro")) ** 2
        err = math.sqrt(total / m_count)
        history.append(err)
        iterations += 1
        if len(history) >= 2:
            prev = history[-2]
            if abs(prev - err) < rel_tol * max(err, 1e-300):
                break

    cores = [left.T @ a @ right for a in dense]
    return GlramFactors(left=left, right=right, cores=cores,
                        iterations=iterations, rmsre_history=history)


def glram_rmsre(ensemble, factors: GlramFactors) -> float:
    """Reconstruction error of a two-sided factorization, by explicit rebuild."""
    n = _check_ensemble(ensemble)
    if factors.left.shape[0] != n or len(factors.cores) != len(ensemble):
        raise DimensionMismatchError("factors do not match the ensemble")
    total = 0.0
    for a, core in zip(ensemble, factors.cores):
        diff = numerics.to_dense(a) - factors.left @ core @ factors.right.T
        total += float(np.linalg.norm(diff, "fro")) ** 2
    return math.sqrt(total / len(ensemble))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_factors(path, factors: LowRankFactors) -> None:
    """Write factors to a binary container.

    Layout: magic ``LRFB``, little-endian uint32 version, three little-endian
    uint64 fields (dim N, rank k, samples M), then the basis (N*k doubles,
    row-major) followed by each coefficient matrix (k*N doubles, row-major);
    all floats are little-endian 64-bit.
    """
    with open(path, "wb") as fh:
        fh.write(_FACTORS_MAGIC)
        fh.write(struct.pack("<I", _FACTORS_VERSION))
        fh.write(struct.pack("<QQQ", factors.dim, factors.rank, factors.num_samples))
        fh.write(np.ascontiguousarray(factors.basis, dtype="<f8").tobytes())
        for c in factors.coeffs:
            fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())


def load_factors(path) -> LowRankFactors:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FACTORS_MAGIC:
            raise ValueError(f"not a factor container: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _FACTORS_VERSION:
            raise ValueError(f"unsupported container version {version}")
        dim, rank, num_samples = struct.unpack("<QQQ", fh.read(24))
        basis = np.frombuffer(fh.read(8 * dim * rank), dtype="<f8").reshape(dim, rank)
        coeffs = []
        for _ in range(num_samples):
            c = np.frombuffer(fh.read(8 * rank * dim), dtype="<f8").reshape(rank, dim)
            coeffs.append(np.array(c))
    return LowRankFactors(basis=np.array(basis), coeffs=coeffs,
                          rank=int(rank), ratio=rank / dim)


def factors_to_matrix_market(directory, factors: LowRankFactors) -> list[str]:
    """Export the basis and each coefficient matrix as MatrixMarket files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    basis_path = directory / "basis.mtx"
    numerics.save_matrix_market(basis_path, sp.csr_array(factors.basis))
    written.append(str(basis_path))
    for m, c in enumerate(factors.coeffs):
        p = directory / f"coeffs_{m:04d}.mtx"
        numerics.save_matrix_market(p, sp.csr_array(c))
        written.append(str(p))
    return written
