"""Deterministic dense complex-matrix kernels.

Ordered SVD and Hermitian eigendecompositions with a fixed phase /
tie-breaking convention, plus Hermitian square roots and inverse square
roots.  Everything downstream (whitening, spectral design, oracle checks)
leans on the reproducibility guarantees here: the same input bits always
produce the same output bits.

Conventions
-----------
* Singular values / eigenvalues are returned in nonincreasing order.
* In every left singular vector (or eigenvector) the entry of largest
  magnitude is rotated to be real and nonnegative; the paired right
  singular vector absorbs the opposite rotation so the factorization is
  unchanged.
* Within a group of (numerically) tied singular values the columns are
  re-sorted in descending lexicographic order of the phase-fixed left
  vectors, interleaving real and imaginary parts.  The choice inside a
  degenerate subspace is implementation-defined but deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LinalgError",
    "NotHermitianError",
    "NotPSDError",
    "SingularMatrixError",
    "OrderedSVD",
    "OrderedHermitianEig",
    "svd_ordered",
    "eig_hermitian_ordered",
    "herm_sqrt",
    "herm_inv_sqrt",
]

# Relative tolerance for accepting an input as Hermitian.
HERMITIAN_RTOL = 1e-10
# Eigenvalues above -PSD_CLAMP_RTOL * ||m|| are clamped to zero; anything
# more negative is treated as a modeling bug, not noise.
PSD_CLAMP_RTOL = 1e-10
# Minimum eigenvalue ratio for inverse square roots.
INV_COND_RTOL = 1e-12
# Relative gap below which singular values / eigenvalues count as tied.
TIE_RTOL = 1e-12


class LinalgError(ValueError):
    """Base class for contract violations raised by this module."""


class NotHermitianError(LinalgError):
    pass


class NotPSDError(LinalgError):
    pass


class SingularMatrixError(LinalgError):
    pass


@dataclass(frozen=True)
class OrderedSVD:
    """Full SVD ``m = left @ Sigma @ right^H`` with ordered values.

    ``left`` is (m, m) unitary, ``right`` is (n, n) unitary and ``values``
    holds the min(m, n) singular values, nonincreasing.
    """

    left: np.ndarray
    values: np.ndarray
    right: np.ndarray

    def reconstruct(self) -> np.ndarray:
        rows = self.left.shape[0]
        cols = self.right.shape[0]
        sigma = np.zeros((rows, cols), dtype=np.complex128)
        k = self.values.shape[0]
        sigma[np.arange(k), np.arange(k)] = self.values
        return self.left @ sigma @ self.right.conj().T


@dataclass(frozen=True)
class OrderedHermitianEig:
    """Eigendecomposition ``m = vectors @ diag(values) @ vectors^H``.

    ``values`` are real and nonincreasing, ``vectors`` is unitary.
    """

    vectors: np.ndarray
    values: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.conj().T


def _as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.complex128)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a.copy()


def _as_hermitian(m, name: str = "matrix") -> np.ndarray:
    a = _as_matrix(m, name)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    scale = np.linalg.norm(a)
    skew = np.linalg.norm(a - a.conj().T)
    if skew > HERMITIAN_RTOL * max(scale, 1e-300):
        raise NotHermitianError(
            f"{name} is not Hermitian: ||m - m^H|| = {skew:.3e} "
            f"exceeds {HERMITIAN_RTOL:g} * ||m||"
        )
    return 0.5 * (a + a.conj().T)


def _phase_factor(col: np.ndarray) -> complex:
    """Conjugate phase that makes the dominant entry real nonnegative."""
    i = int(np.argmax(np.abs(col)))
    a = col[i]
    mag = abs(a)
    if mag == 0.0:
        return 1.0 + 0.0j
    return np.conj(a / mag)


def _lex_key(col: np.ndarray) -> tuple:
    key = np.empty(2 * col.shape[0])
    key[0::2] = col.real
    key[1::2] = col.imag
    return tuple(key.tolist())


def _tie_groups(values: np.ndarray, rtol: float = TIE_RTOL) -> list[slice]:
    """Slices of consecutive indices whose values are numerically tied."""
    n = values.shape[0]
    if n == 0:
        return []
    scale = max(float(np.max(np.abs(values))), 1e-300)
    groups = []
    start = 0
    for i in range(1, n):
        if abs(values[i - 1] - values[i]) > rtol * scale:
            groups.append(slice(start, i))
            start = i
    groups.append(slice(start, n))
    return groups


def _sort_tied_columns(values, *column_sets):
    """Reorder columns inside tied-value groups by descending lex key.

    The key is taken from the first column set; all sets are permuted
    identically.  Values themselves are left untouched so the ordering
    guarantee on them is never disturbed.
    """
    primary = column_sets[0]
    for grp in _tie_groups(values):
        width = grp.stop - grp.start
        if width < 2:
            continue
        order = sorted(
            range(grp.start, grp.stop),
            key=lambda j: _lex_key(primary[:, j]),
            reverse=True,
        )
        if list(order) != list(range(grp.start, grp.stop)):
            for cols in column_sets:
                cols[:, grp] = cols[:, order]


def svd_ordered(m) -> OrderedSVD:
    """Full SVD with nonincreasing singular values and fixed phases.

    Paired left/right columns are rotated together, so the factorization
    is exact; the unpaired null-space columns (when the input is not
    square) are phase-fixed individually.
    """
    a = _as_matrix(m)
    u, s, vh = np.linalg.svd(a, full_matrices=True)
    v = np.ascontiguousarray(vh.conj().T)
    u = np.ascontiguousarray(u)
    k = s.shape[0]
    for j in range(u.shape[1]):
        ph = _phase_factor(u[:, j])
        u[:, j] = u[:, j] * ph
        if j < k and j < v.shape[1]:
            v[:, j] = v[:, j] * ph
    for j in range(k, v.shape[1]):
        v[:, j] = v[:, j] * _phase_factor(v[:, j])
    _sort_tied_columns(s, u[:, :k], v[:, :k])
    return OrderedSVD(left=u, values=s, right=v)


def eig_hermitian_ordered(m) -> OrderedHermitianEig:
    """Eigendecomposition of a Hermitian matrix, values nonincreasing.

    The input must be Hermitian within ``HERMITIAN_RTOL`` (it is
    symmetrized internally); the same phase and tie conventions as
    :func:`svd_ordered` apply.
    """
    h = _as_hermitian(m)
    w, q = np.linalg.eigh(h)
    w = np.ascontiguousarray(w[::-1])
    q = np.ascontiguousarray(q[:, ::-1])
    for j in range(q.shape[1]):
        q[:, j] = q[:, j] * _phase_factor(q[:, j])
    _sort_tied_columns(w, q)
    return OrderedHermitianEig(vectors=q, values=w)


def herm_sqrt(m) -> np.ndarray:
    """Hermitian square root S of a PSD matrix, S @ S = m.

    Eigenvalues in [-PSD_CLAMP_RTOL * ||m||, 0) are clamped to zero;
    anything more negative raises :class:`NotPSDError`.
    """
    h = _as_hermitian(m)
    w, q = np.linalg.eigh(h)
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    if w.size and w[0] < -PSD_CLAMP_RTOL * scale:
        raise NotPSDError(
            f"matrix is not PSD: min eigenvalue {w[0]:.3e} "
            f"< -{PSD_CLAMP_RTOL:g} * ||m||"
        )
    root = (q * np.sqrt(np.clip(w, 0.0, None))) @ q.conj().T
    return 0.5 * (root + root.conj().T)


def herm_inv_sqrt(m) -> np.ndarray:
    """Hermitian inverse square root R of a PD matrix, R @ m @ R = I.

    Raises :class:`SingularMatrixError` when the smallest eigenvalue is
    not above ``INV_COND_RTOL`` times the largest.
    """
    h = _as_hermitian(m)
    w, q = np.linalg.eigh(h)
    wmax = float(w[-1]) if w.size else 0.0
    if wmax <= 0.0 or w[0] <= INV_COND_RTOL * wmax:
        raise SingularMatrixError(
            f"matrix is singular or too ill-conditioned for an inverse "
            f"square root (eigenvalue range [{w[0]:.3e}, {wmax:.3e}])"
        )
    root = (q / np.sqrt(w)) @ q.conj().T
    return 0.5 * (root + root.conj().T)
