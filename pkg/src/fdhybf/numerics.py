"""
Dense complex-matrix primitives shared by the solvers.

Everything here is a pure function of its arguments. The generalized
dominant eigenvector (GDE) routine whitens the pencil with a Cholesky
factor of the right-hand matrix and solves an ordinary Hermitian
eigenproblem, which keeps it easy to check against a dense QZ solver.
"""
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NotPositiveDefinite

__all__ = [
    "HermitianPencil", "GDEResult", "hermitize", "cholesky_factor", "gde",
    "positive_part", "rediagonalize", "vec", "unvec", "lndet_hpd", "inv_hpd",
]

COND_LIMIT = 1e12
REG_EPS = 1e-10
EIG_FLOOR = 1e-12
HERMITIAN_RTOL = 1e-12


def hermitize(a):
    """Return the Hermitian part ``(a + a^H) / 2``."""
    a = np.asarray(a)
    return 0.5 * (a + a.conj().T)


def _check_square(a, name="matrix"):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")


class HermitianPencil(NamedTuple):
    """A pair ``(a, b)`` with ``a`` Hermitian PSD and ``b`` Hermitian PD."""

    a: np.ndarray
    b: np.ndarray

    @classmethod
    def make(cls, a, b):
        a = np.asarray(a, dtype=complex)
        b = np.asarray(b, dtype=complex)
        _check_square(a, "a")
        _check_square(b, "b")
        if a.shape != b.shape:
            raise DimensionMismatch(f"pencil shapes differ: {a.shape} vs {b.shape}")
        for name, m in (("a", a), ("b", b)):
            scale = max(np.linalg.norm(m), 1e-300)
            if np.linalg.norm(m - m.conj().T) > HERMITIAN_RTOL * scale:
                raise DimensionMismatch(f"pencil matrix {name} is not Hermitian")
        return cls(hermitize(a), hermitize(b))

    @property
    def n(self):
        return self.a.shape[0]


def _try_cholesky(a):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None


def cholesky_factor(a, return_regularized=False):
    """
    Lower-triangular ``L`` with ``L @ L^H = a``.

    When the factorization fails, or the condition number estimated from
    the diagonal of ``L`` exceeds ``COND_LIMIT``, the matrix is loaded with
    ``REG_EPS * trace(a) / n`` on the diagonal and factored again.

    Parameters
    ----------
    a : ndarray, shape (n, n)
        Hermitian matrix, expected positive definite.
    return_regularized : bool
        Also return a flag telling whether diagonal loading was applied.

    Raises
    ------
    NotPositiveDefinite
        If the regularized matrix still has a non-positive leading minor.
    """
    a = np.asarray(a, dtype=complex)
    _check_square(a)
    n = a.shape[0]
    a = hermitize(a)
    L = _try_cholesky(a)
    regularized = False
    if L is not None:
        diag = np.abs(np.diag(L))
        if diag.min() <= 0 or (diag.max() / diag.min()) ** 2 > COND_LIMIT:
            L = None
    if L is None:
        regularized = True
        tr = np.real(np.trace(a))
        load = REG_EPS * tr / n if tr > 0 else REG_EPS
        L = _try_cholesky(a + load * np.eye(n))
        if L is None:
            raise NotPositiveDefinite("matrix is not positive definite after regularization")
    if return_regularized:
        return L, regularized
    return L


def _fix_phase(vectors):
    # Largest-magnitude entry of every column made real-positive; argmax
    # picks the lowest index on ties.
    idx = np.argmax(np.abs(vectors), axis=0)
    pivots = vectors[idx, np.arange(vectors.shape[1])]
    mags = np.abs(pivots)
    mags[mags == 0] = 1.0
    return vectors * (np.conj(pivots) / mags)[np.newaxis, :]


class GDEResult(NamedTuple):
    vectors: np.ndarray
    values: np.ndarray
    degenerate: bool
    regularized: bool


def gde(a, b, d=None):
    """
    The ``d`` generalized dominant eigenvectors of the pencil ``(a, b)``.

    Solves ``a v = lam b v`` for the ``d`` largest ``lam``. Columns are
    scaled to unit Euclidean norm and their phase is fixed so that the
    largest-magnitude entry is real positive.

    Parameters
    ----------
    a : ndarray, shape (n, n) or HermitianPencil
        Hermitian PSD matrix, or a whole pencil (then ``b`` is the count).
    b : ndarray, shape (n, n)
        Hermitian PD matrix (diagonally loaded if ill-conditioned).
    d : int
        Number of eigenvectors, ``1 <= d <= n``.

    Returns
    -------
    GDEResult
        ``vectors`` (n, d), ``values`` (d,) in descending order, and flags
        ``degenerate`` (fewer than ``d`` eigenvalues above ``EIG_FLOOR``;
        the trailing columns then span part of the null space of ``a``)
        and ``regularized``.
    """
    if isinstance(a, HermitianPencil):
        a, b, d = a.a, a.b, b
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    _check_square(a, "a")
    _check_square(b, "b")
    n = a.shape[0]
    if b.shape != (n, n):
        raise DimensionMismatch(f"pencil shapes differ: {a.shape} vs {b.shape}")
    if not 1 <= d <= n:
        raise DimensionMismatch(f"need 1 <= d <= {n}, got d={d}")
    L, regularized = cholesky_factor(b, return_regularized=True)
    tmp = scipy.linalg.solve_triangular(L, hermitize(a), lower=True, check_finite=False)
    c = scipy.linalg.solve_triangular(L, tmp.conj().T, lower=True, check_finite=False)
    c = hermitize(c)
    vals, vecs = scipy.linalg.eigh(c, subset_by_index=[n - d, n - 1], check_finite=False)
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    v = scipy.linalg.solve_triangular(L.conj().T, vecs, lower=False, check_finite=False)
    v = v / np.linalg.norm(v, axis=0)[np.newaxis, :]
    v = _fix_phase(v)
    degenerate = bool(np.count_nonzero(vals > EIG_FLOOR) < d)
    return GDEResult(v, vals, degenerate, regularized)


def positive_part(x):
    """Clamp the eigenvalues of Hermitian ``x`` at zero, keep eigenvectors."""
    x = hermitize(np.asarray(x, dtype=complex))
    vals, vecs = np.linalg.eigh(x)
    if vals.min() >= 0:
        return x
    vals = np.maximum(vals, 0.0)
    return hermitize((vecs * vals) @ vecs.conj().T)


def rediagonalize(p, keep_order=False):
    """
    Diagonal singular-value matrix of the Hermitian PSD matrix ``p``.

    With ``keep_order`` the singular values are handed out in the rank
    order of ``p``'s own diagonal, so an already-diagonal input comes back
    unchanged and each stream keeps its share of the power.
    """
    p = np.asarray(p)
    _check_square(p)
    s = np.linalg.svd(p, compute_uv=False)
    if not keep_order:
        return np.diag(s)
    order = np.argsort(-np.real(np.diag(p)), kind="stable")
    out = np.empty_like(s)
    out[order] = s
    return np.diag(out)


def vec(m):
    """Stack the columns of ``m`` into one vector (column-major)."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise DimensionMismatch("vec expects a 2-D array")
    return m.reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size != rows * cols:
        raise DimensionMismatch(f"cannot reshape length {v.size} into {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def lndet_hpd(a):
    """Natural log-determinant of a Hermitian PD matrix via Cholesky."""
    L = cholesky_factor(a)
    return 2.0 * float(np.sum(np.log(np.real(np.diag(L)))))


def inv_hpd(a):
    """Inverse of a Hermitian PD matrix, returned exactly Hermitian."""
    L = cholesky_factor(a)
    n = L.shape[0]
    linv = scipy.linalg.solve_triangular(L, np.eye(n, dtype=complex), lower=True)
    return hermitize(linv.conj().T @ linv)
