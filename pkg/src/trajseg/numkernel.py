"""Dense linear-algebra kernels used by the losses and baselines.

Everything here is a pure function of float64 arrays.  The kernels are
deliberately small: a compact SVD with a fixed sign convention, truncated
reconstruction, a ridge-stabilised least-squares solve, a symmetric
eigendecomposition, and the sum/gradient of the trailing singular values.
The last pair is the workhorse of the trajectory grouping loss: the
gradient touches only the singular values, never the singular vectors, so
it stays finite as matrices become rank deficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, RangeError

__all__ = [
    "SvdFactors",
    "svd",
    "truncate",
    "lstsq",
    "sym_eig",
    "tail_singular_sum",
    "tail_singular_grad",
]


def as_matrix(a, name="matrix"):
    """Validate and convert ``a`` to a finite 2-d float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(
            f"{name} must be 2-d with at least one row and column, got shape {a.shape}"
        )
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SvdFactors:
    """Compact SVD ``A = u @ diag(sigma) @ v.T``.

    u : (m, q) column-orthonormal left factors
    sigma : (q,) singular values, descending and nonnegative
    v : (n, q) column-orthonormal right factors, with q = min(m, n)
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank_bound(self) -> int:
        return self.sigma.size


def svd(a) -> SvdFactors:
    """Compact singular value decomposition with a fixed sign convention.

    The first entry of each left singular vector that is meaningfully
    nonzero (|entry| > 1e-12 times the column max) is made nonnegative,
    flipping the matching right vector with it.  This pins an otherwise
    arbitrary sign choice so that repeated runs produce identical factors.

    Raises
    ------
    InvalidInputError
        If ``a`` contains non-finite entries or is not 2-d.
    """
    a = as_matrix(a)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    v = vt.T.copy()
    u = u.copy()
    for j in range(s.size):
        col = u[:, j]
        amax = np.abs(col).max()
        if amax == 0.0:
            continue
        lead = np.flatnonzero(np.abs(col) > 1e-12 * amax)[0]
        if col[lead] < 0.0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    return SvdFactors(u=u, sigma=s, v=v)


def truncate(f: SvdFactors, r: int) -> np.ndarray:
    """Rank-``r`` reconstruction from SVD factors.

    Keeps the ``r`` leading singular triples; ``r = 0`` yields the zero
    matrix.  ``r`` beyond the number of factors is a RangeError.
    """
    q = f.sigma.size
    if not 0 <= r <= q:
        raise RangeError(f"truncation rank {r} outside [0, {q}]")
    m = f.u.shape[0]
    n = f.v.shape[0]
    if r == 0:
        return np.zeros((m, n))
    return (f.u[:, :r] * f.sigma[:r]) @ f.v[:, :r].T


def lstsq(e, f) -> np.ndarray:
    """Least squares ``argmin_theta || e @ theta - f ||_F``.

    Solved through ridge-regularised normal equations
    ``(e.T e + eps*I) theta = e.T f`` with ``eps = 1e-8 * trace(e.T e) / p``,
    which keeps rank-deficient designs well posed (segments whose soft mask
    is nearly empty produce nearly-zero design matrices).  An exactly zero
    design returns the zero solution.

    Parameters
    ----------
    e : (m, p) design matrix
    f : (m, c) targets

    Returns
    -------
    (p, c) coefficient matrix.
    """
    e = as_matrix(e, "design")
    f = as_matrix(f, "target")
    if e.shape[0] != f.shape[0]:
        raise InvalidInputError(
            f"design has {e.shape[0]} rows but target has {f.shape[0]}"
        )
    p = e.shape[1]
    gram = e.T @ e
    trace = float(np.trace(gram))
    if trace == 0.0:
        return np.zeros((p, f.shape[1]))
    eps = 1e-8 * trace / p
    return np.linalg.solve(gram + eps * np.eye(p), e.T @ f)


def sym_eig(s):
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as orthonormal columns).
    Asymmetry beyond 1e-10 in max norm is rejected.
    """
    s = as_matrix(s)
    if s.shape[0] != s.shape[1]:
        raise InvalidInputError(f"matrix must be square, got {s.shape}")
    if np.abs(s - s.T).max() > 1e-10:
        raise InvalidInputError("matrix is not symmetric within 1e-10")
    w, v = np.linalg.eigh(s)
    return w, v


def tail_singular_sum(a, r: int) -> float:
    """Sum of the r-th and all later singular values of ``a`` (1-based r).

    Driving this to zero pushes ``a`` toward rank r-1 or lower.
    """
    a = as_matrix(a)
    q = min(a.shape)
    if not 1 <= r <= q:
        raise RangeError(f"rank index {r} outside [1, {q}]")
    s = np.linalg.svd(a, compute_uv=False)
    return float(s[r - 1 :].sum())


def tail_singular_grad(a, r: int) -> np.ndarray:
    """Gradient of :func:`tail_singular_sum` with respect to ``a``.

    Equals the sum of outer products ``u_i v_i.T`` over the trailing
    singular triples i >= r.  When singular values coincide or vanish the
    result is one valid subgradient (the factor columns are used as
    computed, including triples with singular values below 1e-12 times the
    leading one).
    """
    f = svd(a)
    q = f.sigma.size
    if not 1 <= r <= q:
        raise RangeError(f"rank index {r} outside [1, {q}]")
    return f.u[:, r - 1 :] @ f.v[:, r - 1 :].T
