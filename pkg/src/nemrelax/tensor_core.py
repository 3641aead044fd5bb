"""Small dense tensor algebra for 2x2 and 3x3 matrices.

All functions accept a single matrix or a stack of matrices with the
matrix in the last two axes, so ``F`` may have shape ``(n, n)`` or
``(..., n, n)``.
"""

import numpy as np

__all__ = [
    "Director",
    "as_mat",
    "det",
    "cof",
    "minors",
    "minors_without_det",
    "minors_dim",
    "step_tensor",
    "projection",
    "skew",
]

DIRECTOR_MIN_NORM = 1e-8


def as_mat(F):
    """Return ``F`` as a float array of 2x2 or 3x3 matrices.

    Raises
    ------
    ValueError
        If the trailing axes are not square of size 2 or 3, or if any
        entry is not finite.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim < 2 or F.shape[-1] != F.shape[-2] or F.shape[-1] not in (2, 3):
        raise ValueError(f"expected (..., n, n) with n in (2, 3), got {F.shape}")
    if not np.all(np.isfinite(F)):
        raise ValueError("matrix entries must be finite")
    return F


class Director:
    """Unit vector in R^2 or R^3.

    The input is renormalized on construction. Vectors shorter than
    ``1e-8`` are rejected because their direction is meaningless.

    Parameters
    ----------
    v : array_like
        Vector of length 2 or 3.
    """

    __slots__ = ("_v",)

    def __init__(self, v):
        v = np.array(v, dtype=float).reshape(-1)
        if v.size not in (2, 3):
            raise ValueError("director must have 2 or 3 components")
        norm = np.linalg.norm(v)
        if not np.isfinite(norm) or norm < DIRECTOR_MIN_NORM:
            raise ValueError(f"cannot normalize vector of norm {norm}")
        v = v / norm
        v.setflags(write=False)
        self._v = v

    @property
    def components(self):
        return self._v

    @property
    def dim(self):
        return self._v.size

    def __array__(self, dtype=None, copy=None):
        return self._v.astype(dtype) if dtype is not None else self._v.copy()

    def __neg__(self):
        return Director(-self._v)

    def __eq__(self, other):
        return isinstance(other, Director) and np.array_equal(self._v, other._v)

    def __hash__(self):
        return hash(self._v.tobytes())

    def __repr__(self):
        return f"Director({self._v.tolist()})"


def _vec(n):
    if isinstance(n, Director):
        return n.components
    return np.asarray(n, dtype=float)


def det(F):
    """Determinant by the closed-form cofactor expansion."""
    F = np.asarray(F, dtype=float)
    if F.shape[-1] == 2:
        return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    C = cof(F)
    return np.einsum("...j,...j->...", F[..., 0, :], C[..., 0, :])


def cof(F):
    """Cofactor matrix, the transpose of the adjugate.

    ``F @ cof(F).T == det(F) * I``.
    """
    F = np.asarray(F, dtype=float)
    C = np.empty_like(F)
    if F.shape[-1] == 2:
        C[..., 0, 0] = F[..., 1, 1]
        C[..., 0, 1] = -F[..., 1, 0]
        C[..., 1, 0] = -F[..., 0, 1]
        C[..., 1, 1] = F[..., 0, 0]
        return C
    for i in range(3):
        i1, i2 = (i + 1) % 3, (i + 2) % 3
        for j in range(3):
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            C[..., i, j] = F[..., i1, j1] * F[..., i2, j2] - F[..., i1, j2] * F[..., i2, j1]
    return C


def minors_dim(n):
    """Length of the minors vector for ``n x n`` matrices."""
    return {2: 5, 3: 19}[n]


def minors_without_det(F):
    """Minors of order below ``n``: entries of F, then (n = 3) of cof F."""
    F = np.asarray(F, dtype=float)
    n = F.shape[-1]
    flat = F.reshape(F.shape[:-2] + (n * n,))
    if n == 2:
        return flat.copy()
    C = cof(F).reshape(F.shape[:-2] + (9,))
    return np.concatenate([flat, C], axis=-1)


def minors(F):
    """All minors of F in a fixed order with the determinant last.

    For 2x2 matrices this is ``(F11, F12, F21, F22, det F)``; for 3x3 it
    is the nine entries of F row by row, the nine entries of cof F row
    by row, then ``det F``.
    """
    F = np.asarray(F, dtype=float)
    m0 = minors_without_det(F)
    return np.concatenate([m0, det(F)[..., None]], axis=-1)


def step_tensor(n, alpha):
    """Uniaxial step tensor ``alpha**-1 n n^T + sqrt(alpha) (I - n n^T)``.

    Parameters
    ----------
    n : Director or array_like
        Unit vector (or stack of unit vectors in the last axis).
    alpha : float
        Positive order parameter.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    v = _vec(n)
    nn = v[..., :, None] * v[..., None, :]
    eye = np.eye(v.shape[-1])
    return nn / alpha + np.sqrt(alpha) * (eye - nn)


def projection(z):
    """Orthogonal projection ``I - z z^T`` onto the tangent space at z."""
    v = _vec(z)
    return np.eye(v.shape[-1]) - v[..., :, None] * v[..., None, :]


def skew(w):
    """Cross-product matrix ``[w]_x`` with ``[w]_x v = w x v``."""
    w = np.asarray(w, dtype=float)
    S = np.zeros(w.shape[:-1] + (3, 3))
    S[..., 0, 1] = -w[..., 2]
    S[..., 0, 2] = w[..., 1]
    S[..., 1, 0] = w[..., 2]
    S[..., 1, 2] = -w[..., 0]
    S[..., 2, 0] = -w[..., 1]
    S[..., 2, 1] = w[..., 0]
    return S
