"""Sum-to-zero coefficient geometry and simplex mappings.

Row distributions of the model (initial, transition, emission) are softmax
transforms of linear predictors. The predictor coefficients ``gamma`` live in
the sum-to-zero subspace (each column of ``gamma`` sums to zero across the
``dim`` outcomes), parameterized without redundancy through an orthonormal
basis ``Q`` of that subspace: ``gamma = Q @ eta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = [
    "SumToZeroBasis",
    "build_basis",
    "eta_to_gamma",
    "gamma_to_eta",
    "softmax",
    "gamma_from_target_probs",
]

#: Entries smaller than this are treated as zero when fixing column signs.
_SIGN_TOL = 1e-12

#: Largest tolerated column sum when projecting gamma back to eta.
_COLSUM_TOL = 1e-8


@dataclass(frozen=True)
class SumToZeroBasis:
    """Orthonormal basis of the sum-to-zero subspace of R^dim.

    Attributes
    ----------
    dim : int
        Number of outcomes (rows of gamma).
    q : np.ndarray, shape (dim, dim - 1)
        Columns are orthonormal and each sums to zero. The first entry of
        each column that is nonzero (beyond 1e-12) is positive, which pins
        the otherwise arbitrary column signs.
    """

    dim: int
    q: np.ndarray = field(repr=False)

    @classmethod
    def for_dim(cls, dim: int) -> "SumToZeroBasis":
        """Like :func:`build_basis` but also accepts the degenerate dim=1.

        A single-outcome distribution has no free coefficients; its basis
        matrix is (1, 0)-shaped and maps an empty eta to a zero gamma row.
        """
        if dim == 1:
            return cls(dim=1, q=np.zeros((1, 0)))
        return build_basis(dim)


def build_basis(dim: int) -> SumToZeroBasis:
    """Construct the orthonormal sum-to-zero basis for ``dim`` outcomes.

    The basis is the Q factor of a QR decomposition of the contrast matrix
    ``[I_{dim-1}; -1^T]`` whose columns span the sum-to-zero subspace, with
    column signs fixed so the first nonzero entry of each column is positive.

    Parameters
    ----------
    dim : int
        Number of outcomes; must be at least 2.

    Returns
    -------
    SumToZeroBasis
    """
    if dim < 2:
        raise ValidationError(f"basis dimension must be >= 2, got {dim}")
    contrast = np.vstack([np.eye(dim - 1), -np.ones((1, dim - 1))])
    q, _ = np.linalg.qr(contrast)
    for j in range(q.shape[1]):
        col = q[:, j]
        nonzero = np.nonzero(np.abs(col) > _SIGN_TOL)[0]
        if nonzero.size and col[nonzero[0]] < 0:
            q[:, j] = -col
    return SumToZeroBasis(dim=dim, q=q)


def eta_to_gamma(eta: np.ndarray, basis: SumToZeroBasis) -> np.ndarray:
    """Map unconstrained coefficients to the sum-to-zero representation.

    Parameters
    ----------
    eta : np.ndarray, shape (dim - 1, n_columns)
    basis : SumToZeroBasis

    Returns
    -------
    np.ndarray, shape (dim, n_columns)
        ``basis.q @ eta``; every column sums to zero and the map preserves
        the Frobenius norm.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.ndim != 2 or eta.shape[0] != basis.dim - 1:
        raise ValidationError(
            f"eta must have shape ({basis.dim - 1}, n_columns), got {eta.shape}"
        )
    return basis.q @ eta


def gamma_to_eta(gamma: np.ndarray, basis: SumToZeroBasis) -> np.ndarray:
    """Project sum-to-zero coefficients back to the unconstrained space.

    Parameters
    ----------
    gamma : np.ndarray, shape (dim, n_columns)
        Column sums must vanish to within 1e-8.
    basis : SumToZeroBasis

    Returns
    -------
    np.ndarray, shape (dim - 1, n_columns)
    """
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim != 2 or gamma.shape[0] != basis.dim:
        raise ValidationError(
            f"gamma must have shape ({basis.dim}, n_columns), got {gamma.shape}"
        )
    colsums = gamma.sum(axis=0)
    if colsums.size and np.max(np.abs(colsums)) > _COLSUM_TOL:
        raise ValidationError(
            "gamma columns must sum to zero; worst column sum is "
            f"{np.max(np.abs(colsums)):.3e}"
        )
    return basis.q.T @ gamma


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``.

    Subtracts the running maximum before exponentiating, so arbitrarily
    large or small predictors map to valid distributions.
    """
    x = np.asarray(x, dtype=float)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    expx = np.exp(shifted)
    return expx / np.sum(expx, axis=axis, keepdims=True)


def gamma_from_target_probs(probs: np.ndarray) -> np.ndarray:
    """Intercept column reproducing a target probability vector exactly.

    Returns ``log(p) - mean(log(p))``, the unique sum-to-zero vector whose
    softmax is ``p``. Used to aim intercepts at given probabilities, e.g.
    when seeding initial values at chosen transition-matrix diagonals.

    Parameters
    ----------
    probs : np.ndarray, shape (dim,)
        Strictly positive probabilities summing to one.

    Returns
    -------
    np.ndarray, shape (dim,)
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1:
        raise ValidationError(f"probs must be a vector, got shape {probs.shape}")
    if np.any(probs <= 0.0):
        raise ValidationError("target probabilities must be strictly positive")
    if abs(probs.sum() - 1.0) > _COLSUM_TOL:
        raise ValidationError(
            f"target probabilities must sum to 1, got {probs.sum():.12f}"
        )
    logp = np.log(probs)
    return logp - logp.mean()
