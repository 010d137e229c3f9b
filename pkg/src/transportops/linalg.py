"""Dense real linear-algebra kernels.

The matrix exponential here is computed by scaling-and-squaring with a
degree-13 Pade approximant; its Frechet (directional) derivative comes
from the block identity

    expm([[A, E], [0, A]]) = [[expm(A), L(A, E)], [0, expm(A)]],

and the adjoint of ``E -> L(A, E)`` is ``W -> L(A^T, W)``, which gives
closed-form gradients for losses built on ``expm(A) @ z``. Everything is
dense float64; every exported operation validates shapes and finiteness.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError, NumericalError

# Coefficients of the degree-13 Pade numerator for exp; the denominator
# uses the same coefficients with alternating signs. Normalized by the
# leading coefficient so the A = 0 case solves exactly.
_PADE13_RAW = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_PADE13_COEFFS = tuple(c / _PADE13_RAW[0] for c in _PADE13_RAW)

# Largest 1-norm for which the degree-13 approximant is accurate without
# scaling.
_THETA_13 = 5.371920351148152


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite float64 2-D array, validating as it goes."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def as_square_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = as_matrix(a, name)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionError(f"{name} must be a nonempty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def _pade13_uv(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b = _PADE13_COEFFS
    ident = np.eye(a.shape[0])
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    return u, v


def _expm_unchecked(a: np.ndarray) -> np.ndarray:
    norm = np.abs(a).sum(axis=0).max()
    squarings = 0
    if norm > _THETA_13:
        squarings = int(np.ceil(np.log2(norm / _THETA_13)))
        a = a * 2.0 ** -squarings
    u, v = _pade13_uv(a)
    result = np.linalg.solve(v - u, v + u)
    for _ in range(squarings):
        result = result @ result
    return result


def mat_expm(a) -> np.ndarray:
    """Matrix exponential of a square real matrix.

    Raises ``DimensionError`` for non-square input, ``DomainError`` for
    non-finite entries, and ``NumericalError`` if the result overflows.
    """
    arr = as_square_matrix(a, "mat_expm input")
    result = _expm_unchecked(arr)
    if not np.all(np.isfinite(result)):
        raise NumericalError("matrix exponential overflowed")
    return result


def expm_frechet(a, e) -> tuple[np.ndarray, np.ndarray]:
    """Matrix exponential of ``a`` together with its Frechet derivative at
    ``a`` in direction ``e``, via the doubled block matrix.

    Returns ``(expm(a), L(a, e))``.
    """
    arr = as_square_matrix(a, "expm_frechet matrix")
    dir_ = as_square_matrix(e, "expm_frechet direction")
    if arr.shape != dir_.shape:
        raise DimensionError(
            f"matrix and direction shapes differ: {arr.shape} vs {dir_.shape}")
    d = arr.shape[0]
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = arr
    block[:d, d:] = dir_
    block[d:, d:] = arr
    full = _expm_unchecked(block)
    if not np.all(np.isfinite(full)):
        raise NumericalError("matrix exponential overflowed")
    return full[:d, :d], full[:d, d:]


def expm_residual_grad(a, z0, z1) -> np.ndarray:
    """Gradient with respect to ``a`` of ``0.5 * ||expm(a) @ z0 - z1||^2``.

    Uses the adjoint identity: with residual ``r = expm(a) @ z0 - z1``,
    the gradient is ``L(a^T, r z0^T)``.
    """
    arr = as_square_matrix(a, "expm_residual_grad matrix")
    v0 = as_vector(z0, "z0")
    v1 = as_vector(z1, "z1")
    d = arr.shape[0]
    if v0.shape[0] != d or v1.shape[0] != d:
        raise DimensionError(
            f"vectors must have dimension {d}, got {v0.shape[0]} and {v1.shape[0]}")
    residual = mat_expm(arr) @ v0 - v1
    _, grad = expm_frechet(arr.T, np.outer(residual, v0))
    return grad
