"""Dense linear-algebra kernels with explicit failure semantics.

Everything is float64. Factorizations that back stochastic objectives go
through :func:`cholesky_jitter`, which escalates a fixed jitter ladder and
records the epsilon that succeeded so callers can log it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dtrcon

from .errors import DimensionMismatch, FactorizationFailure

# Ladder of diagonal boosts tried in order. Kept small: anything beyond
# 1e-4 on unit-scale kernel matrices means the model, not the arithmetic,
# is broken.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)

# A rung only counts as a success when its factor will not poison downstream
# solves. Near-singular Gram matrices (coincident inducing points, huge
# lengthscales) factorize "successfully" while conditioned at ~1e15, and the
# K_ff - Q_ff cancellation then lands ~1e-6 negative. Triangular-solve
# roundoff is ~eps * cond(L) * scale, so a rung is accepted when either
#   (a) cond(L) is small enough that the roundoff sits inside the
#       negative-variance clamp window, or
#   (b) the rung's jitter lifts the true variance floor by ~eps_jitter,
#       dominating that roundoff a thousandfold.
FACTOR_COND_GATE = 3.5e4
JITTER_MARGIN = 1e3
_EPS = float(np.finfo(np.float64).eps)


@dataclass(frozen=True)
class CholeskyResult:
    """Lower-triangular factor plus the jitter that made it possible."""

    factor: np.ndarray
    jitter: float


def _as_square(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {mat.shape}")
    return mat


def cholesky_jitter(mat: np.ndarray, ladder: tuple[float, ...] = JITTER_LADDER) -> CholeskyResult:
    """Cholesky with escalating diagonal jitter.

    Returns L and the epsilon used, so that L @ L.T == mat + eps*I to
    factorization accuracy. A rung is accepted only if its factor passes the
    conditioning gate; if every factorizing rung fails the gate, the best
    conditioned one is returned rather than escalating to an error. Raises
    FactorizationFailure when every rung fails to factorize at all, with the
    attempted ladder in the message.
    """
    mat = _as_square(mat)
    if not np.all(np.isfinite(mat)):
        raise FactorizationFailure("matrix contains non-finite entries")
    n = mat.shape[0]
    if n == 0:
        return CholeskyResult(factor=mat.copy(), jitter=0.0)
    eye = np.eye(n)
    scale = float(np.max(np.diagonal(mat)))
    fallback: tuple[float, CholeskyResult] | None = None
    for eps in ladder:
        try:
            factor = np.linalg.cholesky(mat + eps * eye if eps else mat)
        except np.linalg.LinAlgError:
            continue
        rcond, info = dtrcon(factor, uplo=b"L")
        cond = 1.0 / rcond if info == 0 and rcond > 0 else np.inf
        result = CholeskyResult(factor=factor, jitter=float(eps))
        if cond <= FACTOR_COND_GATE or eps >= JITTER_MARGIN * _EPS * cond * scale:
            return result
        if fallback is None or cond < fallback[0]:
            fallback = (cond, result)
    if fallback is not None:
        return fallback[1]
    raise FactorizationFailure(
        f"cholesky failed at every jitter rung {ladder}; "
        "matrix is too indefinite to repair"
    )


def solve_lower(factor: np.ndarray, rhs: np.ndarray, trans: bool = False) -> np.ndarray:
    """Solve L x = rhs (or L.T x = rhs when trans) for lower-triangular L."""
    factor = _as_square(factor)
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != factor.shape[0]:
        raise DimensionMismatch(
            f"triangular solve: L is {factor.shape}, rhs leads with {rhs.shape}"
        )
    return solve_triangular(factor, rhs, lower=True, trans=1 if trans else 0)


def logdet_from_chol(factor: np.ndarray) -> float:
    """log det(M) = 2 * sum(log diag L) for M = L L.T."""
    factor = _as_square(factor)
    diag = np.diagonal(factor)
    if np.any(diag <= 0):
        raise FactorizationFailure("cholesky factor has a non-positive diagonal")
    return float(2.0 * np.sum(np.log(diag)))
