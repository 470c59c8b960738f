"""Closed-form Wasserstein-2 geometry between Gaussian measures.

The squared W2 distance between two Gaussians splits into a Euclidean
term on the means and a Bures term on the covariances,

    W2^2(N(m1, S1), N(m2, S2)) = ||m1 - m2||^2 + B^2(S1, S2),

with B^2(A, B) = tr(A) + tr(B) - 2 tr((A^{1/2} B A^{1/2})^{1/2}).

Covariances are carried around as factors ``L`` with ``Sigma = L @ L.T``
so that gradient steps on ``L`` preserve positive semi-definiteness.
Everything here is plain float64 numpy; matrices are small (latent
dimension <= 64), so symmetric eigendecomposition is used throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Gaussian",
    "matrix_sqrt_psd",
    "bures_sq",
    "bures_sq_grad_cov",
    "grad_bures_wrt_factor",
    "w2_sq_gaussians",
    "empirical_gaussian",
]

# Eigenvalues in [-PSD_CLAMP, 0) are treated as round-off and clamped to 0.
PSD_CLAMP = 1e-10
SYM_TOL = 1e-8


def _as_square(S, name: str) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ValueError(f"{name} contains non-finite entries")
    return S


def _check_symmetric(S: np.ndarray, name: str, tol: float = SYM_TOL) -> None:
    scale = max(1.0, float(np.abs(S).max()))
    if np.abs(S - S.T).max() > tol * scale:
        raise ValueError(f"{name} is not symmetric within tolerance {tol}")


def matrix_sqrt_psd(S) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Parameters
    ----------
    S : array-like, shape (k, k)
        Symmetric positive semi-definite matrix. Eigenvalues down to
        ``-1e-10`` (relative to the spectral scale) are attributed to
        round-off and clamped to zero; anything more negative is
        rejected.

    Returns
    -------
    ndarray, shape (k, k)
        Symmetric PSD matrix ``R`` with ``R @ R == S`` up to round-off.
    """
    S = _as_square(S, "S")
    _check_symmetric(S, "S")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    clamp = max(PSD_CLAMP, PSD_CLAMP * float(w[-1]) if w[-1] > 0 else PSD_CLAMP)
    if w[0] < -clamp:
        raise ValueError(f"matrix is not PSD: smallest eigenvalue {w[0]:.3e}")
    w = np.clip(w, 0.0, None)
    R = (V * np.sqrt(w)) @ V.T
    return 0.5 * (R + R.T)


def bures_sq(A, B) -> float:
    """Squared Bures distance between two symmetric PSD matrices.

    ``B^2(A, B) = tr(A) + tr(B) - 2 tr((A^{1/2} B A^{1/2})^{1/2})``,
    clamped at zero from below against round-off.
    """
    A = _as_square(A, "A")
    B = _as_square(B, "B")
    if A.shape != B.shape:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    RA = matrix_sqrt_psd(A)
    inner = RA @ B @ RA
    cross = np.trace(matrix_sqrt_psd(0.5 * (inner + inner.T)))
    val = float(np.trace(A) + np.trace(B) - 2.0 * cross)
    if not np.isfinite(val):
        raise ValueError("Bures distance is non-finite")
    return max(val, 0.0)


def _psd_power(S: np.ndarray, power: float, floor: float = 1e-14) -> np.ndarray:
    """S^power for symmetric PSD S, eigenvalues below `floor` rejected for
    negative powers."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    w = np.clip(w, 0.0, None)
    if power < 0 and w[0] <= floor:
        raise ValueError(
            "matrix is numerically singular; regularize before inverting"
        )
    return (V * w**power) @ V.T


def bures_sq_grad_cov(A, B) -> np.ndarray:
    """Gradient of ``bures_sq(A, B)`` with respect to its second argument.

    ``B`` must be positive definite. Returns the symmetric matrix

        I - B^{-1/2} (B^{1/2} A B^{1/2})^{1/2} B^{-1/2}.
    """
    A = _as_square(A, "A")
    B = _as_square(B, "B")
    if A.shape != B.shape:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    B_half = _psd_power(B, 0.5)
    B_minus_half = _psd_power(B, -0.5)
    mid = matrix_sqrt_psd(B_half @ A @ B_half)
    G = np.eye(A.shape[0]) - B_minus_half @ mid @ B_minus_half
    return 0.5 * (G + G.T)


def grad_bures_wrt_factor(L, B, eps: float = 0.0) -> np.ndarray:
    """Gradient of ``L -> bures_sq(L @ L.T + eps*I, B)``.

    The chain rule through the factorization gives ``2 G L`` where
    ``G = d bures_sq(A, B) / dA`` at ``A = L L^T + eps I``; ``A`` must be
    positive definite (pass ``eps > 0`` to regularize a singular factor).
    """
    L = _as_square(L, "L")
    B = _as_square(B, "B")
    if L.shape != B.shape:
        raise ValueError(f"dimension mismatch: {L.shape} vs {B.shape}")
    A = L @ L.T + eps * np.eye(L.shape[0])
    A_half = _psd_power(A, 0.5)
    A_minus_half = _psd_power(A, -0.5)
    mid = matrix_sqrt_psd(A_half @ B @ A_half)
    G = np.eye(A.shape[0]) - A_minus_half @ mid @ A_minus_half
    return (G + G.T) @ L


@dataclass(frozen=True)
class Gaussian:
    """A Gaussian measure stored as (mean, covariance factor).

    The covariance is ``Sigma = cov_factor @ cov_factor.T``, which is
    symmetric PSD by construction.
    """

    mean: np.ndarray
    cov_factor: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        L = np.asarray(self.cov_factor, dtype=float)
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        if L.shape != (mean.size, mean.size):
            raise ValueError(
                f"cov_factor shape {L.shape} does not match dimension {mean.size}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(L))):
            raise ValueError("Gaussian parameters must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", L)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T


def w2_sq_gaussians(g1: Gaussian, g2: Gaussian) -> float:
    """Squared Wasserstein-2 distance between two Gaussians."""
    if g1.dim != g2.dim:
        raise ValueError(f"dimension mismatch: {g1.dim} vs {g2.dim}")
    diff = g1.mean - g2.mean
    return float(diff @ diff) + bures_sq(g1.cov, g2.cov)


def empirical_gaussian(points, eps: float) -> Gaussian:
    """Fit a Gaussian to points by moment matching.

    Uses the population covariance (divide by n) regularized by
    ``eps * I``; the factor comes from a Cholesky decomposition, falling
    back to the symmetric eigen square root when the regularized
    covariance is still numerically singular (only possible at eps=0).
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need at least one point")
    if not np.all(np.isfinite(X)):
        raise ValueError("points contain non-finite values")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / X.shape[0] + eps * np.eye(X.shape[1])
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = matrix_sqrt_psd(cov)
    return Gaussian(mean=mean, cov_factor=L)
