"""Shared latent anchor distributions, one Gaussian per label class.

Clients align their embedded class-conditional batches to these anchors;
the server averages client-proposed anchors (means and covariance
factors directly, which is one gradient step on the W2 barycenter
objective when the classifier coupling is off). By default covariances
are frozen at identity and only the means move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import Gaussian, grad_bures_wrt_factor

__all__ = [
    "AnchorSet",
    "RegressionAnchor",
    "init_anchors",
    "sample_anchor",
    "local_anchor_update",
    "barycenter_average",
    "regression_anchor_mean",
]


@dataclass
class AnchorSet:
    means: np.ndarray  # (C, k)
    factors: np.ndarray  # (C, k, k), Sigma_c = L_c @ L_c.T
    cov_learnable: bool = False

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.factors = np.asarray(self.factors, dtype=float)
        C, k = self.means.shape
        if self.factors.shape != (C, k, k):
            raise ValueError(
                f"factors shape {self.factors.shape} does not match ({C}, {k}, {k})"
            )

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]

    def covariance(self, c: int) -> np.ndarray:
        L = self.factors[c]
        return L @ L.T

    def gaussian(self, c: int) -> Gaussian:
        return Gaussian(self.means[c].copy(), self.factors[c].copy())

    def copy(self) -> "AnchorSet":
        return AnchorSet(self.means.copy(), self.factors.copy(), self.cov_learnable)

    def nbytes(self) -> int:
        return self.means.nbytes + self.factors.nbytes


def init_anchors(
    n_classes: int,
    latent_dim: int,
    rng,
    cov_learnable: bool = False,
    init_scale: float | None = None,
) -> AnchorSet:
    """Fresh anchors: standard-normal means scaled by ``sqrt(k)`` (so class
    targets start well separated), identity factors."""
    scale = np.sqrt(latent_dim) if init_scale is None else init_scale
    means = scale * rng.standard_normal((n_classes, latent_dim))
    factors = np.tile(np.eye(latent_dim), (n_classes, 1, 1))
    return AnchorSet(means, factors, cov_learnable)


def sample_anchor(anchors: AnchorSet, c: int, count: int, rng, return_noise=False):
    """Draw ``count`` reparameterized samples ``z = v_c + L_c xi``.

    With ``return_noise=True`` also returns the standard-normal draws
    ``xi``, which carry the pathwise gradient to the factor.
    """
    if not 0 <= c < anchors.n_classes:
        raise ValueError(f"unknown class {c}")
    if count < 1:
        raise ValueError("count must be >= 1")
    xi = rng.standard_normal((count, anchors.latent_dim))
    Z = anchors.means[c] + xi @ anchors.factors[c].T
    return (Z, xi) if return_noise else Z


def local_anchor_update(
    anchors: AnchorSet,
    empirical: dict[int, Gaussian],
    class_grads: dict[int, tuple[np.ndarray, np.ndarray]] | None,
    step: float,
    lam1: float,
    lam2: float,
) -> AnchorSet:
    """One local gradient step on the anchors a client holds.

    For each class with an empirical Gaussian: the mean moves along
    ``-2 lam1 (v_c - m_hat)`` plus any classifier-coupling gradient in
    ``class_grads``; the factor takes a Bures gradient step when
    covariances are learnable. Classes without an empirical Gaussian
    pass through unchanged.
    """
    out = anchors.copy()
    for c, g in empirical.items():
        if not 0 <= c < anchors.n_classes:
            raise ValueError(f"class {c} outside anchor set")
        if g.dim != anchors.latent_dim:
            raise ValueError("empirical Gaussian dimension mismatch")
        gv = np.zeros(anchors.latent_dim)
        gL = np.zeros((anchors.latent_dim, anchors.latent_dim))
        if class_grads is not None and c in class_grads:
            gv, gL = class_grads[c]
        out.means[c] = (
            anchors.means[c]
            - step * lam1 * 2.0 * (anchors.means[c] - g.mean)
            - step * lam2 * gv
        )
        if anchors.cov_learnable:
            out.factors[c] = (
                anchors.factors[c]
                - step * lam1 * grad_bures_wrt_factor(anchors.factors[c], g.cov)
                - step * lam2 * gL
            )
    return out


def barycenter_average(
    local_sets: list[AnchorSet], weights, total_clients: int
) -> AnchorSet:
    """Server-side anchor aggregation.

    Computes ``(b / |A|) * sum_i w_i  *`` (means, factors) over the
    active clients' proposals. With frozen identity covariances the
    factors are left at identity, so the whole pipeline reduces to
    weighted averaging of mean vectors.
    """
    if not local_sets:
        raise ValueError("empty active set")
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(local_sets),):
        raise ValueError("one weight per local anchor set required")
    ref = local_sets[0]
    for s in local_sets[1:]:
        if s.means.shape != ref.means.shape:
            raise ValueError("anchor set shapes differ across clients")
        if s.cov_learnable != ref.cov_learnable:
            raise ValueError("cov_learnable flag differs across clients")
    scale = total_clients / len(local_sets)
    means = scale * sum(w * s.means for w, s in zip(weights, local_sets))
    if ref.cov_learnable:
        factors = scale * sum(w * s.factors for w, s in zip(weights, local_sets))
    else:
        factors = ref.factors.copy()
    return AnchorSet(means, factors, ref.cov_learnable)


@dataclass(frozen=True)
class RegressionAnchor:
    """Anchor family for scalar regression: the target ``y`` indexes a
    unit-variance Gaussian whose mean interpolates two endpoints."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("endpoints must be vectors of equal dimension")
        if np.array_equal(a, b):
            raise ValueError("endpoints must differ")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


def regression_anchor_mean(anchor: RegressionAnchor, y: float) -> np.ndarray:
    """Mean of the anchor Gaussian for target ``y``: ``y*a + (1-y)*b``."""
    if not np.isfinite(y):
        raise ValueError("target must be finite")
    return y * anchor.a + (1.0 - y) * anchor.b
