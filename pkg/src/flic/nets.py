"""Minimal MLP stack with explicit reverse-mode gradients.

Forward/backward passes, softmax cross-entropy, the distribution
alignment loss (squared W2 to per-class anchors, differentiated through
the batch mean and covariance), and Adam. All arrays are float64; the
gradient of every path is pinned to central finite differences by the
test suite, so no approximation shortcuts are taken here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian import bures_sq, bures_sq_grad_cov, empirical_gaussian

__all__ = [
    "Layer",
    "Mlp",
    "AdamState",
    "init_mlp",
    "forward",
    "backward",
    "cross_entropy",
    "alignment_loss_grad",
    "adam_step",
    "build_embedding",
    "build_shared",
    "build_head",
]


def _leaky(z):
    return np.where(z > 0, z, 0.01 * z)


def _leaky_deriv(z):
    return np.where(z > 0, 1.0, 0.01)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATIONS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(float)),
    "leaky_relu": (_leaky, _leaky_deriv),
    "sigmoid": (_sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))),
}


@dataclass
class Layer:
    W: np.ndarray  # (d_in, d_out)
    b: np.ndarray  # (d_out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ValueError("layer weight/bias shapes inconsistent")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("layer parameters must be finite")


@dataclass
class Mlp:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[1] != nxt.W.shape[0]:
                raise ValueError("adjacent layer dimensions do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.W)
            out.append(layer.b)
        return out

    def set_params(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != 2 * len(self.layers):
            raise ValueError("parameter count mismatch")
        for i, layer in enumerate(self.layers):
            W, b = arrays[2 * i], arrays[2 * i + 1]
            if W.shape != layer.W.shape or b.shape != layer.b.shape:
                raise ValueError("parameter shape mismatch")
            layer.W = W
            layer.b = b

    def copy(self) -> "Mlp":
        return Mlp(
            [Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers]
        )

    def nbytes(self) -> int:
        return sum(p.nbytes for p in self.params())


def init_mlp(dims, activations, rng) -> Mlp:
    """Glorot-uniform weights (``+-sqrt(6/(fan_in+fan_out))``), zero biases."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for d_in, d_out, act in zip(dims, dims[1:], activations):
        bound = np.sqrt(6.0 / (d_in + d_out))
        W = rng.uniform(-bound, bound, size=(d_in, d_out))
        layers.append(Layer(W, np.zeros(d_out), act))
    return Mlp(layers)


def build_embedding(input_dim: int, latent_dim: int, hidden: int, rng) -> Mlp:
    """Per-client embedding: input -> hidden (ReLU) -> latent."""
    return init_mlp([input_dim, hidden, latent_dim], ["relu", "identity"], rng)


def build_shared(latent_dim: int, rng) -> Mlp:
    """Shared representation layer: one linear layer with LeakyReLU."""
    return init_mlp([latent_dim, latent_dim], ["leaky_relu"], rng)


def build_head(latent_dim: int, n_classes: int, rng) -> Mlp:
    """Personal classifier head: a single linear layer producing logits."""
    return init_mlp([latent_dim, n_classes], ["identity"], rng)


def forward(mlp: Mlp, X):
    """Run the network on a batch.

    Returns ``(output, cache)``; the cache holds per-layer inputs and
    pre-activations, enough for :func:`backward`.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != mlp.input_dim:
        raise ValueError(
            f"batch shape {X.shape} incompatible with input dim {mlp.input_dim}"
        )
    cache = []
    A = X
    for layer in mlp.layers:
        Z = A @ layer.W + layer.b
        cache.append((A, Z))
        A = ACTIVATIONS[layer.activation][0](Z)
    return A, cache


def backward(mlp: Mlp, cache, output_grad):
    """Reverse-mode gradients for a prior :func:`forward` call.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` matches
    ``mlp.params()`` order and ``input_grad`` is the gradient with
    respect to the batch itself (used to chain alignment losses through
    the embedding).
    """
    if len(cache) != len(mlp.layers):
        raise ValueError("cache does not match network depth")
    G = np.asarray(output_grad, dtype=float)
    if G.shape != (cache[-1][1].shape[0], mlp.output_dim):
        raise ValueError("output_grad shape mismatch")
    param_grads: list[np.ndarray | None] = [None] * (2 * len(mlp.layers))
    for idx in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[idx]
        A_in, Z = cache[idx]
        dZ = G * ACTIVATIONS[layer.activation][1](Z)
        param_grads[2 * idx] = A_in.T @ dZ
        param_grads[2 * idx + 1] = dZ.sum(axis=0)
        G = dZ @ layer.W.T
    return param_grads, G


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient wrt the logits."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    n, C = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be one id per row")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"label out of range [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def alignment_loss_grad(embedded_by_class, anchors, eps: float):
    """Sum of squared W2 distances from per-class batch Gaussians to anchors.

    Parameters
    ----------
    embedded_by_class : dict
        Maps a label class to its (n_c, k) slice of embedded points.
    anchors : AnchorSet
        Target Gaussians in the latent space.
    eps : float
        Covariance regularizer, must be positive so the empirical
        covariance is invertible for the gradient.

    Returns
    -------
    loss : float
    grads : dict mapping class -> (n_c, k) per-sample gradients
    """
    if eps <= 0:
        raise ValueError("eps must be positive for alignment gradients")
    total = 0.0
    grads = {}
    for c in sorted(embedded_by_class):
        H = np.asarray(embedded_by_class[c], dtype=float)
        if H.ndim != 2 or H.shape[0] < 1:
            raise ValueError(f"class {c} slice is empty")
        n_c = H.shape[0]
        g = empirical_gaussian(H, eps)
        v = anchors.means[c]
        sigma_anchor = anchors.covariance(c)
        diff = g.mean - v
        total += float(diff @ diff) + bures_sq(sigma_anchor, g.cov)
        G_cov = bures_sq_grad_cov(sigma_anchor, g.cov)
        # d mean-term / dx_j = 2 (m_hat - v) / n_c; the covariance term
        # chains through d Sigma_hat = (dx (x-m)^T + (x-m) dx^T) / n_c.
        grads[c] = (2.0 / n_c) * (diff + (H - g.mean) @ G_cov)
    return total, grads


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )

    def copy(self) -> "AdamState":
        return AdamState(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            t=self.t,
            m=[x.copy() for x in self.m],
            v=[x.copy() for x in self.v],
        )


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update.

    Returns the new parameter arrays; ``state`` is advanced in place
    (it is owned by a single worker).
    """
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("parameter/gradient count mismatch")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError("gradient shape mismatch")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out
