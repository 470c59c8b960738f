"""Linear-regression harness verifying subspace recovery.

Setup: client i draws raw features from its own Gaussian N(m_i, Sigma_i)
in its own dimension; scalar labels come from an oracle low-rank model
applied to whitened features. The whitening map that sends N(m_i,
Sigma_i) to N(0, I_k) on the top-k eigendirections is affine and known
in closed form, but only up to a per-coordinate sign flip — so the
estimated embedding equals the oracle one up to a fixed diagonal
+-1 matrix Q. Alternating rounds of exact per-client head solves and
averaged one-step representation updates (with QR re-orthonormalization)
then recover the oracle column space QA* at a geometric rate, measured
with the principal angle distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TheoryConfig",
    "TheoryInstance",
    "make_instance",
    "oracle_phi_star",
    "phi_hat",
    "init_A0",
    "fedrep_linear_round",
    "principal_angle_dist",
    "run_theory_experiment",
    "solve_head",
]

_TAG_INSTANCE = 21
_TAG_SELECT = 22
_EIG_FLOOR = 1e-12


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def _random_orthonormal(rng, rows: int, cols: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((rows, cols)))
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s


@dataclass(frozen=True)
class TheoryConfig:
    clients: int = 20
    samples_per_client: int = 500
    test_samples: int = 200
    latent_dim: int = 5  # k
    head_dim: int = 3  # d
    raw_dim_range: tuple[int, int] = (8, 16)
    participation: float = 1.0
    rounds: int = 100
    step_size: float = 0.05
    subset_samples: int = 50  # subsets probed for the step-size cap
    seed: int = 0

    def __post_init__(self):
        if self.head_dim > self.latent_dim:
            raise ValueError("head_dim must not exceed latent_dim")
        if self.raw_dim_range[0] < self.latent_dim:
            raise ValueError("raw dimensions must be at least latent_dim")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        active = int(np.floor(self.participation * self.clients))
        if active < self.head_dim:
            raise ValueError(
                "active set must contain at least head_dim clients so the "
                "selected heads can span the head space"
            )


@dataclass
class TheoryInstance:
    latent_dim: int
    head_dim: int
    means: list[np.ndarray]
    eig_vecs: list[np.ndarray]  # per client, columns sorted by decreasing eigenvalue
    eig_vals: list[np.ndarray]
    sign_star: np.ndarray  # diagonal of the oracle's +-1 matrix, shared
    sign_hat: np.ndarray  # diagonal of the estimate's +-1 matrix, shared
    A_star: np.ndarray  # (k, d), orthonormal columns
    betas_star: np.ndarray  # (b, d), rows of norm sqrt(d)
    X_train: list[np.ndarray]
    y_train: list[np.ndarray]
    X_test: list[np.ndarray]
    y_test: list[np.ndarray]
    step_size: float
    A: np.ndarray | None = None
    betas: np.ndarray | None = None

    @property
    def n_clients(self) -> int:
        return len(self.means)

    @property
    def Q(self) -> np.ndarray:
        """Diagonal of the sign indeterminacy between estimate and oracle."""
        return self.sign_hat * self.sign_star

    @property
    def QA_star(self) -> np.ndarray:
        return self.Q[:, None] * self.A_star


def _embed(inst: TheoryInstance, i: int, X, signs) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    k = inst.latent_dim
    if X.shape[1] != inst.means[i].size:
        raise ValueError(
            f"input dimension {X.shape[1]} does not match client {i}"
        )
    P_k = inst.eig_vecs[i][:, :k]
    vals = inst.eig_vals[i][:k]
    out = ((X - inst.means[i]) @ P_k) / np.sqrt(vals) * signs
    return out[0] if single else out


def oracle_phi_star(inst: TheoryInstance, i: int, X) -> np.ndarray:
    """The ground-truth whitening embedding of client i."""
    return _embed(inst, i, X, inst.sign_star)


def phi_hat(inst: TheoryInstance, i: int, X) -> np.ndarray:
    """The estimated embedding: same affine map with independent signs,
    so ``phi_hat(x) = Q @ oracle_phi_star(x)`` exactly."""
    return _embed(inst, i, X, inst.sign_hat)


def _sigma_max_sq_cap(betas_star, active_size, rng, n_subsets) -> float:
    """Largest squared singular value of B*/sqrt(|A|) over probed subsets."""
    b = betas_star.shape[0]
    worst = 0.0
    if active_size >= b:
        subsets = [np.arange(b)]
    else:
        subsets = [
            rng.choice(b, size=active_size, replace=False) for _ in range(n_subsets)
        ]
    for sel in subsets:
        s = np.linalg.svd(betas_star[sel] / np.sqrt(len(sel)), compute_uv=False)
        worst = max(worst, float(s[0] ** 2))
    return worst


def make_instance(config: TheoryConfig) -> TheoryInstance:
    rng = _stream(config.seed, _TAG_INSTANCE)
    k, d, b = config.latent_dim, config.head_dim, config.clients
    A_star = _random_orthonormal(rng, k, d)
    betas = rng.standard_normal((b, d))
    betas_star = np.sqrt(d) * betas / np.linalg.norm(betas, axis=1, keepdims=True)
    sign_star = rng.integers(0, 2, size=k) * 2.0 - 1.0
    sign_hat = rng.integers(0, 2, size=k) * 2.0 - 1.0

    means, eig_vecs, eig_vals = [], [], []
    X_train, y_train, X_test, y_test = [], [], [], []
    lo, hi = config.raw_dim_range
    for i in range(b):
        k_i = int(rng.integers(lo, hi + 1))
        m_i = rng.standard_normal(k_i)
        P_i = _random_orthonormal(rng, k_i, k_i)
        vals = np.sort(rng.uniform(0.5, 2.0, size=k_i))[::-1]
        if vals[k - 1] < _EIG_FLOOR:
            raise ValueError(f"client {i}: degenerate top-{k} spectrum")
        means.append(m_i)
        eig_vecs.append(P_i)
        eig_vals.append(vals)

        def draw(n):
            xi = rng.standard_normal((n, k_i))
            return m_i + (xi * np.sqrt(vals)) @ P_i.T

        X_train.append(draw(config.samples_per_client))
        X_test.append(draw(config.test_samples))

    inst = TheoryInstance(
        latent_dim=k,
        head_dim=d,
        means=means,
        eig_vecs=eig_vecs,
        eig_vals=eig_vals,
        sign_star=sign_star,
        sign_hat=sign_hat,
        A_star=A_star,
        betas_star=betas_star,
        X_train=X_train,
        y_train=[],
        X_test=X_test,
        y_test=[],
        step_size=config.step_size,
    )
    for i in range(b):
        w = A_star @ betas_star[i]
        inst.y_train.append(oracle_phi_star(inst, i, X_train[i]) @ w)
        inst.y_test.append(oracle_phi_star(inst, i, X_test[i]) @ w)

    active_size = max(1, int(np.floor(config.participation * b)))
    cap = _sigma_max_sq_cap(betas_star, active_size, rng, config.subset_samples)
    inst.step_size = min(config.step_size, 1.0 / (4.0 * cap))
    return inst


def init_A0(inst: TheoryInstance) -> np.ndarray:
    """Spectral initialization from label-weighted second moments.

    Each client contributes ``(1/n) sum_j y_j^2 phi_hat(x_j) phi_hat(x_j)^T``;
    the top-d eigenvectors of the client average seed the representation.
    """
    k = inst.latent_dim
    M = np.zeros((k, k))
    for i in range(inst.n_clients):
        Phi = phi_hat(inst, i, inst.X_train[i])
        w = inst.y_train[i] ** 2
        M += (Phi * w[:, None]).T @ Phi / Phi.shape[0]
    M /= inst.n_clients
    vals, vecs = np.linalg.eigh(M)
    d = inst.head_dim
    if vals[-d] <= _EIG_FLOOR * max(vals[-1], 1.0):
        raise ValueError("fewer than d numerically distinct dominant directions")
    A0 = vecs[:, -d:][:, ::-1]
    # fix eigenvector signs for determinism
    picks = np.argmax(np.abs(A0), axis=0)
    signs = np.sign(A0[picks, np.arange(d)])
    signs[signs == 0] = 1.0
    return A0 * signs


def solve_head(inst: TheoryInstance, i: int, A: np.ndarray) -> np.ndarray:
    """Exact least-squares head for client i at representation A
    (normal equations with a tiny diagonal jitter)."""
    E = phi_hat(inst, i, inst.X_train[i]) @ A
    G = E.T @ E + 1e-10 * np.eye(A.shape[1])
    return np.linalg.solve(G, E.T @ inst.y_train[i])


def fedrep_linear_round(inst: TheoryInstance, active) -> TheoryInstance:
    """One communication round: exact head solves, one averaged gradient
    step on the representation, QR re-orthonormalization (positive
    diagonal convention)."""
    if inst.A is None:
        raise ValueError("initialize inst.A (e.g. via init_A0) first")
    A = inst.A
    proposals = np.zeros_like(A)
    for i in sorted(int(x) for x in active):
        Phi = phi_hat(inst, i, inst.X_train[i])
        beta = solve_head(inst, i, A)
        inst.betas[i] = beta
        resid = inst.y_train[i] - (Phi @ A) @ beta
        grad = -(2.0 / Phi.shape[0]) * np.outer(Phi.T @ resid, beta)
        proposals += A - inst.step_size * grad
    A_bar = proposals / len(active)
    Qm, R = np.linalg.qr(A_bar)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    inst.A = Qm * s
    return inst


def principal_angle_dist(M, N) -> float:
    """Spectral-norm distance between the column spaces of M and N."""
    M = np.asarray(M, dtype=float)
    N = np.asarray(N, dtype=float)
    if M.shape != N.shape or M.ndim != 2:
        raise ValueError("arguments must be matrices of identical shape")
    k, d = M.shape
    M_hat = _orthonormalize(M)
    N_hat = _orthonormalize(N)
    if d == k:
        return 0.0
    # orthonormal basis of span(M)^perp from the full QR
    Q_full, _ = np.linalg.qr(M_hat, mode="complete")
    M_perp = Q_full[:, d:]
    val = float(np.linalg.norm(M_perp.T @ N_hat, 2))
    return min(val, 1.0)


def _orthonormalize(M: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(M)
    diag = np.abs(np.diag(R))
    if np.any(diag < 1e-10 * max(1.0, float(diag.max(initial=0.0)))):
        raise ValueError("matrix is rank deficient")
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s


def _test_mse(inst: TheoryInstance) -> float:
    errs = []
    for i in range(inst.n_clients):
        pred = phi_hat(inst, i, inst.X_test[i]) @ (inst.A @ inst.betas[i])
        errs.append(float(np.mean((pred - inst.y_test[i]) ** 2)))
    return float(np.mean(errs))


def run_theory_experiment(config: TheoryConfig):
    """Build an instance, run the alternating rounds, record the trace.

    Returns ``(instance, rows)`` with one row ``(t, dist, mse)`` per
    round plus the initial row, T+1 rows total. ``dist`` measures the
    principal angle between the current representation and the
    sign-corrected oracle one; ``mse`` is held-out prediction error.
    """
    inst = make_instance(config)
    inst.A = init_A0(inst)
    inst.betas = np.stack([solve_head(inst, i, inst.A) for i in range(inst.n_clients)])
    target = inst.QA_star
    rows = [(0, principal_angle_dist(inst.A, target), _test_mse(inst))]
    b = inst.n_clients
    size = max(1, int(np.floor(config.participation * b)))
    for t in range(1, config.rounds + 1):
        rng = _stream(config.seed, _TAG_SELECT, t)
        active = np.sort(rng.choice(b, size=size, replace=False))
        fedrep_linear_round(inst, active)
        rows.append((t, principal_angle_dist(inst.A, target), _test_mse(inst)))
    return inst, rows
