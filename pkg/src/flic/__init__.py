"""Personalized federated learning over heterogeneous feature spaces.

Clients whose raw features live in spaces of different dimension learn
private embeddings into a shared latent space by aligning their
class-conditional distributions with learnable Gaussian anchors
(closed-form W2), while a shared representation layer and per-client
heads are trained FedRep-style under partial participation.
"""

from .anchors import (
    AnchorSet,
    RegressionAnchor,
    barycenter_average,
    init_anchors,
    local_anchor_update,
    regression_anchor_mean,
    sample_anchor,
)
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .datagen import ClientDataset, ToyDatasetSpec, gen_toy_lm, gen_toy_nf
from .federation import (
    ClientState,
    DivergenceError,
    GlobalState,
    MessageLog,
    RoundConfig,
    aggregate_alpha,
    client_local_round,
    evaluate,
    local_baseline,
    onboard_new_client,
    run_training,
    select_active_clients,
)
from .gaussian import (
    Gaussian,
    bures_sq,
    empirical_gaussian,
    grad_bures_wrt_factor,
    matrix_sqrt_psd,
    w2_sq_gaussians,
)
from .nets import AdamState, Mlp, adam_step, alignment_loss_grad, backward, cross_entropy, forward
from .theory import (
    TheoryConfig,
    fedrep_linear_round,
    init_A0,
    make_instance,
    oracle_phi_star,
    phi_hat,
    principal_angle_dist,
    run_theory_experiment,
)

__version__ = "0.1.0"
