"""Deterministic federated-learning simulator with variational Bayesian clients.

Three client families share one protocol: Gaussian mean-field posteriors
with a personal/localized-global split, a sparse spike-and-slab variant
with learned inclusion probabilities, and a clustered variant holding a
bank of global posteriors. A deterministic-weight averaging baseline and a
suite of closed-form-vs-numerical verification checks round out the
package.
"""

from .bnn import (
    Batch,
    Gradient,
    NetworkShape,
    finite_diff_grad,
    forward,
    grad_objective,
    init_point,
    init_sparse,
    init_variational,
    log_likelihood,
    objective_pfedbayes,
    objective_sfedbayes,
    predictive,
)
from .data import (
    PRESETS,
    LabeledDataset,
    PartitionSpec,
    load_idx,
    make_cluster_dataset,
    partition_noniid,
    synthetic_regression,
)
from .errors import ConfigurationError, FormatError, ProtocolError, UsageError
from .estimators import CFedBayes, FedAvg, PFedBayes, SFedBayes
from .fed_protocol import (
    ClientState,
    LocalSpec,
    RoundPlan,
    ServerState,
    aggregate,
    aggregate_clusters,
    client_update,
    client_update_cfedbayes,
    fedavg_aggregate,
    fedavg_update,
    sample_participants,
    select_cluster,
    sparsity_mask,
)
from .harness import (
    ExperimentConfig,
    build_federation,
    evaluate,
    final_score,
    load_config,
    run_aggcheck,
    run_experiment,
    run_gradcheck,
    run_klcheck,
    uncertainty,
)
from .variational import (
    NoiseDraw,
    SparseVariationalParams,
    VariationalParams,
    gumbel_softmax,
    kl_bernoulli_gaussian_grads,
    kl_bernoulli_gaussian_upper,
    kl_gaussian,
    kl_gaussian_grads,
    mc_kl_estimate,
    optimal_global,
    sample_gaussian,
    sample_spike_slab,
    softplus,
    softplus_inv,
)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "CFedBayes",
    "ClientState",
    "ConfigurationError",
    "ExperimentConfig",
    "FedAvg",
    "FormatError",
    "Gradient",
    "LabeledDataset",
    "LocalSpec",
    "NetworkShape",
    "NoiseDraw",
    "PFedBayes",
    "PRESETS",
    "PartitionSpec",
    "ProtocolError",
    "RoundPlan",
    "SFedBayes",
    "ServerState",
    "SparseVariationalParams",
    "UsageError",
    "VariationalParams",
    "aggregate",
    "aggregate_clusters",
    "build_federation",
    "client_update",
    "client_update_cfedbayes",
    "evaluate",
    "fedavg_aggregate",
    "fedavg_update",
    "final_score",
    "finite_diff_grad",
    "forward",
    "grad_objective",
    "gumbel_softmax",
    "init_point",
    "init_sparse",
    "init_variational",
    "kl_bernoulli_gaussian_grads",
    "kl_bernoulli_gaussian_upper",
    "kl_gaussian",
    "kl_gaussian_grads",
    "load_config",
    "load_idx",
    "log_likelihood",
    "make_cluster_dataset",
    "mc_kl_estimate",
    "objective_pfedbayes",
    "objective_sfedbayes",
    "optimal_global",
    "partition_noniid",
    "predictive",
    "run_aggcheck",
    "run_experiment",
    "run_gradcheck",
    "run_klcheck",
    "sample_gaussian",
    "sample_participants",
    "sample_spike_slab",
    "select_cluster",
    "softplus",
    "softplus_inv",
    "sparsity_mask",
    "synthetic_regression",
    "uncertainty",
]
