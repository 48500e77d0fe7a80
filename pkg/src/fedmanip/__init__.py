"""Federated imitation-learning benchmark on deterministic 2-D manipulation
analogues: per-client environment variations, local behavior cloning, four
server aggregation strategies, offline/online evaluation, and ablation
sweeps."""

from .aggregation import (
    Aggregator,
    FedAvgMState,
    FedOptState,
    KrumConfig,
    fedavgm_step,
    fedopt_step,
    krum_select,
    pseudo_gradient,
    weighted_average,
)
from .client import ClientUpdate, LocalTrainConfig, local_evaluate, local_fit
from .dataset import (
    ClientDataset,
    Episode,
    collect_demos,
    read_dataset,
    to_pairs,
    write_dataset,
)
from .evaluation import EvalReport, evaluate_policy, offline_rmse, online_success
from .model import (
    AdamState,
    Batch,
    ModelSpec,
    adam_step,
    backward,
    forward,
    grad_check,
    init_params,
    mse_loss,
)
from .orchestrator import (
    Checkpoint,
    RoundRecord,
    RunConfig,
    dry_run,
    run_training,
    sample_clients,
    select_best,
)
from .registry import (
    EnvironmentConfig,
    Registry,
    Task,
    VariationFactors,
    assign_splits,
    load_registry,
    sample_environments,
    save_registry,
)
from .sim import (
    DynamicsParams,
    EpisodeResult,
    SimState,
    derive_dynamics,
    expert_action,
    observe,
    reset,
    rollout,
    step,
)
from .sweep import SweepResult, ablation_sweep

__version__ = "0.1.0"
