"""Client-side local training and offline evaluation.

A client only ever touches its own demonstration shard; nothing here can
reach another client's data, which is the privacy boundary of the whole
setup.  Local fits are pure: identical inputs (global parameters, shard,
config) produce bitwise-identical updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ClientDataset, to_pairs
from .model import AdamState, Batch, ModelSpec, adam_step, backward, forward, mse_loss
from .seeding import rng_from


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: np.ndarray
    num_samples: int
    train_loss: float


def local_fit(
    global_params: np.ndarray,
    spec: ModelSpec,
    ds: ClientDataset,
    cfg: LocalTrainConfig,
) -> ClientUpdate:
    """Behavior-clone the shard starting from the broadcast parameters.

    Runs epochs x shuffled mini-batches of the adaptive-moment update with a
    fresh optimizer state (moments do not persist across rounds).  The last
    incomplete mini-batch is kept so small shards are fully used.
    ``train_loss`` is the sample-weighted mean MSE over the final epoch
    (or the loss of the unchanged parameters when epochs == 0).
    """
    pairs = to_pairs(ds)
    obs, act = pairs.observations, pairs.targets
    n = obs.shape[0]
    if obs.shape[1] != spec.input_dim:
        raise ValueError(
            f"dataset d_obs {obs.shape[1]} != model input_dim {spec.input_dim}"
        )

    params = np.array(global_params, dtype=np.float64, copy=True)
    if cfg.epochs == 0:
        loss = mse_loss(forward(spec, params, obs), act)
        return ClientUpdate(ds.client_id, params, n, loss)

    state = AdamState.fresh(spec.param_count, lr=cfg.lr)
    rng = rng_from(cfg.shuffle_seed)
    last_epoch_loss = 0.0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sq_err_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = Batch(observations=obs[idx], targets=act[idx])
            loss, grad = backward(spec, params, batch)
            params, state = adam_step(params, grad, state)
            sq_err_sum += loss * idx.shape[0]
        last_epoch_loss = sq_err_sum / n
    return ClientUpdate(ds.client_id, params, n, float(last_epoch_loss))


def local_evaluate(params: np.ndarray, spec: ModelSpec, ds: ClientDataset) -> float:
    """RMSE of predicted vs expert actions over every pair and action dim."""
    pairs = to_pairs(ds)
    pred = forward(spec, params, pairs.observations)
    return float(np.sqrt(mse_loss(pred, pairs.targets)))
