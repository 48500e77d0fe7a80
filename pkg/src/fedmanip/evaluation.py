"""Offline and online policy evaluation.

Offline: RMSE between predicted and expert actions on held-out demonstration
shards.  Online: rollout success on held-out environments, reported both raw
and normalized by the scripted expert's rate on the identical episode seeds.
Evaluation episode seeds carry a dedicated stream tag so they never collide
with the seeds used to collect training demonstrations.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import sim
from .client import local_evaluate
from .dataset import read_dataset, shard_path
from .model import ModelSpec, forward
from .registry import EnvironmentConfig, Registry
from .seeding import EVAL_STREAM, mix


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    # population std: the +- in reports is spread across environments, not a
    # sample estimate
    return float(arr.mean()), float(arr.std())


@dataclass(frozen=True)
class EvalReport:
    """Per-environment and summary metrics for one policy on one split."""

    env_ids: tuple[int, ...]
    rmse_per_env: tuple[float, ...]
    rmse_mean: float
    rmse_std: float
    success_raw_per_env: tuple[float, ...]
    success_norm_per_env: tuple[float, ...]
    expert_raw_per_env: tuple[float, ...]
    success_raw_mean: float
    success_norm_mean: float
    success_norm_std: float
    episodes: int
    n_envs: int


@dataclass(frozen=True)
class OnlineSuccess:
    raw_per_env: tuple[float, ...]
    expert_per_env: tuple[float, ...]
    norm_per_env: tuple[float, ...]
    raw_mean: float
    norm_mean: float
    norm_std: float


def offline_rmse(
    params: np.ndarray, spec: ModelSpec, eval_datasets
) -> tuple[list[float], float, float]:
    """Per-environment RMSE plus mean and population std across environments."""
    if not eval_datasets:
        raise ValueError("offline evaluation needs at least one dataset")
    per_env = [local_evaluate(params, spec, ds) for ds in eval_datasets]
    mean, std = _mean_std(per_env)
    return per_env, mean, std


def _env_success(
    params: np.ndarray | None,
    spec: ModelSpec | None,
    cfg: EnvironmentConfig,
    episodes: int,
) -> tuple[float, float]:
    """(learner rate, expert rate) over the env's evaluation seed set."""
    seeds = [mix(cfg.base_seed, EVAL_STREAM, i) for i in range(episodes)]
    expert_hits = 0
    for s in seeds:
        result, _, _ = sim.run_expert_episode(cfg, s)
        expert_hits += result.success
    if params is None:
        return 0.0, expert_hits / episodes

    def policy(obs):
        return forward(spec, params, obs)

    learner_hits = 0
    for s in seeds:
        learner_hits += sim.rollout(policy, cfg, s).success
    return learner_hits / episodes, expert_hits / episodes


def online_success(
    params: np.ndarray,
    spec: ModelSpec,
    envs,
    episodes: int,
    workers: int | None = None,
) -> OnlineSuccess:
    """Rollout success across environments; normalized = learner / expert
    on identical seeds, per environment (no clamping)."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    envs = list(envs)
    if not envs:
        raise ValueError("online evaluation needs at least one environment")

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda cfg: _env_success(params, spec, cfg, episodes), envs)
            )
    else:
        results = [_env_success(params, spec, cfg, episodes) for cfg in envs]

    raw = tuple(r[0] for r in results)
    expert = tuple(r[1] for r in results)
    norm = tuple(r / e if e > 0 else 0.0 for r, e in zip(raw, expert))
    raw_mean, _ = _mean_std(raw)
    norm_mean, norm_std = _mean_std(norm)
    return OnlineSuccess(
        raw_per_env=raw,
        expert_per_env=expert,
        norm_per_env=norm,
        raw_mean=raw_mean,
        norm_mean=norm_mean,
        norm_std=norm_std,
    )


def load_split_datasets(reg: Registry, split: str, data_dir: str | os.PathLike):
    """Demonstration shards for a split, ordered by client_id."""
    return [read_dataset(shard_path(data_dir, split, cfg.client_id)) for cfg in reg.by_split(split)]


def evaluate_policy(
    params: np.ndarray,
    spec: ModelSpec,
    reg: Registry,
    split: str,
    data_dir: str | os.PathLike,
    episodes: int = 50,
    workers: int | None = None,
) -> EvalReport:
    """The full two-sided protocol (offline RMSE + online success) on a split."""
    envs = reg.by_split(split)
    if not envs:
        raise ValueError(f"registry has no environments in split {split!r}")
    datasets = load_split_datasets(reg, split, data_dir)
    rmse_per_env, rmse_mean, rmse_std = offline_rmse(params, spec, datasets)
    online = online_success(params, spec, envs, episodes, workers=workers)
    return EvalReport(
        env_ids=tuple(cfg.client_id for cfg in envs),
        rmse_per_env=tuple(rmse_per_env),
        rmse_mean=rmse_mean,
        rmse_std=rmse_std,
        success_raw_per_env=online.raw_per_env,
        success_norm_per_env=online.norm_per_env,
        expert_raw_per_env=online.expert_per_env,
        success_raw_mean=online.raw_mean,
        success_norm_mean=online.norm_mean,
        success_norm_std=online.norm_std,
        episodes=episodes,
        n_envs=len(envs),
    )
