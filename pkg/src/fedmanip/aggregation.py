"""Server-side aggregation strategies.

All strategies consume client updates sorted by client_id so floating-point
accumulation order is fixed; output is then exactly permutation-invariant.
The pseudo-gradient convention is DELTA = weighted_average - w_t (pointing
from the current global model toward the client average), and every update
rule below is written against that sign.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .client import ClientUpdate


class AggregationError(Exception):
    pass


def _sorted_updates(updates: list[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise AggregationError("no client updates to aggregate")
    length = updates[0].params.shape[0]
    for u in updates:
        if u.params.shape != (length,):
            raise AggregationError(
                f"client {u.client_id} update length {u.params.shape} != {(length,)}"
            )
    return sorted(updates, key=lambda u: u.client_id)


def weighted_average(updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-count weighted mean of the client parameter vectors."""
    us = _sorted_updates(updates)
    total = float(sum(u.num_samples for u in us))
    acc = np.zeros_like(us[0].params)
    for u in us:
        acc += (u.num_samples / total) * u.params
    return acc


def pseudo_gradient(w_t: np.ndarray, updates: list[ClientUpdate]) -> np.ndarray:
    avg = weighted_average(updates)
    if avg.shape != w_t.shape:
        raise AggregationError(f"global length {w_t.shape} != update length {avg.shape}")
    return avg - w_t


@dataclass
class FedAvgMState:
    """Server momentum buffer: velocity <- beta*velocity + (w_t - avg)."""

    velocity: np.ndarray
    beta: float = 0.9
    server_lr: float = 1.0

    @classmethod
    def fresh(cls, n_params: int, beta: float = 0.9, server_lr: float = 1.0):
        if not 0.0 <= beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {beta}")
        return cls(velocity=np.zeros(n_params), beta=beta, server_lr=server_lr)


def fedavgm_step(
    w_t: np.ndarray, updates: list[ClientUpdate], state: FedAvgMState
) -> tuple[np.ndarray, FedAvgMState]:
    delta = pseudo_gradient(w_t, updates)
    velocity = state.beta * state.velocity - delta
    w_next = w_t - state.server_lr * velocity
    return w_next, replace(state, velocity=velocity)


@dataclass
class FedOptState:
    """Server optimizer moments (no bias correction, per the server-side
    adaptive formulation)."""

    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    eta: float = 1e-2
    variant: str = "adam"

    @classmethod
    def fresh(
        cls,
        n_params: int,
        beta1: float = 0.9,
        beta2: float = 0.99,
        tau: float = 1e-3,
        eta: float = 1e-2,
        variant: str = "adam",
    ):
        if variant not in ("adam", "sgd"):
            raise ValueError(f"variant must be adam or sgd, got {variant!r}")
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        return cls(
            m=np.zeros(n_params), v=np.zeros(n_params),
            beta1=beta1, beta2=beta2, tau=tau, eta=eta, variant=variant,
        )


def fedopt_step(
    w_t: np.ndarray, updates: list[ClientUpdate], state: FedOptState
) -> tuple[np.ndarray, FedOptState]:
    delta = pseudo_gradient(w_t, updates)
    if state.variant == "sgd":
        return w_t + state.eta * delta, state
    m = state.beta1 * state.m + (1.0 - state.beta1) * delta
    v = state.beta2 * state.v + (1.0 - state.beta2) * delta * delta
    w_next = w_t + state.eta * m / (np.sqrt(v) + state.tau)
    return w_next, replace(state, m=m, v=v)


@dataclass(frozen=True)
class KrumConfig:
    f: int = 0  # tolerated Byzantine clients

    def __post_init__(self):
        if self.f < 0:
            raise ValueError(f"f must be >= 0, got {self.f}")


def krum_select(updates: list[ClientUpdate], cfg: KrumConfig) -> ClientUpdate:
    """Return the update with minimal summed squared distance to its
    n-f-2 nearest neighbors; ties go to the lowest client_id.

    Sample counts are ignored: selection operates on raw parameter vectors.
    """
    us = _sorted_updates(updates)
    n = len(us)
    n_neighbors = n - cfg.f - 2
    if n_neighbors < 1:
        raise AggregationError(
            f"krum needs at least f+3={cfg.f + 3} updates, got {n}"
        )
    vecs = [u.params for u in us]
    best_idx = 0
    best_score = np.inf
    for i in range(n):
        dists = np.empty(n - 1)
        k = 0
        for j in range(n):
            if j == i:
                continue
            diff = vecs[i] - vecs[j]
            dists[k] = float(diff @ diff)
            k += 1
        dists.sort()
        score = float(dists[:n_neighbors].sum())
        if score < best_score:
            best_score = score
            best_idx = i
    return us[best_idx]


STRATEGIES = ("fedavg", "fedavgm", "fedopt", "krum")


class Aggregator:
    """Dispatch facade threading one strategy's state across rounds."""

    def __init__(self, strategy: str, n_params: int, params: dict | None = None):
        params = dict(params or {})
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
        self.strategy = strategy
        if strategy == "fedavgm":
            self.state = FedAvgMState.fresh(
                n_params,
                beta=float(params.pop("beta", 0.9)),
                server_lr=float(params.pop("server_lr", 1.0)),
            )
        elif strategy == "fedopt":
            self.state = FedOptState.fresh(
                n_params,
                beta1=float(params.pop("beta1", 0.9)),
                beta2=float(params.pop("beta2", 0.99)),
                tau=float(params.pop("tau", 1e-3)),
                eta=float(params.pop("eta", 1e-2)),
                variant=str(params.pop("variant", "adam")),
            )
        elif strategy == "krum":
            self.state = KrumConfig(f=int(params.pop("f", 0)))
        else:
            self.state = None
        if params:
            raise ValueError(f"unused {strategy} hyperparameters: {sorted(params)}")

    def aggregate(self, w_t: np.ndarray, updates: list[ClientUpdate]) -> np.ndarray:
        if self.strategy == "fedavg":
            return weighted_average(updates)
        if self.strategy == "fedavgm":
            w_next, self.state = fedavgm_step(w_t, updates, self.state)
            return w_next
        if self.strategy == "fedopt":
            w_next, self.state = fedopt_step(w_t, updates, self.state)
            return w_next
        return krum_select(updates, self.state).params.copy()
