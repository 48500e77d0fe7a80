"""Federated training loop: sampling, broadcast, local fits, aggregation,
validation, checkpointing, and best-model selection.

The loop is synchronous: a round samples M clients, fits them (in worker
threads or over TCP), aggregates the sorted updates, and optionally
evaluates the post-aggregation candidate on the validation split.  A failed
client fails the round loudly.  Everything is deterministic for a fixed
RunConfig; in particular the final parameters do not depend on worker count,
client completion order, or transport.
"""

from __future__ import annotations

import csv
import math
import os
import socket
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import protocol, sim
from .aggregation import Aggregator, STRATEGIES
from .client import ClientUpdate, LocalTrainConfig, local_evaluate, local_fit
from .dataset import ClientDataset, read_dataset, shard_path
from .evaluation import offline_rmse, online_success
from .model import ModelSpec, init_params
from .registry import Registry, Task, load_registry
from .seeding import EVAL_STREAM, INIT_STREAM, mix, rng_from

CLIENT_EVAL_EPISODES = 10  # online episodes for the diagnostic EVAL message


class TransportError(Exception):
    """A client failed or the wire broke mid-round."""


class ConfigError(Exception):
    """A run configuration that cannot be scheduled."""


@dataclass(frozen=True)
class RunConfig:
    task: Task
    registry_path: str
    data_dir: str
    strategy: str = "fedavg"
    strategy_params: dict = field(default_factory=dict)
    rounds: int = 30
    clients_per_round: int = 20
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    run_seed: int = 0
    eval_every: int = 1
    val_episodes: int = 50
    transport: str = "in_process"
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 7070
    hidden_widths: tuple[int, ...] = (256, 128, 512)
    workers: int = 0  # 0 = logical cores

    def model_spec(self) -> ModelSpec:
        return ModelSpec(input_dim=sim.obs_dim(self.task), hidden_widths=self.hidden_widths)

    def validate(self, registry: Registry | None = None) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.clients_per_round < 1:
            raise ConfigError(f"clients_per_round must be >= 1, got {self.clients_per_round}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.val_episodes < 1:
            raise ConfigError(f"val_episodes must be >= 1, got {self.val_episodes}")
        if self.transport not in ("in_process", "tcp"):
            raise ConfigError(f"transport must be in_process or tcp, got {self.transport!r}")
        if registry is not None:
            if registry.task != self.task:
                raise ConfigError(
                    f"config task {self.task.label} != registry task {registry.task.label}"
                )
            n_train = len(registry.by_split("train"))
            if self.clients_per_round > n_train:
                raise ConfigError(
                    f"clients_per_round {self.clients_per_round} exceeds the "
                    f"{n_train} training environments"
                )

    def to_dict(self) -> dict:
        return {
            "task": self.task.label,
            "registry_path": self.registry_path,
            "data_dir": self.data_dir,
            "strategy": self.strategy,
            "strategy_params": dict(self.strategy_params),
            "rounds": self.rounds,
            "clients_per_round": self.clients_per_round,
            "local": {
                "epochs": self.local.epochs,
                "batch_size": self.local.batch_size,
                "lr": self.local.lr,
            },
            "run_seed": self.run_seed,
            "eval_every": self.eval_every,
            "val_episodes": self.val_episodes,
            "transport": self.transport,
            "tcp_host": self.tcp_host,
            "tcp_port": self.tcp_port,
            "hidden_widths": list(self.hidden_widths),
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        local = d.get("local", {})
        return cls(
            task=Task.from_label(d["task"]),
            registry_path=d["registry_path"],
            data_dir=d["data_dir"],
            strategy=d.get("strategy", "fedavg"),
            strategy_params=dict(d.get("strategy_params", {})),
            rounds=int(d.get("rounds", 30)),
            clients_per_round=int(d.get("clients_per_round", 20)),
            local=LocalTrainConfig(
                epochs=int(local.get("epochs", 50)),
                batch_size=int(local.get("batch_size", 64)),
                lr=float(local.get("lr", 1e-4)),
            ),
            run_seed=int(d.get("run_seed", 0)),
            eval_every=int(d.get("eval_every", 1)),
            val_episodes=int(d.get("val_episodes", 50)),
            transport=d.get("transport", "in_process"),
            tcp_host=d.get("tcp_host", "127.0.0.1"),
            tcp_port=int(d.get("tcp_port", 7070)),
            hidden_widths=tuple(int(w) for w in d.get("hidden_widths", (256, 128, 512))),
            workers=int(d.get("workers", 0)),
        )


@dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: tuple[int, ...]
    mean_train_loss: float
    val_rmse_mean: float | None
    val_rmse_std: float | None
    val_success_raw: float | None
    val_success_norm: float | None
    wall_time: float

    def deterministic_fields(self) -> tuple:
        """Everything except wall_time; used for cross-transport equality."""
        return (
            self.round,
            self.selected,
            self.mean_train_loss,
            self.val_rmse_mean,
            self.val_rmse_std,
            self.val_success_raw,
            self.val_success_norm,
        )


@dataclass(frozen=True)
class Checkpoint:
    round: int
    params: np.ndarray
    spec_fingerprint: bytes


_CKPT_MAGIC = b"FLCK"
_CKPT_HEADER = struct.Struct("<4sHI32sQ")
CKPT_FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    params = np.ascontiguousarray(ckpt.params, dtype="<f8")
    blob = _CKPT_HEADER.pack(
        _CKPT_MAGIC, CKPT_FORMAT_VERSION, ckpt.round, ckpt.spec_fingerprint, params.shape[0]
    ) + params.tobytes()
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | os.PathLike, spec: ModelSpec | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: shorter than the checkpoint header")
    magic, version, rnd, fp, count = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) != _CKPT_HEADER.size + count * 8:
        raise CheckpointError(f"{path}: payload length disagrees with header")
    params = np.frombuffer(blob, dtype="<f8", count=count, offset=_CKPT_HEADER.size).copy()
    ckpt = Checkpoint(round=rnd, params=params, spec_fingerprint=fp)
    if spec is not None and fp != spec.fingerprint():
        raise CheckpointError(f"{path}: checkpoint was written for a different model spec")
    return ckpt


def sample_clients(n_train: int, m: int, round_idx: int, run_seed: int) -> list[int]:
    """M distinct train-client ids, uniform without replacement, ascending."""
    if m > n_train:
        raise ConfigError(f"cannot sample {m} clients from {n_train}")
    rng = rng_from(run_seed, round_idx)
    return sorted(int(i) for i in rng.choice(n_train, size=m, replace=False))


def resolve_workers(workers: int | None) -> int:
    if workers and workers > 0:
        return workers
    env = os.environ.get("FLAME_WORKERS")
    if env:
        try:
            val = int(env)
            if val > 0:
                return val
        except ValueError:
            pass
    return os.cpu_count() or 1


class ShardStore:
    """Lazy, cached loader for per-client demonstration shards."""

    def __init__(self, data_dir: str | os.PathLike, split: str = "train"):
        self.data_dir = data_dir
        self.split = split
        self._cache: dict[int, ClientDataset] = {}

    def get(self, client_id: int) -> ClientDataset:
        if client_id not in self._cache:
            self._cache[client_id] = read_dataset(
                shard_path(self.data_dir, self.split, client_id)
            )
        return self._cache[client_id]


class InProcessTransport:
    """Runs local fits in a thread pool inside the coordinator process."""

    def __init__(self, cfg: RunConfig, spec: ModelSpec, workers: int):
        self.cfg = cfg
        self.spec = spec
        self.workers = workers
        self.store = ShardStore(cfg.data_dir, "train")

    def fit_clients(
        self, selected: list[int], params: np.ndarray, round_idx: int
    ) -> list[ClientUpdate]:
        def fit_one(cid: int) -> ClientUpdate:
            local_cfg = replace(
                self.cfg.local, shuffle_seed=mix(self.cfg.run_seed, round_idx, cid)
            )
            return local_fit(params, self.spec, self.store.get(cid), local_cfg)

        if self.workers > 1 and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fit_one, selected))
        return [fit_one(cid) for cid in selected]

    def close(self) -> None:
        pass


class TcpTransport:
    """Coordinator side of the wire protocol: one connection per client."""

    def __init__(self, cfg: RunConfig, expected_ids: list[int], accept_timeout: float = 120.0):
        self.cfg = cfg
        self.listener = socket.create_server(
            (cfg.tcp_host, cfg.tcp_port), reuse_port=False
        )
        self.listener.settimeout(accept_timeout)
        self.port = self.listener.getsockname()[1]
        self.conns: dict[int, socket.socket] = {}
        self._expected = set(expected_ids)

    def wait_for_clients(self) -> None:
        while set(self.conns) != self._expected:
            try:
                conn, _ = self.listener.accept()
            except socket.timeout:
                missing = sorted(self._expected - set(self.conns))
                raise TransportError(f"timed out waiting for clients {missing}") from None
            msg = protocol.recv_message(conn)
            if not isinstance(msg, protocol.Hello):
                conn.close()
                raise TransportError(f"expected HELLO, got {type(msg).__name__}")
            if msg.client_id not in self._expected or msg.client_id in self.conns:
                conn.close()
                raise TransportError(f"unexpected client id {msg.client_id}")
            self.conns[msg.client_id] = conn

    def fit_clients(
        self, selected: list[int], params: np.ndarray, round_idx: int
    ) -> list[ClientUpdate]:
        try:
            for cid in selected:
                protocol.send_message(
                    self.conns[cid],
                    protocol.Fit(
                        round=round_idx,
                        epochs=self.cfg.local.epochs,
                        lr=self.cfg.local.lr,
                        shuffle_seed=mix(self.cfg.run_seed, round_idx, cid),
                        params=params,
                    ),
                )
            updates = []
            for cid in selected:
                msg = protocol.recv_message(self.conns[cid])
                if not isinstance(msg, protocol.FitResult):
                    raise TransportError(
                        f"client {cid}: expected FIT_RESULT, got {type(msg).__name__}"
                    )
                if msg.client_id != cid:
                    raise TransportError(
                        f"connection for client {cid} answered as {msg.client_id}"
                    )
                updates.append(
                    ClientUpdate(
                        client_id=msg.client_id,
                        params=msg.params,
                        num_samples=msg.num_samples,
                        train_loss=msg.train_loss,
                    )
                )
            return updates
        except (protocol.ProtocolError, OSError) as exc:
            raise TransportError(f"round {round_idx} aborted: {exc}") from exc

    def request_eval(self, client_id: int, params: np.ndarray) -> protocol.EvalResult:
        """Diagnostic per-client evaluation of a parameter vector."""
        try:
            protocol.send_message(self.conns[client_id], protocol.Eval(params=params))
            msg = protocol.recv_message(self.conns[client_id])
        except (protocol.ProtocolError, OSError) as exc:
            raise TransportError(f"eval on client {client_id} failed: {exc}") from exc
        if not isinstance(msg, protocol.EvalResult):
            raise TransportError(
                f"client {client_id}: expected EVAL_RESULT, got {type(msg).__name__}"
            )
        return msg

    def close(self) -> None:
        for conn in self.conns.values():
            try:
                protocol.send_message(conn, protocol.Shutdown())
            except OSError:
                pass
            conn.close()
        self.conns.clear()
        self.listener.close()


def client_serve(
    host: str,
    port: int,
    client_id: int,
    reg: Registry,
    data_dir: str | os.PathLike,
    spec: ModelSpec,
    batch_size: int = 64,
) -> None:
    """TCP client role: answer FIT/EVAL requests for one client id until
    SHUTDOWN.  Must use the same batch_size as in-process runs to reproduce
    them bit-for-bit."""
    env_cfg = reg.client(client_id)
    ds = read_dataset(shard_path(data_dir, env_cfg.split, client_id))
    sock = socket.create_connection((host, port))
    try:
        protocol.send_message(sock, protocol.Hello(client_id=client_id))
        while True:
            try:
                msg = protocol.recv_message(sock)
            except protocol.ConnectionClosed:
                return
            if isinstance(msg, protocol.Shutdown):
                return
            if isinstance(msg, protocol.Fit):
                cfg = LocalTrainConfig(
                    epochs=msg.epochs,
                    batch_size=batch_size,
                    lr=msg.lr,
                    shuffle_seed=msg.shuffle_seed,
                )
                update = local_fit(msg.params, spec, ds, cfg)
                protocol.send_message(
                    sock,
                    protocol.FitResult(
                        client_id=client_id,
                        num_samples=update.num_samples,
                        train_loss=update.train_loss,
                        params=update.params,
                    ),
                )
            elif isinstance(msg, protocol.Eval):
                rmse = local_evaluate(msg.params, spec, ds)
                hits = 0
                for i in range(CLIENT_EVAL_EPISODES):
                    seed = mix(env_cfg.base_seed, EVAL_STREAM, i)
                    hits += sim.rollout(
                        lambda obs: _policy_forward(spec, msg.params, obs), env_cfg, seed
                    ).success
                protocol.send_message(
                    sock,
                    protocol.EvalResult(rmse=rmse, success=hits / CLIENT_EVAL_EPISODES),
                )
            else:
                raise TransportError(f"client {client_id}: unexpected {type(msg).__name__}")
    finally:
        sock.close()


def _policy_forward(spec, params, obs):
    from .model import forward

    return forward(spec, params, obs)


class RunContext:
    """Everything a round needs: registry, transport, strategy, val data."""

    def __init__(self, cfg: RunConfig, registry: Registry | None = None):
        self.cfg = cfg
        self.registry = registry if registry is not None else load_registry(cfg.registry_path)
        cfg.validate(self.registry)
        self.spec = cfg.model_spec()
        self.n_train = len(self.registry.by_split("train"))
        train_ids = [e.client_id for e in self.registry.by_split("train")]
        if train_ids != list(range(self.n_train)):
            raise ConfigError("train split must occupy client ids 0..n_train-1")
        self.aggregator = Aggregator(cfg.strategy, self.spec.param_count, cfg.strategy_params)
        self.workers = resolve_workers(cfg.workers)
        self.val_envs = self.registry.by_split("val")
        self._val_datasets = None
        if cfg.transport == "tcp":
            self.transport = TcpTransport(cfg, list(range(self.n_train)))
        else:
            self.transport = InProcessTransport(cfg, self.spec, self.workers)

    def val_datasets(self):
        if self._val_datasets is None:
            self._val_datasets = [
                read_dataset(shard_path(self.cfg.data_dir, "val", e.client_id))
                for e in self.val_envs
            ]
        return self._val_datasets

    def close(self) -> None:
        self.transport.close()


def is_eval_round(round_idx: int, cfg: RunConfig) -> bool:
    # always evaluate the final round so select_best sees the last model
    return (round_idx + 1) % cfg.eval_every == 0 or round_idx == cfg.rounds - 1


def run_round(
    global_params: np.ndarray, round_idx: int, cfg: RunConfig, ctx: RunContext
) -> tuple[np.ndarray, RoundRecord]:
    start = time.perf_counter()
    selected = sample_clients(ctx.n_train, cfg.clients_per_round, round_idx, cfg.run_seed)
    updates = ctx.transport.fit_clients(selected, global_params, round_idx)
    updates = sorted(updates, key=lambda u: u.client_id)
    new_global = ctx.aggregator.aggregate(global_params, updates)

    rmse_mean = rmse_std = succ_raw = succ_norm = None
    if is_eval_round(round_idx, cfg) and ctx.val_envs:
        _, rmse_mean, rmse_std = offline_rmse(new_global, ctx.spec, ctx.val_datasets())
        online = online_success(
            new_global, ctx.spec, ctx.val_envs, cfg.val_episodes, workers=ctx.workers
        )
        succ_raw, succ_norm = online.raw_mean, online.norm_mean

    record = RoundRecord(
        round=round_idx,
        selected=tuple(selected),
        mean_train_loss=float(np.mean([u.train_loss for u in updates])),
        val_rmse_mean=rmse_mean,
        val_rmse_std=rmse_std,
        val_success_raw=succ_raw,
        val_success_norm=succ_norm,
        wall_time=time.perf_counter() - start,
    )
    return new_global, record


def write_records_csv(records: list[RoundRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "round", "selected", "mean_train_loss",
                "val_rmse_mean", "val_rmse_std",
                "val_success_raw", "val_success_norm", "wall_time",
            ]
        )
        for r in records:
            writer.writerow(
                [
                    r.round,
                    ";".join(str(c) for c in r.selected),
                    f"{r.mean_train_loss:.17g}",
                    "" if r.val_rmse_mean is None else f"{r.val_rmse_mean:.17g}",
                    "" if r.val_rmse_std is None else f"{r.val_rmse_std:.17g}",
                    "" if r.val_success_raw is None else f"{r.val_success_raw:.17g}",
                    "" if r.val_success_norm is None else f"{r.val_success_norm:.17g}",
                    f"{r.wall_time:.6f}",
                ]
            )


def run_training(
    cfg: RunConfig,
    run_dir: str | os.PathLike | None = None,
    registry: Registry | None = None,
    log=None,
) -> tuple[list[RoundRecord], list[Checkpoint]]:
    """Execute the full federated loop; returns per-round records and the
    checkpoints taken at evaluation rounds."""
    ctx = RunContext(cfg, registry=registry)
    try:
        if isinstance(ctx.transport, TcpTransport):
            ctx.transport.wait_for_clients()
        fingerprint = ctx.spec.fingerprint()
        global_params = init_params(ctx.spec, mix(cfg.run_seed, INIT_STREAM))
        records: list[RoundRecord] = []
        checkpoints: list[Checkpoint] = []
        ckpt_dir = None
        if run_dir is not None:
            ckpt_dir = Path(run_dir) / "checkpoints"
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        for round_idx in range(cfg.rounds):
            global_params, record = run_round(global_params, round_idx, cfg, ctx)
            records.append(record)
            if is_eval_round(round_idx, cfg):
                ckpt = Checkpoint(
                    round=round_idx, params=global_params, spec_fingerprint=fingerprint
                )
                checkpoints.append(ckpt)
                if ckpt_dir is not None:
                    save_checkpoint(ckpt, ckpt_dir / f"round_{round_idx:04d}.flck")
            if log is not None:
                log(record)
        if run_dir is not None:
            write_records_csv(records, Path(run_dir) / "records.csv")
        return records, checkpoints
    finally:
        ctx.close()


def select_best(checkpoints: list[Checkpoint], records: list[RoundRecord]) -> Checkpoint:
    """Highest validation success; ties by lower RMSE, then by later round."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    by_round = {r.round: r for r in records}

    def key(ckpt: Checkpoint):
        rec = by_round.get(ckpt.round)
        succ = -math.inf
        rmse = math.inf
        if rec is not None:
            if rec.val_success_norm is not None:
                succ = rec.val_success_norm
            if rec.val_rmse_mean is not None:
                rmse = rec.val_rmse_mean
        return (succ, -rmse, ckpt.round)

    return max(checkpoints, key=key)


def dry_run(cfg: RunConfig, registry: Registry | None = None) -> list[list[int]]:
    """Validate a configuration and compute its full round schedule without
    touching demonstration data or running any fits."""
    reg = registry if registry is not None else load_registry(cfg.registry_path)
    cfg.validate(reg)
    n_train = len(reg.by_split("train"))
    return [
        sample_clients(n_train, cfg.clients_per_round, r, cfg.run_seed)
        for r in range(cfg.rounds)
    ]
