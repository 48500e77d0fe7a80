"""Expert demonstration storage: one binary shard per client.

File format (FLDM, all little-endian):

    header   : magic "FLDM", format_version u16, task u8, client_id u32,
               d_obs u16, d_act u16, n_episodes u32
    episode  : episode_seed i64, T u32, success u8,
               observations T*d_obs f64, actions T*d_act f64

Writes are bit-deterministic, so identical collection inputs produce
byte-identical shards.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sim
from .model import Batch
from .registry import EnvironmentConfig, Registry, Task
from .seeding import RETRY_STREAM, mix

MAGIC = b"FLDM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBIHHI")
_EP_HEADER = struct.Struct("<qIB")

MAX_DEMO_RETRIES = 3


class DatasetError(Exception):
    """Base error for demonstration shards."""


class BadMagicError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class DatasetStructureError(DatasetError):
    pass


class DemoCollectionError(DatasetError):
    """The scripted expert kept failing; the task preset is broken."""


@dataclass
class Episode:
    client_id: int
    episode_seed: int
    observations: np.ndarray  # (T, d_obs) float64
    actions: np.ndarray  # (T, 4) float64
    success: bool

    def __post_init__(self):
        # seeds are minted as u64 hashes but stored as i64 on disk; normalize
        # to the two's-complement representative so round-trips are exact
        if self.episode_seed >= 1 << 63:
            self.episode_seed -= 1 << 64
        self.observations = np.ascontiguousarray(self.observations, dtype=np.float64)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float64)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise DatasetStructureError("episode arrays must be 2-D")
        if self.observations.shape[0] != self.actions.shape[0]:
            raise DatasetStructureError("observation/action step counts differ")
        if self.actions.shape[1] != sim.ACTION_DIM:
            raise DatasetStructureError(
                f"actions must have {sim.ACTION_DIM} columns, got {self.actions.shape[1]}"
            )

    @property
    def T(self) -> int:
        return self.observations.shape[0]


@dataclass
class ClientDataset:
    client_id: int
    task: Task
    d_obs: int
    episodes: list[Episode]

    def __post_init__(self):
        for ep in self.episodes:
            if ep.client_id != self.client_id:
                raise DatasetStructureError(
                    f"episode client_id {ep.client_id} != dataset {self.client_id}"
                )
            if ep.observations.shape[1] != self.d_obs:
                raise DatasetStructureError(
                    f"episode d_obs {ep.observations.shape[1]} != dataset {self.d_obs}"
                )

    @property
    def num_pairs(self) -> int:
        return sum(ep.T for ep in self.episodes)


def to_pairs(ds: ClientDataset) -> Batch:
    """Flatten every episode into (observation, action) training pairs,
    episode order then step order."""
    if not ds.episodes:
        raise DatasetError(f"client {ds.client_id} dataset has no episodes")
    obs = np.concatenate([ep.observations for ep in ds.episodes], axis=0)
    act = np.concatenate([ep.actions for ep in ds.episodes], axis=0)
    return Batch(observations=obs, targets=act)


def write_dataset(ds: ClientDataset, path: str | os.PathLike) -> None:
    chunks = [
        _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            int(ds.task),
            ds.client_id,
            ds.d_obs,
            sim.ACTION_DIM,
            len(ds.episodes),
        )
    ]
    for ep in ds.episodes:
        chunks.append(_EP_HEADER.pack(ep.episode_seed, ep.T, 1 if ep.success else 0))
        chunks.append(ep.observations.astype("<f8").tobytes())
        chunks.append(ep.actions.astype("<f8").tobytes())
    blob = b"".join(chunks)
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_dataset(path: str | os.PathLike) -> ClientDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the header")
    magic, version, task_code, client_id, d_obs, d_act, n_episodes = _HEADER.unpack_from(
        blob, 0
    )
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: unsupported format_version {version}")
    if d_obs < 1 or d_act != sim.ACTION_DIM:
        raise DatasetStructureError(f"{path}: implausible dims d_obs={d_obs} d_act={d_act}")
    try:
        task = Task(task_code)
    except ValueError:
        raise DatasetStructureError(f"{path}: unknown task code {task_code}") from None

    episodes = []
    off = _HEADER.size
    for k in range(n_episodes):
        if off + _EP_HEADER.size > len(blob):
            raise TruncatedFileError(f"{path}: truncated in episode {k} header")
        seed, steps, success_byte = _EP_HEADER.unpack_from(blob, off)
        off += _EP_HEADER.size
        if success_byte not in (0, 1):
            raise DatasetStructureError(f"{path}: episode {k} success byte {success_byte}")
        n_obs = steps * d_obs * 8
        n_act = steps * d_act * 8
        if off + n_obs + n_act > len(blob):
            raise TruncatedFileError(f"{path}: truncated in episode {k} payload")
        obs = np.frombuffer(blob, dtype="<f8", count=steps * d_obs, offset=off).reshape(
            steps, d_obs
        )
        off += n_obs
        act = np.frombuffer(blob, dtype="<f8", count=steps * d_act, offset=off).reshape(
            steps, d_act
        )
        off += n_act
        episodes.append(
            Episode(
                client_id=client_id,
                episode_seed=seed,
                observations=obs.copy(),
                actions=act.copy(),
                success=bool(success_byte),
            )
        )
    if off != len(blob):
        raise DatasetStructureError(
            f"{path}: {len(blob) - off} trailing bytes after the declared "
            f"{n_episodes} episodes"
        )
    return ClientDataset(client_id=client_id, task=task, d_obs=d_obs, episodes=episodes)


def shard_path(data_dir: str | os.PathLike, split: str, client_id: int) -> Path:
    return Path(data_dir) / split / f"client_{client_id}.fldm"


def collect_client_demos(
    cfg: EnvironmentConfig, k_episodes: int, collection_seed: int = 0
) -> ClientDataset:
    """K successful expert episodes for one client, retrying failed seeds."""
    base = cfg.base_seed if collection_seed == 0 else mix(cfg.base_seed, collection_seed)
    episodes = []
    for k in range(k_episodes):
        attempt = 0
        while True:
            seed = mix(base, k) if attempt == 0 else mix(base, k, RETRY_STREAM, attempt)
            result, obs, act = sim.run_expert_episode(cfg, seed)
            if result.success:
                break
            attempt += 1
            if attempt > MAX_DEMO_RETRIES:
                raise DemoCollectionError(
                    f"expert failed episode {k} for client {cfg.client_id} "
                    f"{MAX_DEMO_RETRIES + 1} times; task preset looks broken"
                )
        episodes.append(
            Episode(
                client_id=cfg.client_id,
                episode_seed=seed,
                observations=obs,
                actions=act,
                success=True,
            )
        )
    return ClientDataset(
        client_id=cfg.client_id,
        task=cfg.task,
        d_obs=sim.obs_dim(cfg.task),
        episodes=episodes,
    )


def collect_demos(
    reg: Registry,
    split: str,
    k_episodes: int,
    seed: int = 0,
    data_dir: str | os.PathLike = "data",
) -> list[Path]:
    """Collect and persist K expert episodes for every environment in a split."""
    if k_episodes < 1:
        raise ValueError(f"need at least one episode per client, got {k_episodes}")
    out_paths = []
    split_dir = Path(data_dir) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    for cfg in reg.by_split(split):
        ds = collect_client_demos(cfg, k_episodes, collection_seed=seed)
        path = shard_path(data_dir, split, cfg.client_id)
        write_dataset(ds, path)
        out_paths.append(path)
    return out_paths
