"""Environment database: sampling, splits, and JSON persistence.

Each federated client owns exactly one environment, i.e. a task preset plus a
sampled set of variation factors.  The registry is the single source of truth
for which client sees which world, and is written as one JSON document so a
run can be re-instantiated exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from enum import IntEnum

from .seeding import mix, rng_from

FORMAT_VERSION = 1
TEXTURE_COUNT = 213  # texture ids are 0..212

SPLITS = ("train", "val", "test")


class Task(IntEnum):
    """Manipulation-analogue presets with stable serialization codes."""

    SLIDE_BLOCK = 0
    CLOSE_BOX = 1
    PEG_INSERT = 2

    @property
    def label(self) -> str:
        return _TASK_LABELS[self]

    @classmethod
    def from_label(cls, name: str) -> "Task":
        try:
            return _TASK_BY_LABEL[name]
        except KeyError:
            raise RegistrySchemaError(f"unknown task {name!r}") from None


_TASK_LABELS = {
    Task.SLIDE_BLOCK: "slide_block",
    Task.CLOSE_BOX: "close_box",
    Task.PEG_INSERT: "peg_insert",
}
_TASK_BY_LABEL = {v: k for k, v in _TASK_LABELS.items()}

# Factor ranges; open intervals are sampled half-open with endpoint rejection.
CAMERA_POSE_RANGE = (-0.05, 0.05)
LIGHT_COLOR_RANGE = (0.0, 0.5)
OBJECT_COLOR_RANGE = (0.0, 1.0)
TABLE_COLOR_RANGE = (0.25, 1.0)
FRICTION_RANGE = (0.0, 1.0)
OBJECT_SIZE_RANGE = {
    Task.SLIDE_BLOCK: None,  # fixed at 1.0
    Task.CLOSE_BOX: (0.75, 1.15),
    Task.PEG_INSERT: (1.0, 1.5),
}


class RegistryError(Exception):
    """Base error for registry files."""


class RegistryVersionError(RegistryError):
    """Registry file declares an unsupported format version."""


class RegistrySchemaError(RegistryError):
    """Registry file violates the schema or a factor range."""


@dataclass(frozen=True)
class VariationFactors:
    """Per-client perturbations that make the federation non-IID."""

    background_texture_id: int
    object_texture_id: int
    table_texture_id: int
    camera_pose_delta: tuple[float, float, float]
    light_color: tuple[float, float, float]
    object_color: tuple[float, float, float]
    table_color: tuple[float, float, float]
    object_size_scale: float
    friction_u: float

    def validate(self, task: Task) -> None:
        for name in ("background_texture_id", "object_texture_id", "table_texture_id"):
            tid = getattr(self, name)
            if not isinstance(tid, int) or not 0 <= tid < TEXTURE_COUNT:
                raise RegistrySchemaError(f"{name}={tid!r} outside [0, {TEXTURE_COUNT - 1}]")
        _check_open(self.camera_pose_delta, CAMERA_POSE_RANGE, "camera_pose_delta")
        _check_open(self.light_color, LIGHT_COLOR_RANGE, "light_color")
        _check_open(self.object_color, OBJECT_COLOR_RANGE, "object_color")
        _check_open(self.table_color, TABLE_COLOR_RANGE, "table_color")
        _check_open((self.friction_u,), FRICTION_RANGE, "friction_u")
        size_range = OBJECT_SIZE_RANGE[task]
        if size_range is None:
            if self.object_size_scale != 1.0:
                raise RegistrySchemaError(
                    f"object_size_scale must be 1.0 for {task.label}, "
                    f"got {self.object_size_scale}"
                )
        else:
            _check_open((self.object_size_scale,), size_range, "object_size_scale")


def _check_open(values, bounds, name) -> None:
    lo, hi = bounds
    for v in values:
        if not isinstance(v, (int, float)) or not math.isfinite(v) or not lo < v < hi:
            raise RegistrySchemaError(f"{name} value {v!r} outside open ({lo}, {hi})")


@dataclass(frozen=True)
class EnvironmentConfig:
    """One client's world: task, factors, split membership, pose seed."""

    client_id: int
    task: Task
    factors: VariationFactors
    split: str
    base_seed: int

    def validate(self) -> None:
        if self.client_id < 0:
            raise RegistrySchemaError(f"client_id must be >= 0, got {self.client_id}")
        if self.split not in SPLITS:
            raise RegistrySchemaError(f"split must be one of {SPLITS}, got {self.split!r}")
        self.factors.validate(self.task)


@dataclass(frozen=True)
class Registry:
    """Ordered environment database plus the seed that produced it."""

    format_version: int
    task: Task
    seed: int
    environments: tuple[EnvironmentConfig, ...]
    split_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "environments", tuple(self.environments))

    def validate(self) -> None:
        if self.format_version != FORMAT_VERSION:
            raise RegistryVersionError(
                f"unsupported registry format_version {self.format_version}"
            )
        ids = [e.client_id for e in self.environments]
        if ids != sorted(ids) or len(set(ids)) != len(ids):
            raise RegistrySchemaError("client_ids must be unique and ascending")
        counts = {s: 0 for s in SPLITS}
        for env in self.environments:
            env.validate()
            if env.task != self.task:
                raise RegistrySchemaError(
                    f"client {env.client_id} task {env.task.label} != registry task"
                )
            if env.base_seed != mix(self.seed, env.client_id):
                raise RegistrySchemaError(
                    f"client {env.client_id} base_seed is not derived from the "
                    "registry seed"
                )
            counts[env.split] += 1
        if counts != self.split_counts:
            raise RegistrySchemaError(
                f"split_counts {self.split_counts} disagree with environments {counts}"
            )

    def by_split(self, split: str) -> tuple[EnvironmentConfig, ...]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return tuple(e for e in self.environments if e.split == split)

    def client(self, client_id: int) -> EnvironmentConfig:
        for env in self.environments:
            if env.client_id == client_id:
                return env
        raise KeyError(f"no client {client_id} in registry")


def _draw_open(rng, lo: float, hi: float) -> float:
    # uniform [lo, hi); reject the measure-zero exact endpoint
    while True:
        x = float(rng.uniform(lo, hi))
        if lo < x < hi:
            return x


def sample_factors(task: Task, rng) -> VariationFactors:
    size_range = OBJECT_SIZE_RANGE[task]
    return VariationFactors(
        background_texture_id=int(rng.integers(0, TEXTURE_COUNT)),
        object_texture_id=int(rng.integers(0, TEXTURE_COUNT)),
        table_texture_id=int(rng.integers(0, TEXTURE_COUNT)),
        camera_pose_delta=tuple(_draw_open(rng, *CAMERA_POSE_RANGE) for _ in range(3)),
        light_color=tuple(_draw_open(rng, *LIGHT_COLOR_RANGE) for _ in range(3)),
        object_color=tuple(_draw_open(rng, *OBJECT_COLOR_RANGE) for _ in range(3)),
        table_color=tuple(_draw_open(rng, *TABLE_COLOR_RANGE) for _ in range(3)),
        object_size_scale=1.0 if size_range is None else _draw_open(rng, *size_range),
        friction_u=_draw_open(rng, *FRICTION_RANGE),
    )


def sample_environments(task: Task, n: int, seed: int) -> Registry:
    """Sample n client environments with ids 0..n-1, all in the train split."""
    if n < 1:
        raise ValueError(f"need at least one environment, got n={n}")
    rng = rng_from(seed, int(task))
    envs = []
    for client_id in range(n):
        envs.append(
            EnvironmentConfig(
                client_id=client_id,
                task=task,
                factors=sample_factors(task, rng),
                split="train",
                base_seed=mix(seed, client_id),
            )
        )
    reg = Registry(
        format_version=FORMAT_VERSION,
        task=task,
        seed=seed,
        environments=tuple(envs),
        split_counts={"train": n, "val": 0, "test": 0},
    )
    reg.validate()
    return reg


def assign_splits(reg: Registry, n_train: int, n_val: int, n_test: int) -> Registry:
    """Assign the first n_train ids to train, next n_val to val, rest to test."""
    total = n_train + n_val + n_test
    if total != len(reg.environments):
        raise ValueError(
            f"split sizes {n_train}+{n_val}+{n_test} != {len(reg.environments)} environments"
        )
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    envs = []
    for i, env in enumerate(reg.environments):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        envs.append(replace(env, split=split))
    out = replace(
        reg,
        environments=tuple(envs),
        split_counts={"train": n_train, "val": n_val, "test": n_test},
    )
    out.validate()
    return out


def _factors_to_dict(f: VariationFactors) -> dict:
    return {
        "background_texture_id": f.background_texture_id,
        "object_texture_id": f.object_texture_id,
        "table_texture_id": f.table_texture_id,
        "camera_pose_delta": list(f.camera_pose_delta),
        "light_color": list(f.light_color),
        "object_color": list(f.object_color),
        "table_color": list(f.table_color),
        "object_size_scale": f.object_size_scale,
        "friction_u": f.friction_u,
    }


def _factors_from_dict(d: dict) -> VariationFactors:
    try:
        return VariationFactors(
            background_texture_id=d["background_texture_id"],
            object_texture_id=d["object_texture_id"],
            table_texture_id=d["table_texture_id"],
            camera_pose_delta=tuple(d["camera_pose_delta"]),
            light_color=tuple(d["light_color"]),
            object_color=tuple(d["object_color"]),
            table_color=tuple(d["table_color"]),
            object_size_scale=d["object_size_scale"],
            friction_u=d["friction_u"],
        )
    except (KeyError, TypeError) as exc:
        raise RegistrySchemaError(f"malformed factors block: {exc}") from exc


def save_registry(reg: Registry, path: str | os.PathLike) -> None:
    reg.validate()
    doc = {
        "format_version": reg.format_version,
        "task": reg.task.label,
        "seed": reg.seed,
        "split_counts": dict(reg.split_counts),
        "environments": [
            {
                "client_id": env.client_id,
                "task": env.task.label,
                "split": env.split,
                "base_seed": env.base_seed,
                "factors": _factors_to_dict(env.factors),
            }
            for env in reg.environments
        ],
    }
    # json emits shortest round-tripping decimal for floats, so reals survive
    # the trip bit-exactly.
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_registry(path: str | os.PathLike) -> Registry:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise RegistrySchemaError(f"registry is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise RegistrySchemaError("registry document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise RegistryVersionError(f"unsupported registry format_version {version!r}")
    try:
        envs = tuple(
            EnvironmentConfig(
                client_id=e["client_id"],
                task=Task.from_label(e["task"]),
                factors=_factors_from_dict(e["factors"]),
                split=e["split"],
                base_seed=e["base_seed"],
            )
            for e in doc["environments"]
        )
        reg = Registry(
            format_version=version,
            task=Task.from_label(doc["task"]),
            seed=doc["seed"],
            environments=envs,
            split_counts={k: int(v) for k, v in doc["split_counts"].items()},
        )
    except (KeyError, TypeError) as exc:
        raise RegistrySchemaError(f"malformed registry document: {exc}") from exc
    reg.validate()
    return reg
