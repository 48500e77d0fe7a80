"""Ablation sweeps: re-run training while turning one knob, seeds held fixed.

Supported knobs mirror the benchmark's sensitivity axes: clients per round,
demonstrations per client, local epochs, and aggregation rounds.  The
demonstrations knob rewrites the training shards (sub-sampling stored
episodes, or re-collecting when more are requested than stored); evaluation
always runs against the untouched test shards.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, replace
from pathlib import Path

from .dataset import collect_client_demos, read_dataset, shard_path, write_dataset
from .evaluation import EvalReport, evaluate_policy
from .orchestrator import RunConfig, run_training, select_best
from .registry import Registry, load_registry

KNOBS = ("clients_per_round", "demos_per_client", "local_epochs", "rounds")


@dataclass(frozen=True)
class SweepResult:
    knob: str
    values: tuple[int, ...]
    reports: tuple[EvalReport, ...]
    base_fingerprint: str


def config_fingerprint(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _prepare_demo_dir(
    reg: Registry, base_data_dir: Path, out_dir: Path, k: int
) -> Path:
    """Training shards with exactly k episodes per client; val/test copied."""
    train_dir = out_dir / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    for cfg in reg.by_split("train"):
        src = shard_path(base_data_dir, "train", cfg.client_id)
        ds = read_dataset(src)
        if len(ds.episodes) >= k:
            ds = replace(ds, episodes=ds.episodes[:k])
        else:
            ds = collect_client_demos(cfg, k)
        write_dataset(ds, shard_path(out_dir, "train", cfg.client_id))
    for split in ("val", "test"):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for cfg in reg.by_split(split):
            src = shard_path(base_data_dir, split, cfg.client_id)
            if src.exists():
                shutil.copyfile(src, shard_path(out_dir, split, cfg.client_id))
    return out_dir


def apply_knob(base: RunConfig, knob: str, value: int) -> RunConfig:
    if knob == "clients_per_round":
        return replace(base, clients_per_round=int(value))
    if knob == "local_epochs":
        return replace(base, local=replace(base.local, epochs=int(value)))
    if knob == "rounds":
        return replace(base, rounds=int(value))
    if knob == "demos_per_client":
        return base  # data effect handled by the sweep driver
    raise ValueError(f"unknown knob {knob!r}, expected one of {KNOBS}")


def ablation_sweep(
    base: RunConfig,
    knob: str,
    values,
    work_dir: str | Path,
    test_episodes: int = 50,
    workers: int | None = None,
    log=None,
) -> SweepResult:
    """One full training run plus test evaluation per knob value."""
    values = tuple(int(v) for v in values)
    if not values:
        raise ValueError("sweep needs at least one knob value")
    if knob not in KNOBS:
        raise ValueError(f"unknown knob {knob!r}, expected one of {KNOBS}")
    if any(v < 1 for v in values):
        raise ValueError(f"knob values must be >= 1, got {values}")

    work_dir = Path(work_dir)
    reg = load_registry(base.registry_path)
    reports = []
    for value in values:
        cfg = apply_knob(base, knob, value)
        if knob == "demos_per_client":
            demo_dir = _prepare_demo_dir(
                reg, Path(base.data_dir), work_dir / f"data_k{value}", value
            )
            cfg = replace(cfg, data_dir=str(demo_dir))
        run_dir = work_dir / f"run_{knob}_{value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        records, checkpoints = run_training(cfg, run_dir=run_dir, registry=reg, log=log)
        best = select_best(checkpoints, records)
        report = evaluate_policy(
            best.params,
            cfg.model_spec(),
            reg,
            "test",
            base.data_dir,
            episodes=test_episodes,
            workers=workers,
        )
        reports.append(report)
        if log is not None:
            log(f"{knob}={value}: test success_norm={report.success_norm_mean:.3f}")
    return SweepResult(
        knob=knob,
        values=values,
        reports=tuple(reports),
        base_fingerprint=config_fingerprint(base),
    )
