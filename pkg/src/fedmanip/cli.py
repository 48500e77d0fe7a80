"""Command-line entry point.

Subcommands cover the whole pipeline: gen-envs, collect, train (both
transports, plus --dry-run), serve/client (TCP roles), eval, ablate, report,
selftest, and demo (a tiny end-to-end run).  Exit codes: 0 success, 1 usage
error (bad flags, missing files, unschedulable configs), 2 runtime failure.

Every train flag has a run.json equivalent; flags override file values and
the merged effective configuration is written back to the run directory.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import protocol, reporting, sim
from .aggregation import (
    Aggregator,
    KrumConfig,
    krum_select,
    weighted_average,
)
from .client import ClientUpdate, LocalTrainConfig
from .dataset import collect_demos
from .evaluation import EvalReport, evaluate_policy
from .model import Batch, ModelSpec, grad_check, init_params
from .orchestrator import (
    ConfigError,
    RunConfig,
    client_serve,
    dry_run,
    load_checkpoint,
    run_training,
    select_best,
)
from .registry import (
    RegistryError,
    Task,
    assign_splits,
    load_registry,
    sample_environments,
    save_registry,
)
from .seeding import mix, rng_from
from .sweep import KNOBS, ablation_sweep

DEMO_CONFIG = dict(n_envs=12, splits=(8, 2, 2), k_episodes=10, clients_per_round=4,
                   rounds=5, epochs=10, val_episodes=10, test_episodes=10, seed=2024)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _task_arg(value: str) -> Task:
    try:
        return Task.from_label(value)
    except RegistryError:
        raise UsageError(
            f"unknown task {value!r}; choose from "
            + ", ".join(t.label for t in Task)
        ) from None


def _splits_arg(value: str) -> tuple[int, int, int]:
    parts = value.split("/")
    if len(parts) != 3:
        raise UsageError(f"splits must look like 400/10/10, got {value!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"splits must be integers, got {value!r}") from None


def _ints_arg(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in value.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {value!r}") from None


def build_parser() -> _Parser:
    p = _Parser(prog="fedmanip", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-envs", help="sample an environment registry")
    g.add_argument("--task", type=_task_arg, required=True)
    g.add_argument("--num-envs", type=int, required=True)
    g.add_argument("--splits", type=_splits_arg, default=None,
                   help="train/val/test sizes, e.g. 400/10/10 (default: all train)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--run-dir", default=".")
    g.add_argument("--out", default=None, help="registry path (default <run>/environments.json)")

    c = sub.add_parser("collect", help="collect expert demonstrations")
    c.add_argument("--run-dir", default=".")
    c.add_argument("--registry", default=None)
    c.add_argument("--episodes", type=int, required=True, help="demonstrations per client")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--splits", default="train,val,test",
                   help="comma-separated splits to collect")

    for name in ("train", "serve"):
        t = sub.add_parser(
            name,
            help="run federated training"
            + (" as a TCP coordinator" if name == "serve" else ""),
        )
        t.add_argument("--run-dir", default=".")
        t.add_argument("--registry", default=None)
        t.add_argument("--data-dir", default=None)
        t.add_argument("--task", type=_task_arg, default=None)
        t.add_argument("--strategy", choices=("fedavg", "fedavgm", "fedopt", "krum"),
                       default=None)
        t.add_argument("--strategy-param", action="append", default=None,
                       metavar="KEY=VALUE", help="strategy hyperparameter, repeatable")
        t.add_argument("--rounds", type=int, default=None)
        t.add_argument("--clients-per-round", type=int, default=None)
        t.add_argument("--local-epochs", type=int, default=None)
        t.add_argument("--batch-size", type=int, default=None)
        t.add_argument("--lr", type=float, default=None)
        t.add_argument("--seed", type=int, default=None)
        t.add_argument("--eval-every", type=int, default=None)
        t.add_argument("--val-episodes", type=int, default=None)
        t.add_argument("--hidden-widths", type=_ints_arg, default=None)
        t.add_argument("--workers", type=int, default=None)
        t.add_argument("--dry-run", action="store_true",
                       help="validate and print the schedule without training")
        if name == "train":
            t.add_argument("--transport", choices=("in_process", "tcp"), default=None)
        t.add_argument("--host", default=None)
        t.add_argument("--port", type=int, default=None)

    cl = sub.add_parser("client", help="serve one client's shard over TCP")
    cl.add_argument("--connect", required=True, metavar="HOST:PORT")
    cl.add_argument("--run-dir", default=".")
    cl.add_argument("--registry", default=None)
    cl.add_argument("--data-dir", default=None)
    cl.add_argument("--client-id", type=int, required=True)
    cl.add_argument("--batch-size", type=int, default=64,
                    help="must match the coordinator's batch size")
    cl.add_argument("--hidden-widths", type=_ints_arg, default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--run-dir", default=".")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--checkpoint", default=None,
                   help="checkpoint file (default: best by validation metrics)")
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--workers", type=int, default=None)

    a = sub.add_parser("ablate", help="sweep one knob, retraining per value")
    a.add_argument("--run-dir", default=".")
    a.add_argument("--knob", choices=KNOBS, required=True)
    a.add_argument("--values", type=_ints_arg, required=True)
    a.add_argument("--episodes", type=int, default=50)
    a.add_argument("--workers", type=int, default=None)

    r = sub.add_parser("report", help="render stored evaluation results")
    r.add_argument("--run-dir", default=".")
    r.add_argument("--split", default="test")
    r.add_argument("--formats", default="csv,md")

    sub.add_parser("selftest", help="gradient, aggregation, and protocol oracles")

    d = sub.add_parser("demo", help="tiny end-to-end pipeline (gen->report)")
    d.add_argument("--run-dir", default="demo_run")
    d.add_argument("--transport", choices=("in_process", "tcp"), default="in_process")

    return p


def _registry_path(args) -> Path:
    if getattr(args, "registry", None):
        return Path(args.registry)
    return Path(args.run_dir) / "environments.json"


def _data_dir(args) -> Path:
    if getattr(args, "data_dir", None):
        return Path(args.data_dir)
    return Path(args.run_dir) / "data"


def cmd_gen_envs(args) -> int:
    reg = sample_environments(args.task, args.num_envs, args.seed)
    if args.splits is not None:
        reg = assign_splits(reg, *args.splits)
    out = Path(args.out) if args.out else Path(args.run_dir) / "environments.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_registry(reg, out)
    print(f"wrote {len(reg.environments)} environments to {out} "
          f"(splits {reg.split_counts})")
    return 0


def cmd_collect(args) -> int:
    reg = load_registry(_registry_path(args))
    data_dir = _data_dir(args)
    for split in args.splits.split(","):
        split = split.strip()
        envs = reg.by_split(split)
        if not envs:
            print(f"split {split}: no environments, skipped", file=sys.stderr)
            continue
        paths = collect_demos(reg, split, args.episodes, seed=args.seed, data_dir=data_dir)
        print(f"split {split}: {len(paths)} shards x {args.episodes} episodes")
    return 0


def _parse_strategy_params(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--strategy-param needs KEY=VALUE, got {pair!r}")
        key, val = pair.split("=", 1)
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def _merged_run_config(args, transport_override=None) -> tuple[RunConfig, Path]:
    """run.json values, overridden by explicitly passed flags, written back."""
    run_dir = Path(args.run_dir)
    run_json = run_dir / "run.json"
    if run_json.exists():
        cfg = RunConfig.from_dict(json.loads(run_json.read_text()))
    else:
        reg_path = _registry_path(args)
        if not reg_path.exists():
            raise UsageError(f"no registry at {reg_path}; run gen-envs first")
        reg = load_registry(reg_path)
        cfg = RunConfig(
            task=reg.task, registry_path=str(reg_path), data_dir=str(_data_dir(args))
        )
    if args.registry is not None:
        cfg = replace(cfg, registry_path=args.registry)
    if args.data_dir is not None:
        cfg = replace(cfg, data_dir=args.data_dir)
    if args.task is not None:
        cfg = replace(cfg, task=args.task)
    if args.strategy is not None:
        cfg = replace(cfg, strategy=args.strategy)
    if args.strategy_param is not None:
        cfg = replace(cfg, strategy_params=_parse_strategy_params(args.strategy_param))
    if args.rounds is not None:
        cfg = replace(cfg, rounds=args.rounds)
    if args.clients_per_round is not None:
        cfg = replace(cfg, clients_per_round=args.clients_per_round)
    local = cfg.local
    if args.local_epochs is not None:
        local = replace(local, epochs=args.local_epochs)
    if args.batch_size is not None:
        local = replace(local, batch_size=args.batch_size)
    if args.lr is not None:
        local = replace(local, lr=args.lr)
    cfg = replace(cfg, local=local)
    if args.seed is not None:
        cfg = replace(cfg, run_seed=args.seed)
    if args.eval_every is not None:
        cfg = replace(cfg, eval_every=args.eval_every)
    if args.val_episodes is not None:
        cfg = replace(cfg, val_episodes=args.val_episodes)
    if args.hidden_widths is not None:
        cfg = replace(cfg, hidden_widths=args.hidden_widths)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if transport_override is not None:
        cfg = replace(cfg, transport=transport_override)
    elif getattr(args, "transport", None) is not None:
        cfg = replace(cfg, transport=args.transport)
    if args.host is not None:
        cfg = replace(cfg, tcp_host=args.host)
    if args.port is not None:
        cfg = replace(cfg, tcp_port=args.port)

    run_dir.mkdir(parents=True, exist_ok=True)
    run_json.write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    return cfg, run_dir


def cmd_train(args, transport_override=None) -> int:
    cfg, run_dir = _merged_run_config(args, transport_override)
    registry = load_registry(cfg.registry_path)
    cfg.validate(registry)
    if args.dry_run:
        schedule = dry_run(cfg, registry=registry)
        print(f"config valid; {len(schedule)} rounds x {cfg.clients_per_round} clients")
        print(f"round 0 selects {schedule[0]}")
        return 0
    if cfg.transport == "tcp":
        print(f"waiting for {len(registry.by_split('train'))} clients on "
              f"{cfg.tcp_host}:{cfg.tcp_port}", file=sys.stderr)

    def log(record):
        msg = f"round {record.round:3d} loss {record.mean_train_loss:.5f}"
        if record.val_success_norm is not None:
            msg += (f" val_rmse {record.val_rmse_mean:.4f}"
                    f" val_success {record.val_success_norm:.3f}")
        print(msg, file=sys.stderr)

    records, checkpoints = run_training(cfg, run_dir=run_dir, registry=registry, log=log)
    best = select_best(checkpoints, records)
    (run_dir / "best_round.txt").write_text(str(best.round) + "\n")
    print(f"trained {cfg.rounds} rounds; best checkpoint from round {best.round}")
    return 0


def cmd_client(args) -> int:
    host, _, port = args.connect.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"--connect needs HOST:PORT, got {args.connect!r}")
    reg = load_registry(_registry_path(args))
    widths = args.hidden_widths or (256, 128, 512)
    spec = ModelSpec(input_dim=sim.obs_dim(reg.task), hidden_widths=widths)
    client_serve(
        host, int(port), args.client_id, reg, _data_dir(args), spec,
        batch_size=args.batch_size,
    )
    return 0


def _best_checkpoint(run_dir: Path, spec: ModelSpec):
    best_file = run_dir / "best_round.txt"
    ckpt_dir = run_dir / "checkpoints"
    if best_file.exists():
        rnd = int(best_file.read_text().strip())
        return load_checkpoint(ckpt_dir / f"round_{rnd:04d}.flck", spec)
    candidates = sorted(ckpt_dir.glob("round_*.flck"))
    if not candidates:
        raise UsageError(f"no checkpoints under {ckpt_dir}; train first")
    return load_checkpoint(candidates[-1], spec)


def _report_dict(report: EvalReport) -> dict:
    return {
        "env_ids": list(report.env_ids),
        "rmse_per_env": list(report.rmse_per_env),
        "rmse_mean": report.rmse_mean,
        "rmse_std": report.rmse_std,
        "success_raw_per_env": list(report.success_raw_per_env),
        "success_norm_per_env": list(report.success_norm_per_env),
        "expert_raw_per_env": list(report.expert_raw_per_env),
        "success_raw_mean": report.success_raw_mean,
        "success_norm_mean": report.success_norm_mean,
        "success_norm_std": report.success_norm_std,
        "episodes": report.episodes,
        "n_envs": report.n_envs,
    }


def _report_from_dict(d: dict) -> EvalReport:
    return EvalReport(
        env_ids=tuple(d["env_ids"]),
        rmse_per_env=tuple(d["rmse_per_env"]),
        rmse_mean=d["rmse_mean"],
        rmse_std=d["rmse_std"],
        success_raw_per_env=tuple(d["success_raw_per_env"]),
        success_norm_per_env=tuple(d["success_norm_per_env"]),
        expert_raw_per_env=tuple(d["expert_raw_per_env"]),
        success_raw_mean=d["success_raw_mean"],
        success_norm_mean=d["success_norm_mean"],
        success_norm_std=d["success_norm_std"],
        episodes=d["episodes"],
        n_envs=d["n_envs"],
    )


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    run_json = run_dir / "run.json"
    if not run_json.exists():
        raise UsageError(f"no run.json under {run_dir}; train first")
    cfg = RunConfig.from_dict(json.loads(run_json.read_text()))
    reg = load_registry(cfg.registry_path)
    spec = cfg.model_spec()
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint, spec)
    else:
        ckpt = _best_checkpoint(run_dir, spec)
    report = evaluate_policy(
        ckpt.params, spec, reg, args.split, cfg.data_dir,
        episodes=args.episodes, workers=args.workers,
    )
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / f"eval_{args.split}.json").write_text(
        json.dumps(_report_dict(report), indent=2) + "\n"
    )
    reporting.write_csv(report, reports_dir / f"eval_{args.split}.csv")
    reporting.write_markdown(
        {cfg.strategy: report}, reports_dir / f"eval_{args.split}.md"
    )
    print(
        f"{args.split}: rmse {reporting.format_pm(report.rmse_mean, report.rmse_std, 100)}"
        f" x1e-2 | success_raw {report.success_raw_mean:.3f}"
        f" | success_norm {reporting.format_pm(report.success_norm_mean, report.success_norm_std)}"
    )
    return 0


def cmd_ablate(args) -> int:
    run_dir = Path(args.run_dir)
    run_json = run_dir / "run.json"
    if not run_json.exists():
        raise UsageError(f"no run.json under {run_dir}; train first")
    base = RunConfig.from_dict(json.loads(run_json.read_text()))
    sweep_dir = run_dir / "sweeps" / args.knob
    sweep_dir.mkdir(parents=True, exist_ok=True)
    result = ablation_sweep(
        base, args.knob, args.values, sweep_dir,
        test_episodes=args.episodes, workers=args.workers,
        log=lambda m: print(m, file=sys.stderr) if isinstance(m, str) else None,
    )
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_svg([result], reports_dir / f"sweep_{args.knob}.svg")
    lines = ["value,success_norm_mean,success_norm_std,rmse_mean,rmse_std"]
    for v, rep in zip(result.values, result.reports):
        lines.append(
            f"{v},{rep.success_norm_mean:.17g},{rep.success_norm_std:.17g},"
            f"{rep.rmse_mean:.17g},{rep.rmse_std:.17g}"
        )
    (reports_dir / f"sweep_{args.knob}.csv").write_text("\n".join(lines) + "\n")
    for v, rep in zip(result.values, result.reports):
        print(f"{args.knob}={v}: success_norm "
              f"{reporting.format_pm(rep.success_norm_mean, rep.success_norm_std)}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    reports_dir = run_dir / "reports"
    stored = reports_dir / f"eval_{args.split}.json"
    if not stored.exists():
        raise UsageError(f"no stored evaluation at {stored}; run eval first")
    report = _report_from_dict(json.loads(stored.read_text()))
    for fmt in args.formats.split(","):
        fmt = fmt.strip()
        if fmt == "svg":
            print("svg rendering needs sweep results; use ablate", file=sys.stderr)
            continue
        out = reports_dir / f"eval_{args.split}.{fmt}"
        reporting.emit_report(report, fmt, out)
        print(f"wrote {out}")
    return 0


def _selftest_gradients(rng) -> None:
    for trial in range(20):
        dims = [int(rng.integers(1, 9)) for _ in range(3)]
        spec = ModelSpec(input_dim=dims[0], hidden_widths=(dims[1],), output_dim=dims[2])
        params = init_params(spec, int(rng.integers(0, 2**31)))
        b = int(rng.integers(1, 6))
        batch = Batch(
            observations=rng.standard_normal((b, dims[0])),
            targets=rng.uniform(-1, 1, (b, dims[2])),
        )
        err = grad_check(spec, params, batch, h=1e-6)
        if err > 1e-5:
            raise AssertionError(f"gradient check failed: rel err {err:.2e}")


def _selftest_aggregation(rng) -> None:
    for trial in range(50):
        n = int(rng.integers(3, 7))
        dim = int(rng.integers(1, 5))
        updates = [
            ClientUpdate(i, rng.standard_normal(dim), int(rng.integers(1, 50)), 0.0)
            for i in range(n)
        ]
        avg = weighted_average(updates)
        brute = sum(u.num_samples * u.params for u in updates) / sum(
            u.num_samples for u in updates
        )
        if np.max(np.abs(avg - brute)) > 1e-12:
            raise AssertionError("weighted_average disagrees with brute force")
        cfg = KrumConfig(f=0)
        chosen = krum_select(updates, cfg)
        scores = []
        for u in updates:
            d = sorted(float(np.sum((u.params - v.params) ** 2)) for v in updates if v is not u)
            scores.append(sum(d[: n - 2]))
        expected = updates[int(np.argmin(scores))]
        if chosen.client_id != expected.client_id:
            raise AssertionError("krum disagrees with the exhaustive oracle")


def _selftest_protocol(rng) -> None:
    params = rng.standard_normal(17)
    messages = [
        protocol.Hello(client_id=3),
        protocol.Fit(round=2, epochs=5, lr=1e-4, shuffle_seed=12345, params=params),
        protocol.FitResult(client_id=3, num_samples=99, train_loss=0.25, params=params),
        protocol.Eval(params=params),
        protocol.EvalResult(rmse=0.1, success=0.9),
        protocol.Shutdown(),
    ]
    for msg in messages:
        if protocol.decode_message(protocol.encode_message(msg)) != msg:
            raise AssertionError(f"round-trip failed for {type(msg).__name__}")
    for _ in range(2000):
        blob = rng.bytes(int(rng.integers(0, 64)))
        try:
            protocol.decode_message(blob)
        except protocol.ProtocolError:
            pass


def cmd_selftest(args) -> int:
    rng = np.random.default_rng(0)
    for name, fn in [
        ("gradient-check", _selftest_gradients),
        ("aggregation-oracles", _selftest_aggregation),
        ("protocol-roundtrip", _selftest_protocol),
    ]:
        t0 = time.perf_counter()
        fn(rng)
        print(f"selftest {name}: ok ({time.perf_counter() - t0:.2f}s)")
    return 0


def demo_pipeline(run_dir: str | Path, transport: str = "in_process", log=print) -> int:
    """Tiny end-to-end pipeline used for smoke testing and determinism checks."""
    import threading

    d = DEMO_CONFIG
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    reg_path = run_dir / "environments.json"
    data_dir = run_dir / "data"

    reg = assign_splits(
        sample_environments(Task.SLIDE_BLOCK, d["n_envs"], d["seed"]), *d["splits"]
    )
    save_registry(reg, reg_path)
    for split in ("train", "val", "test"):
        collect_demos(reg, split, d["k_episodes"], data_dir=data_dir)
    log(f"collected {d['k_episodes']} episodes for {d['n_envs']} environments")

    cfg = RunConfig(
        task=Task.SLIDE_BLOCK,
        registry_path=str(reg_path),
        data_dir=str(data_dir),
        strategy="fedavg",
        rounds=d["rounds"],
        clients_per_round=d["clients_per_round"],
        local=LocalTrainConfig(epochs=d["epochs"]),
        run_seed=d["seed"],
        val_episodes=d["val_episodes"],
        transport=transport,
        tcp_port=0,
    )
    (run_dir / "run.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    client_threads = []
    if transport == "tcp":
        # port 0 binds ephemerally; clients need the resolved port, so run the
        # coordinator in this thread and clients in daemons once it listens
        from .orchestrator import RunContext  # noqa: F401 (documentation aid)

        records, checkpoints = _run_tcp_with_local_clients(cfg, reg, run_dir, d)
    else:
        records, checkpoints = run_training(cfg, run_dir=run_dir, registry=reg)
    best = select_best(checkpoints, records)
    log(f"trained {len(records)} rounds; best round {best.round}")

    report = evaluate_policy(
        best.params, cfg.model_spec(), reg, "test", data_dir,
        episodes=d["test_episodes"],
    )
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "eval_test.json").write_text(
        json.dumps(_report_dict(report), indent=2) + "\n"
    )
    reporting.write_csv(report, reports_dir / "eval_test.csv")
    reporting.write_markdown({cfg.strategy: report}, reports_dir / "eval_test.md")
    log(
        f"test rmse {report.rmse_mean:.4f} | raw success {report.success_raw_mean:.3f}"
        f" | normalized {report.success_norm_mean:.3f}"
    )
    return 0


def _run_tcp_with_local_clients(cfg: RunConfig, reg, run_dir, d):
    """Run the TCP coordinator with in-thread clients (demo/testing helper)."""
    import threading

    from .orchestrator import RunContext, is_eval_round, run_round, save_checkpoint
    from .orchestrator import Checkpoint, write_records_csv
    from .model import init_params as _init
    from .seeding import INIT_STREAM

    ctx = RunContext(cfg, registry=reg)
    try:
        port = ctx.transport.port
        spec = cfg.model_spec()
        threads = []
        for env in reg.by_split("train"):
            th = threading.Thread(
                target=client_serve,
                args=(cfg.tcp_host, port, env.client_id, reg, cfg.data_dir, spec),
                kwargs={"batch_size": cfg.local.batch_size},
                daemon=True,
            )
            th.start()
            threads.append(th)
        ctx.transport.wait_for_clients()
        global_params = _init(spec, mix(cfg.run_seed, INIT_STREAM))
        records, checkpoints = [], []
        ckpt_dir = Path(run_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for round_idx in range(cfg.rounds):
            global_params, record = run_round(global_params, round_idx, cfg, ctx)
            records.append(record)
            if is_eval_round(round_idx, cfg):
                ckpt = Checkpoint(round_idx, global_params, spec.fingerprint())
                checkpoints.append(ckpt)
                save_checkpoint(ckpt, ckpt_dir / f"round_{round_idx:04d}.flck")
        write_records_csv(records, Path(run_dir) / "records.csv")
    finally:
        ctx.close()
    for th in threads:
        th.join(timeout=10)
    return records, checkpoints


def cmd_demo(args) -> int:
    t0 = time.perf_counter()
    status = demo_pipeline(args.run_dir, transport=args.transport)
    print(f"demo pipeline finished in {time.perf_counter() - t0:.1f}s")
    return status


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-envs":
            return cmd_gen_envs(args)
        if args.command == "collect":
            return cmd_collect(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "serve":
            return cmd_train(args, transport_override="tcp")
        if args.command == "client":
            return cmd_client(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "selftest":
            return cmd_selftest(args)
        if args.command == "demo":
            return cmd_demo(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError, RegistryError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
