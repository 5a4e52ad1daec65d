"""Command-line interface: data generation, training, episodes, benchmarks.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on runtime
failures. All behavior is driven by one config file plus flag overrides, and
every command that rolls episodes requires an explicit seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, fingerprint, load_config
from .reports import SuiteReport, emit_report, read_trace, reaggregate_traces, write_trace
from .selftest import run_selftest


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D401 - argparse hook
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="specflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def common(p: _Parser, need_seed: bool = False) -> None:
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--out-dir", type=str, default="out", help="output directory")
        p.add_argument("--seed", type=int, required=need_seed, default=None)
        p.add_argument("--profile", type=str, default=None)
        p.add_argument("--speed", type=str, default=None)
        p.add_argument("--delta", type=float, default=None)
        p.add_argument("--timesteps", type=str, default=None, help="comma-separated taus")
        p.add_argument("--pf", type=int, default=None, help="periodic full-path refresh")
        p.add_argument("--fb", type=str, choices=["on", "off"], default=None)
        p.add_argument("--trials", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate the expert dataset")
    common(p)
    p = sub.add_parser("train-main", help="train the main policy")
    common(p)
    p.add_argument("--data", type=str, default=None, help="dataset file from gen-data")
    p = sub.add_parser("train-draft", help="train the draft model")
    common(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--models-dir", type=str, default=None, help="directory with main.ckpt")
    p = sub.add_parser("run", help="run one episode with a verbose trace")
    common(p, need_seed=True)
    p.add_argument("--models-dir", type=str, default=None)
    p.add_argument("--variant", type=str, default=None)
    p.add_argument("--mode", type=str, choices=["full_only", "flash"], default=None)
    p = sub.add_parser("bench", help="run the benchmark grid")
    common(p, need_seed=True)
    p.add_argument("--models-dir", type=str, default=None)
    p = sub.add_parser("report", help="re-aggregate from raw traces")
    common(p)
    p.add_argument("--traces", type=str, required=True, help="trace file or directory")
    p = sub.add_parser("verify-selftest", help="run analytic self-checks")
    common(p)
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    over: dict = {}
    if args.profile is not None:
        over.setdefault("latency", {})["profile"] = args.profile
    if args.delta is not None:
        over.setdefault("verifier", {})["delta"] = args.delta
    if args.timesteps is not None:
        try:
            taus = [float(t) for t in args.timesteps.split(",") if t.strip()]
        except ValueError:
            raise UsageError(f"--timesteps: cannot parse {args.timesteps!r}")
        over.setdefault("verifier", {})["timesteps"] = taus
    if args.pf is not None:
        over.setdefault("runtime", {})["periodic_refresh"] = args.pf
    if args.fb is not None:
        over.setdefault("runtime", {})["phase_fallback"] = args.fb == "on"
    if args.trials is not None:
        over.setdefault("bench", {})["trials"] = args.trials
    if args.seed is not None:
        over["seed"] = args.seed
    if args.speed is not None and args.command == "bench":
        over.setdefault("bench", {})["speeds"] = [args.speed]
    return over


def _load(args: argparse.Namespace) -> dict:
    return load_config(args.config, overrides=_overrides_from_args(args))


def _models(config: dict, args: argparse.Namespace, out_dir: Path):
    from .harness import prepare_models

    models_dir = Path(args.models_dir) if getattr(args, "models_dir", None) else out_dir / "models"
    prepared = prepare_models(config, models_dir)
    return prepared


def _cmd_gen_data(args: argparse.Namespace) -> int:
    from .harness import build_dataset, save_dataset

    config = _load(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(config)
    path = out / "dataset.bin"
    save_dataset(path, dataset, config)
    print(
        f"dataset: {len(dataset.pairs)} pairs from {len(dataset.demos)} episodes "
        f"({dataset.excluded_failures} failures excluded) -> {path}"
    )
    return 0


def _cmd_train_main(args: argparse.Namespace) -> int:
    from . import checkpoint as ckpt
    from .harness import build_dataset, build_training_arrays, load_dataset, train_main

    config = _load(args)
    out = Path(args.out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(args.data, config) if args.data else build_dataset(config)
    arrays = build_training_arrays(config, dataset)
    encoder, field, losses = train_main(config, arrays)
    path = out / "models" / "main.ckpt"
    ckpt.save_main_checkpoint(
        path,
        encoder,
        field,
        arrays.standardizer,
        meta={"train_config": config["train_main"], "seeds": {"dataset_seed": config["dataset"]["seed"]}},
    )
    print(f"main policy: flow loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses)} epochs -> {path}")
    return 0


def _cmd_train_draft(args: argparse.Namespace) -> int:
    from . import checkpoint as ckpt
    from .harness import build_dataset, build_training_arrays, load_dataset, train_draft_model

    config = _load(args)
    out = Path(args.out_dir)
    models_dir = Path(args.models_dir) if args.models_dir else out / "models"
    main_path = models_dir / "main.ckpt"
    if not main_path.exists():
        raise UsageError(f"train-draft: missing main checkpoint at {main_path}")
    encoder, field, standardizer, _ = ckpt.load_main_checkpoint(main_path)
    dataset = load_dataset(args.data, config) if args.data else build_dataset(config)
    # stay consistent with the scalers frozen into the main checkpoint
    arrays = build_training_arrays(
        config, dataset, standardizer=standardizer, normalizer=encoder.normalizer
    )
    model, curve = train_draft_model(config, encoder, field, arrays)
    path = models_dir / "draft.ckpt"
    ckpt.save_draft_checkpoint(
        path, model, meta={"train_config": config["train_draft"]}
    )
    print(f"draft: best validation RMS {min(curve):.4f} over {len(curve)} epochs -> {path}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    from .harness import run_single_episode

    config = _load(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = _models(config, args, out)
    speed = args.speed or config["dataset"]["speed"]
    variant = args.variant or config["bench"]["variants"][0]
    stats, records = run_single_episode(
        config,
        prepared.models,
        episode_seed=args.seed,
        speed=speed,
        variant=variant,
        mode=args.mode,
        profile_name=args.profile,
    )
    recs = [
        r.to_record(episode_seed=args.seed, speed=speed, variant=variant)
        for r in records
    ]
    trace_path = out / f"trace_seed{args.seed}.jsonl"
    write_trace(trace_path, recs)
    for r in records:
        line = (
            f"round {r.index:3d} tick {r.start_tick:4d} {r.path:24s} "
            f"lat {r.latency_ms:6.1f} ms stall {r.stall_ticks} exec {r.executed:2d}"
        )
        if r.prefix is not None:
            line += f" L={r.prefix} branches={list(r.branch_prefixes)}"
        if r.terminal:
            line += f" [{r.terminal}]"
        print(line)
    print(
        f"episode: success={stats.success} rounds={stats.rounds} FR={stats.flash_rate:.3f} "
        f"Acc={stats.acc:.3f} Lat={stats.lat_ms:.1f}ms /Act={stats.per_action_ms:.2f}ms"
    )
    stats_path = out / f"episode_seed{args.seed}.json"
    stats_path.write_text(
        json.dumps(stats.__dict__, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"trace -> {trace_path}")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    from .harness import run_benchmark

    config = _load(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = _models(config, args, out)
    report, traces = run_benchmark(config, prepared.models, bench_seed=args.seed)
    traces_dir = out / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    for cid, records in traces.items():
        write_trace(traces_dir / f"{cid}.jsonl", records)
    paths = emit_report(report, out)
    for cond in report.conditions:
        speedup = f"{cond.speedup:.2f}x" if cond.speedup is not None else "-"
        print(
            f"{cond.condition_id:40s} SR={cond.sr:5.2f} Lat={cond.lat_ms:6.1f}ms "
            f"FR={cond.fr:.3f} Acc={cond.acc:.3f} speedup={speedup}"
        )
    print(f"report -> {paths['csv']} , {paths['json']}; traces -> {traces_dir}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    from .reports import apply_speedup

    config = _load(args)
    src = Path(args.traces)
    files = sorted(src.glob("*.jsonl")) if src.is_dir() else [src]
    if not files:
        raise UsageError(f"report: no trace files under {src}")
    records = [rec for f in files for rec in read_trace(f)]
    conditions = reaggregate_traces(records, int(config["chunk"]["replan_size"]))
    conditions = apply_speedup(conditions, str(config["bench"]["baseline"]))
    from .. import __version__

    report = SuiteReport(
        conditions=conditions,
        config_fingerprint=fingerprint(config),
        seed=int(config["seed"]),
        code_version=__version__,
        replan_size=int(config["chunk"]["replan_size"]),
    )
    out = Path(args.out_dir)
    paths = emit_report(report, out)
    print(f"re-aggregated {len(records)} round records from {len(files)} file(s)")
    print(f"report -> {paths['csv']} , {paths['json']}")
    return 0


def _cmd_selftest(args: argparse.Namespace) -> int:
    results = run_selftest()
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} selftest check(s) failed")
        return 2
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-main": _cmd_train_main,
    "train-draft": _cmd_train_draft,
    "run": _cmd_run,
    "bench": _cmd_bench,
    "report": _cmd_report,
    "verify-selftest": _cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
