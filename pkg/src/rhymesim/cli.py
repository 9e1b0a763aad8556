"""Single entry point tying generation, analysis, planning, and simulation.

Config files are flat JSON key-value maps with dotted keys (for example
"cluster.rollout_workers" or "spec.window_init"); unknown keys are rejected
so typos fail loudly. Outputs are machine-readable by default and written
atomically; `--pretty` switches the analysis commands to human tables.

Exit codes: 0 success, 2 bad usage or config, 3 infeasible allocation plan,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io as stringio
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

from . import io as rio
from .history import HistoryStore
from .scheduler import AnalyticCostModel, ProfileCostModel, plan_allocation
from .sim import (
    EVENTS_SCHEMA_VERSION,
    RUN_SCHEMA_VERSION,
    ClusterSpec,
    CostConfig,
    InfeasiblePlanError,
    Policy,
    run,
)
from .spec_engine import SpecConfig, SpecStats
from .tracegen import Trace, TraceSpec, generate, rank_metrics, token_similarity_replay

SCHEMA_VERSIONS = {
    "trace": rio.TRACE_SCHEMA_VERSION,
    "run": RUN_SCHEMA_VERSION,
    "events": EVENTS_SCHEMA_VERSION,
    "plan": 1,
    "report": 1,
}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


def _load_flat_config(path: str) -> dict:
    try:
        obj = rio.read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return obj


def _pop_section(cfg: dict, prefix: str) -> dict:
    section = {}
    for key in list(cfg):
        if key.startswith(prefix + "."):
            section[key[len(prefix) + 1 :]] = cfg.pop(key)
    return section


def _build_dataclass(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where} config: {exc}") from exc


def _coerce_spec_section(section: dict) -> dict:
    if "gate_table" in section:
        section["gate_table"] = tuple(int(v) for v in section["gate_table"])
    return section


def load_run_config(path: str) -> tuple[ClusterSpec, CostConfig, SpecConfig, dict]:
    cfg = _load_flat_config(path)
    cluster = _build_dataclass(ClusterSpec, _pop_section(cfg, "cluster"), "cluster")
    cost = _build_dataclass(CostConfig, _pop_section(cfg, "cost"), "cost")
    spec = _build_dataclass(SpecConfig, _coerce_spec_section(_pop_section(cfg, "spec")), "spec")
    policy_defaults = _pop_section(cfg, "policy")
    if cfg:
        raise ConfigError(f"unknown config keys: {sorted(cfg)}")
    return cluster, cost, spec, policy_defaults


def load_trace_spec(path: str) -> TraceSpec:
    cfg = _load_flat_config(path)
    return _build_dataclass(TraceSpec, cfg, "trace spec")


def _parse_epoch_pair(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected EPOCH,EPOCH but got {text!r}")
    return int(parts[0]), int(parts[1])


def cmd_gen_trace(args) -> int:
    spec = load_trace_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    responses = generate(spec)
    rio.write_trace(args.out, responses)
    print(f"wrote {len(responses)} responses to {args.out}")
    return EXIT_OK


def _adjacent_pairs(trace: Trace) -> list[tuple[int, int]]:
    epochs = trace.epochs
    return list(zip(epochs, epochs[1:]))


def cmd_analyze_rank(args) -> int:
    trace = Trace(rio.read_trace(args.trace))
    pairs = [_parse_epoch_pair(args.epochs)] if args.epochs else _adjacent_pairs(trace)
    rows = []
    for pair in pairs:
        m = rank_metrics(trace, pair, args.groups)
        rows.append([pair[0], pair[1], f"{m.accurate_pct:.3f}", f"{m.not_last_10_pct:.3f}",
                     f"{m.within_1p1x_pct:.3f}", f"{m.migrated_pct:.3f}"])
    header = ["epoch_prev", "epoch_cur", "accurate_pct", "not_last_10_pct",
              "within_1p1x_pct", "migrated_pct"]
    if len(rows) > 1:
        mean = ["mean", "", *(f"{sum(float(r[i]) for r in rows) / len(rows):.3f}" for i in range(2, 6))]
        rows.append(mean)
    _emit_table(args, header, rows)
    return EXIT_OK


def cmd_analyze_similarity(args) -> int:
    trace = Trace(rio.read_trace(args.trace))
    pairs = [_parse_epoch_pair(args.epochs)] if args.epochs else _adjacent_pairs(trace)
    header = ["epoch_prev", "epoch_cur", "acceptance", "acceptance_after_warmup",
              "accepted", "total"]
    rows = []
    for pair in pairs:
        r = token_similarity_replay(trace, pair, args.prefix)
        rows.append([pair[0], pair[1], f"{r.acceptance:.6f}",
                     f"{r.acceptance_after_warmup:.6f}", r.accepted, r.total])
    _emit_table(args, header, rows)
    return EXIT_OK


def cmd_analyze_tree_stats(args) -> int:
    trace = Trace(rio.read_trace(args.trace))
    epoch = args.epoch if args.epoch is not None else trace.epochs[-1]
    store = HistoryStore()
    for pid, group in sorted(trace.epoch_responses(epoch).items()):
        store.ingest_epoch(pid, epoch, group)
    store.flush()
    stats = store.memory_stats()
    store.close()
    payload = {
        "epoch": epoch,
        "prompt_count": stats.prompt_count,
        "total_nodes": stats.total_nodes,
        "total_tokens": stats.total_tokens,
        "approx_bytes": stats.approx_bytes,
    }
    if args.out:
        rio.write_json(args.out, payload)
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench_spec(args) -> int:
    trace = Trace(rio.read_trace(args.trace))
    pair = (args.epochs - 1, args.epochs)
    result = token_similarity_replay(trace, pair, args.prefix)
    print(f"{result.acceptance:.6f}")
    return EXIT_OK


def cmd_plan_alloc(args) -> int:
    lens = [float(x) for x in args.lens.split(",")]
    if args.profile:
        model = ProfileCostModel.from_csv(args.profile)
        model.accepted_per_pass = args.accepted_per_pass
    else:
        a, b, c, batch = (float(x) for x in args.analytic.split(","))
        model = AnalyticCostModel(per_iter_base=a, per_iter_batch=b, fixed=c,
                                  batch_size=int(batch),
                                  accepted_per_pass=args.accepted_per_pass)
    plan = plan_allocation(lens, args.wks, args.t_train, model,
                           min_wks=args.min_wks,
                           max_wks=args.max_wks or max(args.min_wks, args.wks - (len(lens) - 1)),
                           precision=args.precision)
    payload = {"schema": SCHEMA_VERSIONS["plan"], **plan.as_dict()}
    if args.out:
        rio.write_json(args.out, payload)
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK if plan.feasible else EXIT_INFEASIBLE


def _run_one(run_args: dict) -> dict:
    trace = Trace(rio.read_trace(run_args["trace"]))
    cluster, cost, spec, policy_defaults = load_run_config(run_args["cluster"])
    policy_kwargs = dict(policy_defaults)
    policy_kwargs.update(run_args["policy_overrides"])
    policy = _build_dataclass(Policy, {"name": run_args["policy"], **policy_kwargs}, "policy")
    result = run(trace, cluster, policy, cost, spec, seed=run_args["seed"])
    out = run_args["out"]
    events_path = os.path.splitext(out)[0] + ".events.jsonl"
    rio.atomic_write_text(events_path, result.events_jsonl())
    payload = {
        "schema": RUN_SCHEMA_VERSION,
        "policy": policy.name,
        "policy_config": {
            "speculation": policy.speculation,
            "migration": policy.migration,
            "oversample_pct": policy.oversample_pct,
            "plan_precision": policy.plan_precision,
        },
        "seed": run_args["seed"],
        "trace": run_args["trace"],
        "cluster_config": run_args["cluster"],
        "metrics": result.metrics.as_dict(),
        "events_path": events_path,
        "timeline": [[w, s, e, k] for w, s, e, k in result.timeline],
        "spec_stats": {
            "header": SpecStats.CSV_HEADER,
            "rows": result.spec_stats_rows,
        },
        "accounting": {
            "migrations": result.accounting["migrations"],
            "inter_migrations": result.accounting["inter_migrations"],
            "samples": result.metrics.samples,
        },
    }
    rio.write_json(out, payload)
    return {"out": out, "samples_per_second": result.metrics.samples_per_second}


def cmd_run_sim(args) -> int:
    overrides = {}
    if args.speculation is not None:
        overrides["speculation"] = args.speculation
    if args.no_migration:
        overrides["migration"] = False
    if args.oversample is not None:
        overrides["oversample_pct"] = args.oversample
    seed = args.seed
    env_seed = os.environ.get("RHYME_SIM_SEED")
    if env_seed is not None:
        seed = int(env_seed)
    base = dict(trace=args.trace, cluster=args.cluster, policy=args.policy,
                policy_overrides=overrides, seed=seed, out=args.out)
    if args.replicas <= 1:
        summary = _run_one(base)
        print(f"wrote {summary['out']} ({summary['samples_per_second']:.4f} samples/s)")
        return EXIT_OK
    jobs = []
    root, ext = os.path.splitext(args.out)
    for i in range(args.replicas):
        job = dict(base)
        job["seed"] = seed + i
        job["out"] = f"{root}-{i}{ext}"
        jobs.append(job)
    with ProcessPoolExecutor(max_workers=min(args.replicas, os.cpu_count() or 1)) as pool:
        for summary in pool.map(_run_one, jobs):
            print(f"wrote {summary['out']} ({summary['samples_per_second']:.4f} samples/s)")
    return EXIT_OK


def cmd_report(args) -> int:
    runs = []
    for path in args.runs:
        payload = rio.read_json(path)
        if payload.get("schema") != RUN_SCHEMA_VERSION:
            raise ConfigError(f"{path}: unsupported run schema {payload.get('schema')}")
        runs.append((path, payload))
    base_sps = runs[0][1]["metrics"]["samples_per_second"]
    header = ["run", "policy", "samples_per_second", "normalized_throughput",
              "bubble_fraction", "rollout_share", "train_share", "idle_share",
              "migration_pct", "speculation_rate", "acceptance_rate"]
    rows = []
    for path, payload in runs:
        m = payload["metrics"]
        rows.append([
            os.path.basename(path), payload["policy"],
            f"{m['samples_per_second']:.6f}",
            f"{m['samples_per_second'] / base_sps:.6f}" if base_sps else "0",
            f"{m['bubble_fraction']:.6f}",
            f"{m['stage_shares'].get('rollout', 0.0):.6f}",
            f"{m['stage_shares'].get('train', 0.0):.6f}",
            f"{m['stage_shares'].get('idle', 0.0):.6f}",
            f"{m['migration_pct']:.6f}",
            f"{m['speculation_rate']:.6f}",
            f"{m['acceptance_rate']:.6f}",
        ])
    if args.csv:
        rio.write_csv(args.csv, header, rows)
        print(f"wrote {args.csv}")
    else:
        _print_table(header, rows, pretty=args.pretty)
    if args.timeline:
        timeline_rows = []
        for path, payload in runs:
            name = os.path.basename(path)
            for w, s, e, kind in payload["timeline"]:
                timeline_rows.append([name, w, s, e, kind])
        rio.write_csv(args.timeline, ["run", "worker_id", "start", "end", "activity"],
                      timeline_rows)
        print(f"wrote {args.timeline}")
    return EXIT_OK


def _emit_table(args, header: list[str], rows: list[list]) -> None:
    if getattr(args, "out", None):
        rio.write_csv(args.out, header, rows)
        print(f"wrote {args.out}")
    else:
        _print_table(header, rows, pretty=getattr(args, "pretty", False))


def _print_table(header: list[str], rows: list[list], pretty: bool) -> None:
    if not pretty:
        buf = stringio.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        sys.stdout.write(buf.getvalue())
        return
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    print("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rhymesim",
        description="History-driven speculative rollout drafting and pipeline "
                    "scheduling, with a deterministic desk-scale simulator.",
    )
    parser.add_argument("--version", action="version",
                        version=f"rhymesim schemas: {json.dumps(SCHEMA_VERSIONS, sort_keys=True)}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="synthesize a multi-epoch rollout trace")
    p.add_argument("--spec", required=True, help="trace spec JSON (TraceSpec fields)")
    p.add_argument("--out", required=True, help="output trace JSONL path")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_gen_trace)

    analyze = sub.add_parser("analyze", help="compute metrics over a trace")
    asub = analyze.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("rank", help="rank-stability metrics per epoch pair")
    p.add_argument("--trace", required=True)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--epochs", default=None, help="epoch pair A,B (default: all adjacent)")
    p.add_argument("--out", default=None, help="CSV output path (default: stdout)")
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=cmd_analyze_rank)

    p = asub.add_parser("similarity", help="token-similarity replay per epoch pair")
    p.add_argument("--trace", required=True)
    p.add_argument("--prefix", type=int, default=3)
    p.add_argument("--epochs", default=None, help="epoch pair A,B (default: all adjacent)")
    p.add_argument("--out", default=None)
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=cmd_analyze_similarity)

    p = asub.add_parser("tree-stats", help="suffix-index statistics for one epoch")
    p.add_argument("--trace", required=True)
    p.add_argument("--epoch", type=int, default=None, help="default: last epoch")
    p.add_argument("--out", default=None, help="JSON output path (default: stdout)")
    p.set_defaults(func=cmd_analyze_tree_stats)

    p = sub.add_parser("bench-spec",
                       help="print the replay acceptance fraction for epoch pair (N-1, N)")
    p.add_argument("--trace", required=True)
    p.add_argument("--epochs", type=int, required=True, help="current epoch N")
    p.add_argument("--prefix", type=int, default=3)
    p.set_defaults(func=cmd_bench_spec)

    p = sub.add_parser("plan-alloc", help="two-tier worker allocation for group lengths")
    p.add_argument("--lens", required=True, help="comma-separated ascending group lengths")
    p.add_argument("--wks", type=int, required=True)
    p.add_argument("--t-train", type=float, default=0.0, dest="t_train")
    p.add_argument("--profile", default=None, help="CSV len,dp,seconds profile for tau")
    p.add_argument("--analytic", default="0.004,0.0008,0.0,16",
                   help="a,b,c,batch for tau = l*(a+b*ceil(batch/dp))+c")
    p.add_argument("--accepted-per-pass", type=float, default=0.0)
    p.add_argument("--min-wks", type=int, default=1)
    p.add_argument("--max-wks", type=int, default=None)
    p.add_argument("--precision", type=float, default=1.0)
    p.add_argument("--out", default=None, help="JSON output (default: stdout)")
    p.set_defaults(func=cmd_plan_alloc)

    p = sub.add_parser("run-sim", help="simulate the pipeline over a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--cluster", required=True, help="flat JSON config (cluster.* cost.* spec.* policy.*)")
    p.add_argument("--policy", required=True,
                   choices=["colocated", "streaming", "histopipe_naive", "histopipe_two_tier"])
    p.add_argument("--out", required=True, help="run JSON output path")
    p.add_argument("--seed", type=int, default=0,
                   help="run seed (env RHYME_SIM_SEED overrides)")
    p.add_argument("--replicas", type=int, default=1,
                   help="fan out K runs with seeds seed..seed+K-1 in parallel")
    spec_group = p.add_mutually_exclusive_group()
    spec_group.add_argument("--speculation", dest="speculation", action="store_true", default=None)
    spec_group.add_argument("--no-speculation", dest="speculation", action="store_false")
    p.add_argument("--no-migration", action="store_true")
    p.add_argument("--oversample", type=float, default=None, help="oversample percent")
    p.set_defaults(func=cmd_run_sim)

    p = sub.add_parser("report", help="compare runs and export CSV/timelines")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--csv", default=None, help="comparison CSV path (default: stdout)")
    p.add_argument("--timeline", default=None, help="per-worker timeline CSV path")
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasiblePlanError as exc:
        print(f"error: infeasible plan: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except rio.TraceFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
