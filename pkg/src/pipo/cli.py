"""Command-line entry point: ``pipo <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import tempfile
from pathlib import Path

from . import bench
from .errors import PipoError
from .memory_model import Stage, WorkloadSpec, load_config, peak_memory, weight_sizes
from .planner import BandwidthProfile, Plan, choose_plan, load_hardware
from .runtime import RuntimeConfig, run_generation, run_sequential_baseline
from .storage import MiB, TierStore, pack_model
from .trace import export_trace, gantt_csv, load_trace, verify_trace

log = logging.getLogger("pipo")

MODE_ALIASES = {"perf": "performance", "mem": "memory_efficient"}
DEFAULT_SWEEP = [1 << i for i in range(9)]  # 1..256 MiB


def _parse_sizes(text: str) -> list[int]:
    return [int(float(s) * MiB) for s in text.split(",") if s.strip()]


def _workload(args, fallback) -> WorkloadSpec:
    if args.batch is None and args.prompt_len is None and args.gen_len is None and fallback:
        return fallback
    base = fallback or WorkloadSpec(1, 1, 1)
    return WorkloadSpec(
        args.batch if args.batch is not None else base.batch_size,
        args.prompt_len if args.prompt_len is not None else base.prompt_len,
        args.gen_len if args.gen_len is not None else base.gen_len,
    )


def _profile(args) -> BandwidthProfile:
    if getattr(args, "profile", None):
        return BandwidthProfile.from_csv(Path(args.profile).read_text())
    # no probe data: a flat curve makes the smallest candidate block win
    return BandwidthProfile.uniform({s * MiB: 1.0 for s in DEFAULT_SWEEP})


def cmd_plan(args) -> int:
    spec, wl = load_config(args.model)
    wl = _workload(args, wl)
    hw, _ = load_hardware(args.hw)
    plan = choose_plan(spec, wl, hw, _profile(args))
    reports = {
        f"{stage.value}{'_preload' if preload else ''}": peak_memory(spec, wl, stage, preload)
        for stage in (Stage.PREFILL, Stage.DECODE) for preload in (True, False)
    }
    if not args.json:
        for name, rep in reports.items():
            print(f"== {name}")
            print(rep.format_text())
        print()
    out = {"plan": plan.to_dict(), "weights": weight_sizes(spec).to_dict(),
           "memory": {k: r.to_dict() for k, r in reports.items()}}
    print(json.dumps(out, indent=2))
    return 0


def cmd_sweep(args) -> int:
    sizes = _parse_sizes(args.sizes)
    profile, chosen = bench.block_sweep(sizes, workdir=args.dir, bandwidth=args.bandwidth,
                                        knee=int(args.knee_mib * MiB), repeats=args.repeats)
    sys.stdout.write(profile.to_csv())
    print(f"chosen block size: {chosen} bytes ({chosen / MiB:g} MiB)", file=sys.stderr)
    return 0


def cmd_pack(args) -> int:
    spec, _ = load_config(args.model)
    if args.weight_dtype:
        spec = dataclasses.replace(spec, weight_dtype=args.weight_dtype)
    manifest = pack_model(spec, args.out, seed=args.seed)
    print(f"wrote {len(manifest['layers'])} layer blobs to {args.out}")
    return 0


def cmd_bench_transfer(args) -> int:
    seconds = bench.transfer_bench(args.mode, args.bytes, args.block, args.workers,
                                   workdir=args.dir, bandwidth=args.bandwidth,
                                   latency=args.latency, repeats=args.repeats, edge=args.edge)
    print("mode,bytes,block,workers,seconds,bps")
    print(f"{args.mode},{args.bytes},{args.block},{args.workers},{seconds:.6f},"
          f"{args.bytes / seconds:.1f}")
    return 0


def _generate(args):
    spec, wl = load_config(args.model)
    wl = _workload(args, wl)
    hw, emu = load_hardware(args.hw)
    weights = args.weights
    if weights is None or not (Path(weights) / "manifest.json").exists():
        weights = weights or tempfile.mkdtemp(prefix="pipo-weights-")
        pack_model(spec, weights, seed=args.seed)
    plan = choose_plan(spec, wl, hw, _profile(args))
    if args.mode != "auto":
        plan = dataclasses.replace(plan, pipeline_mode=MODE_ALIASES[args.mode])
    if args.tier:
        plan = dataclasses.replace(plan, weight_tier=args.tier)
    log.info("plan: %s", plan)
    config = RuntimeConfig(transfer_mode=args.transfer_mode, block_size=args.block_size,
                           device_flops=emu.device_flops, prompt_seed=args.seed)
    store = TierStore.from_hardware(hw, weights, emu)
    try:
        runner = run_sequential_baseline if args.baseline else run_generation
        return runner(weights, plan, wl, store=store, config=config)
    finally:
        store.close()


def cmd_run(args) -> int:
    result = _generate(args)
    for row, toks in enumerate(result.tokens):
        print(f"tokens[{row}]: {' '.join(map(str, toks))}")
    metrics = json.dumps(result.metrics.to_dict(), indent=2)
    if args.metrics:
        Path(args.metrics).write_text(metrics + "\n")
    print(metrics)
    if args.trace:
        export_trace(result.trace, args.trace)
        print(f"trace written to {args.trace}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    result = _generate(args)
    if args.trace:
        export_trace(result.trace, args.trace)
    m = result.metrics.to_dict()
    if args.json:
        print(json.dumps(m, indent=2))
    else:
        for k, v in m.items():
            print(f"{k:<18} {v}")
    return 0


def cmd_verify(args) -> int:
    trace = load_trace(args.file)
    violations = verify_trace(trace, mode=args.mode)
    for v in violations:
        print(v)
    if violations:
        print(f"{len(violations)} violation(s)", file=sys.stderr)
        return 1
    print(f"ok: {len(trace.events)} events, no violations")
    return 0


def cmd_gantt(args) -> int:
    sys.stdout.write(gantt_csv(load_trace(args.file)))
    return 0


def _add_workload(p) -> None:
    p.add_argument("--batch", type=int)
    p.add_argument("--prompt-len", type=int)
    p.add_argument("--gen-len", type=int)


def _add_run(p) -> None:
    p.add_argument("--model", required=True, help="model config JSON")
    p.add_argument("--hw", required=True, help="hardware config JSON")
    _add_workload(p)
    p.add_argument("--mode", choices=["auto", "perf", "mem"], default="auto")
    p.add_argument("--tier", choices=["device", "host", "disk"], help="override weight tier")
    p.add_argument("--baseline", action="store_true", help="sequential baseline")
    p.add_argument("--weights", help="packed weights dir (packed on the fly if missing)")
    p.add_argument("--profile", help="bandwidth profile CSV from sweep-block-size")
    p.add_argument("--block-size", type=int, help="override transfer block size (bytes)")
    p.add_argument("--transfer-mode", default="chunked",
                   choices=["naive", "pipelined", "chunked"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="write the NDJSON trace here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="memory report and automatic configuration")
    p.add_argument("--model", required=True)
    p.add_argument("--hw", required=True)
    _add_workload(p)
    p.add_argument("--profile", help="bandwidth profile CSV")
    p.add_argument("--json", action="store_true", help="JSON only")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("sweep-block-size", help="probe throughput per block size")
    p.add_argument("--sizes", default=",".join(map(str, DEFAULT_SWEEP)), help="MiB, comma separated")
    p.add_argument("--bandwidth", type=float, default=1e9, help="emulated link bytes/s")
    p.add_argument("--knee-mib", type=float, default=32.0, help="throughput plateau onset")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--dir", help="scratch directory")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("pack", help="write synthetic merged layer blobs")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weight-dtype", choices=["fp16", "int4"])
    p.set_defaults(fn=cmd_pack)

    p = sub.add_parser("bench-transfer", help="time one transfer mode")
    p.add_argument("--mode", choices=["naive", "pipelined", "chunked"], required=True)
    p.add_argument("--bytes", type=int, default=64 * MiB)
    p.add_argument("--block", type=int, default=8 * MiB)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--edge", default="disk->device",
                   choices=["disk->device", "disk->host", "host->device", "device->host"])
    p.add_argument("--bandwidth", type=float, help="emulated bytes/s per link (default: unthrottled)")
    p.add_argument("--latency", type=float, default=0.0, help="per-request disk latency (s)")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--dir")
    p.set_defaults(fn=cmd_bench_transfer)

    p = sub.add_parser("run", help="generate tokens")
    _add_run(p)
    p.add_argument("--metrics", help="also write metrics JSON here")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench", help="generate and report RunMetrics")
    _add_run(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify-trace", help="check a trace file's invariants")
    p.add_argument("file")
    p.add_argument("--mode", choices=["performance", "memory_efficient", "baseline"])
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("trace", help="trace utilities")
    tsub = p.add_subparsers(dest="trace_command", required=True)
    g = tsub.add_parser("gantt", help="CSV lane,start_s,end_s,label")
    g.add_argument("file")
    g.set_defaults(fn=cmd_gantt)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except PipoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
