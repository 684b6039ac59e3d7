"""Reusable experiments: pipelining speedup, block-size sweep, transfer benchmark."""
from __future__ import annotations

import statistics
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .compute import layer_flops
from .memory_model import TOY_MODEL, ModelSpec, WorkloadSpec
from .planner import BandwidthProfile, Plan, choose_block_size, probe_bandwidth
from .runtime import GenerationResult, RuntimeConfig, run_generation, run_sequential_baseline
from .storage import MiB, TierStore, pack_model
from .trace import Trace, verify_trace
from .transfer import TransferEngine, TransferRequest

TRANSFER_KINDS = ("WeightLoad", "KvLoad", "KvSave")


def busy_seconds(trace: Trace, kinds) -> float:
    """Sum of started->finished durations for the given task kinds."""
    open_ = {}
    total = 0
    for ev in sorted(trace.events, key=lambda e: e.seq):
        if ev.kind not in kinds:
            continue
        key = (ev.kind, ev.token, ev.layer)
        if ev.phase == "started":
            open_[key] = ev.wall_ns
        elif ev.phase == "finished" and key in open_:
            total += ev.wall_ns - open_.pop(key)
    return total / 1e9


def total_flops(spec: ModelSpec, wl: WorkloadSpec) -> int:
    P = wl.prompt_len
    return sum(layer_flops(spec, kind, wl.batch_size, P if i == 0 else 1, P + i)
               for i in range(wl.gen_len) for kind in spec.layer_kinds)


@dataclass
class SpeedupReport:
    transfer_compute_ratio: float
    device_flops: float
    baseline_wall_s: float
    pipelined_wall_s: float
    baseline_busy: float
    pipelined_busy: float
    speedup: float
    busy_ratio: float
    tokens_equal: bool
    violations: int

    def to_dict(self) -> dict:
        return asdict(self)


def throttled_store(root, bandwidth: float, device_mem: int = 1 << 30,
                    host_mem: int = 1 << 30, latency: float = 0.0) -> TierStore:
    return TierStore(root, host_mem, device_mem, disk_bw=bandwidth, device_bw=bandwidth,
                     disk_latency=latency)


def speedup_experiment(workdir=None, spec: ModelSpec = TOY_MODEL,
                       wl: WorkloadSpec = WorkloadSpec(2, 4, 16), bandwidth: float = 5e6,
                       ratio: float = 3.0, block: int = 2048,
                       transfer_mode: str = "chunked") -> SpeedupReport:
    """Pipelined vs sequential on disk-tier weights, transfer time ~= ``ratio`` x compute.

    Compute is padded to an emulated device FLOP rate chosen from a
    calibration run so that the baseline's summed transfer time is
    ``ratio`` times its summed compute time.
    """
    workdir = Path(workdir or tempfile.mkdtemp(prefix="pipo-speedup-"))
    pack_model(spec, workdir)
    plan = Plan("disk", "performance", MiB, False)

    def store():
        return throttled_store(workdir, bandwidth)

    cal = run_sequential_baseline(workdir, plan, wl, store=store(),
                                  config=RuntimeConfig(block_size=block))
    transfer = busy_seconds(cal.trace, TRANSFER_KINDS)
    flops = total_flops(spec, wl) / (transfer / ratio)
    cfg = RuntimeConfig(block_size=block, device_flops=flops, transfer_mode=transfer_mode)
    base = run_sequential_baseline(workdir, plan, wl, store=store(), config=cfg)
    pipe = run_generation(workdir, plan, wl, store=store(), config=cfg)
    measured = busy_seconds(base.trace, TRANSFER_KINDS) / busy_seconds(base.trace, ("Compute",))
    return SpeedupReport(
        transfer_compute_ratio=measured,
        device_flops=flops,
        baseline_wall_s=base.metrics.wall_time_s,
        pipelined_wall_s=pipe.metrics.wall_time_s,
        baseline_busy=base.metrics.busy_fraction,
        pipelined_busy=pipe.metrics.busy_fraction,
        speedup=pipe.metrics.throughput_tok_s / base.metrics.throughput_tok_s,
        busy_ratio=pipe.metrics.busy_fraction / base.metrics.busy_fraction,
        tokens_equal=bool(np.array_equal(base.tokens, pipe.tokens)),
        violations=len(verify_trace(pipe.trace)),
    )


def block_sweep(sizes, workdir=None, bandwidth: float = 1e9, knee: int = 32 * MiB,
                repeats: int = 3) -> tuple[BandwidthProfile, int]:
    """Probe both edges of a tier store whose links plateau at ``knee`` bytes."""
    workdir = Path(workdir or tempfile.mkdtemp(prefix="pipo-sweep-"))
    largest = max(sizes)
    store = TierStore(workdir, host_capacity=2 * largest, device_capacity=2 * largest,
                      disk_bw=bandwidth, device_bw=bandwidth, disk_knee=knee, device_knee=knee)
    try:
        profile = probe_bandwidth(store, sizes, repeats=repeats)
    finally:
        store.close()
        scratch = workdir / "probe.scratch"
        if scratch.exists():
            scratch.unlink()
    return profile, choose_block_size(profile)


def transfer_bench(mode: str, nbytes: int, block: int, workers: int, workdir=None,
                   bandwidth: Optional[float] = None, latency: float = 0.0,
                   repeats: int = 3, edge: str = "disk->device") -> float:
    """Median seconds for one transfer of ``nbytes`` over ``edge``; checks the bytes land intact."""
    workdir = Path(workdir or tempfile.mkdtemp(prefix="pipo-xfer-"))
    src_tier, dst_tier = edge.split("->")
    store = TierStore(workdir, host_capacity=4 * nbytes + 4 * block,
                      device_capacity=2 * nbytes, disk_bw=bandwidth, device_bw=bandwidth,
                      disk_latency=latency)
    engine = TransferEngine(store)
    try:
        if src_tier == "disk":
            path = store.disk.write_scratch("bench.scratch", nbytes)
            source = store.disk.handle(path, 0, nbytes)
            expected = np.fromfile(path, dtype=np.uint8)
        else:
            source = store.arena(src_tier).alloc(nbytes, tag="bench-src")
            source.view()[:] = np.random.default_rng(0).integers(0, 256, nbytes, dtype=np.uint8)
            expected = source.view().copy()
        samples = []
        for _ in range(repeats):
            dest = store.arena(dst_tier).alloc(nbytes, tag="bench-dst")
            req = TransferRequest(source, dest, block, num_workers=workers)
            t0 = time.perf_counter()
            engine.run(mode, req)
            samples.append(time.perf_counter() - t0)
            if not np.array_equal(dest.view(), expected):
                raise AssertionError(f"{mode} transfer corrupted bytes")
            store.arena(dst_tier).free(dest)
    finally:
        store.close()
        scratch = workdir / "bench.scratch"
        if scratch.exists():
            scratch.unlink()
    return statistics.median(samples)


def tokens_by_config(workdir, spec: ModelSpec, wl: WorkloadSpec,
                     configs, seed: int = 0) -> dict[tuple[str, str], GenerationResult]:
    """Run the same packed model under several (tier, mode) plans without throttling."""
    workdir = Path(workdir)
    pack_model(spec, workdir, seed=seed)
    out = {}
    for tier, mode in configs:
        plan = Plan(tier, mode, MiB, spec.weight_dtype == "int4" and wl.batch_size < 16)
        store = TierStore(workdir, 1 << 30, 1 << 30)
        out[(tier, mode)] = run_generation(workdir, plan, wl, store=store)
    return out
