"""Automatic configuration: weight tier, pipeline mode, block size, kernel path."""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .errors import InfeasibleError
from .memory_model import ModelSpec, WorkloadSpec, kv_cache_size, run_peak_bound, weight_sizes
from .storage import MiB, EmulationConfig, TierStore

TIERS = ("device", "host", "disk")
PIPELINE_MODES = ("performance", "memory_efficient")
EDGES = ("disk->host", "host->device")
MIN_BLOCK = 1 * MiB
MAX_BLOCK = 256 * MiB
BLOCK_TOLERANCE = 0.05
QUANT_KERNEL_MAX_BATCH = 16
DEFAULT_TRANSFER_THREADS = 4


@dataclass(frozen=True)
class HardwareSpec:
    device_mem: int
    host_mem: int
    device_link_bw: float
    disk_bw: float

    def __post_init__(self):
        for name in ("device_mem", "host_mem", "device_link_bw", "disk_bw"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareSpec":
        return cls(int(data["device_mem"]), int(data["host_mem"]),
                   float(data["device_link_bw"]), float(data["disk_bw"]))


def load_hardware(path) -> tuple[HardwareSpec, EmulationConfig]:
    """JSON with the four hardware fields and an optional ``emulation`` object."""
    data = json.loads(Path(path).read_text())
    return HardwareSpec.from_dict(data), EmulationConfig.from_dict(data.get("emulation", {}))


@dataclass(frozen=True)
class Plan:
    weight_tier: str
    pipeline_mode: str
    block_size: int
    use_quant_kernel: bool
    num_transfer_threads: int = DEFAULT_TRANSFER_THREADS

    def __post_init__(self):
        if self.weight_tier not in TIERS:
            raise ValueError(f"weight_tier must be one of {TIERS}")
        if self.pipeline_mode not in PIPELINE_MODES:
            raise ValueError(f"pipeline_mode must be one of {PIPELINE_MODES}")
        b = self.block_size
        if not (MIN_BLOCK <= b <= MAX_BLOCK and b & (b - 1) == 0):
            raise ValueError(f"block_size {b} is not a power of two in [1 MiB, 256 MiB]")
        if self.num_transfer_threads < 1:
            raise ValueError("num_transfer_threads must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BandwidthProfile:
    """edge -> {block bytes -> throughput bytes/s}."""

    edges: dict[str, dict[int, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.edges or not any(self.edges.values()):
            raise ValueError("bandwidth profile is empty")
        for edge, points in self.edges.items():
            for size, tp in points.items():
                if not tp > 0:
                    raise ValueError(f"{edge}@{size}: throughput must be positive")

    @classmethod
    def uniform(cls, curve: dict[int, float]) -> "BandwidthProfile":
        return cls({edge: dict(curve) for edge in EDGES})

    def sizes(self) -> list[int]:
        common = None
        for points in self.edges.values():
            common = set(points) if common is None else common & set(points)
        return sorted(common or ())

    def bottleneck(self, size: int) -> float:
        return min(points[size] for points in self.edges.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edge", "block_bytes", "throughput_bps"])
        for edge, points in self.edges.items():
            for size in sorted(points):
                w.writerow([edge, size, f"{points[size]:.1f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BandwidthProfile":
        edges: dict[str, dict[int, float]] = {}
        for row in csv.DictReader(io.StringIO(text)):
            edges.setdefault(row["edge"], {})[int(row["block_bytes"])] = float(row["throughput_bps"])
        return cls(edges)


def choose_block_size(profile: BandwidthProfile) -> int:
    """Smallest probed size whose bottleneck throughput is within 5% of the best."""
    sizes = profile.sizes()
    if not sizes:
        raise ValueError("no block size was probed on every edge")
    best = max(profile.bottleneck(s) for s in sizes)
    for s in sizes:
        if profile.bottleneck(s) >= (1 - BLOCK_TOLERANCE) * best:
            return s
    return sizes[-1]  # unreachable: the best size always qualifies


def choose_plan(spec: ModelSpec, wl: WorkloadSpec, hw: HardwareSpec,
                profile: BandwidthProfile,
                num_transfer_threads: int = DEFAULT_TRANSFER_THREADS) -> Plan:
    w = weight_sizes(spec).w_total
    c = kv_cache_size(spec, wl)
    m_preload = run_peak_bound(spec, wl, preload=True)
    m_single = run_peak_bound(spec, wl, preload=False)

    if c >= hw.host_mem:
        raise InfeasibleError(f"KV-cache ({c} B) does not fit host memory ({hw.host_mem} B)")
    if m_preload < hw.device_mem:
        mode = "performance"
    elif m_single < hw.device_mem:
        mode = "memory_efficient"
    else:
        raise InfeasibleError(
            f"peak device memory {m_single} B exceeds {hw.device_mem} B even without preloading")

    if w + m_preload < hw.device_mem:
        tier = "device"
    elif w + c < hw.host_mem and hw.disk_bw < hw.device_link_bw:
        tier = "host"
    else:
        tier = "disk"

    return Plan(
        weight_tier=tier,
        pipeline_mode=mode,
        block_size=choose_block_size(profile),
        use_quant_kernel=spec.weight_dtype == "int4" and wl.batch_size < QUANT_KERNEL_MAX_BATCH,
        num_transfer_threads=num_transfer_threads,
    )


def probe_bandwidth(store: TierStore, sizes, repeats: int = 3) -> BandwidthProfile:
    """Median throughput of ``repeats`` timed transfers per size and edge."""
    sizes = sorted(int(s) for s in sizes)
    if not sizes:
        raise ValueError("sizes must be non-empty")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    largest = sizes[-1]
    scratch = store.disk.write_scratch("probe.scratch", largest)
    edges: dict[str, dict[int, float]] = {e: {} for e in EDGES}

    host_buf = store.host.alloc(largest, tag="probe")
    try:
        dev_buf = store.device.alloc(largest, tag="probe")
        try:
            host_buf.view()[:] = 0
            for size in sizes:
                out = host_buf.view(0, size)
                samples = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    store.disk.read_into(str(scratch), 0, out)
                    samples.append(time.perf_counter() - t0)
                edges["disk->host"][size] = size / statistics.median(samples)

                src, dst = host_buf.view(0, size), dev_buf.view(0, size)
                samples = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    store.ingress.transmit(size, lambda: dst.__setitem__(slice(None), src))
                    samples.append(time.perf_counter() - t0)
                edges["host->device"][size] = size / statistics.median(samples)
        finally:
            store.device.free(dev_buf)
    finally:
        store.host.free(host_buf)
    return BandwidthProfile(edges)
