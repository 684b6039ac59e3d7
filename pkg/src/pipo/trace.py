"""Timeline recording, trace files, invariant checking and run metrics.

A trace is newline-delimited JSON: one header record followed by events
sorted by sequence number. Ordering assertions use ``seq``; durations use
``wall_ns`` (monotonic clock).
"""
from __future__ import annotations

import csv
import io
import json
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .errors import FormatError

TRACE_FORMAT = "pipo-trace"
TRACE_VERSION = 1

TASK_KINDS = ("Compute", "WeightLoad", "KvLoad", "KvSave")
PHASES = ("issued", "started", "finished", "synced", "failed", "alloc", "free")


@dataclass
class TimelineEvent:
    seq: int
    wall_ns: int
    kind: str
    phase: str
    token: int = -1
    layer: int = -1
    bytes: int = 0
    occupancy: Optional[int] = None
    lane: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class Trace:
    meta: dict = field(default_factory=dict)
    events: list[TimelineEvent] = field(default_factory=list)


class TraceRecorder:
    """Append-only, thread-safe event sink with a global sequence counter."""

    def __init__(self, meta: Optional[dict] = None):
        self.meta = dict(meta or {})
        self._lock = threading.Lock()
        self._events: list[TimelineEvent] = []

    def record(self, kind, phase, token=-1, layer=-1, nbytes=0, occupancy=None) -> TimelineEvent:
        lane = threading.current_thread().name
        with self._lock:
            ev = TimelineEvent(
                seq=len(self._events),
                wall_ns=time.perf_counter_ns(),
                kind=kind,
                phase=phase,
                token=token,
                layer=layer,
                bytes=nbytes,
                occupancy=occupancy,
                lane=lane,
            )
            self._events.append(ev)
        return ev

    def __len__(self):
        return len(self._events)

    @property
    def events(self) -> list[TimelineEvent]:
        with self._lock:
            return list(self._events)

    def trace(self) -> Trace:
        return Trace(meta=dict(self.meta), events=self.events)


def export_trace(trace: Trace, path) -> Path:
    path = Path(path)
    header = {"format": TRACE_FORMAT, "version": TRACE_VERSION, "meta": trace.meta}
    with path.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ev in sorted(trace.events, key=lambda e: e.seq):
            fh.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")
    return path


def load_trace(path) -> Trace:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty trace file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    if header.get("format") != TRACE_FORMAT or header.get("version") != TRACE_VERSION:
        raise FormatError(f"{path}: not a {TRACE_FORMAT} v{TRACE_VERSION} file")
    events = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            events.append(TimelineEvent(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}:{n}: bad event: {exc}") from None
    return Trace(meta=header.get("meta", {}), events=events)


# -- invariant checking -------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    rule: str
    token: int
    layer: int
    message: str

    def __str__(self):
        return f"[{self.rule}] ({self.token},{self.layer}) {self.message}"


def _task_phases(events) -> dict[tuple[str, int, int], dict[str, TimelineEvent]]:
    tasks: dict = defaultdict(dict)
    for ev in events:
        if ev.kind in TASK_KINDS:
            tasks[(ev.kind, ev.token, ev.layer)].setdefault(ev.phase, ev)
    return tasks


def residency_bound(meta: dict) -> Optional[int]:
    """Device-byte bound implied by the run's configuration, if the header has one."""
    from .memory_model import ModelSpec, WorkloadSpec, residency_bound as analytic_bound, weight_sizes

    try:
        spec = ModelSpec.from_dict(meta["model"])
        wl = WorkloadSpec.from_dict(meta["workload"])
    except (KeyError, TypeError, ValueError):
        return None
    bound = analytic_bound(spec, wl, preload=bool(meta.get("preload", False)))
    if meta.get("weight_tier") == "device":
        bound += weight_sizes(spec).w_total
    return bound


def verify_trace(trace: Trace, mode: Optional[str] = None) -> list[Violation]:
    """Check scheduling and residency invariants; an empty list means the trace is clean.

    ``mode`` overrides the pipeline mode stored in the trace header.
    """
    out: list[Violation] = []
    meta = dict(trace.meta)
    if mode is not None:
        meta["mode"] = mode
        meta["preload"] = mode == "performance"
    events = sorted(trace.events, key=lambda e: e.seq)
    for ev in events:
        if ev.phase not in PHASES:
            out.append(Violation("format", ev.token, ev.layer, f"unknown phase {ev.phase!r}"))
    tasks = _task_phases(events)

    def seq(kind, i, j, phase):
        ev = tasks.get((kind, i, j), {}).get(phase)
        return None if ev is None else ev.seq

    # per-task lifecycle and completeness
    for (kind, i, j), ph in sorted(tasks.items()):
        if "failed" in ph:
            out.append(Violation("failed", i, j, f"{kind} failed"))
            continue
        order = ["started", "finished"] if kind == "Compute" else ["issued", "started", "finished"]
        missing = [p for p in order if p not in ph]
        if missing:
            out.append(Violation("complete", i, j, f"{kind} missing {', '.join(missing)}"))
            continue
        seqs = [ph[p].seq for p in order]
        if "synced" in ph:
            seqs.append(ph["synced"].seq)
        if seqs != sorted(seqs):
            out.append(Violation("lifecycle", i, j, f"{kind} phases out of order"))

    # compute order: strictly sequential in (token, layer) order
    computes = sorted((i, j) for (kind, i, j) in tasks if kind == "Compute")
    prev_end = -1
    for i, j in computes:
        s, f = seq("Compute", i, j, "started"), seq("Compute", i, j, "finished")
        if s is None or f is None:
            continue
        if s < prev_end:
            out.append(Violation("compute-order", i, j, "compute overlaps or precedes its predecessor"))
        prev_end = f

    # loads must be synchronized before the compute that consumes them
    for i, j in computes:
        start = seq("Compute", i, j, "started")
        for kind in ("WeightLoad", "KvLoad"):
            if (kind, i, j) not in tasks:
                continue
            synced = seq(kind, i, j, "synced")
            if synced is None or synced > start:
                out.append(Violation("sync", i, j, f"{kind} not synchronized before compute"))

    # preloading: the next layer's weight load has started before this compute
    if meta.get("preload"):
        for (i, j), (ni, nj) in zip(computes, computes[1:]):
            nxt = seq("WeightLoad", ni, nj, "started")
            if ("WeightLoad", ni, nj) in tasks and nxt is not None:
                if nxt > seq("Compute", i, j, "started"):
                    out.append(Violation("preload", i, j,
                                         f"WeightLoad({ni},{nj}) started after compute"))

    # KV fence: save of token i-1 is terminal before load of token i starts
    for (kind, i, j) in tasks:
        if kind != "KvLoad":
            continue
        load_start = seq("KvLoad", i, j, "started")
        save_end = seq("KvSave", i - 1, j, "finished")
        if load_start is None:
            continue
        if save_end is None or save_end > load_start:
            out.append(Violation("fence", i, j,
                                 f"KvSave({i - 1},{j}) not finished before KvLoad({i},{j}) started"))

    # single in flight per load kind
    for kind in ("WeightLoad", "KvLoad"):
        spans = sorted((ph["started"].seq, ph["finished"].seq, k)
                       for k, ph in tasks.items()
                       if k[0] == kind and "started" in ph and "finished" in ph)
        for (s0, f0, _), (s1, _, k1) in zip(spans, spans[1:]):
            if s1 < f0:
                out.append(Violation("in-flight", k1[1], k1[2], f"two {kind} tasks in flight"))

    # residency
    bound = residency_bound(meta)
    if bound is not None:
        for ev in events:
            if ev.kind == "Arena:device" and ev.occupancy is not None and ev.occupancy > bound:
                out.append(Violation("residency", ev.token, ev.layer,
                                     f"device occupancy {ev.occupancy} B exceeds bound {bound} B"))
                break
    return out


# -- metrics -------------------------------------------------------------------

@dataclass
class RunMetrics:
    wall_time_s: float
    busy_fraction: float
    throughput_tok_s: float
    ttft_s: float
    decode_latency_s: float
    peak_device_bytes: int
    peak_host_bytes: int
    tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


def _run_window(events) -> tuple[int, int]:
    start = end = None
    for ev in events:
        if ev.kind == "Run":
            if ev.phase == "started":
                start = ev.wall_ns
            elif ev.phase == "finished":
                end = ev.wall_ns
    if start is None or end is None or end <= start:
        raise FormatError("trace has no complete Run window")
    return start, end


def compute_metrics(trace: Trace) -> RunMetrics:
    events = sorted(trace.events, key=lambda e: e.seq)
    start, end = _run_window(events)
    wall = (end - start) / 1e9
    busy_ns = 0
    for ph in _task_phases(events).values():
        if "started" in ph and "finished" in ph and ph["started"].kind == "Compute":
            busy_ns += ph["finished"].wall_ns - ph["started"].wall_ns
    token_times = sorted(ev.wall_ns for ev in events if ev.kind == "Token" and ev.phase == "finished")
    batch = trace.meta.get("workload", {}).get("batch_size", 1)
    n_tokens = batch * len(token_times)
    ttft = (token_times[0] - start) / 1e9 if token_times else 0.0
    if len(token_times) > 1:
        decode = (token_times[-1] - token_times[0]) / 1e9 / (len(token_times) - 1)
    else:
        decode = 0.0

    def peak(kind):
        occ = [ev.occupancy for ev in events if ev.kind == kind and ev.occupancy is not None]
        return max(occ, default=0)

    return RunMetrics(
        wall_time_s=wall,
        busy_fraction=busy_ns / (end - start),
        throughput_tok_s=n_tokens / wall,
        ttft_s=ttft,
        decode_latency_s=decode,
        peak_device_bytes=peak("Arena:device"),
        peak_host_bytes=peak("Arena:host"),
        tokens=n_tokens,
    )


def gantt_csv(trace: Trace) -> str:
    """One row per started/finished pair: lane,start_s,end_s,label (relative to the first event)."""
    events = sorted(trace.events, key=lambda e: e.seq)
    if not events:
        return "lane,start_s,end_s,label\n"
    t0 = events[0].wall_ns
    open_: dict = {}
    rows = []
    for ev in events:
        key = (ev.kind, ev.token, ev.layer, ev.lane)
        if ev.phase == "started":
            open_[key] = ev
        elif ev.phase in ("finished", "failed") and key in open_:
            s = open_.pop(key)
            rows.append((ev.lane or "", (s.wall_ns - t0) / 1e9, (ev.wall_ns - t0) / 1e9,
                         f"{ev.kind}({ev.token},{ev.layer})"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lane", "start_s", "end_s", "label"])
    for lane, s, e, label in sorted(rows, key=lambda r: (r[1], r[0])):
        w.writerow([lane, f"{s:.6f}", f"{e:.6f}", label])
    return buf.getvalue()
