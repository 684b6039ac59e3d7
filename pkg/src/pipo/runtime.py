"""Pipelined offloading runtime.

Generation is split into four task kinds. Compute runs on the calling
(main) thread; WeightLoad, KvLoad and KvSave are queued and executed by a
pool of three workers that pick tasks dynamically. For each layer the main
thread issues the next loads, prepares inputs, synchronizes the current
layer's loads, computes, and (for attention layers) launches the KV save.
"""
from __future__ import annotations

import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from enum import Enum
from itertools import count
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .compute import causal_mask, decode_tensor, forward_layer, layer_flops
from .memory_model import LayerKind, ModelSpec, WorkloadSpec
from .planner import Plan
from .storage import TensorHandle, TierStore, load_manifest, read_blob_header, sleep_until
from .trace import RunMetrics, Trace, TraceRecorder, compute_metrics
from .transfer import TransferEngine, TransferRequest

POOL_SIZE = 3


class TaskKind(str, Enum):
    COMPUTE = "Compute"
    WEIGHT_LOAD = "WeightLoad"
    KV_LOAD = "KvLoad"
    KV_SAVE = "KvSave"


SINGLE_IN_FLIGHT = (TaskKind.WEIGHT_LOAD, TaskKind.KV_LOAD)

_task_order = count()


@dataclass(eq=False)
class Task:
    kind: TaskKind
    token: int
    layer: int
    fn: Callable[[], object]
    completion: Future = field(default_factory=Future)
    started: threading.Event = field(default_factory=threading.Event)
    promoted: bool = False
    synced: bool = False
    order: int = field(default_factory=lambda: next(_task_order))

    def __repr__(self):
        return f"{self.kind.value}({self.token},{self.layer})"


class TaskQueue:
    """Transfer-task queue.

    FIFO within a kind. KvSave runs only when no load is eligible, unless it
    was promoted by a fence that is about to need it. At most one WeightLoad
    and one KvLoad run at a time.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._pending: list[Task] = []
        self._running = {kind: 0 for kind in TaskKind}
        self._closed = False

    def put(self, task: Task) -> None:
        with self._cond:
            if self._closed:
                raise RuntimeError("task queue is closed")
            self._pending.append(task)
            self._cond.notify_all()

    def _pick(self) -> Optional[Task]:
        def eligible(t):
            return not (t.kind in SINGLE_IN_FLIGHT and self._running[t.kind])

        saves = [t for t in self._pending if t.kind is TaskKind.KV_SAVE]
        for t in saves:
            if t.promoted:
                return t
        for t in self._pending:
            if t.kind is not TaskKind.KV_SAVE and eligible(t):
                return t
        return saves[0] if saves else None

    def take(self) -> Optional[Task]:
        with self._cond:
            while True:
                task = self._pick()
                if task is not None:
                    self._pending.remove(task)
                    self._running[task.kind] += 1
                    return task
                if self._closed and not self._pending:
                    return None
                self._cond.wait()

    def done(self, task: Task) -> None:
        with self._cond:
            self._running[task.kind] -= 1
            self._cond.notify_all()

    def promote(self, task: Task) -> None:
        with self._cond:
            if task in self._pending:
                task.promoted = True
                self._cond.notify_all()

    def running(self, kind: TaskKind) -> int:
        with self._cond:
            return self._running[kind]

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class WorkerPool:
    def __init__(self, tasks: TaskQueue, recorder: TraceRecorder,
                 delay: Optional[Callable[[str, int, int], float]] = None, size: int = POOL_SIZE):
        self.tasks = tasks
        self.recorder = recorder
        self.delay = delay
        self.threads = [threading.Thread(target=self._work, name=f"pool-{n}", daemon=True)
                        for n in range(size)]
        for t in self.threads:
            t.start()

    def _work(self) -> None:
        while True:
            task = self.tasks.take()
            if task is None:
                return
            rec = self.recorder
            rec.record(task.kind.value, "started", task.token, task.layer)
            task.started.set()
            try:
                if self.delay is not None:
                    time.sleep(self.delay(task.kind.value, task.token, task.layer))
                result = task.fn()
            except BaseException as exc:
                rec.record(task.kind.value, "failed", task.token, task.layer)
                self.tasks.done(task)
                task.completion.set_exception(exc)
                continue
            # finished is recorded before the queue slot opens, so a second
            # load of the same kind can never appear to overlap this one
            rec.record(task.kind.value, "finished", task.token, task.layer)
            self.tasks.done(task)
            task.completion.set_result(result)

    def shutdown(self) -> None:
        self.tasks.close()
        for t in self.threads:
            t.join()


@dataclass
class RuntimeConfig:
    """Knobs that are not part of the plan. ``None`` means "use the plan"."""

    transfer_mode: str = "chunked"
    baseline_transfer_mode: str = "naive"
    num_workers: Optional[int] = None
    block_size: Optional[int] = None
    chunk_size: Optional[int] = None
    device_flops: Optional[float] = None
    prompt_seed: int = 0
    delay: Optional[Callable[[str, int, int], float]] = None
    trace_transfers: bool = False


@dataclass
class GenerationResult:
    tokens: np.ndarray
    trace: Trace
    metrics: RunMetrics
    peak_device_bytes: int
    peak_host_bytes: int
    device_bytes_at_exit: int


@dataclass
class _LayerSource:
    index: int
    kind: LayerKind
    entries: list
    handle: TensorHandle


class KvCache:
    """Per attention layer K and V regions in host memory.

    Each region is token-major ``(seq, batch, kv_heads, head_dim)`` so the
    first ``t`` tokens are one contiguous prefix.
    """

    def __init__(self, spec: ModelSpec, wl: WorkloadSpec, store: TierStore, layers: list[int]):
        self.spec = spec
        self.batch = wl.batch_size
        self.capacity = wl.seq_len
        self.token_bytes = spec.act_bytes * wl.batch_size * spec.kv_dim
        self.store = store
        self.regions = {}
        for j in layers:
            k = store.host.alloc(self.capacity * self.token_bytes, tag=f"kcache{j}")
            v = store.host.alloc(self.capacity * self.token_bytes, tag=f"vcache{j}")
            self.regions[j] = (k, v)

    def release(self) -> None:
        for k, v in self.regions.values():
            self.store.host.free(k)
            self.store.host.free(v)
        self.regions.clear()


def act_dtype(spec: ModelSpec):
    return np.float16 if spec.act_bytes == 2 else np.float32


class Engine:
    """A packed model bound to a plan and a tier store."""

    def __init__(self, weights_dir, plan: Plan, store: TierStore,
                 config: Optional[RuntimeConfig] = None):
        self.dir = Path(weights_dir)
        manifest = load_manifest(self.dir)
        self.spec = ModelSpec.from_dict(manifest["model"])
        self.plan = plan
        self.store = store
        self.config = config or RuntimeConfig()
        self.kinds = self.spec.layer_kinds
        self.block_size = self.config.block_size or plan.block_size
        self.num_workers = self.config.num_workers or plan.num_transfer_threads
        self.dequantize = not plan.use_quant_kernel
        self.layers = []
        for entry in manifest["layers"]:
            path = self.dir / entry["file"]
            header = read_blob_header(path)
            handle = store.disk.handle(path, header.payload_offset, header.payload_len,
                                       id=f"layer{entry['index']}")
            self.layers.append(_LayerSource(entry["index"], LayerKind(entry["kind"]),
                                            header.entries, handle))
        self._disk_handles = {layer.index: layer.handle for layer in self.layers}
        self.resident: dict[int, dict] = {}

    def decode(self, layer: _LayerSource, data: np.ndarray) -> dict:
        out = {}
        for e in layer.entries:
            buf = data[e.offset : e.offset + e.length]
            out[e.name] = decode_tensor(buf, e.dtype, e.shape, dequantize=self.dequantize)
        return out

    def place_weights(self) -> None:
        """Move every layer blob to the plan's weight tier (untimed model init)."""
        tier = self.plan.weight_tier
        if tier == "disk":
            return
        arena = self.store.arena(tier)
        for layer in self.layers:
            src = layer.handle
            h = arena.alloc(src.length, tag=f"w{layer.index}", layer=layer.index)
            with open(src.path, "rb") as fh:
                fh.seek(src.offset)
                fh.readinto(memoryview(h.view()))
            if tier == "device":
                self.resident[layer.index] = self.decode(layer, h.view())
            layer.handle = h

    def release_weights(self) -> None:
        tier = self.plan.weight_tier
        for layer in self.layers:
            if tier != "disk":
                arena = self.store.arena(tier)
                if arena.is_live(layer.handle):
                    arena.free(layer.handle)
            layer.handle = self._disk_handles[layer.index]
        self.resident = {}

    def request(self, source, dest, token, layer, length=None, source_offset=0,
                dest_offset=0, release=True) -> TransferRequest:
        return TransferRequest(source=source, dest=dest, block_size=self.block_size,
                               chunk_size=self.config.chunk_size, num_workers=self.num_workers,
                               length=length, source_offset=source_offset,
                               dest_offset=dest_offset, release_dest_on_error=release,
                               token=token, layer=layer)

    def generate(self, wl: WorkloadSpec, baseline: bool = False) -> GenerationResult:
        spec, store = self.spec, self.store
        mode = "baseline" if baseline else self.plan.pipeline_mode
        preload = mode == "performance"
        xfer_mode = self.config.baseline_transfer_mode if baseline else self.config.transfer_mode
        meta = {
            "model": spec.to_dict(),
            "workload": wl.to_dict(),
            "plan": self.plan.to_dict(),
            "mode": mode,
            "preload": preload,
            "weight_tier": self.plan.weight_tier,
            "transfer_mode": xfer_mode,
            "block_size": self.block_size,
        }
        rec = TraceRecorder(meta)
        store.set_recorder(rec)
        self.place_weights()
        mha_layers = [j for j, k in enumerate(self.kinds) if k is LayerKind.MHA]
        kv = KvCache(spec, wl, store, mha_layers)
        store.device.reset_peak()
        store.host.reset_peak()

        sched = Scheduler(self, wl, rec, kv, xfer_mode, preload, baseline)
        try:
            tokens = sched.run()
        finally:
            sched.close()
            kv.release()
            self.release_weights()
            store.set_recorder(None)

        trace = rec.trace()
        return GenerationResult(
            tokens=tokens,
            trace=trace,
            metrics=compute_metrics(trace),
            peak_device_bytes=store.device.peak,
            peak_host_bytes=store.host.peak,
            device_bytes_at_exit=store.device.occupancy,
        )


class Scheduler:
    """One generation: the flat (token, layer) step loop and its task bookkeeping."""

    def __init__(self, engine: Engine, wl: WorkloadSpec, rec: TraceRecorder, kv: KvCache,
                 xfer_mode: str, preload: bool, baseline: bool):
        self.engine = engine
        self.spec = engine.spec
        self.store = engine.store
        self.config = engine.config
        self.wl = wl
        self.rec = rec
        self.kv = kv
        self.xfer_mode = xfer_mode
        self.preload = preload
        self.baseline = baseline
        self.kinds = engine.kinds
        self.steps = [(i, j) for i in range(wl.gen_len) for j in range(len(self.kinds))]
        self.step_of = {s: k for k, s in enumerate(self.steps)}
        self.xfer = TransferEngine(self.store, rec if self.config.trace_transfers else None)
        self.tasks = TaskQueue()
        self.pool = WorkerPool(self.tasks, rec, self.config.delay)
        self.weight_tasks: dict[int, Task] = {}
        self.kv_tasks: dict[int, Task] = {}
        self.saves: dict[tuple[int, int], Task] = {}
        self.last_save: Optional[Task] = None
        self.adt = act_dtype(self.spec)
        self.hidden: Optional[TensorHandle] = None
        self.hidden_arr = None
        b, P = wl.batch_size, wl.prompt_len
        rng = np.random.default_rng(self.config.prompt_seed)
        self.cur_ids = rng.integers(0, self.spec.vocab_size, (b, P))
        self.tokens = np.zeros((b, wl.gen_len), dtype=np.int64)

    def close(self) -> None:
        self.pool.shutdown()

    # -- task plumbing -----------------------------------------------------

    def submit(self, task: Task) -> Task:
        self.rec.record(task.kind.value, "issued", task.token, task.layer)
        self.tasks.put(task)
        return task

    def sync(self, task: Task):
        result = task.completion.result()
        if not task.synced:
            task.synced = True
            self.rec.record(task.kind.value, "synced", task.token, task.layer)
        return result

    def issue_weight_load(self, k: int) -> None:
        eng = self.engine
        if eng.plan.weight_tier == "device" or k >= len(self.steps) or k in self.weight_tasks:
            return
        i, j = self.steps[k]
        layer = eng.layers[j]
        dest = self.store.device.alloc(layer.handle.length, tag=f"w{j}", token=i, layer=j)
        req = eng.request(layer.handle, dest, i, j)

        def load():
            self.xfer.run(self.xfer_mode, req)
            return dest, eng.decode(layer, dest.view())

        self.weight_tasks[k] = self.submit(Task(TaskKind.WEIGHT_LOAD, i, j, load))

    def sync_kv_save_fence(self, i: int, j: int) -> None:
        """Block until KvSave(i, j) is terminal, ahead of KvLoad(i + 1, j)."""
        task = self.saves.get((i, j))
        if task is None:
            return
        self.tasks.promote(task)
        self.sync(task)

    def issue_kv_load(self, k: int) -> None:
        if k >= len(self.steps) or k in self.kv_tasks:
            return
        i, j = self.steps[k]
        if self.kinds[j] is not LayerKind.MHA or i == 0:
            return
        self.sync_kv_save_fence(i - 1, j)
        spec, kv, eng = self.spec, self.kv, self.engine
        b = self.wl.batch_size
        t = self.wl.prompt_len + i - 1
        nbytes = t * kv.token_bytes
        dest = self.store.device.alloc(2 * nbytes, tag=f"kv{j}", token=i, layer=j)
        k_src, v_src = kv.regions[j]
        adt = self.adt

        def load():
            self.xfer.run(self.xfer_mode, eng.request(k_src, dest, i, j, length=nbytes,
                                                      release=False))
            self.xfer.run(self.xfer_mode, eng.request(v_src, dest, i, j, length=nbytes,
                                                      dest_offset=nbytes))
            raw = dest.view().view(adt).reshape(2, t, b, spec.num_kv_heads, spec.head_dim)
            past = raw.transpose(0, 2, 1, 3, 4).astype(np.float32)
            return dest, past[0], past[1]

        self.kv_tasks[k] = self.submit(Task(TaskKind.KV_LOAD, i, j, load))

    def issue_kv_save(self, i: int, j: int, new_kv: TensorHandle, pos: int, n_tok: int) -> Task:
        kv, eng = self.kv, self.engine
        k_dst, v_dst = kv.regions[j]
        nbytes = n_tok * kv.token_bytes
        at = pos * kv.token_bytes

        def save():
            self.xfer.run(self.xfer_mode, eng.request(new_kv, k_dst, i, j, length=nbytes,
                                                      dest_offset=at, release=False))
            self.xfer.run(self.xfer_mode, eng.request(new_kv, v_dst, i, j, length=nbytes,
                                                      source_offset=nbytes, dest_offset=at,
                                                      release=False))
            self.store.device.free(new_kv, token=i, layer=j)

        task = self.submit(Task(TaskKind.KV_SAVE, i, j, save))
        self.saves[(i, j)] = task
        return task

    # -- the loop ------------------------------------------------------------

    def run(self) -> np.ndarray:
        self.rec.record("Run", "started")
        if self.preload:
            # pipeline fill: the first layer's loads are the only exposed ones
            self.issue_weight_load(0)
            self.issue_kv_load(0)
            self.issue_kv_load(1)
        for i, j in self.steps:
            self.schedule_layer(i, j)
        for task in self.saves.values():
            self.sync(task)
        if self.hidden is not None:
            self.store.device.free(self.hidden)
            self.hidden = None
        self.rec.record("Run", "finished")
        return self.tokens

    def schedule_layer(self, i: int, j: int) -> None:
        k = self.step_of[(i, j)]
        spec, store, rec = self.spec, self.store, self.rec
        kind = self.kinds[j]
        b, P = self.wl.batch_size, self.wl.prompt_len
        p = spec.act_bytes
        adt = self.adt

        # CallLoadData
        if self.baseline:
            self.issue_weight_load(k)
            if k in self.weight_tasks:
                self.sync(self.weight_tasks[k])
            self.issue_kv_load(k)
            if k in self.kv_tasks:
                self.sync(self.kv_tasks[k])
        elif self.preload:
            self.issue_weight_load(k + 1)
            self.issue_kv_load(k + 2)  # next attention layer
        else:
            self.issue_weight_load(k)
            self.issue_kv_load(k)

        # PrepareInput
        q = P if i == 0 else 1
        start_pos = 0 if i == 0 else P + i - 1
        positions = np.arange(start_pos, start_pos + q)
        n_keys = start_pos + q
        mask = causal_mask(positions, n_keys) if kind is LayerKind.MHA else None

        # SynchronizeLoadTask
        if k in self.weight_tasks:
            w_handle, weights = self.sync(self.weight_tasks.pop(k))
        else:
            w_handle, weights = None, self.engine.resident[j]
        kv_handle = past = None
        if k in self.kv_tasks:
            kv_handle, pk, pv = self.sync(self.kv_tasks.pop(k))
            past = (pk, pv)
        if self.preload and (k + 1) in self.weight_tasks:
            self.weight_tasks[k + 1].started.wait()

        # Compute
        rec.record(TaskKind.COMPUTE.value, "started", i, j)
        t0 = time.perf_counter()
        if self.config.delay is not None:
            time.sleep(self.config.delay(TaskKind.COMPUTE.value, i, j))
        n = b * q
        width = spec.vocab_size if kind is LayerKind.OUTPUT else spec.hidden_dim
        out = store.device.alloc(p * n * width, tag="act", token=i, layer=j)
        scratch_bytes = 0
        if kind is LayerKind.MHA:
            scratch_bytes = 3 * p * n * spec.hidden_dim + p * b * spec.num_heads * q * n_keys
        elif kind is LayerKind.MLP:
            scratch_bytes = 3 * p * n * spec.ffn_dim
        scratch = (store.device.alloc(scratch_bytes, tag="scratch", token=i, layer=j)
                   if scratch_bytes else None)
        new_kv = None
        if kind is LayerKind.EMBED:
            result = forward_layer(kind, weights, self.cur_ids, spec)
        elif kind is LayerKind.MHA:
            result, k_new, v_new = forward_layer(kind, weights, self.hidden_arr, spec,
                                                 positions=positions, kv=past, mask=mask)
            new_kv = store.device.alloc(2 * p * n * spec.kv_dim, tag=f"newkv{j}",
                                        token=i, layer=j)
            both = np.stack([k_new, v_new]).transpose(0, 2, 1, 3, 4).astype(adt)
            new_kv.view().view(adt)[:] = both.reshape(-1)
        else:
            result = forward_layer(kind, weights, self.hidden_arr, spec)
        if self.config.device_flops:
            sleep_until(t0 + layer_flops(spec, kind, b, q, n_keys) / self.config.device_flops)
        stored = result.astype(adt)
        out.view().view(adt)[:] = stored.reshape(-1)
        if scratch is not None:
            store.device.free(scratch, token=i, layer=j)
        if self.hidden is not None:
            store.device.free(self.hidden, token=i, layer=j)
        self.hidden = out
        self.hidden_arr = stored.astype(np.float32)
        if w_handle is not None:
            store.device.free(w_handle, token=i, layer=j)
        if kv_handle is not None:
            store.device.free(kv_handle, token=i, layer=j)
        rec.record(TaskKind.COMPUTE.value, "finished", i, j)

        if kind is LayerKind.OUTPUT:
            nxt = np.argmax(result[:, -1, :], axis=-1)
            self.tokens[:, i] = nxt
            self.cur_ids = nxt[:, None]
            rec.record("Token", "finished", i, -1, b)

        # CallStoreCache
        if kind is LayerKind.MHA:
            strict = self.baseline or not self.preload or i == 0
            if strict and self.last_save is not None:
                self.sync(self.last_save)
            self.last_save = self.issue_kv_save(i, j, new_kv, start_pos, q)
            if self.baseline:
                self.sync(self.last_save)


def _default_store(weights_dir, hw, emulation):
    if hw is None:
        raise ValueError("either store or hw must be given")
    return TierStore.from_hardware(hw, weights_dir, emulation)


def run_generation(weights_dir, plan: Plan, workload: WorkloadSpec, store: TierStore = None,
                   config: RuntimeConfig = None, hw=None, emulation=None) -> GenerationResult:
    """Generate ``workload.gen_len`` tokens per batch row with the pipelined scheduler."""
    store = store or _default_store(weights_dir, hw, emulation)
    return Engine(weights_dir, plan, store, config).generate(workload)


def run_sequential_baseline(weights_dir, plan: Plan, workload: WorkloadSpec,
                            store: TierStore = None, config: RuntimeConfig = None, hw=None,
                            emulation=None) -> GenerationResult:
    """Same tasks, but every transfer is awaited before anything else starts."""
    store = store or _default_store(weights_dir, hw, emulation)
    return Engine(weights_dir, plan, store, config).generate(workload, baseline=True)
