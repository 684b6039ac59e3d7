"""Blockwise, chunk-parallel transfers between tiers.

Edges are disk->host, host->device, device->host (one stage) and
disk->device (two stages through recycled host staging buffers). Every
transfer returns a :class:`concurrent.futures.Future` that resolves to the
destination handle or fails with the stage/offset of the first error.
"""
from __future__ import annotations

import queue
import threading
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import IoError, OutOfMemory, PipoError
from .storage import TensorHandle, TierStore

CompletionHandle = Future

MIN_CHUNK = 256 * 1024
STAGING_DEPTH = 2
MODES = ("naive", "pipelined", "chunked")
_POLL = 0.05


@dataclass
class TransferRequest:
    source: TensorHandle
    dest: TensorHandle
    block_size: int
    chunk_size: Optional[int] = None
    num_workers: int = 4
    length: Optional[int] = None
    source_offset: int = 0
    dest_offset: int = 0
    release_dest_on_error: bool = True
    token: int = -1
    layer: int = -1

    @property
    def nbytes(self) -> int:
        return self.source.length - self.source_offset if self.length is None else self.length

    def resolved(self) -> tuple[int, int, int]:
        """(length, block, chunk) after clamping: chunk <= block <= length."""
        n = self.nbytes
        if n <= 0:
            raise ValueError("transfer length must be positive")
        if self.dest_offset + n > self.dest.length:
            raise ValueError("destination too small for transfer")
        block = max(1, min(int(self.block_size), n))
        chunk = self.chunk_size
        if chunk is None:
            chunk = max(block // max(self.num_workers, 1), min(MIN_CHUNK, block))
        chunk = max(1, min(int(chunk), block))
        return n, block, chunk


def _spans(start: int, length: int, step: int):
    off = 0
    while off < length:
        n = min(step, length - off)
        yield start + off, n
        off += n


class TransferEngine:
    """Runs transfers against one :class:`TierStore`."""

    def __init__(self, store: TierStore, recorder=None):
        self.store = store
        self.recorder = recorder

    # -- public API ----------------------------------------------------------

    def transfer_naive(self, req: TransferRequest) -> Future:
        return self._spawn("naive", req)

    def transfer_pipelined(self, req: TransferRequest) -> Future:
        return self._spawn("pipelined", req)

    def transfer_chunked(self, req: TransferRequest) -> Future:
        return self._spawn("chunked", req)

    def submit(self, mode: str, req: TransferRequest) -> Future:
        return self._spawn(mode, req)

    def run(self, mode: str, req: TransferRequest) -> TensorHandle:
        """Blocking variant, executed on the caller's thread."""
        if mode not in MODES:
            raise ValueError(f"unknown transfer mode {mode!r}")
        try:
            self._dispatch(mode, req)
        except BaseException as exc:
            if req.release_dest_on_error:
                arena = self.store.arena(req.dest.tier)
                if arena.is_live(req.dest):
                    arena.free(req.dest)
            if isinstance(exc, PipoError):
                raise
            raise IoError(f"transfer failed: {exc!r}") from exc
        return req.dest

    # -- internals -----------------------------------------------------------

    def _spawn(self, mode: str, req: TransferRequest) -> Future:
        fut: Future = Future()
        fut.set_running_or_notify_cancel()

        def body():
            try:
                fut.set_result(self.run(mode, req))
            except BaseException as exc:
                fut.set_exception(exc)

        threading.Thread(target=body, name=f"xfer-{mode}", daemon=True).start()
        return fut

    def _event(self, kind, phase, req, block=-1, nbytes=0):
        if self.recorder is not None:
            self.recorder.record(kind, phase, req.token, block, nbytes)

    def _dispatch(self, mode: str, req: TransferRequest) -> None:
        src, dst = req.source.tier, req.dest.tier
        n, block, chunk = req.resolved()
        self._event("Transfer", "started", req, nbytes=n)
        if src == "disk" and dst == "device":
            if mode == "naive":
                self._two_stage_naive(req, n)
            else:
                workers = 1 if mode == "pipelined" else max(1, req.num_workers)
                self._two_stage(req, n, block, block if mode == "pipelined" else chunk, workers)
        else:
            link = self.store.link(src, dst)
            if mode == "naive":
                self._single_stage(req, link, n, n, n, 1)
            elif mode == "pipelined":
                self._single_stage(req, link, n, block, block, 1)
            else:
                self._single_stage(req, link, n, block, chunk, max(1, req.num_workers))
        self._event("Transfer", "finished", req, nbytes=n)

    def _read(self, req: TransferRequest, link, src_off: int, out: np.ndarray) -> None:
        """Move ``len(out)`` bytes starting at source offset ``src_off``."""
        source = req.source
        if source.tier == "disk":
            self.store.disk.read_into(source.path, source.offset + src_off, out)
        else:
            view = source.view(src_off, out.nbytes)
            link.transmit(out.nbytes, lambda: np.copyto(out, view))

    def _single_stage(self, req, link, n, block, chunk, workers) -> None:
        jobs = [(c_off, c_len, b_idx)
                for b_idx, (b_off, b_len) in enumerate(_spans(0, n, block))
                for c_off, c_len in _spans(b_off, b_len, chunk)]
        stage = f"{req.source.tier}->{req.dest.tier}"

        def do(job):
            off, length, b_idx = job
            out = req.dest.view(req.dest_offset + off, length)
            self._event("Xfer:stage1", "started", req, b_idx, length)
            try:
                self._read(req, link, req.source_offset + off, out)
            except IoError:
                raise
            except Exception as exc:
                raise IoError(f"{stage} copy failed: {exc!r}", stage=stage, offset=off) from exc
            self._event("Xfer:stage1", "finished", req, b_idx, length)

        if workers == 1 or len(jobs) == 1:
            for job in jobs:
                do(job)
            return

        lock = threading.Lock()
        it = iter(jobs)
        errors: list[BaseException] = []
        cancel = threading.Event()

        def worker():
            while not cancel.is_set():
                with lock:
                    job = next(it, None)
                if job is None:
                    return
                try:
                    do(job)
                except BaseException as exc:
                    errors.append(exc)
                    cancel.set()
                    return

        threads = [threading.Thread(target=worker, name=f"chunk-{i}", daemon=True)
                   for i in range(min(workers, len(jobs)))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]

    def _two_stage_naive(self, req, n) -> None:
        host = self.store.host
        staging = host.alloc(n, tag="staging")
        try:
            self._event("Xfer:stage1", "started", req, 0, n)
            self._read(req, None, req.source_offset, staging.view(0, n))
            self._event("Xfer:stage1", "finished", req, 0, n)
            self._event("Xfer:stage2", "started", req, 0, n)
            out = req.dest.view(req.dest_offset, n)
            src = staging.view(0, n)
            try:
                self.store.ingress.transmit(n, lambda: np.copyto(out, src))
            except Exception as exc:
                raise IoError(f"host->device copy failed: {exc!r}", stage="host->device",
                              offset=0) from exc
            self._event("Xfer:stage2", "finished", req, 0, n)
        finally:
            host.free(staging)

    def _two_stage(self, req, n, block, chunk, workers) -> None:
        """disk -> host staging -> device with per-chunk forwarding."""
        host = self.store.host
        blocks = list(_spans(0, n, block))
        depth = min(STAGING_DEPTH, len(blocks))
        jobs = []
        for b_idx, (b_off, b_len) in enumerate(blocks):
            for c_off, c_len in _spans(b_off, b_len, chunk):
                jobs.append((b_idx, c_off, c_len))
        remaining = {}
        for b_idx, _, _ in jobs:
            remaining[b_idx] = remaining.get(b_idx, 0) + 1

        staging = []
        try:
            for _ in range(depth):
                staging.append(host.alloc(block, tag="staging"))
        except OutOfMemory:
            for h in staging:
                host.free(h)
            raise

        free_slots: queue.Queue = queue.Queue()
        for i in range(depth):
            free_slots.put(i)
        ready: queue.Queue = queue.Queue(maxsize=2 * workers)
        cancel = threading.Event()
        job_lock = threading.Lock()
        slot_of: dict[int, int] = {}
        cursor = [0]

        def put(item) -> bool:
            while not cancel.is_set():
                try:
                    ready.put(item, timeout=_POLL)
                    return True
                except queue.Full:
                    continue
            return False

        def take_job():
            with job_lock:
                if cursor[0] >= len(jobs):
                    return None
                b_idx, c_off, c_len = jobs[cursor[0]]
                if b_idx not in slot_of:
                    while True:
                        if cancel.is_set():
                            return None
                        try:
                            slot_of[b_idx] = free_slots.get(timeout=_POLL)
                            break
                        except queue.Empty:
                            continue
                cursor[0] += 1
                return b_idx, c_off, c_len, slot_of[b_idx]

        def worker():
            while not cancel.is_set():
                job = take_job()
                if job is None:
                    return
                b_idx, c_off, c_len, slot = job
                b_off = blocks[b_idx][0]
                out = staging[slot].view(c_off - b_off, c_len)
                try:
                    self._event("Xfer:stage1", "started", req, b_idx, c_len)
                    self._read(req, None, req.source_offset + c_off, out)
                    self._event("Xfer:stage1", "finished", req, b_idx, c_len)
                except BaseException as exc:
                    if not isinstance(exc, IoError):
                        exc = IoError(f"disk->host read failed: {exc!r}", stage="disk->host",
                                      offset=c_off)
                    cancel.set()
                    try:
                        ready.put_nowait(("error", exc))
                    except queue.Full:
                        pass
                    errors.append(exc)
                    return
                if not put((b_idx, c_off, c_len, slot)):
                    return

        errors: list[BaseException] = []
        threads = [threading.Thread(target=worker, name=f"stage1-{i}", daemon=True)
                   for i in range(min(workers, len(jobs)))]
        for t in threads:
            t.start()
        try:
            forwarded = 0
            while forwarded < len(jobs):
                try:
                    item = ready.get(timeout=_POLL)
                except queue.Empty:
                    if errors:
                        raise errors[0]
                    continue
                if item[0] == "error":
                    raise item[1]
                b_idx, c_off, c_len, slot = item
                b_off = blocks[b_idx][0]
                src = staging[slot].view(c_off - b_off, c_len)
                out = req.dest.view(req.dest_offset + c_off, c_len)
                self._event("Xfer:stage2", "started", req, b_idx, c_len)
                try:
                    self.store.ingress.transmit(c_len, lambda: np.copyto(out, src))
                except Exception as exc:
                    raise IoError(f"host->device copy failed: {exc!r}", stage="host->device",
                                  offset=c_off) from exc
                self._event("Xfer:stage2", "finished", req, b_idx, c_len)
                forwarded += 1
                remaining[b_idx] -= 1
                if remaining[b_idx] == 0:
                    free_slots.put(slot)
        finally:
            cancel.set()
            for t in threads:
                t.join()
            for h in staging:
                host.free(h)
