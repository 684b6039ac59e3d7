"""Three storage tiers (disk files, host arena, emulated device arena).

The device tier is host memory behind a throttled link. Links model a serial
bandwidth resource plus an optional per-request latency that concurrent
requests overlap, and an optional ``knee``: requests smaller than the knee
take as long as a knee-sized request, which gives a throughput plateau at
the knee.

Merged layer blob file layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"PIPOBLOB"
    8       4     version (u32, = 1)
    12      4     layer id (u32)
    16      4     number of directory entries (u32)
    20      4     directory size in bytes (u32)
    24      8     payload size in bytes (u64)
    32      ...   directory entries, then payload

    entry:  u16 name length, u8 dtype code, u8 ndim, u64 offset, u64 length,
            name (utf-8), ndim x u64 dims
"""
from __future__ import annotations

import json
import math
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import FormatError, IoError, LayoutError, OutOfMemory
from .memory_model import ModelSpec, layer_tensors, tensor_nbytes

MAGIC = b"PIPOBLOB"
VERSION = 1
HEADER = struct.Struct("<8sIIIIQ")
ENTRY = struct.Struct("<HBBQQ")
DTYPE_CODES = {"u8": 0, "fp16": 1, "fp32": 2, "int4": 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

MiB = 1 << 20

_handle_ids = count()

# Sleeps overshoot by ~0.1 ms; a request may be backdated by this much into
# idle link time so back-to-back requests do not lose it. Reservations never
# overlap, so the bandwidth cap still holds over any window.
JITTER_CREDIT = 150e-6


def sleep_until(deadline: Optional[float]) -> None:
    if deadline is None:
        return
    remaining = deadline - time.perf_counter()
    if remaining > 0:
        time.sleep(remaining)


class Link:
    """Throttle for one transfer edge. ``bandwidth=None`` disables it."""

    def __init__(self, name: str, bandwidth: Optional[float] = None, latency: float = 0.0,
                 knee: int = 0):
        self.name = name
        self.bandwidth = bandwidth
        self.latency = latency
        self.knee = knee
        self._lock = threading.Lock()
        self._free_at = 0.0

    @property
    def throttled(self) -> bool:
        return self.bandwidth is not None or self.latency > 0

    def service_time(self, nbytes: int) -> float:
        if self.bandwidth is None:
            return 0.0
        return max(nbytes, self.knee) / self.bandwidth

    def request_time(self, nbytes: int) -> float:
        """Modeled duration of one uncontended request."""
        return self.latency + self.service_time(nbytes)

    def reserve(self, nbytes: int) -> Optional[float]:
        """Book ``nbytes`` on the link and return the completion deadline."""
        if not self.throttled:
            return None
        with self._lock:
            ready = time.perf_counter() + self.latency - JITTER_CREDIT
            start = max(ready, self._free_at)
            end = start + self.service_time(nbytes)
            self._free_at = end
        return end

    def transmit(self, nbytes: int, copy: Callable[[], object]):
        deadline = self.reserve(nbytes)
        result = copy()
        sleep_until(deadline)
        return result


@dataclass(eq=False)
class TensorHandle:
    id: str
    tier: str
    offset: int
    length: int
    dtype: str = "u8"
    shape: tuple = ()
    path: Optional[str] = None
    buffer: Optional[np.ndarray] = field(default=None, repr=False)

    def view(self, start: int = 0, length: Optional[int] = None) -> np.ndarray:
        """uint8 view into arena-backed bytes."""
        if self.buffer is None:
            raise IoError(f"handle {self.id} on tier {self.tier} has no memory buffer")
        if length is None:
            length = self.length - start
        a = self.offset + start
        return self.buffer[a : a + length]

    def sub(self, start: int, length: int, **kw) -> "TensorHandle":
        """A non-owning window into this handle."""
        return TensorHandle(
            id=kw.pop("id", f"{self.id}[{start}:{start + length}]"),
            tier=self.tier,
            offset=self.offset + start,
            length=length,
            path=self.path,
            buffer=self.buffer,
            **kw,
        )


class Arena:
    """Bounded byte-accounted buffer pool for one memory tier."""

    def __init__(self, tier: str, capacity: int, recorder=None):
        self.tier = tier
        self.capacity = int(capacity)
        self.recorder = recorder
        self._lock = threading.Lock()
        self._live: dict[str, int] = {}
        self.occupancy = 0
        self.peak = 0

    def alloc(self, length: int, tag: Optional[str] = None, token: int = -1,
              layer: int = -1) -> TensorHandle:
        length = int(length)
        if length <= 0:
            raise ValueError("allocation length must be positive")
        hid = f"{self.tier}:{tag or 'buf'}#{next(_handle_ids)}"
        with self._lock:
            if self.occupancy + length > self.capacity:
                raise OutOfMemory(self.tier, length, self.occupancy, self.capacity)
            self._live[hid] = length
            self.occupancy += length
            self.peak = max(self.peak, self.occupancy)
            if self.recorder is not None:
                self.recorder.record(f"Arena:{self.tier}", "alloc", token, layer, length,
                                     self.occupancy)
        return TensorHandle(hid, self.tier, 0, length, buffer=np.empty(length, dtype=np.uint8))

    def free(self, handle: TensorHandle, token: int = -1, layer: int = -1) -> None:
        with self._lock:
            length = self._live.pop(handle.id, None)
            if length is None:
                raise ValueError(f"{self.tier}: handle {handle.id} is not live (double free?)")
            self.occupancy -= length
            if self.recorder is not None:
                self.recorder.record(f"Arena:{self.tier}", "free", token, layer, length,
                                     self.occupancy)
        handle.buffer = None

    def is_live(self, handle: TensorHandle) -> bool:
        with self._lock:
            return handle.id in self._live

    @property
    def live_bytes(self) -> int:
        with self._lock:
            return sum(self._live.values())

    @property
    def live_count(self) -> int:
        with self._lock:
            return len(self._live)

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.occupancy


class DiskTier:
    """Real files under ``root``; reads go through the disk link."""

    def __init__(self, root, link: Optional[Link] = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.link = link or Link("disk")
        self.fault: Optional[Callable[[str, int, int], None]] = None
        self._fds: dict[str, int] = {}
        self._lock = threading.Lock()

    def _fd(self, path: str) -> int:
        with self._lock:
            fd = self._fds.get(path)
            if fd is None:
                try:
                    fd = os.open(path, os.O_RDONLY)
                except OSError as exc:
                    raise IoError(f"cannot open {path}: {exc}", stage="disk") from exc
                self._fds[path] = fd
            return fd

    def read_into(self, path: str, offset: int, out: np.ndarray) -> None:
        """Fill ``out`` (uint8) with ``len(out)`` bytes of ``path`` at ``offset``."""
        n = out.nbytes
        if self.fault is not None:
            self.fault(path, offset, n)

        def _read():
            fd = self._fd(path)
            mv = memoryview(out).cast("B")
            done = 0
            while done < n:
                got = os.preadv(fd, [mv[done:]], offset + done)
                if got <= 0:
                    raise IoError(f"short read from {path}", stage="disk", offset=offset + done)
                done += got

        self.link.transmit(n, _read)

    def write_scratch(self, name: str, nbytes: int, seed: int = 0) -> Path:
        path = self.root / name
        if not path.exists() or path.stat().st_size != nbytes:
            rng = np.random.default_rng(seed)
            with path.open("wb") as fh:
                left = nbytes
                while left:
                    step = min(left, 16 * MiB)
                    fh.write(rng.integers(0, 256, step, dtype=np.uint8).tobytes())
                    left -= step
            self.forget(str(path))
        return path

    def forget(self, path: str) -> None:
        with self._lock:
            fd = self._fds.pop(path, None)
        if fd is not None:
            os.close(fd)

    def close(self) -> None:
        with self._lock:
            fds, self._fds = list(self._fds.values()), {}
        for fd in fds:
            os.close(fd)

    def handle(self, path, offset: int, length: int, **kw) -> TensorHandle:
        return TensorHandle(kw.pop("id", f"disk:{Path(path).name}@{offset}"), "disk", offset,
                            length, path=str(path), **kw)


@dataclass
class EmulationConfig:
    """How the emulated tiers are throttled. Bandwidths come from the hardware spec."""

    throttle: bool = True
    disk_latency: float = 0.0
    disk_knee: int = 0
    device_knee: int = 0
    device_flops: Optional[float] = None

    @classmethod
    def from_dict(cls, data: dict) -> "EmulationConfig":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


class TierStore:
    def __init__(self, disk_root, host_capacity: int, device_capacity: int,
                 disk_bw: Optional[float] = None, device_bw: Optional[float] = None,
                 disk_latency: float = 0.0, disk_knee: int = 0, device_knee: int = 0,
                 recorder=None):
        self.disk = DiskTier(disk_root, Link("disk->host", disk_bw, disk_latency, disk_knee))
        self.host = Arena("host", host_capacity, recorder)
        self.device = Arena("device", device_capacity, recorder)
        # full-duplex device link: separate ingress and egress throttles
        self.ingress = Link("host->device", device_bw, 0.0, device_knee)
        self.egress = Link("device->host", device_bw, 0.0, device_knee)

    @classmethod
    def from_hardware(cls, hw, disk_root, emulation: Optional[EmulationConfig] = None,
                      recorder=None) -> "TierStore":
        emu = emulation or EmulationConfig()
        throttle = emu.throttle
        return cls(
            disk_root,
            host_capacity=hw.host_mem,
            device_capacity=hw.device_mem,
            disk_bw=hw.disk_bw if throttle else None,
            device_bw=hw.device_link_bw if throttle else None,
            disk_latency=emu.disk_latency if throttle else 0.0,
            disk_knee=emu.disk_knee if throttle else 0,
            device_knee=emu.device_knee if throttle else 0,
            recorder=recorder,
        )

    def set_recorder(self, recorder) -> None:
        self.host.recorder = recorder
        self.device.recorder = recorder

    def arena(self, tier: str) -> Arena:
        if tier == "host":
            return self.host
        if tier == "device":
            return self.device
        raise ValueError(f"no arena for tier {tier!r}")

    def link(self, src: str, dst: str) -> Link:
        edges = {
            ("disk", "host"): self.disk.link,
            ("host", "device"): self.ingress,
            ("device", "host"): self.egress,
        }
        try:
            return edges[(src, dst)]
        except KeyError:
            raise ValueError(f"no direct link {src} -> {dst}") from None

    def close(self) -> None:
        self.disk.close()


# -- merged layer blobs -------------------------------------------------------

@dataclass(frozen=True)
class BlobEntry:
    name: str
    offset: int
    length: int
    dtype: str
    shape: tuple


@dataclass
class MergedLayerBlob:
    layer_id: int
    entries: list[BlobEntry]
    payload: bytes

    def entry(self, name: str) -> BlobEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


@dataclass(frozen=True)
class BlobHeader:
    layer_id: int
    entries: list[BlobEntry]
    payload_offset: int
    payload_len: int


def expected_nbytes(dtype: str, shape) -> int:
    if dtype == "u8":
        return math.prod(shape)
    return tensor_nbytes(dtype, tuple(shape))


def merge_layer(tensors, layer_id: int = 0) -> MergedLayerBlob:
    """Concatenate ``(name, bytes, dtype, shape)`` tuples into one payload."""
    seen = set()
    entries, parts, offset = [], [], 0
    for name, data, dtype, shape in tensors:
        if name in seen:
            raise LayoutError(f"duplicate tensor name {name!r}")
        seen.add(name)
        if dtype not in DTYPE_CODES:
            raise LayoutError(f"{name}: unknown dtype {dtype!r}")
        data = bytes(data)
        want = expected_nbytes(dtype, shape)
        if len(data) != want:
            raise LayoutError(f"{name}: {len(data)} bytes but {dtype}{tuple(shape)} needs {want}")
        entries.append(BlobEntry(name, offset, len(data), dtype, tuple(int(s) for s in shape)))
        parts.append(data)
        offset += len(data)
    return MergedLayerBlob(layer_id, entries, b"".join(parts))


def split_layer(blob: MergedLayerBlob) -> list[tuple[str, bytes, str, tuple]]:
    p = blob.payload
    return [(e.name, p[e.offset : e.offset + e.length], e.dtype, e.shape) for e in blob.entries]


def _encode_directory(entries) -> bytes:
    out = bytearray()
    for e in entries:
        name = e.name.encode()
        out += ENTRY.pack(len(name), DTYPE_CODES[e.dtype], len(e.shape), e.offset, e.length)
        out += name
        out += struct.pack(f"<{len(e.shape)}Q", *e.shape)
    return bytes(out)


def blob_filename(layer_id: int) -> str:
    return f"layer_{layer_id:04d}.blob"


def write_blob_to_disk(blob: MergedLayerBlob, directory, name: Optional[str] = None) -> Path:
    directory = Path(directory)
    path = directory / (name or blob_filename(blob.layer_id))
    directory_bytes = _encode_directory(blob.entries)
    header = HEADER.pack(MAGIC, VERSION, blob.layer_id, len(blob.entries),
                         len(directory_bytes), len(blob.payload))
    try:
        with path.open("wb") as fh:
            fh.write(header)
            fh.write(directory_bytes)
            fh.write(blob.payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}", stage="disk") from exc
    return path


def _parse_header(raw: bytes, file_size: int, where: str) -> BlobHeader:
    if len(raw) < HEADER.size:
        raise FormatError(f"{where}: truncated header")
    magic, version, layer_id, n, dir_bytes, payload_len = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{where}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{where}: unsupported version {version}")
    payload_offset = HEADER.size + dir_bytes
    if len(raw) < payload_offset or payload_offset + payload_len != file_size:
        raise FormatError(f"{where}: size mismatch (truncated or trailing bytes)")
    entries, pos = [], HEADER.size
    try:
        for _ in range(n):
            name_len, code, ndim, off, length = ENTRY.unpack_from(raw, pos)
            pos += ENTRY.size
            name = raw[pos : pos + name_len].decode()
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            entries.append(BlobEntry(name, off, length, CODE_DTYPES[code], tuple(shape)))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{where}: corrupt directory: {exc}") from None
    if pos != payload_offset:
        raise FormatError(f"{where}: directory size mismatch")
    cursor = 0
    for e in entries:
        if e.offset != cursor or e.length != expected_nbytes(e.dtype, e.shape):
            raise FormatError(f"{where}: entry {e.name!r} does not tile the payload")
        cursor += e.length
    if cursor != payload_len:
        raise FormatError(f"{where}: directory covers {cursor} of {payload_len} payload bytes")
    return BlobHeader(layer_id, entries, payload_offset, payload_len)


def read_blob_header(path) -> BlobHeader:
    path = Path(path)
    try:
        size = path.stat().st_size
        with path.open("rb") as fh:
            fixed = fh.read(HEADER.size)
            if len(fixed) < HEADER.size:
                raise FormatError(f"{path}: truncated header")
            dir_bytes = HEADER.unpack(fixed)[4]
            raw = fixed + fh.read(dir_bytes)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}", stage="disk") from exc
    return _parse_header(raw, size, str(path))


def read_blob(path) -> MergedLayerBlob:
    header = read_blob_header(path)
    with Path(path).open("rb") as fh:
        fh.seek(header.payload_offset)
        payload = fh.read(header.payload_len)
    return MergedLayerBlob(header.layer_id, header.entries, payload)


# -- synthetic checkpoints ----------------------------------------------------

MANIFEST = "manifest.json"


def pack_model(spec: ModelSpec, out_dir, seed: int = 0) -> dict:
    """Write one merged blob per layer plus ``manifest.json``."""
    from .compute import encode_tensor, synthetic_layer

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = []
    for index, kind in enumerate(spec.layer_kinds):
        master = synthetic_layer(spec, index, seed)
        tensors = [(name, encode_tensor(master[name], dtype), dtype, shape)
                   for name, shape, dtype in layer_tensors(spec, kind)]
        blob = merge_layer(tensors, layer_id=index)
        path = write_blob_to_disk(blob, out_dir)
        header = read_blob_header(path)
        layers.append({
            "index": index,
            "kind": kind.value,
            "file": path.name,
            "payload_offset": header.payload_offset,
            "payload_len": header.payload_len,
        })
    manifest = {"model": spec.to_dict(), "seed": seed, "layers": layers}
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return manifest


def load_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot load manifest {path}: {exc}") from exc
