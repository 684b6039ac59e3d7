import hashlib
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipo.errors import IoError, OutOfMemory
from pipo.storage import MiB, TierStore
from pipo.trace import TraceRecorder
from pipo.transfer import MODES, TransferEngine, TransferRequest

EDGES = ["disk->device", "disk->host", "host->device", "device->host"]


def digest(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def make_source(store, tier, nbytes, seed=0):
    if tier == "disk":
        path = store.disk.write_scratch(f"src-{nbytes}-{seed}.bin", nbytes, seed=seed)
        return store.disk.handle(path, 0, nbytes), np.fromfile(path, dtype=np.uint8)
    h = store.arena(tier).alloc(nbytes, tag="src")
    h.view()[:] = np.random.default_rng(seed).integers(0, 256, nbytes, dtype=np.uint8)
    return h, h.view().copy()


def timed(engine, mode, req):
    t0 = time.perf_counter()
    engine.submit(mode, req).result(timeout=60)
    return time.perf_counter() - t0


# -- bit exactness -------------------------------------------------------------

@pytest.mark.parametrize("edge", EDGES)
@pytest.mark.parametrize("mode", MODES)
def test_checksum_every_mode_and_edge(tmp_path, edge, mode):
    src_tier, dst_tier = edge.split("->")
    n = 3 * MiB + 12345
    store = TierStore(tmp_path, 4 * n, 2 * n)
    source, expected = make_source(store, src_tier, n)
    dest = store.arena(dst_tier).alloc(n, tag="dst")
    fut = TransferEngine(store).submit(mode, TransferRequest(source, dest, MiB, num_workers=4))
    assert fut.result(timeout=30) is dest
    assert digest(dest.view()) == digest(expected)
    store.close()


def test_large_random_payload_checksum(tmp_path):
    n = 64 * MiB
    store = TierStore(tmp_path, 2 * n, 2 * n)
    source, expected = make_source(store, "disk", n, seed=3)
    engine = TransferEngine(store)
    for mode in MODES:
        dest = store.device.alloc(n)
        engine.run(mode, TransferRequest(source, dest, 8 * MiB, num_workers=4))
        assert digest(dest.view()) == digest(expected), mode
        store.device.free(dest)
    assert store.host.occupancy == 0
    store.close()


@settings(max_examples=25)
@given(n=st.integers(1, 200_000), block=st.integers(1, 70_000), chunk=st.integers(1, 70_000),
       workers=st.integers(1, 5), mode=st.sampled_from(MODES), seed=st.integers(0, 3))
def test_arbitrary_geometry_is_exact(tmp_path_factory, n, block, chunk, workers, mode, seed):
    store = TierStore(tmp_path_factory.mktemp("geo"), 4 * n + 4 * block, 2 * n)
    source, expected = make_source(store, "disk", n, seed)
    dest = store.device.alloc(n)
    TransferEngine(store).run(mode, TransferRequest(source, dest, block, chunk, workers))
    assert np.array_equal(dest.view(), expected)
    assert store.host.occupancy == 0
    store.close()


def test_offsets_and_partial_length(tmp_path):
    store = TierStore(tmp_path, MiB, MiB)
    source, expected = make_source(store, "host", 10_000)
    dest = store.device.alloc(5000)
    req = TransferRequest(source, dest, 1024, length=3000, source_offset=700, dest_offset=1000)
    TransferEngine(store).run("chunked", req)
    assert np.array_equal(dest.view(1000, 3000), expected[700:3700])


def test_request_clamps(tmp_path):
    store = TierStore(tmp_path, 10, 10)
    src = store.host.alloc(4)
    dst = store.device.alloc(4)
    assert TransferRequest(src, dst, 100, 50).resolved() == (4, 4, 4)
    assert TransferRequest(src, dst, 2, 50).resolved() == (4, 2, 2)
    with pytest.raises(ValueError):
        TransferRequest(src, store.device.alloc(2), 2).resolved()


# -- timing laws ---------------------------------------------------------------

# stage-1 0.25 MiB at 50 MB/s = 5.2 ms, stage-2 at 100 MB/s = 2.6 ms
BLOCK = 256 * 1024
DISK_BW, DEV_BW = 50e6, 100e6


@pytest.fixture
def throttled(tmp_path):
    store = TierStore(tmp_path, 64 * MiB, 64 * MiB, disk_bw=DISK_BW, device_bw=DEV_BW)
    yield store
    store.close()


@pytest.mark.parametrize("nblocks", [1, 8, 12])
def test_pipelined_matches_two_stage_law(throttled, nblocks):
    n = nblocks * BLOCK
    t1, t2 = BLOCK / DISK_BW, BLOCK / DEV_BW
    predicted = t1 + t2 + (nblocks - 1) * max(t1, t2)
    source, _ = make_source(throttled, "disk", n)
    engine = TransferEngine(throttled)
    samples = []
    for _ in range(3):
        dest = throttled.device.alloc(n)
        samples.append(timed(engine, "pipelined", TransferRequest(source, dest, BLOCK)))
        throttled.device.free(dest)
    measured = sorted(samples)[1]
    assert abs(measured - predicted) / predicted <= 0.20, (measured, predicted)


def test_naive_is_sequential_sum(throttled):
    n = 8 * BLOCK
    predicted = n / DISK_BW + n / DEV_BW
    source, _ = make_source(throttled, "disk", n)
    dest = throttled.device.alloc(n)
    measured = timed(TransferEngine(throttled), "naive", TransferRequest(source, dest, BLOCK))
    assert abs(measured - predicted) / predicted <= 0.20


def test_pipelined_beats_naive(throttled):
    n = 8 * BLOCK
    source, _ = make_source(throttled, "disk", n)
    engine = TransferEngine(throttled)
    times = {}
    for mode in ("naive", "pipelined"):
        dest = throttled.device.alloc(n)
        times[mode] = timed(engine, mode, TransferRequest(source, dest, BLOCK))
        throttled.device.free(dest)
    assert times["naive"] / times["pipelined"] >= 1.2, times


def _latency_store(path):
    # latency-bound disk: concurrent requests overlap their 4 ms waits
    return TierStore(path, 64 * MiB, 64 * MiB, disk_latency=0.004)


def _chunked_time(store, workers, n=16 * 64 * 1024):
    source, _ = make_source(store, "disk", n)
    dest = store.host.alloc(n)
    req = TransferRequest(source, dest, n, chunk_size=64 * 1024, num_workers=workers)
    t = timed(TransferEngine(store), "chunked", req)
    store.host.free(dest)
    return t


def test_chunked_workers_beat_single_worker(tmp_path):
    store = _latency_store(tmp_path)
    one, four = _chunked_time(store, 1), _chunked_time(store, 4)
    assert one / four >= 1.5, (one, four)


def test_throughput_monotone_in_workers(tmp_path):
    store = _latency_store(tmp_path)
    times = [min(_chunked_time(store, w) for _ in range(2)) for w in (1, 2, 3, 4)]
    for a, b in zip(times, times[1:]):
        assert b <= a * 1.10, times


def test_single_worker_chunked_matches_pipelined(throttled):
    n = 8 * BLOCK
    source, expected = make_source(throttled, "disk", n)
    engine = TransferEngine(throttled)
    times = {}
    for mode in ("pipelined", "chunked"):
        dest = throttled.device.alloc(n)
        times[mode] = timed(engine, mode, TransferRequest(source, dest, BLOCK, chunk_size=BLOCK,
                                                          num_workers=1))
        assert np.array_equal(dest.view(), expected)
        throttled.device.free(dest)
    assert abs(times["chunked"] - times["pipelined"]) / times["pipelined"] < 0.20


def test_overlap_witness(tmp_path):
    store = TierStore(tmp_path, 64 * MiB, 64 * MiB, disk_bw=DISK_BW, device_bw=DISK_BW)
    rec = TraceRecorder()
    source, _ = make_source(store, "disk", 4 * BLOCK)
    dest = store.device.alloc(4 * BLOCK)
    TransferEngine(store, recorder=rec).run("pipelined", TransferRequest(source, dest, BLOCK))
    spans = {"Xfer:stage1": {}, "Xfer:stage2": {}}
    for ev in rec.events:
        if ev.kind in spans:
            start, end = spans[ev.kind].get(ev.layer, (None, None))
            if ev.phase == "started":
                spans[ev.kind][ev.layer] = (ev.wall_ns, end)
            else:
                spans[ev.kind][ev.layer] = (start, ev.wall_ns)
    overlaps = [
        (a, b)
        for a, (s1, e1) in spans["Xfer:stage1"].items()
        for b, (s2, e2) in spans["Xfer:stage2"].items()
        if s1 < e2 and s2 < e1
    ]
    assert overlaps


# -- failures ------------------------------------------------------------------

@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("dst_tier", ["device", "host"])
def test_failure_releases_destination(tmp_path, mode, dst_tier):
    n = 8 * 64 * 1024
    store = TierStore(tmp_path, 8 * n, 8 * n)
    source, _ = make_source(store, "disk", n)
    before = (store.host.occupancy, store.device.occupancy)
    dest = store.arena(dst_tier).alloc(n)

    def fault(path, offset, length):
        if offset <= 3 * 64 * 1024 < offset + length:
            raise IoError("injected", stage="disk", offset=offset)

    store.disk.fault = fault
    fut = TransferEngine(store).submit(mode, TransferRequest(source, dest, 2 * 64 * 1024,
                                                             chunk_size=64 * 1024))
    with pytest.raises(IoError) as err:
        fut.result(timeout=30)
    assert err.value.stage is not None and err.value.offset is not None
    assert fut.done() and fut.exception() is err.value
    assert (store.host.occupancy, store.device.occupancy) == before
    store.close()


def test_staging_oom_propagates(tmp_path):
    n = 4 * MiB
    store = TierStore(tmp_path, MiB // 2, 2 * n)
    source, _ = make_source(store, "disk", n)
    dest = store.device.alloc(n)
    fut = TransferEngine(store).submit("chunked", TransferRequest(source, dest, MiB))
    with pytest.raises(OutOfMemory):
        fut.result(timeout=30)
    assert store.device.occupancy == 0 and store.host.occupancy == 0


def test_unknown_mode(tmp_path):
    store = TierStore(tmp_path, 10, 10)
    with pytest.raises(ValueError):
        TransferEngine(store).run("teleport", TransferRequest(store.host.alloc(2),
                                                              store.device.alloc(2), 1))
