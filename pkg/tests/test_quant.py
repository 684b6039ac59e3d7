import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipo.errors import ShapeError
from pipo.memory_model import GROUP_SIZE, tensor_nbytes
from pipo.quant import QuantTensor, dequantize_int4, matvec_int4, quantize_int4


def unpack_reference(q: QuantTensor) -> np.ndarray:
    """Decode nibbles one element at a time; independent of the library's unpacker."""
    rows, cols = q.shape
    out = np.zeros((rows, cols), dtype=np.float32)
    for r in range(rows):
        for c in range(cols):
            byte = int(q.packed[r, c // 2])
            nib = (byte >> 4) if c % 2 else (byte & 0xF)
            code = nib - 16 if nib >= 8 else nib
            out[r, c] = np.float32(code) * np.float32(q.scales[r, c // GROUP_SIZE])
    return out


def column_loop_matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """fp32 accumulation, one input column at a time, increasing order."""
    acc = np.zeros((x.shape[0], w.shape[0]), dtype=np.float32)
    for k in range(w.shape[1]):
        acc += x[:, k : k + 1] * w[:, k][None, :]
    return acc


def random_instance(seed):
    rng = np.random.default_rng(seed)
    rows = int(rng.integers(1, 24))
    cols = int(rng.integers(1, 150))
    scale = float(rng.choice([1e-3, 0.1, 1.0, 30.0]))
    w = (scale * rng.standard_normal((rows, cols))).astype(np.float32)
    x = rng.standard_normal((int(rng.integers(1, 4)), cols)).astype(np.float32)
    return w, x


@pytest.mark.parametrize("seed", range(200))
def test_matvec_bit_exact_against_dequantized_loop(seed):
    w, x = random_instance(seed)
    q = quantize_int4(w)
    deq = unpack_reference(q)
    assert np.array_equal(dequantize_int4(q), deq)
    assert np.array_equal(matvec_int4(q, x), column_loop_matvec(deq, x))


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_quantization_error_within_half_scale(seed):
    w, _ = random_instance(seed)
    q = quantize_int4(w)
    per_elem_scale = np.repeat(q.scales.astype(np.float32), GROUP_SIZE, axis=1)[:, : w.shape[1]]
    assert np.all(np.abs(w - dequantize_int4(q)) <= per_elem_scale / 2)


def test_representable_constant_is_exact():
    # 1.75 = 7 * 0.25 and 0.25 is exact in fp16
    w = np.full((3, 70), 1.75, dtype=np.float32)
    q = quantize_int4(w)
    assert np.array_equal(dequantize_int4(q), w)
    x = np.ones(70, dtype=np.float32)
    assert np.array_equal(matvec_int4(q, x), np.full(3, 1.75 * 70, dtype=np.float32))


def test_zero_group_and_negative_extreme():
    w = np.zeros((2, 64), dtype=np.float32)
    w[1, 0] = -3.5
    q = quantize_int4(w)
    assert np.array_equal(q.scales[0], np.zeros(1, np.float16))
    assert np.array_equal(dequantize_int4(q), w)


def test_pack_layout():
    w = np.zeros((1, 4), dtype=np.float32)
    w[0] = [7.0, -7.0, 1.0, -1.0]  # scale 1
    q = quantize_int4(w)
    assert q.scales[0, 0] == 1.0
    # low nibble = even column, high nibble = odd column, two's complement
    assert q.packed[0, 0] == (7 | (0x9 << 4))
    assert q.packed[0, 1] == (1 | (0xF << 4))
    assert q.packed.shape == (1, GROUP_SIZE // 2)


@settings(max_examples=50)
@given(st.integers(1, 9), st.integers(1, 200), st.integers(0, 1000))
def test_bytes_roundtrip(rows, cols, seed):
    w = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32)
    q = quantize_int4(w)
    raw = q.to_bytes()
    assert len(raw) == q.nbytes == tensor_nbytes("int4", (rows, cols))
    again = QuantTensor.from_bytes(raw, (rows, cols))
    assert np.array_equal(again.packed, q.packed)
    assert np.array_equal(again.scales, q.scales)


def test_shape_errors():
    q = quantize_int4(np.ones((2, 8), dtype=np.float32))
    with pytest.raises(ShapeError):
        matvec_int4(q, np.ones(7, dtype=np.float32))
    with pytest.raises(ShapeError):
        QuantTensor.from_bytes(b"\0" * 5, (2, 8))
    with pytest.raises(ShapeError):
        quantize_int4(np.ones((2, 2, 2)))


def test_vector_input_matches_batched():
    w, x = random_instance(7)
    q = quantize_int4(w)
    assert np.array_equal(matvec_int4(q, x[0]), matvec_int4(q, x[:1])[0])
