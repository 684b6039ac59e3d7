"""Symmetric group-wise INT4 weight quantization and a direct INT4 matvec.

Layout of a quantized ``(rows, cols)`` matrix: ``cols`` is zero-padded to a
multiple of ``GROUP_SIZE``; each row holds ``groups * 32`` packed bytes (low
nibble = even column, high nibble = odd column, two's complement codes in
[-8, 7]) and ``groups`` fp16 scales.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .memory_model import GROUP_SIZE, tensor_nbytes

QMAX = 7
QMIN = -8


@dataclass
class QuantTensor:
    packed: np.ndarray  # uint8, (rows, groups * GROUP_SIZE // 2)
    scales: np.ndarray  # float16, (rows, groups)
    shape: tuple[int, int]

    @property
    def groups(self) -> int:
        return self.scales.shape[1]

    @property
    def padded_cols(self) -> int:
        return self.groups * GROUP_SIZE

    @property
    def nbytes(self) -> int:
        return self.packed.nbytes + self.scales.nbytes

    def to_bytes(self) -> bytes:
        return self.packed.tobytes() + self.scales.astype("<f2").tobytes()

    @classmethod
    def from_bytes(cls, buf, shape) -> "QuantTensor":
        rows, cols = shape
        groups = -(-cols // GROUP_SIZE)
        expected = tensor_nbytes("int4", shape)
        raw = np.frombuffer(buf, dtype=np.uint8)
        if raw.size != expected:
            raise ShapeError(f"int4 tensor {shape} needs {expected} bytes, got {raw.size}")
        npacked = rows * groups * (GROUP_SIZE // 2)
        packed = raw[:npacked].reshape(rows, groups * (GROUP_SIZE // 2))
        scales = raw[npacked:].view("<f2").reshape(rows, groups)
        return cls(packed, scales, (rows, cols))

    def codes(self) -> np.ndarray:
        """Unpacked int8 codes, (rows, padded_cols)."""
        lo = (self.packed & 0x0F).astype(np.int8)
        hi = (self.packed >> 4).astype(np.int8)
        out = np.empty((self.packed.shape[0], self.padded_cols), dtype=np.int8)
        out[:, 0::2] = lo
        out[:, 1::2] = hi
        return (out ^ 8) - 8


def quantize_int4(w: np.ndarray) -> QuantTensor:
    w = np.asarray(w, dtype=np.float32)
    if w.ndim == 1:
        w = w[None, :]
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    rows, cols = w.shape
    groups = -(-cols // GROUP_SIZE)
    padded = np.zeros((rows, groups * GROUP_SIZE), dtype=np.float32)
    padded[:, :cols] = w
    g = padded.reshape(rows, groups, GROUP_SIZE)

    absmax = np.abs(g).max(axis=-1)
    scales = (absmax / QMAX).astype(np.float16)
    s32 = scales.astype(np.float32)
    safe = np.where(s32 == 0, 1.0, s32)
    # np.rint rounds half to even
    codes = np.clip(np.rint(g / safe[..., None]), QMIN, QMAX).astype(np.int8)
    codes[s32 == 0] = 0

    flat = (codes.reshape(rows, -1).astype(np.uint8)) & 0x0F
    packed = (flat[:, 0::2] | (flat[:, 1::2] << 4)).astype(np.uint8)
    return QuantTensor(packed, scales, (rows, cols))


def dequantize_int4(q: QuantTensor) -> np.ndarray:
    rows, cols = q.shape
    codes = q.codes().reshape(rows, q.groups, GROUP_SIZE).astype(np.float32)
    w = codes * q.scales.astype(np.float32)[..., None]
    return w.reshape(rows, -1)[:, :cols]


def matvec_int4(q: QuantTensor, x: np.ndarray) -> np.ndarray:
    """``x @ W.T`` straight from packed nibbles.

    Accepts ``x`` of shape ``(cols,)`` or ``(n, cols)``. Accumulates in fp32,
    one input column at a time in increasing order; each column of weights is
    decoded into a register-sized vector and never stored as a full matrix.
    """
    x = np.asarray(x, dtype=np.float32)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    rows, cols = q.shape
    if x.shape[-1] != cols:
        raise ShapeError(f"x has {x.shape[-1]} columns, weight expects {cols}")
    scales = q.scales.astype(np.float32)
    acc = np.zeros((x.shape[0], rows), dtype=np.float32)
    for k in range(cols):
        byte = q.packed[:, k >> 1]
        nib = (byte >> 4) if k & 1 else (byte & 0x0F)
        code = ((nib.astype(np.int8) ^ 8) - 8).astype(np.float32)
        col = code * scales[:, k // GROUP_SIZE]
        acc += x[:, k : k + 1] * col[None, :]
    return acc[0] if squeeze else acc
