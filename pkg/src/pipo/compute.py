"""Toy-scale transformer layers: embedding, GQA attention, gated MLP.

Everything accumulates in fp32. Linear weights are either fp32 arrays of
shape (out, in) or :class:`QuantTensor`; the latter routes through the
direct INT4 kernel.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ShapeError
from .memory_model import LayerKind, ModelSpec, layer_tensors
from .quant import QuantTensor, dequantize_int4, matvec_int4, quantize_int4

__all__ = [
    "LayerKind",
    "linear",
    "rms_norm",
    "softmax",
    "apply_rope",
    "attention",
    "causal_mask",
    "mha_forward",
    "mlp_forward",
    "forward_layer",
    "layer_flops",
    "synthetic_layer",
]

RMS_EPS = 1e-5
ROPE_BASE = 10000.0


def linear(x: np.ndarray, w) -> np.ndarray:
    if isinstance(w, QuantTensor):
        lead = x.shape[:-1]
        y = matvec_int4(w, x.reshape(-1, x.shape[-1]))
        return y.reshape(*lead, w.shape[0])
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-features {w.shape[1]}")
    return x @ w.T


def rms_norm(x: np.ndarray, weight: Optional[np.ndarray] = None) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + np.float32(RMS_EPS))
    y = x * scale
    return y * weight if weight is not None else y


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def apply_rope(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rotary embedding on the last axis of ``x`` (b, q, heads, hd)."""
    hd = x.shape[-1]
    half = hd // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float32) / np.float32(half))
    ang = positions.astype(np.float32)[:, None] * inv_freq[None, :]  # (q, half)
    cos = np.cos(ang)[None, :, None, :]
    sin = np.sin(ang)[None, :, None, :]
    x1, x2 = x[..., :half], x[..., half : 2 * half]
    out = np.empty_like(x)
    out[..., :half] = x1 * cos - x2 * sin
    out[..., half : 2 * half] = x1 * sin + x2 * cos
    if hd % 2:
        out[..., -1] = x[..., -1]
    return out


def causal_mask(q_positions: np.ndarray, num_keys: int) -> np.ndarray:
    """Additive mask (q, t): key k is visible to query at position p iff k <= p."""
    keys = np.arange(num_keys)
    allowed = keys[None, :] <= q_positions[:, None]
    return np.where(allowed, np.float32(0.0), np.float32(-np.inf)).astype(np.float32)


def attention(q, k, v, mask=None, return_probs=False):
    """Grouped-query attention.

    q: (b, sq, h, hd); k, v: (b, t, h_kv, hd); mask: (sq, t) additive.
    Returns (b, sq, h, hd).
    """
    b, sq, h, hd = q.shape
    h_kv = k.shape[2]
    if h % h_kv or k.shape != v.shape or k.shape[-1] != hd:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    group = h // h_kv
    qg = q.reshape(b, sq, h_kv, group, hd).transpose(0, 2, 3, 1, 4)  # b,hk,g,sq,hd
    kt = k.transpose(0, 2, 3, 1)[:, :, None]  # b,hk,1,hd,t
    scores = (qg @ kt) / np.float32(np.sqrt(hd))  # b,hk,g,sq,t
    if mask is not None:
        scores = scores + mask
    probs = softmax(scores)
    out = probs @ v.transpose(0, 2, 1, 3)[:, :, None]  # b,hk,g,sq,hd
    out = out.transpose(0, 3, 1, 2, 4).reshape(b, sq, h, hd)
    if return_probs:
        return out, probs.reshape(b, h, sq, -1)
    return out


def mha_forward(w: dict, x, spec: ModelSpec, positions, past_k=None, past_v=None, mask=None):
    """Pre-norm attention block with residual.

    x: (b, sq, d); past_k/past_v: (b, t_past, h_kv, hd) or None.
    Returns (out, k_new, v_new) where k_new/v_new cover only the sq inputs.
    """
    b, sq, d = x.shape
    if d != spec.hidden_dim:
        raise ShapeError(f"hidden size {d} != model {spec.hidden_dim}")
    h, hk, hd = spec.num_heads, spec.num_kv_heads, spec.head_dim
    xn = rms_norm(x, w["attn_norm"])
    q = linear(xn, w["wq"]).reshape(b, sq, h, hd)
    k_new = linear(xn, w["wk"]).reshape(b, sq, hk, hd)
    v_new = linear(xn, w["wv"]).reshape(b, sq, hk, hd)
    q = apply_rope(q, positions)
    k_new = apply_rope(k_new, positions)
    if past_k is not None and past_k.shape[1]:
        k = np.concatenate([past_k, k_new], axis=1)
        v = np.concatenate([past_v, v_new], axis=1)
    else:
        k, v = k_new, v_new
    if mask is None:
        mask = causal_mask(positions, k.shape[1])
    ctx = attention(q, k, v, mask).reshape(b, sq, d)
    return x + linear(ctx, w["wo"]), k_new, v_new


def silu(x):
    return x / (1.0 + np.exp(-x))


def mlp_branch(w: dict, x):
    xn = rms_norm(x, w["ffn_norm"])
    return linear(silu(linear(xn, w["w_gate"])) * linear(xn, w["w_up"]), w["w_down"])


def mlp_forward(w: dict, x):
    return x + mlp_branch(w, x)


def forward_layer(kind: LayerKind, weights: dict, x, spec: ModelSpec, positions=None,
                  kv=None, mask=None):
    """Run one layer.

    Embed takes integer token ids (b, sq) and returns hidden (b, sq, d).
    MHA returns ``(hidden, k_new, v_new)``; ``kv`` is ``(past_k, past_v)``.
    OutputEmbed returns logits (b, sq, V).
    """
    kind = LayerKind(kind)
    if kind is LayerKind.EMBED:
        table = weights["tok_embeddings"]
        if isinstance(table, QuantTensor):
            table = dequantize_int4(table)
        return table[np.asarray(x)].astype(np.float32)
    if kind is LayerKind.OUTPUT:
        return linear(x, weights["lm_head"])
    if kind is LayerKind.MLP:
        return mlp_forward(weights, x)
    past_k, past_v = kv if kv is not None else (None, None)
    if positions is None:
        start = 0 if past_k is None else past_k.shape[1]
        positions = np.arange(start, start + x.shape[1])
    return mha_forward(weights, x, spec, positions, past_k, past_v, mask)


def layer_flops(spec: ModelSpec, kind: LayerKind, batch: int, q_len: int, num_keys: int) -> int:
    """Multiply-add FLOPs (x2) of one layer over ``batch * q_len`` tokens."""
    n = batch * q_len
    d = spec.hidden_dim
    if kind is LayerKind.EMBED:
        return 0
    if kind is LayerKind.OUTPUT:
        return 2 * n * d * spec.vocab_size
    if kind is LayerKind.MLP:
        return 2 * n * 3 * d * spec.ffn_dim
    proj = 2 * n * d * (2 * d + 2 * spec.kv_dim)
    attn = 4 * batch * spec.num_heads * q_len * num_keys * spec.head_dim
    return proj + attn


def synthetic_layer(spec: ModelSpec, index: int, seed: int) -> dict[str, np.ndarray]:
    """fp32 master weights for layer ``index`` from a seeded generator."""
    kind = spec.layer_kinds[index]
    rng = np.random.default_rng([seed, index])
    out = {}
    for name, shape, _ in layer_tensors(spec, kind):
        if len(shape) == 1:
            out[name] = (1.0 + 0.1 * rng.standard_normal(shape)).astype(np.float32)
        elif kind in (LayerKind.EMBED, LayerKind.OUTPUT):
            out[name] = rng.standard_normal(shape).astype(np.float32)
        else:
            out[name] = (0.5 / np.sqrt(shape[1]) * rng.standard_normal(shape)).astype(np.float32)
    return out


def encode_tensor(array: np.ndarray, dtype: str) -> bytes:
    """Serialize one tensor in its stored dtype."""
    if dtype == "int4":
        return quantize_int4(array).to_bytes()
    if dtype == "fp16":
        return np.asarray(array, dtype="<f2").tobytes()
    return np.asarray(array, dtype="<f4").tobytes()


def decode_tensor(buf, dtype: str, shape, dequantize: bool = False):
    """Inverse of :func:`encode_tensor`; int4 stays packed unless asked."""
    if dtype == "int4":
        q = QuantTensor.from_bytes(buf, tuple(shape))
        return dequantize_int4(q) if dequantize else q
    np_dtype = "<f2" if dtype == "fp16" else "<f4"
    return np.frombuffer(buf, dtype=np_dtype).reshape(shape).astype(np.float32)
