"""Closed-form sizing of weights, KV-cache and peak device memory.

All quantities are exact integer bytes. Weight bytes are summed tensor by
tensor from :func:`layer_tensors`, which is also the layout used when packing
synthetic checkpoints, so the analytic numbers and the runtime's byte
accounting agree by construction.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Optional

GROUP_SIZE = 64
SCALE_BYTES = 2  # one fp16 scale per group

DTYPE_BYTES = {"fp16": 2, "fp32": 4}
WEIGHT_DTYPES = ("fp16", "int4")


class LayerKind(str, Enum):
    EMBED = "Embed"
    MHA = "MHA"
    MLP = "MLP"
    OUTPUT = "OutputEmbed"


class Stage(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_dim: int
    vocab_size: int
    num_heads: int
    num_kv_heads: int
    ffn_multiple: int = 1
    ffn_gamma: float = 1.0
    weight_dtype: str = "fp16"
    act_bytes: int = 2

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        for name in ("hidden_dim", "vocab_size", "num_heads", "num_kv_heads", "ffn_multiple"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_kv_heads > self.num_heads or self.num_heads % self.num_kv_heads:
            raise ValueError("num_heads must be a multiple of num_kv_heads")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.ffn_gamma <= 0:
            raise ValueError("ffn_gamma must be positive")
        if self.weight_dtype not in WEIGHT_DTYPES:
            raise ValueError(f"weight_dtype must be one of {WEIGHT_DTYPES}")
        if self.act_bytes not in (2, 4):
            raise ValueError("act_bytes must be 2 or 4")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def kv_dim(self) -> int:
        """Width of one K (or V) projection: d * h_kv / h."""
        return self.num_kv_heads * self.head_dim

    @property
    def ffn_dim(self) -> int:
        return ffn_hidden_dim(self)

    @property
    def layer_kinds(self) -> list[LayerKind]:
        kinds = [LayerKind.EMBED]
        for _ in range(self.num_layers):
            kinds += [LayerKind.MHA, LayerKind.MLP]
        return kinds + [LayerKind.OUTPUT]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass(frozen=True)
class WorkloadSpec:
    batch_size: int
    prompt_len: int
    gen_len: int

    def __post_init__(self):
        if self.batch_size < 1 or self.prompt_len < 1 or self.gen_len < 1:
            raise ValueError("batch_size, prompt_len and gen_len must be >= 1")

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.gen_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadSpec":
        return cls(int(data["batch_size"]), int(data["prompt_len"]), int(data["gen_len"]))


@dataclass(frozen=True)
class MemoryReport:
    w_embed: int
    w_mha: int
    w_mlp: int
    w_total: int
    c_total: int = 0
    m_mha: int = 0
    m_mlp: int = 0
    m_embed: int = 0
    m_peak: int = 0
    stage: Optional[str] = None
    preload: Optional[bool] = None
    weight_dtype: str = "fp16"
    act_bytes: int = 2

    def to_dict(self) -> dict:
        return asdict(self)

    def format_text(self) -> str:
        rows = [(f.name, getattr(self, f.name)) for f in fields(self)]
        width = max(len(name) for name, _ in rows)
        lines = []
        for name, value in rows:
            if isinstance(value, int) and not isinstance(value, bool):
                lines.append(f"{name:<{width}}  {value:>16,d}  ({_human(value)})")
            else:
                lines.append(f"{name:<{width}}  {value!s:>16}")
        return "\n".join(lines)


def _human(n: int) -> str:
    for unit in ("B", "KiB", "MiB", "GiB"):
        if abs(n) < 1024 or unit == "GiB":
            return f"{n:.1f} {unit}" if unit != "B" else f"{n} B"
        n /= 1024
    return str(n)


def ffn_hidden_dim(spec: ModelSpec) -> int:
    """m * ceil(gamma * floor(8d/3) / m), evaluated in exact rationals."""
    m = spec.ffn_multiple
    gamma = Fraction(str(spec.ffn_gamma))
    base = (8 * spec.hidden_dim) // 3
    return m * math.ceil(gamma * base / m)


def tensor_nbytes(dtype: str, shape: tuple[int, ...]) -> int:
    """Stored size of one tensor. int4 rows are padded to whole groups."""
    if dtype == "int4":
        cols = shape[-1]
        rows = math.prod(shape[:-1])
        groups = -(-cols // GROUP_SIZE)
        return rows * groups * (GROUP_SIZE // 2 + SCALE_BYTES)
    return DTYPE_BYTES[dtype] * math.prod(shape)


def layer_tensors(spec: ModelSpec, kind: LayerKind) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, dtype) for every tensor of one layer, in blob order.

    Matrices are stored (out_features, in_features). Norm vectors stay fp16
    even when matrices are int4.
    """
    d, wd = spec.hidden_dim, spec.weight_dtype
    if kind in (LayerKind.EMBED, LayerKind.OUTPUT):
        name = "tok_embeddings" if kind is LayerKind.EMBED else "lm_head"
        return [(name, (spec.vocab_size, d), wd)]
    if kind is LayerKind.MHA:
        kv = spec.kv_dim
        return [
            ("attn_norm", (d,), "fp16"),
            ("wq", (d, d), wd),
            ("wk", (kv, d), wd),
            ("wv", (kv, d), wd),
            ("wo", (d, d), wd),
        ]
    dh = spec.ffn_dim
    return [
        ("ffn_norm", (d,), "fp16"),
        ("w_gate", (dh, d), wd),
        ("w_up", (dh, d), wd),
        ("w_down", (d, dh), wd),
    ]


def layer_weight_bytes(spec: ModelSpec, kind: LayerKind) -> int:
    return sum(tensor_nbytes(dt, shape) for _, shape, dt in layer_tensors(spec, kind))


def weight_sizes(spec: ModelSpec) -> MemoryReport:
    w_embed = layer_weight_bytes(spec, LayerKind.EMBED)
    w_mha = layer_weight_bytes(spec, LayerKind.MHA)
    w_mlp = layer_weight_bytes(spec, LayerKind.MLP)
    return MemoryReport(
        w_embed=w_embed,
        w_mha=w_mha,
        w_mlp=w_mlp,
        w_total=2 * w_embed + spec.num_layers * (w_mha + w_mlp),
        weight_dtype=spec.weight_dtype,
        act_bytes=spec.act_bytes,
    )


def kv_layer_bytes(spec: ModelSpec, batch: int, seq_len: int) -> int:
    """K and V of one attention layer: 2 * p * b * s * d * h_kv / h."""
    return 2 * spec.act_bytes * batch * seq_len * spec.kv_dim


def kv_cache_size(spec: ModelSpec, wl: WorkloadSpec) -> int:
    return spec.num_layers * kv_layer_bytes(spec, wl.batch_size, wl.seq_len)


def peak_memory(spec: ModelSpec, wl: WorkloadSpec, stage, preload: bool) -> MemoryReport:
    """Peak device residency for one stage, with or without preloading.

    Activation terms use the activation precision; weight terms use the
    stored weight sizes. Decode attention scores are counted over the full
    sequence (p*b*h*s) in both preload cases.
    """
    stage = Stage(stage)
    w = weight_sizes(spec)
    p, b, s = spec.act_bytes, wl.batch_size, wl.seq_len
    d, h, V, dh = spec.hidden_dim, spec.num_heads, spec.vocab_size, spec.ffn_dim
    kv = kv_layer_bytes(spec, b, s)  # C / l

    tokens = b * s if stage is Stage.PREFILL else b
    attn = p * b * h * s * (s if stage is Stage.PREFILL else 1)

    m_mha = p * tokens * 5 * d + attn + w.w_mha + kv
    m_mlp = p * tokens * (3 * dh + 2 * d) + w.w_mlp
    m_embed = p * tokens * (d + V) + w.w_embed
    if preload:
        m_mha += w.w_mlp
        m_mlp += w.w_mha
        m_embed += max(w.w_mha, w.w_embed)
        if stage is Stage.DECODE:
            # KV of the next attention layer is prefetched one layer ahead
            m_mha += kv
            m_mlp += kv
    return MemoryReport(
        w_embed=w.w_embed,
        w_mha=w.w_mha,
        w_mlp=w.w_mlp,
        w_total=w.w_total,
        c_total=kv_cache_size(spec, wl),
        m_mha=m_mha,
        m_mlp=m_mlp,
        m_embed=m_embed,
        m_peak=max(m_mha, m_mlp, m_embed),
        stage=stage.value,
        preload=preload,
        weight_dtype=spec.weight_dtype,
        act_bytes=spec.act_bytes,
    )


def run_peak_bound(spec: ModelSpec, wl: WorkloadSpec, preload: bool) -> int:
    """Largest analytic peak over both stages for one preload setting."""
    return max(
        peak_memory(spec, wl, Stage.PREFILL, preload).m_peak,
        peak_memory(spec, wl, Stage.DECODE, preload).m_peak,
    )


def load_config(path) -> tuple[ModelSpec, Optional[WorkloadSpec]]:
    """Read a JSON config holding either bare model fields or
    ``{"model": {...}, "workload": {...}}``."""
    data = json.loads(Path(path).read_text())
    if "model" in data:
        model = ModelSpec.from_dict(data["model"])
        wl = WorkloadSpec.from_dict(data["workload"]) if "workload" in data else None
        return model, wl
    return ModelSpec.from_dict(data), None


TOY_MODEL = ModelSpec(
    num_layers=4,
    hidden_dim=64,
    vocab_size=256,
    num_heads=4,
    num_kv_heads=2,
    ffn_multiple=16,
    ffn_gamma=1.0,
)


def residency_bound(spec: ModelSpec, wl: WorkloadSpec, preload: bool) -> int:
    """Device bytes the runtime may hold at once: the analytic peak plus two
    terms the closed forms leave out.

    * new K/V of an attention layer stays resident until its save lands, which
      can overlap the next layers: one prefill layer's worth, or one token per
      attention layer in decode.
    * with preloading, the last MLP prefetches the output embedding rather
      than an attention layer.
    """
    w = weight_sizes(spec)
    p, b = spec.act_bytes, wl.batch_size
    pending = max(2 * p * b * wl.prompt_len * spec.kv_dim,
                  spec.num_layers * 2 * p * b * spec.kv_dim)
    transition = max(0, w.w_embed - w.w_mha) if preload else 0
    return run_peak_bound(spec, wl, preload) + pending + transition
