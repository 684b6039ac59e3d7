import json

import pytest
from hypothesis import given, strategies as st

import oracles
from pipo.memory_model import (
    LayerKind,
    ModelSpec,
    Stage,
    WorkloadSpec,
    ffn_hidden_dim,
    kv_cache_size,
    kv_layer_bytes,
    load_config,
    peak_memory,
    residency_bound,
    run_peak_bound,
    tensor_nbytes,
    weight_sizes,
)

TINY = ModelSpec(num_layers=2, hidden_dim=8, vocab_size=16, num_heads=2, num_kv_heads=1,
                 ffn_multiple=4, ffn_gamma=1.0)


@st.composite
def model_specs(draw, dtype=st.just("fp16")):
    h = draw(st.sampled_from([1, 2, 4, 8]))
    hkv = draw(st.sampled_from([x for x in (1, 2, 4, 8) if x <= h and h % x == 0]))
    d = h * draw(st.integers(1, 32))
    return ModelSpec(
        num_layers=draw(st.integers(1, 8)),
        hidden_dim=d,
        vocab_size=draw(st.integers(1, 5000)),
        num_heads=h,
        num_kv_heads=hkv,
        ffn_multiple=draw(st.sampled_from([1, 4, 16, 64, 256])),
        ffn_gamma=draw(st.sampled_from([0.5, 1.0, 1.3, 2.0])),
        weight_dtype=draw(dtype),
    )


workloads = st.builds(WorkloadSpec, st.integers(1, 16), st.integers(1, 256), st.integers(1, 64))


def oracle_args(spec, wl):
    return dict(p=2, d=spec.hidden_dim, V=spec.vocab_size, l=spec.num_layers,
                h=spec.num_heads, hkv=spec.num_kv_heads,
                dh=oracles.ffn_dim(spec.hidden_dim, spec.ffn_multiple, spec.ffn_gamma),
                b=wl.batch_size, s=wl.seq_len)


# -- worked examples -----------------------------------------------------------

@pytest.mark.parametrize("d,m,gamma,expected", [(4096, 1024, 1.3, 14336), (3, 1, 1.0, 8),
                                                (8, 4, 1.0, 24)])
def test_ffn_hidden_dim_examples(d, m, gamma, expected):
    spec = ModelSpec(1, d, 10, 1, 1, ffn_multiple=m, ffn_gamma=gamma)
    assert ffn_hidden_dim(spec) == expected


def test_tiny_weight_sizes():
    w = weight_sizes(TINY)
    assert (w.w_embed, w.w_mha, w.w_mlp, w.w_total) == (256, 400, 1168, 3648)


def test_zero_layers_is_two_embeddings():
    spec = ModelSpec(0, 8, 16, 2, 1, ffn_multiple=4)
    w = weight_sizes(spec)
    assert w.w_total == 2 * w.w_embed


def test_kv_cache_examples():
    spec = ModelSpec(2, 8, 16, 2, 1)
    assert kv_cache_size(spec, WorkloadSpec(1, 2, 2)) == 128
    assert kv_layer_bytes(spec, 1, 0) == 0
    one = kv_cache_size(spec, WorkloadSpec(1, 3, 5))
    assert kv_cache_size(spec, WorkloadSpec(2, 3, 5)) == 2 * one


def test_decode_no_preload_mlp_example():
    rep = peak_memory(TINY, WorkloadSpec(1, 2, 2), Stage.DECODE, preload=False)
    assert rep.m_mlp == 1344


def test_report_fields_are_consistent():
    rep = peak_memory(TINY, WorkloadSpec(1, 2, 2), "prefill", preload=True)
    assert rep.m_peak == max(rep.m_mha, rep.m_mlp, rep.m_embed)
    assert rep.w_total == 2 * rep.w_embed + TINY.num_layers * (rep.w_mha + rep.w_mlp)
    text = rep.format_text()
    assert "m_peak" in text and "w_total" in text
    json.dumps(rep.to_dict())


def test_published_sizes():
    opt = ModelSpec(32, 4096, 50272, 32, 32, ffn_multiple=1, ffn_gamma=1.0)
    total = weight_sizes(opt).w_total
    assert abs(total - 13e9) / 13e9 < 0.10
    llama = ModelSpec(32, 4096, 128256, 32, 8, ffn_multiple=1024, ffn_gamma=1.3)
    assert llama.ffn_dim == 14336
    assert weight_sizes(llama).w_total > 16e9


def test_int4_weight_bytes():
    spec = ModelSpec(1, 128, 100, 4, 2, ffn_multiple=64, weight_dtype="int4")
    w = weight_sizes(spec)
    assert w.w_embed == oracles.int4_matrix_bytes(100, 128)
    kv = spec.kv_dim
    expected_mha = (2 * 128 + 2 * oracles.int4_matrix_bytes(128, 128)
                    + 2 * oracles.int4_matrix_bytes(kv, 128))
    assert w.w_mha == expected_mha
    assert tensor_nbytes("int4", (3, 65)) == 3 * 2 * 34


@pytest.mark.parametrize("bad", [
    dict(num_heads=3, num_kv_heads=2),
    dict(num_heads=2, num_kv_heads=4),
    dict(hidden_dim=10, num_heads=4, num_kv_heads=4),
    dict(vocab_size=0),
    dict(num_layers=-1),
    dict(weight_dtype="int8"),
])
def test_invalid_specs_rejected(bad):
    base = dict(num_layers=1, hidden_dim=8, vocab_size=8, num_heads=2, num_kv_heads=1)
    base.update(bad)
    with pytest.raises(ValueError):
        ModelSpec(**base)


def test_load_config_forms(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(TINY.to_dict()))
    assert load_config(p) == (TINY, None)
    p.write_text(json.dumps({"model": TINY.to_dict(),
                             "workload": {"batch_size": 1, "prompt_len": 2, "gen_len": 3}}))
    spec, wl = load_config(p)
    assert spec == TINY and wl.seq_len == 5


# -- oracle agreement ----------------------------------------------------------

@given(model_specs(), workloads)
def test_weights_and_kv_match_oracle(spec, wl):
    a = oracle_args(spec, wl)
    w_embed, w_mha, w_mlp, w_total = oracles.weights(a["p"], a["d"], a["V"], a["l"], a["h"],
                                                     a["hkv"], a["dh"])
    rep = weight_sizes(spec)
    assert (rep.w_embed, rep.w_mha, rep.w_mlp, rep.w_total) == (w_embed, w_mha, w_mlp, w_total)
    c = oracles.kv_total(a["p"], a["b"], a["s"], a["l"], a["d"], a["h"], a["hkv"])
    assert kv_cache_size(spec, wl) == c


@given(model_specs(), workloads, st.sampled_from(["prefill", "decode"]), st.booleans())
def test_peaks_match_oracle(spec, wl, stage, preload):
    a = oracle_args(spec, wl)
    m_mha, m_mlp, m_embed = oracles.peaks(stage=stage, preload=preload, **a)
    rep = peak_memory(spec, wl, stage, preload)
    assert (rep.m_mha, rep.m_mlp, rep.m_embed) == (m_mha, m_mlp, m_embed)
    assert rep.m_peak == max(m_mha, m_mlp, m_embed)


# -- properties ----------------------------------------------------------------

@given(model_specs(st.sampled_from(["fp16", "int4"])), workloads,
       st.sampled_from(["prefill", "decode"]))
def test_preload_never_smaller(spec, wl, stage):
    assert (peak_memory(spec, wl, stage, True).m_peak
            >= peak_memory(spec, wl, stage, False).m_peak)


@given(model_specs(st.sampled_from(["fp16", "int4"])), workloads, st.booleans())
def test_prefill_dominates_decode(spec, wl, preload):
    assert (peak_memory(spec, wl, "prefill", preload).m_peak
            >= peak_memory(spec, wl, "decode", preload).m_peak)


def _grow(spec, wl, field):
    if field == "b":
        return spec, WorkloadSpec(wl.batch_size + 1, wl.prompt_len, wl.gen_len)
    if field == "s":
        return spec, WorkloadSpec(wl.batch_size, wl.prompt_len, wl.gen_len + 1)
    if field == "l":
        return ModelSpec(**{**spec.to_dict(), "num_layers": spec.num_layers + 1}), wl
    if field == "d":
        return ModelSpec(**{**spec.to_dict(), "hidden_dim": spec.hidden_dim + spec.num_heads}), wl
    return ModelSpec(**{**spec.to_dict(), "act_bytes": 4}), wl


@given(model_specs(), workloads, st.sampled_from(["b", "s", "l", "d", "p"]),
       st.sampled_from(["prefill", "decode"]), st.booleans())
def test_monotone_in_each_parameter(spec, wl, field, stage, preload):
    spec2, wl2 = _grow(spec, wl, field)
    assert weight_sizes(spec2).w_total >= weight_sizes(spec).w_total
    assert kv_cache_size(spec2, wl2) >= kv_cache_size(spec, wl)
    assert peak_memory(spec2, wl2, stage, preload).m_peak >= peak_memory(spec, wl, stage, preload).m_peak


@given(model_specs(), workloads, st.booleans())
def test_run_bounds_are_ordered(spec, wl, preload):
    bound = run_peak_bound(spec, wl, preload)
    assert bound == peak_memory(spec, wl, "prefill", preload).m_peak
    assert residency_bound(spec, wl, preload) >= bound


def test_layer_kinds_layout():
    kinds = TINY.layer_kinds
    assert kinds[0] is LayerKind.EMBED and kinds[-1] is LayerKind.OUTPUT
    assert kinds[1:-1] == [LayerKind.MHA, LayerKind.MLP] * TINY.num_layers


@given(model_specs())
def test_int4_weights_smaller_than_fp16_when_group_aligned(spec):
    # widths that are multiples of the group size carry no padding
    aligned = {**spec.to_dict(), "hidden_dim": 64 * spec.num_heads, "ffn_multiple": 64}
    fp16 = ModelSpec(**aligned)
    q = ModelSpec(**{**aligned, "weight_dtype": "int4"})
    assert weight_sizes(q).w_total < weight_sizes(fp16).w_total
