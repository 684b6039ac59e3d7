import json
from pathlib import Path

import pytest

from pipo.cli import main
from pipo.storage import load_manifest
from pipo.trace import load_trace, verify_trace

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TOY, HW = str(CONFIGS / "toy.json"), str(CONFIGS / "hw_toy.json")


def test_plan_prints_reports_and_json(capsys):
    assert main(["plan", "--model", TOY, "--hw", HW]) == 0
    out = capsys.readouterr().out
    assert "== prefill_preload" in out and "m_peak" in out
    assert main(["plan", "--model", TOY, "--hw", HW, "--json", "--batch", "1"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["plan"]["weight_tier"] in ("device", "host", "disk")
    assert set(data["memory"]) == {"prefill_preload", "prefill", "decode_preload", "decode"}


def test_plan_infeasible_exits_2(tmp_path, capsys):
    hw = tmp_path / "hw.json"
    hw.write_text(json.dumps({"device_mem": 10, "host_mem": 10, "device_link_bw": 1,
                              "disk_bw": 1}))
    assert main(["plan", "--model", TOY, "--hw", str(hw)]) == 2
    assert "error:" in capsys.readouterr().err


def test_pack(tmp_path, capsys):
    out = tmp_path / "w"
    assert main(["pack", "--model", TOY, "--out", str(out), "--weight-dtype", "int4"]) == 0
    assert load_manifest(out)["model"]["weight_dtype"] == "int4"


def test_run_then_verify_trace(tmp_path, capsys):
    trace, metrics = tmp_path / "t.ndjson", tmp_path / "m.json"
    argv = ["run", "--model", TOY, "--hw", HW, "--prompt-len", "4", "--gen-len", "2",
            "--block-size", "2048", "--weights", str(tmp_path / "w"),
            "--trace", str(trace), "--metrics", str(metrics)]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert out.count("tokens[") == 2
    assert json.loads(metrics.read_text())["tokens"] == 4
    assert verify_trace(load_trace(trace)) == []
    assert main(["verify-trace", str(trace)]) == 0
    assert "no violations" in capsys.readouterr().out
    assert main(["trace", "gantt", str(trace)]) == 0
    assert capsys.readouterr().out.startswith("lane,start_s,end_s,label")


def test_verify_trace_reports_violations(tmp_path, capsys):
    trace = tmp_path / "t.ndjson"
    assert main(["run", "--model", TOY, "--hw", HW, "--prompt-len", "2", "--gen-len", "2",
                 "--mode", "mem", "--tier", "disk", "--block-size", "2048",
                 "--trace", str(trace)]) == 0
    capsys.readouterr()
    assert main(["verify-trace", str(trace), "--mode", "performance"]) == 1
    assert "[preload]" in capsys.readouterr().out


def test_bench_json(tmp_path, capsys):
    assert main(["bench", "--model", TOY, "--hw", HW, "--prompt-len", "2", "--gen-len", "2",
                 "--baseline", "--block-size", "4096", "--json"]) == 0
    m = json.loads(capsys.readouterr().out)
    assert {"throughput_tok_s", "ttft_s", "busy_fraction", "peak_device_bytes"} <= set(m)


def test_bench_transfer_csv(tmp_path, capsys):
    assert main(["bench-transfer", "--mode", "chunked", "--bytes", str(1 << 20),
                 "--block", str(1 << 18), "--repeats", "1", "--dir", str(tmp_path)]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    assert header == "mode,bytes,block,workers,seconds,bps"
    assert row.startswith("chunked,1048576,262144,4,")


def test_sweep_block_size(tmp_path, capsys):
    assert main(["sweep-block-size", "--sizes", "1,2,4", "--bandwidth", "2e9", "--knee-mib", "2",
                 "--repeats", "1", "--dir", str(tmp_path)]) == 0
    captured = capsys.readouterr()
    assert "chosen block size: 2097152" in captured.err
    assert "disk->host" in captured.out


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
