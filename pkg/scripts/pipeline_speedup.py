"""Pipelined vs sequential generation on throttled tiers.

    python3 scripts/pipeline_speedup.py --ratio 3 --bandwidth 5e6
"""
import argparse
import json

from pipo.bench import speedup_experiment
from pipo.memory_model import WorkloadSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ratio", type=float, default=3.0, help="target transfer/compute time ratio")
    ap.add_argument("--bandwidth", type=float, default=5e6, help="bytes/s on both links")
    ap.add_argument("--block", type=int, default=2048, help="transfer block size (bytes)")
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--prompt-len", type=int, default=4)
    ap.add_argument("--gen-len", type=int, default=16)
    ap.add_argument("--transfer-mode", default="chunked", choices=["naive", "pipelined", "chunked"])
    ap.add_argument("--dir", help="scratch directory for packed weights")
    args = ap.parse_args()

    wl = WorkloadSpec(args.batch, args.prompt_len, args.gen_len)
    report = speedup_experiment(args.dir, wl=wl, bandwidth=args.bandwidth, ratio=args.ratio,
                                block=args.block, transfer_mode=args.transfer_mode)
    print(json.dumps(report.to_dict(), indent=2))


if __name__ == "__main__":
    main()
