"""Compare naive, pipelined and chunked transfers across worker counts.

Prints CSV: mode,bytes,block,workers,seconds,bps
"""
import argparse

from pipo.bench import transfer_bench
from pipo.storage import MiB


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bytes", type=int, default=16 * MiB)
    ap.add_argument("--block", type=int, default=2 * MiB)
    ap.add_argument("--bandwidth", type=float, default=400e6, help="bytes/s per link")
    ap.add_argument("--latency", type=float, default=0.0, help="per-request disk latency (s)")
    ap.add_argument("--workers", default="1,2,4")
    ap.add_argument("--edge", default="disk->device")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--dir")
    args = ap.parse_args()

    print("mode,bytes,block,workers,seconds,bps")
    runs = [("naive", 1), ("pipelined", 1)]
    runs += [("chunked", int(w)) for w in args.workers.split(",")]
    for mode, workers in runs:
        sec = transfer_bench(mode, args.bytes, args.block, workers, workdir=args.dir,
                             bandwidth=args.bandwidth, latency=args.latency,
                             repeats=args.repeats, edge=args.edge)
        print(f"{mode},{args.bytes},{args.block},{workers},{sec:.6f},{args.bytes / sec:.1f}")


if __name__ == "__main__":
    main()
