"""Probe emulated-link throughput per block size and pick a block size.

Writes the profile CSV (edge,block_bytes,throughput_bps) to stdout or --out.
"""
import argparse
import sys

from pipo.bench import block_sweep
from pipo.storage import MiB


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1,2,4,8,16,32,64,128,256", help="MiB, comma separated")
    ap.add_argument("--bandwidth", type=float, default=1e9)
    ap.add_argument("--knee-mib", type=float, default=32.0)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--dir")
    ap.add_argument("--out", help="write the profile CSV here")
    args = ap.parse_args()

    sizes = [int(float(s) * MiB) for s in args.sizes.split(",")]
    profile, chosen = block_sweep(sizes, workdir=args.dir, bandwidth=args.bandwidth,
                                  knee=int(args.knee_mib * MiB), repeats=args.repeats)
    text = profile.to_csv()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(f"chosen: {chosen / MiB:g} MiB", file=sys.stderr)


if __name__ == "__main__":
    main()
