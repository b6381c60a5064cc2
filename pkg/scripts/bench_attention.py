"""Time dot, linear and CBLA attention over growing sequence lengths."""

import argparse
import json

from msdiffseg.engine import bench_attention


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="256,512,1024,2048,4096")
    ap.add_argument("--variants", default="dot,linear,cbla_compact,cbla_gram")
    ap.add_argument("--d", type=int, default=32, help="d_k = d_v")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    res = bench_attention(
        sizes=[int(s) for s in args.sizes.split(",")],
        variants=args.variants.split(","),
        d_k=args.d,
        d_v=args.d,
        repeats=args.repeats,
    )
    for variant, ratios in res["scaling"].items():
        print(variant, "  ".join(f"{k}: x{v:.2f}" for k, v in ratios.items()))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(res, fh, indent=2)


if __name__ == "__main__":
    main()
