"""Single-batch overfit run: loss drop, training-set mIoU, runtime."""

import argparse
import json
import logging

from msdiffseg.experiments import OverfitSetup, run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr0", type=float, default=3e-3)
    ap.add_argument("--channels", default="8,8,16,16")
    ap.add_argument("--attention", default="cbla_compact")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--every", type=int, default=50, help="print training loss every N steps")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    setup = OverfitSetup(
        steps=args.steps,
        lr0=args.lr0,
        stage_channels=tuple(int(c) for c in args.channels.split(",")),
        attention=args.attention,
        seed=args.seed,
    )

    def progress(step, _params, parts):
        if step % args.every == 0:
            print(f"step {step:4d}  " + "  ".join(f"{k} {v:.4f}" for k, v in parts.items()), flush=True)

    res = run_overfit(setup, on_step=progress)
    res.pop("report")
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
