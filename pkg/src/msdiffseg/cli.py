"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import DatasetSpec, generate, load_dataset, read_pnm, save_dataset, write_pnm
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericalError
from .engine import (
    TrainConfig,
    ablate,
    bench_attention,
    checkpoint_schedule,
    evaluate,
    infer,
    train,
)
from .network import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("msdiffseg")


def _dump(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    print(text)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return raw


def train_config(args) -> TrainConfig:
    """TrainConfig from --config, then command-line overrides."""
    d = _load_config_file(args.config)
    d.pop("data", None)
    cfg = TrainConfig.from_json(d)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for key in ("epochs", "max_steps", "lr0", "batch_size", "T", "num_classes", "attention", "loop_style"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "branches", None) is not None:
        overrides["branches"] = tuple(b for b in args.branches.split(",") if b)
    return replace(cfg, **overrides) if overrides else cfg


def _dataset(path, split=None, require_masks=True):
    samples, manifest = load_dataset(path, split, require_masks)
    if not samples:
        raise DataError(f"no samples in {path}" + (f" for split {split!r}" if split else ""))
    return samples, manifest


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(
        num_samples=args.num_samples,
        height=args.size,
        width=args.size,
        num_classes=args.classes,
        imbalance_ratio=args.imbalance,
        seed=args.seed or 0,
    )
    samples = generate(spec)
    root = save_dataset(samples, args.out_dir, spec.num_classes, args.val_fraction)
    _dump({"root": str(root), "num_samples": len(samples), "height": spec.height, "num_classes": spec.num_classes})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = train_config(args)
    samples, manifest = _dataset(args.data, "train")
    if manifest.get("num_classes", cfg.num_classes) != cfg.num_classes:
        raise ConfigError(f"dataset has {manifest['num_classes']} classes, config says {cfg.num_classes}")
    out = Path(args.out_dir)
    ckpt, rep = train(cfg, samples, out_dir=out)
    _dump(rep.to_json(), out / "report.json")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, requires_grad=False)
    ckpt.validate()
    image = read_pnm(args.image)
    if image.ndim != 3:
        raise DataError(f"{args.image} is not an RGB image")
    seed = args.seed or 0
    mask = infer(ckpt, image, checkpoint_schedule(ckpt), np.random.default_rng(seed), args.tile_size, args.overlap)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = Path(args.image).stem
    write_pnm(out / f"{name}.pgm", mask)
    meta = {
        "image": str(args.image),
        "mask": str(out / f"{name}.pgm"),
        "shape": list(mask.shape),
        "num_classes": ckpt.config.num_classes,
        "seed": seed,
        "tile_size": args.tile_size,
        "overlap": args.overlap,
        "class_counts": np.bincount(mask.data.ravel(), minlength=ckpt.config.num_classes).tolist(),
    }
    _dump(meta, out / f"{name}.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint, requires_grad=False)
    ckpt.validate()
    samples, _ = _dataset(args.data, args.split)
    rep = evaluate(
        ckpt, samples, checkpoint_schedule(ckpt), seed=args.seed or 0, tile_size=args.tile_size, overlap=args.overlap
    )
    _dump(rep, Path(args.out_dir) / "eval.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = train_config(args)
    train_set, _ = _dataset(args.data, "train")
    eval_set = _dataset(args.eval_data, args.eval_split)[0] if args.eval_data else None
    rows = ablate(cfg, train_set, eval_set, out_dir=args.out_dir)
    _dump(rows)
    return EXIT_OK


def cmd_bench_attn(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    variants = [v for v in args.variants.split(",") if v]
    res = bench_attention(sizes, variants, args.d_k, args.d_v, args.repeats, args.seed or 0)
    _dump(res, Path(args.out_dir) / "bench_attention.json")
    return EXIT_OK


def cmd_dump_schedule(args) -> int:
    cfg = train_config(args)
    if args.beta_min is not None or args.beta_max is not None or args.mode is not None:
        cfg = replace(
            cfg,
            beta_min=cfg.beta_min if args.beta_min is None else args.beta_min,
            beta_max=cfg.beta_max if args.beta_max is None else args.beta_max,
            mode=cfg.mode if args.mode is None else args.mode,
        )
    _dump(cfg.schedule().to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msdiffseg", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--lr0", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--T", type=int)
        sp.add_argument("--num-classes", type=int)
        sp.add_argument("--attention")
        sp.add_argument("--branches", help="comma separated, e.g. half,quarter; empty for none")
        sp.add_argument("--loop-style", choices=["uniform_t", "recursive_chain"])

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    g.add_argument("--num-samples", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--imbalance", type=float, default=1.0)
    g.add_argument("--val-fraction", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser on a dataset directory")
    t.add_argument("--data", required=True)
    overrides(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict a mask for one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--tile-size", type=int)
    i.add_argument("--overlap", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="metric report for a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split")
    e.add_argument("--tile-size", type=int)
    e.add_argument("--overlap", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the six branch/attention cells")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data")
    a.add_argument("--eval-split")
    overrides(a)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench-attn", help="time attention variants over sequence lengths")
    b.add_argument("--sizes", default="256,512,1024,2048,4096")
    b.add_argument("--variants", default="dot,linear,cbla_compact")
    b.add_argument("--d-k", type=int, default=32)
    b.add_argument("--d-v", type=int, default=32)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench_attn)

    d = sub.add_parser("dump-schedule", help="print the noise schedule as JSON")
    d.add_argument("--T", type=int)
    d.add_argument("--beta-min", type=float)
    d.add_argument("--beta-max", type=float)
    d.add_argument("--mode", choices=["additive", "ddpm"])
    d.set_defaults(func=cmd_dump_schedule)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        report = getattr(exc, "report", None)
        if report is not None:
            _dump(report.to_json(), Path(args.out_dir) / "report.json")
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, DimensionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
