"""Training, inference, evaluation, ablation and attention benchmarking."""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .attention import AttentionConfig, AttentionInputs, attend
from .data import SegmentationSample, augment, decode_mask, encode_mask, one_hot, stitch_probs, tile
from .diffusion import NoiseSchedule, build_schedule, make_training_pair, record_chain, sample
from .errors import ConfigError, DataError, NumericalError
from .losses import LossWeights, composite_loss_parts
from .metrics import ConfusionCounts, confusion, report
from .network import Checkpoint, ModelConfig, as_model, init_params, pmsdiff_forward, save_checkpoint
from .optim import AdamState, adamw_step, cosine_lr
from .tensor import Tensor

log = logging.getLogger(__name__)

# published reference numbers, carried as report metadata only
REFERENCE_HEADLINE = {
    "vaihingen_buildings": {"miou": 93.90, "f1": 98.93},
    "uavid": {"miou": 68.7},
}
ABLATION_CELLS = [
    # label, branches, attention, reference mIoU, reference F1
    ("a", (), "linear", 92.50, 98.68),
    ("b", ("half",), "linear", 92.94, 98.77),
    ("c", ("half", "quarter"), "linear", 92.79, 98.73),
    ("d", ("half", "quarter"), "cbla_compact", 93.14, 98.79),
    ("e", (), "cbla_compact", 93.34, 98.83),
    ("f", ("half",), "cbla_compact", 93.90, 98.93),
]

REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_class", "miou", "macro_f1", "num_samples"],
    "properties": {
        "per_class": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["iou", "f1"],
                "properties": {
                    "iou": {"type": "number", "minimum": 0, "maximum": 1},
                    "f1": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "macro_f1": {"type": "number", "minimum": 0, "maximum": 1},
        "num_samples": {"type": "integer", "minimum": 0},
        "reference": {"type": "object"},
    },
}


class DivergenceError(NumericalError):
    """Training produced a non-finite loss; ``report`` holds the epochs so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr0: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 0.01
    anneal_period_epochs: int = 10
    T: int = 8
    beta_min: float = 1e-4
    beta_max: float = 0.02
    lam: float = 0.2
    mode: str = "additive"
    branches: tuple[str, ...] = ("half",)
    attention: str = "cbla_compact"
    heads: int = 1
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    time_embed_dim: int = 16
    num_classes: int = 3
    seed: int = 0
    loop_style: str = "uniform_t"
    augment: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.loop_style not in ("uniform_t", "recursive_chain"):
            raise ConfigError(f"unknown loop_style {self.loop_style!r}")
        LossWeights(self.lam)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            stage_channels=self.stage_channels,
            num_classes=self.num_classes,
            attention=AttentionConfig(self.attention, self.heads),
            branches=self.branches,
            time_embed_dim=self.time_embed_dim,
            T=self.T,
        )

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_min, self.beta_max, self.mode)

    def to_json(self) -> dict:
        d = asdict(self)
        d["branches"] = list(self.branches)
        d["stage_channels"] = list(self.stage_channels)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunReport:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    git_describe: str = "unknown"
    status: str = "ok"

    def to_json(self) -> dict:
        return asdict(self)


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# training


def estimate_clean(M_t: Tensor, pred: Tensor, sched: NoiseSchedule, t: int) -> Tensor:
    """Clean-mask estimate implied by a predicted increment.

    Inverts E[M_t - M_{t-1} | M_t, M_0] = (1 - c1) M_t - c0 M_0; in additive
    mode this is M_t - pred * cum_var[t] / beta_t.
    """
    c0, c1 = sched.posterior_coefficients(t)
    return (M_t * (1.0 - c1) - pred) * (1.0 / c0)


def sample_loss(params, cfg: ModelConfig, sched, sample_: SegmentationSample, M_t, target, t, w: LossWeights):
    C = cfg.num_classes
    pred = pmsdiff_forward(sample_.image, M_t, t, cfg, params)
    logits = estimate_clean(M_t, pred, sched, t)
    return composite_loss_parts(pred, target, logits, one_hot(sample_.mask, C), w) + (pred,)


def _accumulate(acc: dict, got: dict, ids: dict[int, str], scale: float) -> None:
    for nid, g in got.items():
        name = ids.get(nid)
        if name is None:
            continue
        prev = acc.get(name)
        acc[name] = g.data * scale if prev is None else prev + g.data * scale


def _batch_grads(params, cfg, sched, batch, rng, w, loop_style, aug_rng):
    """Mean composite loss gradient over a batch, plus mean loss components."""
    ids = {p.node_id: name for name, p in params.items()}
    grads: dict[str, np.ndarray] = {}
    sums = {"mse": 0.0, "ce": 0.0, "dice": 0.0, "total": 0.0}
    n_terms = 0

    def add_term(loss, parts, scale):
        nonlocal n_terms
        _accumulate(grads, tc.backward(loss), ids, scale)
        for k in sums:
            sums[k] += parts[k]
        n_terms += 1

    for s in batch:
        if aug_rng is not None:
            s = augment(s, aug_rng)
        M0 = encode_mask(s.mask, cfg.num_classes)
        if loop_style == "uniform_t":
            t = int(rng.integers(1, sched.T + 1))
            M_t, target = make_training_pair(M0, t, sched, rng)
            loss, parts, _ = sample_loss(params, cfg, sched, s, M_t, target, t, w)
            add_term(loss, parts, 1.0 / len(batch))
            continue
        # recursive chain: walk t = T..1 feeding back the model's own estimates
        chain = record_chain(M0, sched, rng)
        state = chain[-1]
        for t in range(sched.T, 0, -1):
            target = Tensor(state.data - chain[t - 1].data)
            loss, parts, pred = sample_loss(params, cfg, sched, s, state, target, t, w)
            add_term(loss, parts, 1.0 / (len(batch) * sched.T))
            state = Tensor(state.data - pred.data)
    return grads, {k: v / n_terms for k, v in sums.items()}


def train(
    config: TrainConfig,
    dataset: Sequence[SegmentationSample],
    out_dir=None,
    params=None,
    on_step: Callable[[int, dict, dict], None] | None = None,
) -> tuple[Checkpoint, RunReport]:
    """Fit the denoiser on ``dataset``; deterministic for a fixed config.

    ``on_step(step, params, parts)`` is called after every optimizer update.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    start = time.perf_counter()
    cfg = config.model_config()
    sched = config.schedule()
    w = LossWeights(config.lam)
    params = init_params(cfg, config.seed) if params is None else params
    state = AdamState()
    rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2]) if config.augment else None
    rep = RunReport(config=config.to_json(), git_describe=git_describe())
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.lr0, config.anneal_period_epochs, config.lr_min)
        order = rng.permutation(len(dataset))
        sums = {"mse": 0.0, "ce": 0.0, "dice": 0.0, "total": 0.0}
        n_batches = 0
        for b in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[b : b + config.batch_size]]
            try:
                grads, parts = _batch_grads(params, cfg, sched, batch, rng, w, config.loop_style, aug_rng)
                if not all(np.isfinite(v) for v in parts.values()):
                    raise NumericalError(f"non-finite loss components {parts}")
            except NumericalError as exc:
                rep.status = "diverged"
                rep.wall_clock = time.perf_counter() - start
                raise DivergenceError(f"epoch {epoch}, step {step}: {exc}", rep) from exc
            params, state = adamw_step(params, grads, state, lr, config.weight_decay)
            step += 1
            n_batches += 1
            for k in sums:
                sums[k] += parts[k]
            if on_step is not None:
                on_step(step, params, parts)
            if config.max_steps is not None and step >= config.max_steps:
                break
        record = {"epoch": epoch, "lr": lr, "steps": step}
        record.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        rep.epochs.append(record)
        log.info("epoch %d lr %.3g loss %.5f", epoch, lr, record["total"])
        ckpt = Checkpoint(params, cfg, step, {"train_config": config.to_json()})
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.ckpt", ckpt)
        if config.max_steps is not None and step >= config.max_steps:
            break
    rep.wall_clock = time.perf_counter() - start
    return Checkpoint(params, cfg, step, {"train_config": config.to_json()}), rep


def checkpoint_schedule(ckpt: Checkpoint) -> NoiseSchedule:
    """Noise schedule a checkpoint was trained under (defaults if unrecorded)."""
    tc_json = ckpt.extra.get("train_config")
    if tc_json is None:
        return build_schedule(ckpt.config.T)
    return TrainConfig.from_json(tc_json).schedule()


def probe_loss(params, cfg: ModelConfig, sched, dataset, seed: int = 12345, lam: float = 0.2) -> dict:
    """Composite loss over a fixed set of (t, noise) draws, for before/after comparison.

    Every sample is evaluated at every step t with noise seeded by (seed, index, t).
    """
    frozen = {k: v.detach() for k, v in params.items()}
    w = LossWeights(lam)
    sums = {"mse": 0.0, "ce": 0.0, "dice": 0.0, "total": 0.0}
    n = 0
    for i, s in enumerate(dataset):
        M0 = encode_mask(s.mask, cfg.num_classes)
        for t in range(1, sched.T + 1):
            rng = np.random.default_rng([seed, i, t])
            M_t, target = make_training_pair(M0, t, sched, rng)
            _, parts, _ = sample_loss(frozen, cfg, sched, s, M_t, target, t, w)
            for k in sums:
                sums[k] += parts[k]
            n += 1
    return {k: v / n for k, v in sums.items()}


# inference and evaluation


def infer_embedding(ckpt: Checkpoint, image: Tensor, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    model = as_model(ckpt.config, ckpt.params)
    shape = (ckpt.config.num_classes,) + image.shape[1:]
    return sample(model, image, sched, rng, shape=shape)


def infer(
    ckpt: Checkpoint,
    image: Tensor,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    tile_size: int | None = None,
    overlap: int = 0,
) -> Tensor:
    """Predicted class-id mask via the reverse chain, optionally tile by tile.

    Tiles are sampled in raster order, each with its own generator drawn from
    ``rng``; overlapping class probabilities are averaged before the argmax.
    """
    if sched.T != ckpt.config.T:
        raise ConfigError(f"schedule T={sched.T} does not match checkpoint T={ckpt.config.T}")
    if tile_size is None:
        return decode_mask(infer_embedding(ckpt, image, sched, rng))
    pieces = []
    for piece in tile(image, None, tile_size, overlap):
        sub_rng = np.random.default_rng(rng.integers(2**63))
        emb = infer_embedding(ckpt, piece.data, sched, sub_rng)
        pieces.append(replace(piece, data=tc.softmax_axis(emb, 0)))
    return decode_mask(stitch_probs(pieces, image.shape[1], image.shape[2]))


def evaluate_predictions(preds: Sequence[Tensor], truths: Sequence[Tensor], C: int) -> dict:
    if len(preds) != len(truths):
        raise DataError(f"{len(preds)} predictions for {len(truths)} ground-truth masks")
    counts = ConfusionCounts.empty(C)
    for p, y in zip(preds, truths):
        counts = counts + confusion(p, y, C)
    out = report(counts)
    out["num_samples"] = len(preds)
    out["reference"] = REFERENCE_HEADLINE
    return out


def evaluate(ckpt: Checkpoint, dataset: Sequence[SegmentationSample], sched: NoiseSchedule, seed: int = 0, **infer_kw):
    """Metric report over ``dataset`` using reverse-chain predictions."""
    if not dataset:
        raise DataError("evaluation dataset is empty")
    preds = []
    for i, s in enumerate(dataset):
        if s.mask is None:
            raise DataError(f"sample {s.id} has no ground-truth mask")
        preds.append(infer(ckpt, s.image, sched, np.random.default_rng([seed, i]), **infer_kw))
    return evaluate_predictions(preds, [s.mask for s in dataset], ckpt.config.num_classes)


# ablation


def ablation_configs(base: TrainConfig) -> list[tuple[str, TrainConfig, float, float]]:
    return [
        (label, replace(base, branches=branches, attention=att), ref_miou, ref_f1)
        for label, branches, att, ref_miou, ref_f1 in ABLATION_CELLS
    ]


def ablate(base: TrainConfig, train_set, eval_set=None, out_dir=None) -> list[dict]:
    """Train and evaluate every ablation cell; one row per configuration."""
    eval_set = train_set if eval_set is None else eval_set
    rows = []
    for label, cfg, ref_miou, ref_f1 in ablation_configs(base):
        ckpt, rep = train(cfg, train_set)
        metrics = evaluate(ckpt, eval_set, cfg.schedule(), seed=cfg.seed)
        rows.append(
            {
                "config": label,
                "backbone": True,
                "half_branch": "half" in cfg.branches,
                "quarter_branch": "quarter" in cfg.branches,
                "cbla": cfg.attention.startswith("cbla"),
                "miou": metrics["miou"],
                "f1": metrics["macro_f1"],
                "num_params": sum(p.size for p in ckpt.params.values()),
                "config_hash": cfg.digest(),
                "final_loss": rep.epochs[-1]["total"] if rep.epochs else None,
                "reference": {"miou": ref_miou, "f1": ref_f1},
            }
        )
    if out_dir is not None:
        write_ablation(rows, out_dir)
    return rows


ABLATION_COLUMNS = ["config", "backbone", "half_branch", "quarter_branch", "cbla", "miou", "f1", "num_params", "config_hash"]


def write_ablation(rows: list[dict], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2))
    lines = [",".join(ABLATION_COLUMNS + ["reference_miou", "reference_f1"])]
    for r in rows:
        vals = [str(r[c]) for c in ABLATION_COLUMNS]
        vals += [str(r["reference"]["miou"]), str(r["reference"]["f1"])]
        lines.append(",".join(vals))
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")


# attention benchmark


def bench_attention(
    sizes: Sequence[int] = (256, 512, 1024, 2048, 4096),
    variants: Sequence[str] = ("dot", "linear", "cbla_compact"),
    d_k: int = 32,
    d_v: int = 32,
    repeats: int = 5,
    seed: int = 0,
) -> dict:
    """Median wall time per (variant, N) and the time ratio between consecutive sizes."""
    if list(sizes) != sorted(sizes):
        raise ConfigError("sizes must be ascending")
    rng = np.random.default_rng(seed)
    records = []
    for n in sizes:
        inp = AttentionInputs(
            Tensor(rng.standard_normal((n, d_k))),
            Tensor(rng.standard_normal((n, d_k))),
            Tensor(rng.standard_normal((n, d_v))),
        )
        for variant in variants:
            attend(inp, variant)  # warm-up
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter_ns()
                attend(inp, variant)
                times.append(time.perf_counter_ns() - t0)
            records.append({"variant": variant, "N": n, "d_k": d_k, "d_v": d_v, "median_ns": int(statistics.median(times))})
    ratios = {}
    for variant in variants:
        by_n = {r["N"]: r["median_ns"] for r in records if r["variant"] == variant}
        ratios[variant] = {
            f"{a}->{b}": by_n[b] / by_n[a] for a, b in zip(sizes, sizes[1:])
        }
    return {"records": records, "scaling": ratios}
