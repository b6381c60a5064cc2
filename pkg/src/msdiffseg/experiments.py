"""Desk-scale experiment harnesses shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .data import DatasetSpec, generate
from .diffusion import NoiseSchedule
from .engine import TrainConfig, evaluate, probe_loss, train
from .network import checkpoint_bytes, init_params


@dataclass(frozen=True)
class OverfitSetup:
    num_samples: int = 4
    size: int = 32
    num_classes: int = 2
    T: int = 8
    steps: int = 500
    lr0: float = 3e-3
    stage_channels: tuple[int, int, int, int] = (8, 8, 16, 16)
    attention: str = "cbla_compact"
    branches: tuple[str, ...] = ("half",)
    seed: int = 0
    data_seed: int = 0

    def train_config(self) -> TrainConfig:
        # one batch holds the whole set, so one epoch is one optimizer step
        return TrainConfig(
            epochs=self.steps,
            batch_size=self.num_samples,
            lr0=self.lr0,
            anneal_period_epochs=self.steps,
            T=self.T,
            num_classes=self.num_classes,
            branches=self.branches,
            attention=self.attention,
            stage_channels=self.stage_channels,
            seed=self.seed,
        )

    def dataset(self):
        spec = DatasetSpec(
            num_samples=self.num_samples,
            height=self.size,
            width=self.size,
            num_classes=self.num_classes,
            seed=self.data_seed,
        )
        return generate(spec)


def run_overfit(setup: OverfitSetup = OverfitSetup(), on_step=None) -> dict:
    """Train on one fixed batch and measure the loss drop and training-set metrics.

    The loss is measured with ``probe_loss`` (every sample at every t under
    fixed noise) before and after training, so the drop is not confounded by
    the random t drawn for each optimizer step.
    """
    config = setup.train_config()
    data = setup.dataset()
    cfg, sched = config.model_config(), config.schedule()
    before = probe_loss(init_params(cfg, config.seed), cfg, sched, data)
    t0 = time.perf_counter()
    ckpt, rep = train(config, data, on_step=on_step)
    train_seconds = time.perf_counter() - t0
    after = probe_loss(ckpt.params, cfg, sched, data)
    metrics = evaluate(ckpt, data, sched)
    total_seconds = time.perf_counter() - t0
    return {
        "before": before,
        "after": after,
        "drop": 1.0 - after["total"] / before["total"],
        "miou": metrics["miou"],
        "macro_f1": metrics["macro_f1"],
        "train_seconds": train_seconds,
        "seconds": total_seconds,
        "steps": ckpt.step,
        "checkpoint_sha256": hashlib.sha256(checkpoint_bytes(ckpt)).hexdigest(),
        "floor": two_class_loss_floor(sched, config.lam),
        "report": rep,
    }


def two_class_loss_floor(sched: NoiseSchedule, lam: float = 0.2, grid: int = 20001) -> float:
    """Lower bound on the probed composite loss for C=2 in additive mode.

    Per step t the increment target has irreducible conditional variance
    beta_t (1 - beta_t / cum_var[t]) given (M_t, M_0). Any further error d in
    the prediction moves the clean estimate by d * cum_var[t] / beta_t per
    channel, so the true-class logit margin becomes 2 + 2 d r with r =
    cum_var[t] / beta_t. Cross-entropy on that margin is bounded below by the
    best d; the Dice term is bounded below by zero.
    """
    if sched.mode != "additive":
        raise ValueError("the bound is derived for additive mode only")
    d = np.linspace(-2.0, 2.0, grid)
    total = 0.0
    for t in range(1, sched.T + 1):
        beta, cum = sched.beta(t), sched.total_var(t)
        r = cum / beta
        irreducible = beta * (1.0 - beta / cum)
        ce = np.logaddexp(0.0, -(2.0 + 2.0 * d * r))
        total += irreducible + float(np.min(d**2 + lam * ce))
    return total / sched.T
