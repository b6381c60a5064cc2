"""Mask diffusion: noise schedules, forward noising and the reverse recursion.

Two modes are supported. ``additive`` corrupts the mask embedding by adding
independent Gaussian noise with variance beta_t at each step, so the marginal
at step t is M_0 plus noise of the cumulative variance. ``ddpm`` is the usual
variance-preserving chain x_t = sqrt(1 - beta_t) x_{t-1} + noise.

Steps are 1-based: t = 1..T, with t = 0 the clean mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, StepExhaustedError
from .tensor import Tensor

MODES = ("additive", "ddpm")

Model = Callable[[Tensor, Tensor, int], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    cum_var: np.ndarray
    alphas_bar: np.ndarray
    mode: str = "additive"

    def beta(self, t: int) -> float:
        self._check(t, lo=1)
        return float(self.betas[t - 1])

    def total_var(self, t: int) -> float:
        """Variance of the noise separating M_t from the (scaled) clean mask."""
        self._check(t, lo=0)
        if t == 0:
            return 0.0
        if self.mode == "additive":
            return float(self.cum_var[t - 1])
        return float(1.0 - self.alphas_bar[t - 1])

    def signal_scale(self, t: int) -> float:
        self._check(t, lo=0)
        if self.mode == "additive" or t == 0:
            return 1.0
        return float(np.sqrt(self.alphas_bar[t - 1]))

    def posterior_coefficients(self, t: int) -> tuple[float, float]:
        """(c0, c1) with E[M_{t-1} | M_t, M_0] = c0 M_0 + c1 M_t."""
        self._check(t, lo=1)
        beta = self.beta(t)
        var_t, var_prev = self.total_var(t), self.total_var(t - 1)
        if self.mode == "additive":
            return beta / var_t, var_prev / var_t
        alpha = 1.0 - beta
        return self.signal_scale(t - 1) * beta / var_t, np.sqrt(alpha) * var_prev / var_t

    def to_json(self) -> dict:
        out = {"mode": self.mode, "T": self.T, "betas": self.betas.tolist()}
        if self.mode == "additive":
            out["cum_var"] = self.cum_var.tolist()
        else:
            out["alphas_bar"] = self.alphas_bar.tolist()
        return out

    def _check(self, t: int, lo: int) -> None:
        if not lo <= t <= self.T:
            raise IndexError(f"step {t} outside [{lo}, {self.T}]")


@dataclass(frozen=True)
class DiffusionState:
    mask: Tensor
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ContractError(f"step {self.t} is negative")


def build_schedule(
    T: int, beta_min: float = 1e-4, beta_max: float = 0.02, mode: str = "additive"
) -> NoiseSchedule:
    """Linear beta ramp from ``beta_min`` (t=1) to ``beta_max`` (t=T)."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if mode not in MODES:
        raise ConfigError(f"unknown diffusion mode {mode!r}")
    if T == 1:
        betas = np.array([beta_min])
    else:
        betas = beta_min + np.arange(T) / (T - 1) * (beta_max - beta_min)
    betas.flags.writeable = False
    cum_var = np.cumsum(betas)
    alphas_bar = np.cumprod(1.0 - betas)
    cum_var.flags.writeable = False
    alphas_bar.flags.writeable = False
    return NoiseSchedule(T, betas, cum_var, alphas_bar, mode)


def _noise(rng: np.random.Generator, shape, var: float) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(var)


def forward_step(state: DiffusionState, sched: NoiseSchedule, rng: np.random.Generator) -> DiffusionState:
    if state.t >= sched.T:
        raise StepExhaustedError(f"already at step {state.t} of {sched.T}")
    t = state.t + 1
    beta = sched.beta(t)
    prev = state.mask.data
    eps = _noise(rng, prev.shape, beta)
    if sched.mode == "additive":
        nxt = prev + eps
    else:
        nxt = np.sqrt(1.0 - beta) * prev + eps
    return DiffusionState(Tensor(nxt), t)


def forward_marginal(M0: Tensor, t: int, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    if not 1 <= t <= sched.T:
        raise IndexError(f"step {t} outside [1, {sched.T}]")
    eps = _noise(rng, M0.shape, sched.total_var(t))
    return Tensor(sched.signal_scale(t) * M0.data + eps)


def make_training_pair(
    M0: Tensor, t: int, sched: NoiseSchedule, rng: np.random.Generator
) -> tuple[Tensor, Tensor]:
    """Noised mask M_t and its single-step increment target M_t - M_{t-1}."""
    if not 1 <= t <= sched.T:
        raise IndexError(f"step {t} outside [1, {sched.T}]")
    prev = M0 if t == 1 else forward_marginal(M0, t - 1, sched, rng)
    cur = forward_step(DiffusionState(prev, t - 1), sched, rng).mask
    return cur, Tensor(cur.data - prev.data)


def record_chain(M0: Tensor, sched: NoiseSchedule, rng: np.random.Generator) -> list[Tensor]:
    """Masks M_0..M_T of one simulated forward chain."""
    states = [DiffusionState(M0, 0)]
    for _ in range(sched.T):
        states.append(forward_step(states[-1], sched, rng))
    return [s.mask for s in states]


def reverse_step(
    M_t: Tensor,
    predicted_increment: Tensor,
    sched: NoiseSchedule,
    t: int,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One step of the reverse recursion, M_t -> M_{t-1}.

    Additive mode subtracts the predicted increment and adds no noise. In
    ddpm mode the subtraction gives the posterior mean; when ``rng`` is
    given and t > 1 a draw of variance beta_t is added.
    """
    if not 1 <= t <= sched.T:
        raise IndexError(f"step {t} outside [1, {sched.T}]")
    if M_t.shape != predicted_increment.shape:
        raise DimensionError(
            f"mask {M_t.shape} and predicted increment {predicted_increment.shape} differ"
        )
    out = M_t.data - predicted_increment.data
    if sched.mode == "ddpm" and rng is not None and t > 1:
        out = out + _noise(rng, out.shape, sched.beta(t))
    return Tensor(out)


def sample(
    model: Model,
    img: Tensor,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    shape: tuple[int, ...] | None = None,
    start: Tensor | None = None,
) -> Tensor:
    """Run the reverse chain from M_T down to an estimate of M_0.

    ``start`` overrides the initial M_T draw; otherwise M_T is sampled from
    N(0, cum_var[T]) (additive) or N(0, I) (ddpm) with the given ``shape``.
    """
    if start is None:
        if shape is None:
            raise ContractError("sample needs either a start mask or a shape")
        var = sched.total_var(sched.T) if sched.mode == "additive" else 1.0
        start = Tensor(_noise(rng, shape, var))
    m = start
    for t in range(sched.T, 0, -1):
        pred = model(img, m, t)
        if pred.shape != m.shape:
            raise ContractError(f"model returned {pred.shape}, expected {m.shape}")
        m = reverse_step(m, pred, sched, t, rng)
    return m
