"""Dot-product, linear and cross-bridge linear attention.

Axis naming follows the row-major N×d layout used throughout: the
"first-dimension" softmax normalises over the N tokens (axis 0) and the
"second-dimension" softmax over features (axis 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError
from .tensor import Tensor

VARIANTS = ("dot", "linear", "cbla_compact", "cbla_gram")


@dataclass(frozen=True)
class AttentionInputs:
    Q: Tensor
    K: Tensor
    V: Tensor

    def __post_init__(self):
        q, k, v = self.Q.shape, self.K.shape, self.V.shape
        if len(q) != 2 or len(k) != 2 or len(v) != 2:
            raise DimensionError(f"Q, K, V must be matrices, got {q}, {k}, {v}")
        if q[1] != k[1]:
            raise DimensionError(f"Q {q} and K {k} must share d_k")
        if not (q[0] == k[0] == v[0]) or q[0] < 1:
            raise DimensionError(f"Q {q}, K {k}, V {v} must share N >= 1")

    @property
    def n(self) -> int:
        return self.Q.shape[0]


@dataclass(frozen=True)
class AttentionConfig:
    variant: str = "cbla_compact"
    heads: int = 1
    d_model: int | None = None
    d_k: int | None = None
    d_v: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.d_model is not None and self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")

    def for_width(self, d_model: int) -> "AttentionConfig":
        """Resolve per-head extents for a block of ``d_model`` channels."""
        if d_model % self.heads:
            raise ConfigError(f"d_model {d_model} not divisible by {self.heads} heads")
        per_head = d_model // self.heads
        return replace(self, d_model=d_model, d_k=per_head, d_v=per_head)


def dot_attention(inp: AttentionInputs) -> Tensor:
    d_k = inp.Q.shape[1]
    scores = tc.matmul(inp.Q, inp.K.T) * (1.0 / math.sqrt(d_k))
    return tc.matmul(tc.softmax_axis(scores, 1), inp.V)


def linear_attention(inp: AttentionInputs) -> Tensor:
    # keys and values are aggregated first: cost O(N d_k d_v)
    context = tc.matmul(tc.softmax_axis(inp.K, 0).T, inp.V)
    return tc.matmul(tc.softmax_axis(inp.Q, 1), context)


def q_bridge(Q: Tensor, form: str = "compact", *, normalized: Tensor | None = None) -> Tensor:
    """Query self-similarity bridge.

    ``compact`` gives the d_k×d_k matrix S^T S and ``gram`` the N×N matrix
    S S^T, where S is the feature-wise softmax of ``Q``. Pass ``normalized``
    to reuse an already computed S.
    """
    s = tc.softmax_axis(Q, 1) if normalized is None else normalized
    if form == "compact":
        return tc.matmul(s.T, s)
    if form == "gram":
        return tc.matmul(s, s.T)
    raise ConfigError(f"unknown bridge form {form!r}")


def cbla(inp: AttentionInputs, variant: str = "cbla_compact") -> Tensor:
    s_q = tc.softmax_axis(inp.Q, 1)
    s_k = tc.softmax_axis(inp.K, 0)
    if variant == "cbla_compact":
        bridge = q_bridge(inp.Q, "compact", normalized=s_q)
        context = tc.matmul(s_k.T, inp.V)
        return tc.matmul(s_q, tc.matmul(bridge, context))
    if variant == "cbla_gram":
        bridge = q_bridge(inp.Q, "gram", normalized=s_q)
        weights = tc.matmul(s_q, s_k.T)
        return tc.matmul(weights, tc.matmul(bridge, inp.V))
    raise ConfigError(f"unknown cbla variant {variant!r}")


def attend(inp: AttentionInputs, variant: str) -> Tensor:
    if variant == "dot":
        return dot_attention(inp)
    if variant == "linear":
        return linear_attention(inp)
    return cbla(inp, variant)


def init_projections(config: AttentionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) projection weights."""
    if config.d_model is None:
        raise ConfigError("resolve the config with for_width() first")
    h, d, dk, dv = config.heads, config.d_model, config.d_k, config.d_v

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    return {
        "wq": uniform(d, (d, h * dk)),
        "wk": uniform(d, (d, h * dk)),
        "wv": uniform(d, (d, h * dv)),
        "wo": uniform(h * dv, (h * dv, h * dv)),
    }


def multi_head(x: Tensor, config: AttentionConfig, params: dict[str, Tensor]) -> Tensor:
    """Multi-head attention over an h×w×d_model feature map."""
    if x.ndim != 3:
        raise DimensionError(f"multi_head expects h×w×d_model, got {x.shape}")
    hgt, wid, d_model = x.shape
    if config.d_model is None:
        config = config.for_width(d_model)
    if config.d_model != d_model:
        raise DimensionError(f"input width {d_model} != configured d_model {config.d_model}")
    heads, dk, dv = config.heads, config.d_k, config.d_v
    flat = tc.reshape(x, (hgt * wid, d_model))
    q = tc.matmul(flat, params["wq"])
    k = tc.matmul(flat, params["wk"])
    v = tc.matmul(flat, params["wv"])
    outs = []
    for i in range(heads):
        inp = AttentionInputs(
            q[:, i * dk : (i + 1) * dk] if heads > 1 else q,
            k[:, i * dk : (i + 1) * dk] if heads > 1 else k,
            v[:, i * dv : (i + 1) * dv] if heads > 1 else v,
        )
        outs.append(attend(inp, config.variant))
    joined = tc.concat(outs, axis=1) if heads > 1 else outs[0]
    out = tc.matmul(joined, params["wo"])
    return tc.reshape(out, (hgt, wid, heads * dv))
