"""Dual-input encoder-decoder denoiser with optional reduced-scale branches.

Layout for an H×W input (H, W multiples of 32)::

    stem        image + mask embeddings summed, full res     -> s_full
                downsampled to 1/2                           -> s_half
    enc0..enc3  res block, channel projection, /2, attention -> 1/4 .. 1/32
    dec0        res block + attention at 1/32                 (W_1)
    dec1..dec3  x2, skip concat, merge, res block, attention  (W_2 at 1/16,
                                                                W_3 at 1/8, 1/4)
    head        x2 with s_half, x2 with s_full, conv to C channels

A branch resizes the noised mask to 1/8 (half) or 1/16 (quarter) of the input,
runs a three-level encoder-decoder and returns decoder features matching W_1,
W_2 and W_3, which are fused by channel concatenation and a 1×1 reduction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tc
from .attention import AttentionConfig, init_projections, multi_head
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

BRANCH_SCALES = {"half": 8, "quarter": 16}
NORM_EPS = 1e-5
Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    input_image_channels: int = 3
    num_classes: int = 3
    attention: AttentionConfig = AttentionConfig("cbla_compact", heads=1)
    branches: tuple[str, ...] = ()
    time_embed_dim: int = 16
    T: int = 8

    def __post_init__(self):
        sc = tuple(int(c) for c in self.stage_channels)
        object.__setattr__(self, "stage_channels", sc)
        unknown = set(self.branches) - set(BRANCH_SCALES)
        if unknown:
            raise ConfigError(f"unknown branches {sorted(unknown)}")
        object.__setattr__(self, "branches", tuple(sorted(set(self.branches), key=list(BRANCH_SCALES).index)))
        if len(sc) != 4 or min(sc) < 1 or any(b < a for a, b in zip(sc, sc[1:])):
            raise ConfigError(f"stage_channels must be four nondecreasing widths, got {sc}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be a positive even number")
        for c in sc:
            self.attention.for_width(c)

    def to_json(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["branches"] = list(self.branches)
        d["attention"] = {"variant": self.attention.variant, "heads": self.attention.heads}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        att = d.pop("attention", {})
        return cls(
            stage_channels=tuple(d.pop("stage_channels", (16, 32, 64, 128))),
            attention=AttentionConfig(att.get("variant", "cbla_compact"), att.get("heads", 1)),
            branches=tuple(d.pop("branches", ())),
            **d,
        )


# time embedding


def time_embed(t: int, dim: int, T: int) -> Tensor:
    """Interleaved (sin, cos) pairs of t/T at frequencies pi * 2**k."""
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    if not 0 <= t <= T:
        raise IndexError(f"step {t} outside [0, {T}]")
    freqs = math.pi * 2.0 ** np.arange(dim // 2)
    angles = (t / T) * freqs
    out = np.empty(dim)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return Tensor(out)


# parameter construction


class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: Params = {}

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        self.params[name] = Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def conv(self, name, cin, cout, k=3, bias=True):
        self.uniform(f"{name}.w", (cout, cin, k, k), cin * k * k)
        if bias:
            self.params[f"{name}.b"] = Tensor(np.zeros((cout, 1, 1)), requires_grad=True)

    def norm(self, name, c):
        self.params[f"{name}.g"] = Tensor(np.ones((c, 1, 1)), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros((c, 1, 1)), requires_grad=True)

    def res(self, name, c, temb_dim=None):
        self.norm(f"{name}.n1", c)
        self.conv(f"{name}.c1", c, c)
        self.norm(f"{name}.n2", c)
        self.conv(f"{name}.c2", c, c)
        if temb_dim:
            self.uniform(f"{name}.t", (temb_dim, c), temb_dim)

    def attn(self, name, att: AttentionConfig, c):
        self.norm(f"{name}.pre", c)
        for key, value in init_projections(att.for_width(c), self.rng).items():
            self.params[f"{name}.{key}"] = value
        self.norm(f"{name}.post", c)


def _backbone_params(cfg: ModelConfig, init: _Init) -> None:
    c0, c1, c2, c3 = cfg.stage_channels
    td = cfg.time_embed_dim
    init.conv("stem.img", cfg.input_image_channels, c0)
    init.conv("stem.mask", cfg.num_classes, c0, bias=False)
    init.res("stem.res", c0, td)
    widths_in = (c0, c0, c1, c2)
    for i, (cin, cout) in enumerate(zip(widths_in, cfg.stage_channels)):
        init.res(f"enc{i}.res", cin, td)
        init.conv(f"enc{i}.proj", cin, cout)
        init.attn(f"enc{i}.attn", cfg.attention, cout)
    init.res("dec0.res", c3, td)
    init.attn("dec0.attn", cfg.attention, c3)
    for j, (cin, cout) in enumerate([(c3, c2), (c2, c1), (c1, c0)], start=1):
        init.conv(f"dec{j}.up", cin, cout)
        init.conv(f"dec{j}.merge", 2 * cout, cout, k=1)
        init.res(f"dec{j}.res", cout, td)
        init.attn(f"dec{j}.attn", cfg.attention, cout)
    init.conv("head.up_half", c0, c0)
    init.conv("head.merge_half", 2 * c0, c0, k=1)
    init.conv("head.up_full", c0, c0)
    init.conv("head.merge_full", 2 * c0, c0, k=1)
    init.res("head.res", c0, td)
    init.conv("head.out", c0, cfg.num_classes)


def _branch_params(cfg: ModelConfig, scale: str, init: _Init) -> None:
    _, c1, c2, c3 = cfg.stage_channels
    p = f"branch_{scale}"
    init.conv(f"{p}.stem", cfg.num_classes, c1)
    init.res(f"{p}.l0.res", c1)
    init.conv(f"{p}.l1.proj", c1, c2)
    init.res(f"{p}.l1.res", c2)
    init.conv(f"{p}.l2.proj", c2, c3)
    init.res(f"{p}.l2.res", c3)
    init.attn(f"{p}.l2.attn", cfg.attention, c3)
    init.conv(f"{p}.u1.up", c3, c2)
    init.conv(f"{p}.u1.merge", 2 * c2, c2, k=1)
    init.res(f"{p}.u1.res", c2)
    init.conv(f"{p}.u0.up", c2, c1)
    init.conv(f"{p}.u0.merge", 2 * c1, c1, k=1)
    init.res(f"{p}.u0.res", c1)


def fused_widths(cfg: ModelConfig) -> list[int]:
    """Backbone widths of the three fused decoder stages (1/32, 1/16, 1/8)."""
    _, c1, c2, c3 = cfg.stage_channels
    return [c3, c2, c1]


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Deterministic initialisation; each part draws from its own stream."""
    init = _Init(np.random.default_rng([seed, 0]))
    _backbone_params(cfg, init)
    for k, scale in enumerate(BRANCH_SCALES, start=1):
        if scale in cfg.branches:
            init.rng = np.random.default_rng([seed, k])
            _branch_params(cfg, scale, init)
    if cfg.branches:
        init.rng = np.random.default_rng([seed, 99])
        extra = len(cfg.branches)
        for i, c in enumerate(fused_widths(cfg), start=1):
            init.uniform(f"fuse{i}.w", (c, c * (1 + extra), 1, 1), c * (1 + extra))
    return init.params


def count_parameters(params: Params, prefix: str = "") -> int:
    return sum(v.size for k, v in params.items() if k.startswith(prefix))


# building blocks


def _conv(x: Tensor, p: Params, name: str) -> Tensor:
    w = p[f"{name}.w"]
    y = tc.conv2d(x, w, 1, w.shape[-1] // 2)
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def _norm(x: Tensor, p: Params, name: str) -> Tensor:
    """Single-group normalisation over c×h×w with a per-channel affine map."""
    centred = x - tc.mean(x)
    scale = tc.power(tc.mean(tc.square(centred)) + NORM_EPS, -0.5)
    return centred * scale * p[f"{name}.g"] + p[f"{name}.b"]


def _res(x: Tensor, p: Params, name: str, temb: Tensor | None = None) -> Tensor:
    h = _conv(tc.silu(_norm(x, p, f"{name}.n1")), p, f"{name}.c1")
    if temb is not None:
        shift = tc.matmul(temb, p[f"{name}.t"])
        h = h + tc.reshape(shift, (-1, 1, 1))
    h = _conv(tc.silu(_norm(h, p, f"{name}.n2")), p, f"{name}.c2")
    return x + h


def _attn(x: Tensor, p: Params, name: str, att: AttentionConfig) -> Tensor:
    # the bridge sums over all tokens, so the branch is normalised before the residual add
    c = x.shape[0]
    proj = {k: p[f"{name}.{k}"] for k in ("wq", "wk", "wv", "wo")}
    tokens = tc.transpose(_norm(x, p, f"{name}.pre"), (1, 2, 0))
    out = tc.transpose(multi_head(tokens, att.for_width(c), proj), (2, 0, 1))
    return x + _norm(out, p, f"{name}.post")


def _half(x: Tensor) -> Tensor:
    _, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"cannot halve a {h}×{w} feature map")
    return tc.bilinear_resize(x, h // 2, w // 2)


def _double(x: Tensor) -> Tensor:
    _, h, w = x.shape
    return tc.bilinear_resize(x, 2 * h, 2 * w)


def _up_merge(x: Tensor, skip: Tensor, p: Params, name: str, up: str, merge: str) -> Tensor:
    x = _conv(_double(x), p, f"{name}.{up}")
    return _conv(tc.concat([x, skip], axis=0), p, f"{name}.{merge}")


def fuse(W_i: Tensor, B_i: Tensor, weight: Tensor) -> Tensor:
    """Concatenate backbone and branch features on channels, 1×1-reduce to W_i's width."""
    if W_i.shape[1:] != B_i.shape[1:]:
        raise DimensionError(f"fuse: spatial extents {W_i.shape[1:]} and {B_i.shape[1:]} differ")
    if weight.shape != (W_i.shape[0], W_i.shape[0] + B_i.shape[0], 1, 1):
        raise DimensionError(f"fuse weight {weight.shape} does not fit {W_i.shape} + {B_i.shape}")
    return tc.conv2d(tc.concat([W_i, B_i], axis=0), weight, 1, 0)


def _check_extent(h: int, w: int, multiple: int, what: str) -> None:
    if h % multiple or w % multiple or h < multiple or w < multiple:
        raise DimensionError(f"{what} needs H and W divisible by {multiple}, got {h}×{w}")


def _trunk(img, M_t, t, params, cfg: ModelConfig, branch_feats=None):
    if img.ndim != 3 or M_t.ndim != 3 or img.shape[1:] != M_t.shape[1:]:
        raise DimensionError(f"image {img.shape} and mask {M_t.shape} must be c×H×W with equal H×W")
    if M_t.shape[0] != cfg.num_classes or img.shape[0] != cfg.input_image_channels:
        raise DimensionError(f"channels {img.shape[0]}/{M_t.shape[0]} do not match the config")
    _, H, W = img.shape
    _check_extent(H, W, 32, "backbone")
    p, att = params, cfg.attention
    temb = tc.reshape(time_embed(t, cfg.time_embed_dim, cfg.T), (1, -1))

    s_full = _conv(img, p, "stem.img") + _conv(M_t, p, "stem.mask")
    s_full = _res(s_full, p, "stem.res", temb)
    s_half = _half(s_full)

    h = s_half
    enc = []
    for i in range(4):
        h = _res(h, p, f"enc{i}.res", temb)
        h = _half(_conv(h, p, f"enc{i}.proj"))
        h = _attn(h, p, f"enc{i}.attn", att)
        enc.append(h)

    decoder = []
    d = _attn(_res(enc[3], p, "dec0.res", temb), p, "dec0.attn", att)
    for j in range(1, 5):
        if branch_feats is not None and j <= 3:
            d = fuse(d, branch_feats[j - 1], p[f"fuse{j}.w"])
        decoder.append(d)
        if j == 4:
            break
        d = _up_merge(d, enc[3 - j], p, f"dec{j}", "up", "merge")
        d = _attn(_res(d, p, f"dec{j}.res", temb), p, f"dec{j}.attn", att)

    d = _up_merge(d, s_half, p, "head", "up_half", "merge_half")
    d = _up_merge(d, s_full, p, "head", "up_full", "merge_full")
    d = _res(d, p, "head.res", temb)
    out = _conv(tc.silu(d), p, "head.out")
    feats = {"stem_full": s_full, "stem_half": s_half, "encoder": enc, "decoder": decoder}
    return out, feats


def backbone_forward(img: Tensor, M_t: Tensor, t: int, params: Params, cfg: ModelConfig):
    """Increment prediction and intermediate features of the backbone alone."""
    return _trunk(img, M_t, t, params, cfg)


def branch_forward(coarse: Tensor, scale: str, params: Params, cfg: ModelConfig) -> list[Tensor]:
    """Three decoder features at 1/32, 1/16 and 1/8 of the input extent."""
    if scale not in BRANCH_SCALES:
        raise ConfigError(f"unknown branch scale {scale!r}")
    _, H, W = coarse.shape
    factor = BRANCH_SCALES[scale]
    # two halvings after the initial reduction must leave at least 1×1
    _check_extent(H, W, 4 * factor, f"{scale} branch")
    p, q = params, f"branch_{scale}"
    x = tc.bilinear_resize(coarse, H // factor, W // factor)
    s0 = _res(_conv(x, p, f"{q}.stem"), p, f"{q}.l0.res")
    s1 = _res(_conv(_half(s0), p, f"{q}.l1.proj"), p, f"{q}.l1.res")
    b1 = _res(_conv(_half(s1), p, f"{q}.l2.proj"), p, f"{q}.l2.res")
    b1 = _attn(b1, p, f"{q}.l2.attn", cfg.attention)
    b2 = _res(_up_merge(b1, s1, p, q, "u1.up", "u1.merge"), p, f"{q}.u1.res")
    b3 = _res(_up_merge(b2, s0, p, q, "u0.up", "u0.merge"), p, f"{q}.u0.res")
    feats = [b1, b2, b3]
    targets = [(H // 32, W // 32), (H // 16, W // 16), (H // 8, W // 8)]
    return [f if f.shape[1:] == hw else tc.bilinear_resize(f, *hw) for f, hw in zip(feats, targets)]


def pmsdiff_forward(img: Tensor, M_t: Tensor, t: int, cfg: ModelConfig, params: Params) -> Tensor:
    """Backbone with every enabled branch fused into decoder stages 1-3."""
    if not cfg.branches:
        return _trunk(img, M_t, t, params, cfg)[0]
    per_branch = [branch_forward(M_t, s, params, cfg) for s in cfg.branches]
    fused_inputs = [
        feats[0] if len(feats) == 1 else tc.concat(list(feats), axis=0) for feats in zip(*per_branch)
    ]
    return _trunk(img, M_t, t, params, cfg, fused_inputs)[0]


def as_model(cfg: ModelConfig, params: Params):
    """Gradient-free callable (img, M_t, t) -> increment, for sampling."""
    frozen = {k: v.detach() for k, v in params.items()}
    return lambda img, m, t: pmsdiff_forward(img, m, t, cfg, frozen)


# checkpoints

_MAGIC = b"MSDCKPT1"


@dataclass
class Checkpoint:
    params: Params
    config: ModelConfig
    step: int = 0
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        expected = init_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            unexpected = sorted(set(self.params) - set(expected))
            raise ContractError(f"checkpoint/config mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ContractError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")


def init_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Header length (uint64 LE), JSON header, then float64 LE payloads in header order."""
    entries, offset = [], 0
    for name, t in ckpt.params.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    header = {
        "config": ckpt.config.to_json(),
        "step": ckpt.step,
        "extra": ckpt.extra,
        "params": entries,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in ckpt.params.values())
    return _MAGIC + struct.pack("<Q", len(head)) + head + body


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(buf: bytes, requires_grad: bool = True) -> Checkpoint:
    if buf[:8] != _MAGIC:
        raise ContractError("not a checkpoint file")
    (n,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16 : 16 + n])
    body = buf[16 + n :]
    if len(body) != header["payload_bytes"]:
        raise ContractError(f"checkpoint payload is {len(body)} bytes, header says {header['payload_bytes']}")
    params = {}
    for e in header["params"]:
        count = math.prod(e["shape"])
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = Tensor(arr.astype(np.float64), requires_grad=requires_grad)
    return Checkpoint(params, ModelConfig.from_json(header["config"]), header["step"], header.get("extra", {}))


def load_checkpoint(path, requires_grad: bool = True) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), requires_grad)


def with_branches(cfg: ModelConfig, branches) -> ModelConfig:
    return replace(cfg, branches=tuple(branches))
