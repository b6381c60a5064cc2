"""Synthetic segmentation data, mask codecs, PNM files, augmentation, tiling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError, GenerationError, ParseError
from .tensor import Tensor

SHAPES = ("rect", "disk", "bar")

BASE_PALETTE = [
    (0.35, 0.35, 0.30),
    (0.90, 0.20, 0.15),
    (0.15, 0.70, 0.25),
    (0.20, 0.35, 0.90),
    (0.95, 0.85, 0.20),
    (0.80, 0.30, 0.85),
    (0.15, 0.85, 0.85),
    (0.95, 0.55, 0.10),
]


@dataclass(frozen=True)
class SegmentationSample:
    image: Tensor
    mask: Tensor
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DimensionError(f"image must be 3×H×W, got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise DimensionError(f"mask {self.mask.shape} does not match image {self.image.shape}")


@dataclass(frozen=True)
class DatasetSpec:
    num_samples: int = 8
    height: int = 32
    width: int = 32
    num_classes: int = 3
    shapes: tuple[str, ...] = SHAPES
    imbalance_ratio: float = 1.0
    seed: int = 0
    max_shapes: int = 64

    def __post_init__(self):
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise ConfigError(f"H and W must be positive multiples of 32, got {self.height}×{self.width}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.num_samples < 1:
            raise ConfigError("need at least one sample")
        if self.imbalance_ratio < 1.0:
            raise ConfigError("imbalance_ratio is most/least frequent class and must be >= 1")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ConfigError(f"unknown shapes {sorted(bad)}")

    def class_frequencies(self) -> np.ndarray:
        """Target pixel share per class; class 0 (background) is the most frequent."""
        c = self.num_classes
        w = self.imbalance_ratio ** (-np.arange(c) / (c - 1))
        return w / w.sum()


def palette(num_classes: int) -> list[tuple[float, float, float]]:
    if num_classes <= len(BASE_PALETTE):
        return BASE_PALETTE[:num_classes]
    extra = [
        tuple(float(v) for v in _hsv_to_rgb(np.array([[[(k * 0.618) % 1.0]], [[0.8]], [[0.9]]]))[:, 0, 0])
        for k in range(num_classes - len(BASE_PALETTE))
    ]
    return BASE_PALETTE + extra


# generation


def _rasterize(kind: str, area: float, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "disk":
        r = max(math.sqrt(area / math.pi), 0.75)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    if kind == "bar":
        thick = int(rng.integers(2, 5))
        length = int(np.clip(round(area / thick), 1, max(h, w)))
        if rng.random() < 0.5:
            bh, bw = min(thick, h), min(length, w)
        else:
            bh, bw = min(length, h), min(thick, w)
    else:
        aspect = rng.uniform(0.5, 2.0)
        bh = int(np.clip(round(math.sqrt(area * aspect)), 1, h))
        bw = int(np.clip(round(area / bh), 1, w))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    out = np.zeros((h, w), dtype=bool)
    out[y0 : y0 + bh, x0 : x0 + bw] = True
    return out


def _paint_mask(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    n = h * w
    freqs = spec.class_frequencies()
    mask = np.zeros((h, w), dtype=np.int64)
    shapes_used = 0
    for c in range(1, spec.num_classes):
        target = int(round(freqs[c] * n))
        remaining = target
        tol = max(2, int(0.03 * target))
        attempts = 0
        while remaining > tol:
            attempts += 1
            if attempts > 50 * spec.max_shapes or shapes_used >= spec.max_shapes:
                raise GenerationError(
                    f"could not place {target} pixels of class {c} with {spec.max_shapes} shapes"
                )
            kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
            area = min(remaining, rng.uniform(0.04, 0.2) * n)
            new = _rasterize(kind, area, h, w, rng) & (mask == 0)
            got = int(new.sum())
            if got == 0 or got > remaining + tol:
                continue
            mask[new] = c
            remaining -= got
            shapes_used += 1
    return mask


def _texture(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    field_ = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return field_ / 3.0


def _render(mask: np.ndarray, colors, rng: np.random.Generator) -> np.ndarray:
    h, w = mask.shape
    rgb = np.asarray(colors)[mask].transpose(2, 0, 1)
    texture = 0.06 * _texture(h, w, rng)[None] + 0.03 * rng.standard_normal((3, h, w))
    img = np.clip(rgb + texture, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def generate_sample(spec: DatasetSpec, index: int) -> SegmentationSample:
    rng = np.random.default_rng([spec.seed, index])
    mask = _paint_mask(spec, rng)
    image = _render(mask, palette(spec.num_classes), rng)
    return SegmentationSample(Tensor(image), Tensor(mask), f"{index:05d}")


def generate(spec: DatasetSpec) -> list[SegmentationSample]:
    """Deterministic synthetic dataset; every sample owns an rng seeded by (seed, index)."""
    return [generate_sample(spec, i) for i in range(spec.num_samples)]


# mask embedding


def encode_mask(mask: Tensor, C: int) -> Tensor:
    """Integer mask H×W -> C×H×W embedding, +1 on the true class and -1 elsewhere."""
    ids = np.asarray(mask.data)
    if ids.dtype.kind == "f":
        if not np.all(ids == np.round(ids)):
            raise ContractError("mask must hold integer class ids")
        ids = ids.astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= C):
        raise ContractError(f"class ids must lie in [0, {C})")
    emb = np.where(np.arange(C)[:, None, None] == ids[None], 1.0, -1.0)
    return Tensor(emb)


def decode_mask(emb: Tensor) -> Tensor:
    """Channel argmax; ties resolve to the lowest class id."""
    return Tensor(np.argmax(emb.data, axis=0).astype(np.int64))


def one_hot(mask: Tensor, C: int) -> Tensor:
    return Tensor((encode_mask(mask, C).data + 1.0) * 0.5)


# PNM files


def _pnm_header(buf: bytes) -> tuple[str, int, int, int, int]:
    """Parse magic, width, height, maxval; returns the payload offset too."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ParseError("header ended early", pos)
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    magic, at = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}", at)
    values = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise ParseError(f"expected an integer, got {tok!r}", at)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ParseError("image extents must be positive", tokens[1][1])
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", tokens[3][1])
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ParseError("missing whitespace after maxval", pos)
    return magic.decode(), width, height, maxval, pos + 1


def parse_pnm(buf: bytes) -> Tensor:
    magic, width, height, _, offset = _pnm_header(buf)
    channels = 3 if magic == "P6" else 1
    need = width * height * channels
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise ParseError(f"payload truncated: need {need} bytes, found {len(payload)}", offset + len(payload))
    raw = np.frombuffer(payload, dtype=np.uint8)
    if magic == "P5":
        return Tensor(raw.reshape(height, width).astype(np.int64))
    return Tensor(raw.reshape(height, width, 3).transpose(2, 0, 1) / 255.0)


def read_pnm(path) -> Tensor:
    return parse_pnm(Path(path).read_bytes())


def encode_pnm(t: Tensor) -> bytes:
    arr = t.data
    if arr.ndim == 2:
        if arr.dtype.kind == "f" and not np.all(arr == np.round(arr)):
            raise ContractError("P5 masks must hold integers")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ContractError("P5 values must lie in [0, 255]")
        h, w = arr.shape
        return f"P5\n{w} {h}\n255\n".encode() + arr.astype(np.uint8).tobytes()
    if arr.ndim == 3 and arr.shape[0] == 3:
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ContractError("P6 images must lie in [0, 1]")
        _, h, w = arr.shape
        raw = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
        return f"P6\n{w} {h}\n255\n".encode() + raw.tobytes()
    raise DimensionError(f"cannot store shape {arr.shape} as PNM")


def write_pnm(path, t: Tensor) -> None:
    Path(path).write_bytes(encode_pnm(t))


# dataset directories


def save_dataset(samples: Sequence[SegmentationSample], root, num_classes: int, val_fraction: float = 0.0) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    n_val = int(round(val_fraction * len(samples)))
    split = {}
    for i, s in enumerate(samples):
        write_pnm(root / "images" / f"{s.id}.ppm", s.image)
        write_pnm(root / "masks" / f"{s.id}.pgm", s.mask)
        split[s.id] = "val" if i >= len(samples) - n_val else "train"
    manifest = {
        "ids": [s.id for s in samples],
        "split": split,
        "num_classes": num_classes,
        "palette": [list(c) for c in palette(num_classes)],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_dataset(root, split: str | None = None, require_masks: bool = True):
    """Samples listed in ``root/manifest.json`` and the manifest itself."""
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no manifest.json under {root}") from exc
    samples = []
    for sid in manifest["ids"]:
        if split is not None and manifest.get("split", {}).get(sid, "train") != split:
            continue
        img_path, mask_path = root / "images" / f"{sid}.ppm", root / "masks" / f"{sid}.pgm"
        if not img_path.exists():
            raise DataError(f"missing image {img_path}")
        if mask_path.exists():
            mask = read_pnm(mask_path)
        elif require_masks:
            raise DataError(f"missing mask {mask_path}")
        else:
            img = read_pnm(img_path)
            mask = Tensor(np.zeros(img.shape[1:], dtype=np.int64))
        samples.append(SegmentationSample(read_pnm(img_path), mask, sid))
    return samples, manifest


# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.1
    hue: float = 0.1


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    mx, mn = rgb.max(axis=0), rgb.min(axis=0)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0)
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros((3,) + h.shape)
    for k, (rr, gg, bb) in enumerate(table):
        sel = i == k
        out[0][sel], out[1][sel], out[2][sel] = rr[sel], gg[sel], bb[sel]
    return out


def hflip(sample: SegmentationSample) -> SegmentationSample:
    return replace(
        sample,
        image=Tensor(sample.image.data[:, :, ::-1]),
        mask=Tensor(sample.mask.data[:, ::-1]),
    )


def augment(sample: SegmentationSample, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()):
    """Joint horizontal flip, then photometric jitter on the image only."""
    if rng.random() < policy.flip_prob:
        sample = hflip(sample)
    img = np.array(sample.image.data)
    if policy.brightness:
        img = img * rng.uniform(1 - policy.brightness, 1 + policy.brightness)
    if policy.contrast:
        m = img.mean()
        img = m + (img - m) * rng.uniform(1 - policy.contrast, 1 + policy.contrast)
    img = np.clip(img, 0.0, 1.0)
    if policy.saturation or policy.hue:
        hsv = _rgb_to_hsv(img)
        if policy.saturation:
            hsv[1] = np.clip(hsv[1] * rng.uniform(1 - policy.saturation, 1 + policy.saturation), 0, 1)
        if policy.hue:
            hsv[0] = (hsv[0] + rng.uniform(-policy.hue, policy.hue)) % 1.0
        img = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    return replace(sample, image=Tensor(img))


# tiling


@dataclass(frozen=True)
class Tile:
    y: int
    x: int
    data: Tensor
    mask: Tensor | None = field(default=None)


def tile_starts(extent: int, size: int, overlap: int) -> list[int]:
    if size > extent:
        raise DimensionError(f"tile size {size} exceeds extent {extent}")
    if not 0 <= overlap < size:
        raise ConfigError(f"overlap must lie in [0, {size})")
    stride = size - overlap
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def tile(image: Tensor, mask: Tensor | None, tile_size: int, overlap: int = 0) -> list[Tile]:
    """Overlapping crops of a C×H×W tensor (and optional H×W mask)."""
    _, h, w = image.shape
    tiles = []
    for y in tile_starts(h, tile_size, overlap):
        for x in tile_starts(w, tile_size, overlap):
            crop = Tensor(image.data[:, y : y + tile_size, x : x + tile_size])
            mcrop = None if mask is None else Tensor(mask.data[y : y + tile_size, x : x + tile_size])
            tiles.append(Tile(y, x, crop, mcrop))
    return tiles


def stitch_probs(tiles: Sequence[Tile], height: int | None = None, width: int | None = None) -> Tensor:
    """Average per-tile class scores over overlaps into one C×H×W map."""
    c = tiles[0].data.shape[0]
    height = height or max(t.y + t.data.shape[1] for t in tiles)
    width = width or max(t.x + t.data.shape[2] for t in tiles)
    acc = np.zeros((c, height, width))
    hits = np.zeros((height, width))
    for t in tiles:
        _, th, tw = t.data.shape
        acc[:, t.y : t.y + th, t.x : t.x + tw] += t.data.data
        hits[t.y : t.y + th, t.x : t.x + tw] += 1
    if np.any(hits == 0):
        raise DimensionError("tiles do not cover the full extent")
    return Tensor(acc / hits)


def stitch(tiles: Sequence[Tile], height: int | None = None, width: int | None = None) -> Tensor:
    """Overlap-averaged class scores, argmaxed into an H×W id mask."""
    return decode_mask(stitch_probs(tiles, height, width))
