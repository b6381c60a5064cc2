import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from msdiffseg.data import (
    AugmentPolicy,
    DatasetSpec,
    SegmentationSample,
    Tile,
    augment,
    decode_mask,
    encode_mask,
    encode_pnm,
    generate,
    generate_sample,
    hflip,
    load_dataset,
    one_hot,
    parse_pnm,
    read_pnm,
    save_dataset,
    stitch,
    stitch_probs,
    tile,
    tile_starts,
    write_pnm,
    _hsv_to_rgb,
    _rgb_to_hsv,
)
from msdiffseg.errors import ConfigError, ContractError, DataError, DimensionError, GenerationError, ParseError
from msdiffseg.tensor import Tensor

from oracles import tile_coverage


# generation


def test_generation_is_byte_identical_under_seed():
    spec = DatasetSpec(num_samples=3, seed=4)
    a, b = generate(spec), generate(spec)
    for x, y in zip(a, b):
        assert x.image.data.tobytes() == y.image.data.tobytes()
        assert x.mask.data.tobytes() == y.mask.data.tobytes()


def test_generated_ids_in_range_and_images_quantized():
    for s in generate(DatasetSpec(num_samples=4, num_classes=4, seed=1)):
        assert s.mask.data.min() >= 0 and s.mask.data.max() < 4
        assert s.image.shape == (3, 32, 32)
        np.testing.assert_array_equal(np.round(s.image.data * 255) / 255, s.image.data)


def test_balanced_binary_frequency():
    masks = [s.mask.data for s in generate(DatasetSpec(num_samples=10, num_classes=2, seed=0))]
    share = np.mean(np.concatenate([m.ravel() for m in masks]) == 1)
    assert 0.4 <= share <= 0.6


def test_imbalance_ratio_is_respected():
    spec = DatasetSpec(num_samples=6, height=64, width=64, num_classes=3, imbalance_ratio=8.0, seed=2)
    ids = np.concatenate([s.mask.data.ravel() for s in generate(spec)])
    freq = np.bincount(ids, minlength=3) / ids.size
    np.testing.assert_allclose(freq, spec.class_frequencies(), atol=0.03)
    assert freq[0] / freq[2] == pytest.approx(8.0, rel=0.25)


@pytest.mark.parametrize(
    "kw", [{"height": 20}, {"num_classes": 1}, {"imbalance_ratio": 0.5}, {"shapes": ("star",)}, {"num_samples": 0}]
)
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        DatasetSpec(**kw)


def test_unplaceable_request_raises_generation_error():
    with pytest.raises(GenerationError):
        generate_sample(DatasetSpec(num_classes=6, max_shapes=2), 0)


def test_sample_shape_contract():
    with pytest.raises(DimensionError):
        SegmentationSample(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((4, 5), int)), "x")


# mask embedding


def test_encode_two_class_example():
    emb = encode_mask(Tensor(np.array([[1]])), 2).data
    np.testing.assert_array_equal(emb[:, 0, 0], [-1.0, 1.0])


def test_decode_zero_embedding_ties_to_class_zero():
    np.testing.assert_array_equal(decode_mask(Tensor(np.zeros((3, 2, 2)))).data, 0)


def test_encode_rejects_out_of_range():
    with pytest.raises(ContractError):
        encode_mask(Tensor(np.array([[2]])), 2)


@given(st.integers(2, 6).flatmap(lambda C: st.tuples(st.just(C), hnp.arrays(np.int64, (3, 4), elements=st.integers(0, C - 1)))))
def test_encode_decode_round_trip(args):
    C, m = args
    emb = encode_mask(Tensor(m), C)
    np.testing.assert_array_equal(decode_mask(emb).data, m)
    np.testing.assert_array_equal(emb.data.sum(axis=0), 2 - C)
    np.testing.assert_array_equal(one_hot(Tensor(m), C).data.sum(axis=0), 1.0)


# PNM


def test_p5_example():
    m = parse_pnm(b"P5\n2 2\n255\n" + bytes([0, 1, 2, 3]))
    np.testing.assert_array_equal(m.data, [[0, 1], [2, 3]])


def test_p6_example():
    img = parse_pnm(b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
    assert img.shape == (3, 1, 2)
    np.testing.assert_array_equal(img.data[:, 0, 0], [1, 0, 0])


def test_header_comments_allowed():
    m = parse_pnm(b"P5\n# made by hand\n1 1 # width height\n255\n" + bytes([7]))
    assert m.data.tolist() == [[7]]


@pytest.mark.parametrize(
    "buf, offset",
    [
        (b"P3\n1 1\n255\n\x00", 0),
        (b"P5\n1 x\n255\n\x00", 5),
        (b"P5\n1 1\n65535\n\x00\x00", 7),
        (b"P5\n2 2\n255\n\x00", 12),
        (b"P5\n2", 4),
    ],
)
def test_malformed_pnm_reports_offset(buf, offset):
    with pytest.raises(ParseError) as info:
        parse_pnm(buf)
    assert info.value.offset == offset
    assert isinstance(info.value, DataError)


@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_p5_round_trip(arr):
    t = Tensor(arr.astype(np.int64))
    back = parse_pnm(encode_pnm(t))
    assert back.data.tobytes() == t.data.tobytes()


@given(hnp.arrays(np.uint8, st.tuples(st.just(3), st.integers(1, 5), st.integers(1, 5))))
def test_p6_round_trip(arr):
    t = Tensor(arr / 255.0)
    assert parse_pnm(encode_pnm(t)).data.tobytes() == t.data.tobytes()


def test_file_round_trip(tmp_path):
    s = generate_sample(DatasetSpec(seed=9), 0)
    write_pnm(tmp_path / "a.ppm", s.image)
    write_pnm(tmp_path / "a.pgm", s.mask)
    assert read_pnm(tmp_path / "a.ppm").data.tobytes() == s.image.data.tobytes()
    assert read_pnm(tmp_path / "a.pgm").data.tobytes() == s.mask.data.tobytes()


def test_dataset_directory_round_trip(tmp_path):
    samples = generate(DatasetSpec(num_samples=4, num_classes=2, seed=3))
    save_dataset(samples, tmp_path, 2, val_fraction=0.25)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["num_classes"] == 2 and len(manifest["palette"]) == 2
    train, _ = load_dataset(tmp_path, "train")
    val, _ = load_dataset(tmp_path, "val")
    assert [s.id for s in train] == ["00000", "00001", "00002"] and [s.id for s in val] == ["00003"]
    for a, b in zip(samples, train + val):
        assert a.image.data.tobytes() == b.image.data.tobytes()
        assert a.mask.data.tobytes() == b.mask.data.tobytes()


def test_missing_masks(tmp_path):
    samples = generate(DatasetSpec(num_samples=1, seed=0))
    save_dataset(samples, tmp_path, 3)
    (tmp_path / "masks" / "00000.pgm").unlink()
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    loaded, _ = load_dataset(tmp_path, require_masks=False)
    assert loaded[0].mask.shape == (32, 32)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nowhere")


# augmentation


def test_flip_involution_and_index_map():
    s = generate_sample(DatasetSpec(seed=5), 0)
    twice = hflip(hflip(s))
    assert twice.image.data.tobytes() == s.image.data.tobytes()
    flipped = augment(s, np.random.default_rng(0), AugmentPolicy(1.0, 0, 0, 0, 0))
    np.testing.assert_array_equal(flipped.mask.data[:, 0], s.mask.data[:, 31])
    np.testing.assert_array_equal(flipped.image.data[:, :, 3], s.image.data[:, :, 28])


@given(st.integers(0, 10_000))
def test_jitter_keeps_mask_histogram_and_range(seed):
    s = generate_sample(DatasetSpec(num_classes=3, seed=1), 0)
    out = augment(s, np.random.default_rng(seed), AugmentPolicy(flip_prob=0.0))
    assert out.mask.data.tobytes() == s.mask.data.tobytes()
    assert out.image.data.min() >= 0.0 and out.image.data.max() <= 1.0


@given(hnp.arrays(np.float64, (3, 4, 4), elements=st.floats(0, 1)))
def test_hsv_round_trip(rgb):
    np.testing.assert_allclose(_hsv_to_rgb(_rgb_to_hsv(rgb)), rgb, atol=1e-12)


# tiling


def test_tile_starts_example():
    assert tile_starts(6, 4, 2) == [0, 2]
    assert tile_starts(10, 4, 0) == [0, 4, 6]


def test_tile_validation():
    with pytest.raises(DimensionError):
        tile_starts(3, 4, 0)
    with pytest.raises(ConfigError):
        tile_starts(8, 4, 4)


@given(st.integers(1, 20), st.integers(1, 20), st.data())
def test_tiles_cover_every_pixel(h, w, data):
    size = data.draw(st.integers(1, min(h, w)))
    overlap = data.draw(st.integers(0, size - 1))
    image = Tensor(np.random.default_rng(h * 31 + w).random((2, h, w)))
    tiles = tile(image, None, size, overlap)
    ys = sorted({t.y for t in tiles})
    xs = sorted({t.x for t in tiles})
    assert tile_coverage(h, w, ys, xs, size).min() >= 1
    np.testing.assert_allclose(stitch_probs(tiles, h, w).data, image.data, atol=1e-15)


def test_partition_stitch_restores_prediction():
    probs = Tensor(np.random.default_rng(0).random((3, 8, 12)))
    tiles = tile(probs, None, 4, 0)
    assert len(tiles) == 6
    np.testing.assert_array_equal(stitch(tiles).data, decode_mask(probs).data)


def test_tile_mask_crops():
    img = Tensor(np.zeros((3, 4, 4)))
    mask = Tensor(np.arange(16).reshape(4, 4))
    tiles = tile(img, mask, 2)
    assert tiles[1].mask.data.tolist() == [[2, 3], [6, 7]]


def test_stitch_detects_gaps():
    t = Tile(0, 0, Tensor(np.ones((1, 2, 2))))
    with pytest.raises(DimensionError):
        stitch_probs([t], 4, 4)
