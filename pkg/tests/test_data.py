import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from localmim.data import (
    MalformedHeader,
    MaskGrid,
    TruncatedPayload,
    UnsupportedFormat,
    blockwise_mask,
    build_scale_recipe,
    decode_ppm,
    encode_ppm,
    load_ppm,
    make_mask,
    patchify,
    pyramid_mask,
    random_mask,
    random_resized_crop,
    rescale_bits,
    rescale_mask,
    sincos_pos_embed,
    synth_shapes,
    unpatchify,
    write_ppm,
)


# PPM


def test_white_p6_decodes_to_ones(tmp_path):
    path = tmp_path / "w.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + b"\xff" * 12)
    img = load_ppm(path)
    assert img.shape == (2, 2, 3)
    np.testing.assert_array_equal(img.pixels, 1.0)


def test_header_comments_are_skipped():
    raw = decode_ppm(b"P6 # made by hand\n1 # w\n1\n255\n\x01\x02\x03")
    np.testing.assert_array_equal(raw, [[[1, 2, 3]]])


@pytest.mark.parametrize("buf,err", [
    (b"P5\n2 2\n255\n" + b"\0" * 4, UnsupportedFormat),
    (b"P3\n1 1\n255\n0 0 0", UnsupportedFormat),
    (b"P6\n2 x\n255\n", MalformedHeader),
    (b"P6\n2 2\n65535\n" + b"\0" * 24, MalformedHeader),
    (b"P6\n2 2", MalformedHeader),
    (b"P6\n2 2\n255\n" + b"\0" * 11, TruncatedPayload),
    (b"P", MalformedHeader),
])
def test_bad_ppm_rejected(buf, err):
    with pytest.raises(err):
        decode_ppm(buf)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_ppm_round_trip_bit_exact(h, w, seed):
    raw = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    buf = encode_ppm(raw)
    np.testing.assert_array_equal(decode_ppm(buf), raw)
    assert encode_ppm(decode_ppm(buf)) == buf


def test_synthetic_images_survive_ppm(tmp_path):
    img = synth_shapes(3, 32, 32)[0]
    write_ppm(tmp_path / "a.ppm", img.pixels)
    np.testing.assert_array_equal(load_ppm(tmp_path / "a.ppm").pixels, img.pixels)


# synthetic data


def test_synth_shapes_deterministic_and_non_degenerate():
    a = synth_shapes(7, 32, 48, 3, 5)
    b = synth_shapes(7, 32, 48, 3, 5)
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()
        assert x.shape == (32, 48, 3)
        assert len(np.unique(x.pixels)) >= 2
        assert 0.0 <= x.pixels.min() and x.pixels.max() <= 1.0
    assert synth_shapes(7, 32, 32, 3, 0) == []
    with pytest.raises(ValueError):
        synth_shapes(0, 8, 32)


def test_random_resized_crop_shape_and_range():
    img = synth_shapes(1, 32, 32)[0].pixels
    out = random_resized_crop(img, np.random.default_rng(0))
    assert out.shape == img.shape
    assert img.min() - 1e-12 <= out.min() and out.max() <= img.max() + 1e-12


# patches and positions


def test_patchify_shapes():
    assert patchify(np.zeros((224, 224, 3)), 16).shape == (196, 768)
    assert patchify(np.zeros((64, 64, 3)), 8).shape == (64, 192)
    with pytest.raises(ValueError):
        patchify(np.zeros((30, 32, 3)), 8)


def test_patchify_raster_order():
    img = np.zeros((8, 8, 1))
    img[0:4, 4:8] = 1.0
    rows = patchify(img, 4)
    np.testing.assert_array_equal(rows.sum(axis=1), [0, 16, 0, 0])


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 999))
def test_unpatchify_inverts_patchify(p, h, w, C, seed):
    img = np.random.default_rng(seed).random((2, h * p, w * p, C))
    back = unpatchify(patchify(img, p), p, h, w, C)
    assert back.tobytes() == img.tobytes()


def test_pos_embed_range_and_determinism():
    e = sincos_pos_embed(14, 14, 64)
    assert e.shape == (196, 64)
    assert np.abs(e).max() <= 1.0
    assert sincos_pos_embed(14, 14, 64).tobytes() == e.tobytes()
    with pytest.raises(ValueError):
        sincos_pos_embed(4, 4, 10)


@pytest.mark.parametrize("side", [1, 2, 7, 14, 32, 64])
def test_pos_embed_rows_are_unique(side):
    e = sincos_pos_embed(side, side, 64)
    assert len(np.unique(e, axis=0)) == side * side


# masks


def test_random_mask_exact_counts():
    assert random_mask(196, 0.75, np.random.default_rng(0)).count == 147
    assert random_mask(4, 0.75, np.random.default_rng(0)).count == 3
    for seed in range(200):
        m = random_mask(196, 0.75, np.random.default_rng(seed))
        assert m.count == 147 and m.scale == (14, 14)
    with pytest.raises(ValueError):
        random_mask(196, 1.0, np.random.default_rng(0))


def test_random_mask_positions_binomial():
    n_draws, N, r = 10_000, 16, 0.75
    rng = np.random.default_rng(123)
    freq = np.zeros(N)
    for _ in range(n_draws):
        freq += random_mask(N, r, rng).flat()
    freq /= n_draws
    sigma = np.sqrt(r * (1 - r) / n_draws)
    assert np.all(np.abs(freq - r) <= 3 * sigma + 1e-12)


def _mean_component(bits):
    lab, n = ndimage.label(bits)
    return bits.sum() / max(n, 1)


def test_blockwise_mask_exact_and_clumpier_than_random():
    blk, rnd = [], []
    for seed in range(100):
        b = blockwise_mask(14, 14, 0.5, np.random.default_rng(seed))
        assert b.count == 98
        blk.append(_mean_component(b.bits))
        rnd.append(_mean_component(random_mask(196, 0.5, np.random.default_rng(seed)).bits))
    assert blockwise_mask(14, 14, 0.75, np.random.default_rng(1)).count == 147
    assert np.mean(blk) > np.mean(rnd)


def test_pyramid_mask_counts_and_blocks():
    coarse, fine = pyramid_mask(7, 7, 0.75, 8, np.random.default_rng(0))
    assert coarse.count == 36 and fine.count == 36 * 64
    assert fine.scale == (56, 56)
    blocks = fine.bits.reshape(7, 8, 7, 8)
    assert (blocks.all(axis=(1, 3)) | ~blocks.any(axis=(1, 3))).all()
    c1, f1 = pyramid_mask(5, 5, 0.5, 1, np.random.default_rng(0))
    np.testing.assert_array_equal(c1.bits, f1.bits)
    with pytest.raises(ValueError):
        pyramid_mask(4, 4, 0.5, 3, np.random.default_rng(0))


def test_rescale_examples():
    m = random_mask(196, 0.75, np.random.default_rng(0))
    assert rescale_mask(m, 28).count == 4 * 147
    parent = MaskGrid(np.array([[True, True], [True, False]]))
    assert not rescale_mask(parent, 1).bits.any()
    assert rescale_mask(parent, 1, rule="any").bits.all()
    assert rescale_mask(parent, 1, rule="majority").bits.all()
    with pytest.raises(ValueError):
        rescale_mask(m, 21)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4]), st.integers(0, 2**31 - 1))
def test_rescale_relations(side, k, seed):
    bits = np.random.default_rng(seed).random((side, side)) < 0.6
    up = rescale_bits(bits, side * k)
    # replication: every fine cell equals its parent
    ii, jj = np.indices(up.shape)
    np.testing.assert_array_equal(up, bits[ii // k, jj // k])
    np.testing.assert_array_equal(rescale_bits(up, side), bits)
    if side % 2 == 0:
        down = rescale_bits(bits, side // 2)
        ref = bits[0::2, 0::2] & bits[1::2, 0::2] & bits[0::2, 1::2] & bits[1::2, 1::2]
        np.testing.assert_array_equal(down, ref)


def test_make_mask_strategies():
    rng = np.random.default_rng(0)
    assert make_mask("random", 8, 0.75, rng).count == 48
    assert make_mask("blockwise", 8, 0.75, rng).count == 48
    assert make_mask("pyramid", 8, 0.75, rng, coarse=2).count == 3 * 16
    with pytest.raises(ValueError):
        make_mask("stripes", 8, 0.75, rng)


# recipes


def test_columnar_recipes():
    r = build_scale_recipe("columnar", 12, 14)
    assert r.layers == [2, 4, 10, 12] and r.scales == [56, 28, 14, 7]
    r = build_scale_recipe("columnar", 8, 8)
    assert r.layers == [2, 4, 6, 8] and r.scales == [32, 16, 8, 4]
    with pytest.raises(ValueError):
        build_scale_recipe("columnar", 6, 8)


def test_pyramid_recipe():
    r = build_scale_recipe("pyramid", [2, 2, 18, 2], 56)
    assert r.layers == [2, 4, 22, 24] and r.scales == [28, 14, 7, 7]
    r = build_scale_recipe("pyramid", [1, 1, 2, 1], 32, [16, 8, 4, 4])
    assert r.scales == [16, 8, 4, 4]


def test_recipe_validation():
    with pytest.raises(ValueError):
        build_scale_recipe("pyramid", [1, 1, 1, 1], 14, [14, 28, 7, 7])
    with pytest.raises(ValueError):
        build_scale_recipe("pyramid", [1, 1, 1, 1], 14, [14, 12, 7, 7])
