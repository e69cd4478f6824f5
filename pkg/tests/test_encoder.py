import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localmim import tensor as T
from localmim.data import patchify, pyramid_mask, random_mask, synth_shapes
from localmim.encoder import (
    Encoder,
    EncoderConfig,
    encode_visible,
    patch_merge,
    pyramid_output_grids,
    visible_index,
)
from localmim.nn import Linear
from localmim.tensor import Tensor, backward


def columnar(depth=4, taps=(2, 4), img=32, p=8, dim=16, heads=2, stop=False):
    cfg = EncoderConfig("columnar", img, p, 3, dim, depth, heads, taps=taps, stop_gradient=stop)
    return Encoder(cfg, np.random.default_rng(0))


def pyramid(img=32, p=1, dims=(8, 16, 16, 32), depths=(1, 1, 2, 1), heads=(1, 2, 2, 4)):
    cfg = EncoderConfig("pyramid", img, p, 3, dims, depths, heads, taps=(1, 2, 4, 5))
    return Encoder(cfg, np.random.default_rng(0))


def batch(img=32, n=2, seed=0):
    return np.stack([s.pixels for s in synth_shapes(seed, img, img, 3, n)])


def test_visible_rows_at_full_scale():
    enc = columnar(depth=12, taps=(2, 4, 10, 12), img=224, p=16, dim=16)
    img = batch(224, 1)
    m = random_mask(196, 0.75, np.random.default_rng(0))
    out = encode_visible(patchify(img, 16), m, enc)
    assert sorted(out.features) == [2, 4, 10, 12]
    assert all(f.shape == (1, 49, 16) for f in out.features.values())
    assert len(out.attention) == 12 and out.attention[0].shape == (1, 2, 49, 49)


def test_unmasked_input_covers_every_token():
    enc = columnar(depth=1, taps=(1,), img=224, p=16)
    out = encode_visible(patchify(batch(224, 1), 16), np.zeros((14, 14), bool), enc)
    assert out.features[1].shape == (1, 196, 16)


def test_fully_masked_and_ragged_batches_rejected():
    with pytest.raises(ValueError):
        visible_index(np.ones((1, 4, 4), bool))
    bits = np.zeros((2, 2, 2), bool)
    bits[0, 0, 0] = True
    with pytest.raises(ValueError):
        visible_index(bits)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permuting_visible_tokens_permutes_outputs(seed):
    enc = columnar()
    rng = np.random.default_rng(seed)
    patches = patchify(batch(), 8)
    bits = np.stack([random_mask(16, 0.5, rng).bits for _ in range(2)])
    idx = visible_index(bits)
    perm = rng.permutation(idx.shape[1])
    a = enc(patches, idx)
    b = enc(patches, idx[:, perm])
    for layer in (2, 4):
        np.testing.assert_allclose(b.features[layer].data, a.features[layer].data[:, perm], atol=1e-6)


def test_masked_content_is_never_read():
    enc = columnar()
    patches = patchify(batch(), 8)
    bits = np.stack([random_mask(16, 0.75, np.random.default_rng(s)).bits for s in range(2)])
    noisy = patches.copy()
    noisy[bits.reshape(2, -1)] = 1e6
    a, b = encode_visible(patches, bits, enc), encode_visible(noisy, bits, enc)
    assert a.features[4].data.tobytes() == b.features[4].data.tobytes()


def test_stop_gradient_isolates_segments():
    enc = columnar(stop=True)
    bits = np.stack([random_mask(16, 0.5, np.random.default_rng(s)).bits for s in range(2)])
    out = encode_visible(patchify(batch(), 8), bits, enc)
    loss = out.features[4].sum()
    groups = dict(enc.layer_params())
    grads = backward(loss, enc.parameters())
    for name in ("embed", "layer1", "layer2"):
        assert all(not grads[p].any() for p in groups[name])
    assert any(grads[p].any() for p in groups["layer3"] + groups["layer4"])


def test_pyramid_output_grids():
    assert pyramid_output_grids(32) == [16, 8, 4, 4]
    assert pyramid_output_grids(56) == [28, 14, 7, 7]
    assert pyramid_output_grids(32, tap_after_merge=False) == [32, 16, 8, 4]


def test_pyramid_tap_shapes_and_visible_fraction():
    enc = pyramid()
    coarse, fine = pyramid_mask(4, 4, 0.75, 8, np.random.default_rng(0))
    out = encode_visible(patchify(batch(n=1), 1), fine.bits, enc)
    assert [out.grid[l] for l in (1, 2, 4, 5)] == [16, 8, 4, 4]
    dims = [f.shape[-1] for f in out.features.values()]
    assert dims == [16, 16, 32, 32]
    for layer in (1, 2, 4, 5):
        g = out.grid[layer]
        assert out.features[layer].shape[1] == g * g // 4
    assert enc.tap_shapes() == {1: (16, 16), 2: (8, 16), 3: (8, 16), 4: (4, 32), 5: (4, 32)}


def test_pyramid_rejects_unaligned_mask():
    enc = pyramid()
    bits = random_mask(32 * 32, 0.75, np.random.default_rng(0)).bits
    with pytest.raises(ValueError):
        encode_visible(patchify(batch(n=1), 1), bits, enc)


def test_patch_merge_quarters_tokens_and_halves_coords():
    s = 8
    bits = np.repeat(np.repeat(random_mask(16, 0.5, np.random.default_rng(3)).bits, 2, 0), 2, 1)
    idx = visible_index(bits[None])
    x = Tensor(np.random.default_rng(0).normal(size=(1, idx.shape[1], 4)))
    red = Linear(16, 4, np.random.default_rng(0), bias=False)
    merged, coarse = patch_merge(x, idx, s, red)
    assert merged.shape == (1, idx.shape[1] // 4, 4)
    rows, cols = np.divmod(idx[0], s)
    parents = sorted({(r // 2) * (s // 2) + c // 2 for r, c in zip(rows, cols)})
    np.testing.assert_array_equal(coarse[0], parents)


def test_patch_merge_concatenates_children_in_raster_order():
    idx = np.array([[0, 1, 2, 3]])  # a 2x2 grid, raster order
    x = Tensor(np.arange(8.0).reshape(1, 4, 2))
    ident = Linear(8, 8, np.random.default_rng(0), bias=False)
    ident.weight.data = np.eye(8)
    merged, coarse = patch_merge(x, idx, 2, ident)
    np.testing.assert_array_equal(merged.data[0, 0], np.arange(8.0))
    np.testing.assert_array_equal(coarse, [[0]])


def test_patch_merge_rejects_mixed_blocks():
    idx = np.array([[0, 1, 2, 4]])
    with pytest.raises(ValueError):
        patch_merge(Tensor(np.zeros((1, 4, 2))), idx, 4, Linear(8, 2, np.random.default_rng(0)))


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig("columnar", 30, 8).validate()
    with pytest.raises(ValueError):
        EncoderConfig("columnar", 32, 8, embed_dim=18, num_heads=4).validate()
    with pytest.raises(ValueError):
        EncoderConfig("columnar", 32, 8, depth=4, taps=(5,)).validate()
    with pytest.raises(ValueError):
        EncoderConfig("pyramid", 32, 4, depth=(1, 1, 1)).validate()


def test_forward_deterministic():
    a = columnar()
    b = columnar()
    bits = random_mask(16, 0.5, np.random.default_rng(0)).bits
    p = patchify(batch(n=1), 8)
    assert encode_visible(p, bits, a).features[4].data.tobytes() == encode_visible(p, bits, b).features[4].data.tobytes()


def test_encoder_gradient_finite_difference():
    enc = columnar(depth=2, taps=(1, 2), img=16, p=4, dim=8, heads=2)
    bits = np.stack([random_mask(16, 0.5, np.random.default_rng(s)).bits for s in range(2)])
    patches = patchify(batch(16), 4)
    w = np.random.default_rng(1).normal(size=(2, 8, 8))

    def f():
        out = encode_visible(patches, bits, enc)
        # mean-scaled like the training loss; key biases have exactly zero gradient, so their
        # error is pure rounding noise relative to the checker's 1e-8 floor
        return T.tensor_mean(out.features[2] * Tensor(w)) + T.tensor_mean(out.features[1] * out.features[1])

    assert T.finite_diff_check(f, enc.parameters(), eps=1e-3, n_coords=50) <= 1e-4
