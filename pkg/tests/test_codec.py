from __future__ import annotations

import numpy as np
import pytest

from kontext import toyworld as tw
from kontext.codec import PATCH, PatchCodec, codec_images, patchify, psnr, train_codec, unpatchify
from kontext.errors import ContractError

# Pilot: 2000 steps reach about 24.5 dB on held-out toy images, close to the
# 24.8 dB optimum of any linear 192->16 patch map (PCA bound).
PSNR_FLOOR_DB = 24.0


def test_shapes_and_errors():
    c = PatchCodec(0)
    assert c.encode(np.zeros((64, 64, 3))).shape == (8, 8, 16)
    assert c.encode(np.zeros((2, 32, 48, 3))).shape == (2, 4, 6, 16)
    assert c.decode(c.encode(np.zeros((64, 64, 3)))).shape == (64, 64, 3)
    with pytest.raises(ContractError):
        c.encode(np.zeros((60, 64, 3)))
    with pytest.raises(ContractError):
        c.encode(np.zeros((8, 8, 3)))
    with pytest.raises(ContractError):
        c.decode(np.zeros((8, 8, 15)))


def test_patchify_inverse():
    x = np.random.default_rng(0).random((2, 16, 24, 3))
    assert np.array_equal(unpatchify(patchify(x)), x)
    assert patchify(x).shape == (2, 2, 3, PATCH * PATCH * 3)


def test_identical_images_bit_identical_latents():
    c = PatchCodec(1)
    img = tw.generate("t2i", 0, 0).target
    assert np.array_equal(c.encode(img), c.encode(img.copy()))


def test_zero_raw_latent_decodes_to_bias():
    c = PatchCodec(2)
    c.dec.bias.data = np.random.default_rng(0).uniform(0.2, 0.8, 192).astype(np.float32)
    raw_zero = -c.latent_mean.data / c.latent_std.data
    img = c.decode(np.broadcast_to(raw_zero, (8, 8, 16)))
    expected = unpatchify(np.broadcast_to(c.dec.bias.data, (1, 8, 8, 192)))[0]
    np.testing.assert_allclose(img, expected, atol=1e-6)
    assert img.min() >= 0 and img.max() <= 1


def test_zero_steps_leaves_params():
    c = PatchCodec(3)
    before = c.state_dict()
    train_codec(c, 0)
    assert all(np.array_equal(before[k], v) for k, v in c.state_dict().items())


def test_deterministic_training():
    a, b = PatchCodec(4), PatchCodec(4)
    ra, rb = train_codec(a, 30, seed=1), train_codec(b, 30, seed=1)
    assert ra.losses == rb.losses


def test_trained_codec_quality(trained_codec):
    codec, result = trained_codec
    assert result.losses[-1] < 0.25 * result.losses[0]
    held = codec_images(seed=424242, index=0, batch=64)
    assert psnr(codec.roundtrip(held), held) >= PSNR_FLOOR_DB


def test_trained_codec_flat_color(trained_codec):
    codec, _ = trained_codec
    for color in tw.COLORS.values():
        img = np.broadcast_to(np.asarray(color, np.float32), (64, 64, 3))
        assert np.abs(codec.roundtrip(img) - img).mean() <= 0.05


def test_trained_loss_smoothed_decreasing(trained_codec):
    _, result = trained_codec
    sm = np.convolve(result.losses, np.ones(200) / 200, mode="valid")[::200]
    assert np.all(np.diff(sm) <= 1e-4)
