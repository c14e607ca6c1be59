from __future__ import annotations

import numpy as np
import pytest

from kontext import autodiff as ad
from kontext import gradcheck
from kontext import toyworld as tw
from kontext.errors import ContractError, DimensionError, TokenizerError
from kontext.vlm import VLM, Connector, QueryTokens, Tokenizer, VlmConfig

CFG = VlmConfig(layers=2, heads=2, model_dim=32, ffn_dim=64, vocab_size=len(tw.vocabulary()), K=4)


@pytest.fixture(scope="module")
def parts():
    tok = Tokenizer.default()
    vlm = VLM(CFG, seed=0)
    q = QueryTokens(np.random.default_rng(0), CFG.K, CFG.model_dim)
    return tok, vlm, q


def test_tokenizer(tmp_path):
    tok = Tokenizer.default()
    ids = tok.encode("a red circle left of a blue square")
    assert tok.decode(ids) == "a red circle left of a blue square"
    with pytest.raises(TokenizerError, match="purple"):
        tok.encode("a purple circle")
    path = tw.write_vocabulary(tmp_path / "vocab.txt")
    assert Tokenizer.from_file(path).vocab == tok.vocab
    ids, mask = tok.batch(["a red circle", "remove the blue square"], 6)
    assert ids.shape == (2, 6) and mask.sum(1).tolist() == [3, 4]
    with pytest.raises(ContractError):
        tok.batch(["a red circle"] * 1, 2)


def test_forward_shapes_and_determinism(parts):
    tok, vlm, q = parts
    ids, mask = tok.batch(["a red circle", "reconstruct the image"], CFG.max_caption)
    T, Q = vlm.forward(ids, mask, [], q)
    assert T.shape == (2, CFG.max_caption, 32) and Q.shape == (2, CFG.K, 32)
    img = np.stack([tw.generate("t2i", 0, i).target for i in range(2)])
    a = vlm.forward(ids, mask, [img], q)[1].data
    b = vlm.forward(ids, mask, [img], q)[1].data
    assert np.array_equal(a, b)
    assert vlm.forward(ids, mask, [img, img], q)[1].shape == (2, CFG.K, 32)


def test_forward_limits(parts):
    tok, vlm, q = parts
    ids, mask = tok.batch(["a red circle"], CFG.max_caption)
    img = np.zeros((1, 64, 64, 3), np.float32)
    with pytest.raises(ContractError):
        vlm.forward(ids, mask, [img] * 3, q)
    with pytest.raises(ContractError):
        vlm.forward(np.zeros((1, CFG.max_caption + 1), int), np.ones((1, CFG.max_caption + 1), bool), [], q)


def test_image_order_changes_queries(parts):
    tok, vlm, q = parts
    ids, mask = tok.batch(["the first left of the second"], CFG.max_caption)
    r1 = tw.generate("multisubject", 0, 0).cond_images
    a, b = r1[0][0][None], r1[1][0][None]
    qa = vlm.forward(ids, mask, [a, b], q)[1].data
    qb = vlm.forward(ids, mask, [b, a], q)[1].data
    assert np.abs(qa - qb).max() > 0


def test_patch_tokens(parts):
    _, vlm, _ = parts
    black = np.zeros((64, 64, 3), np.float32)
    white = np.ones((64, 64, 3), np.float32)
    assert vlm.encode_image_patches(black).shape == (64, 32)
    assert np.abs(vlm.encode_image_patches(black).data - vlm.encode_image_patches(white).data).max() > 0
    assert np.abs(vlm.encode_image_patches(black, 1).data - vlm.encode_image_patches(black, 2).data).max() > 0
    with pytest.raises(ContractError):
        vlm.encode_image_patches(np.zeros((60, 64, 3)))


def test_padding_does_not_leak(parts):
    tok, vlm, q = parts
    ids, mask = tok.batch(["a red circle"], CFG.max_caption)
    other = ids.copy()
    other[0, 5:] = tok.index["blue"]  # garbage behind the mask
    a = vlm.forward(ids, mask, [], q)[1].data
    b = vlm.forward(other, mask, [], q)[1].data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_connector():
    rng = np.random.default_rng(0)
    c = Connector(32, 24, seed=1)
    T = rng.standard_normal((2, 5, 32)).astype(np.float32)
    Q = rng.standard_normal((2, 4, 32)).astype(np.float32)
    bundle = c.connect(T, Q)
    assert bundle.tokens.shape == (2, 9, 24) and bundle.mask.all() and bundle.K == 4
    zero = c(np.zeros((1, 1, 32), np.float32)).data
    expected = ad.linear(ad.gelu(c.mlp.fc1.bias.data[None]), c.mlp.fc2.weight, c.mlp.fc2.bias).data
    np.testing.assert_allclose(zero[0], expected, atol=1e-6)
    with pytest.raises(DimensionError):
        c(np.zeros((1, 1, 24)))


def test_connector_gradient():
    rng = np.random.default_rng(2)
    with ad.precision(np.float64):
        c = Connector(6, 4, seed=0)
        c.set_requires_grad(True)
        x = rng.standard_normal((3, 6))
        y = rng.standard_normal((3, 4))
        err = gradcheck.check_params(lambda: ad.mse(c(x), y), c.parameters(), rng, per_tensor=10)
    assert err <= 1e-3


def test_caption_logits_shape(parts):
    tok, vlm, _ = parts
    ids = np.full((2, 5), tok.bos_id)
    assert vlm.caption_logits(np.zeros((2, 64, 64, 3), np.float32), ids).shape == (2, 5, CFG.vocab_size)
