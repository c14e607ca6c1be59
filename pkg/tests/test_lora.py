from __future__ import annotations

import numpy as np
import pytest

from kontext import lora
from kontext.autodiff import GradTape, Tensor
from kontext import autodiff as ad
from kontext.errors import ContractError, DimensionError
from kontext.nn import Linear
from kontext.vlm import VLM, VlmConfig


def _trained_adapter(rng, d_in=16, d_out=12, rank=4, alpha=8.0):
    a = lora.LoraAdapter.create(rng, d_in, d_out, rank, alpha)
    a.B.data = rng.standard_normal(a.B.shape).astype(np.float32) * 0.1
    return a


def test_init_b_zero_is_exact_noop():
    rng = np.random.default_rng(0)
    lin = Linear(rng, 16, 12)
    x = rng.standard_normal((5, 16)).astype(np.float32)
    before = lin(x).data
    lin.lora = lora.LoraAdapter.create(rng, 16, 12)
    assert not lin.lora.B.data.any()
    assert np.array_equal(lin(x).data, before)


def test_adapter_vs_merged_forward_agree():
    rng = np.random.default_rng(1)
    lin = Linear(rng, 16, 12)
    lin.lora = _trained_adapter(rng)
    x = rng.standard_normal((5, 16)).astype(np.float32)
    y_adapter = lin(x).data
    lora.merge(lin.lora, lin.weight)
    y_merged = ad.linear(x, lin.weight, lin.bias).data
    assert np.abs(y_adapter - y_merged).max() <= 1e-5


def test_merge_unmerge_restores_weights():
    rng = np.random.default_rng(2)
    lin = Linear(rng, 64, 48)
    w0 = lin.weight.data.copy()
    a = _trained_adapter(rng, 64, 48, 8, 16.0)
    lora.merge(a, lin.weight)
    lora.unmerge(a, lin.weight)
    assert np.abs(lin.weight.data - w0).max() <= 1e-6


def test_double_merge_and_unmerge_raise():
    rng = np.random.default_rng(3)
    lin = Linear(rng, 8, 8)
    a = _trained_adapter(rng, 8, 8, 2, 4.0)
    with pytest.raises(ContractError):
        lora.unmerge(a, lin.weight)
    lora.merge(a, lin.weight)
    with pytest.raises(ContractError):
        lora.merge(a, lin.weight)
    with pytest.raises(ContractError):
        lora.lora_forward(np.ones((1, 8)), lin.weight, a)


def test_shape_mismatch():
    rng = np.random.default_rng(4)
    lin = Linear(rng, 8, 6)
    with pytest.raises(DimensionError):
        lora.lora_forward(np.ones((1, 8)), lin.weight, lora.LoraAdapter.create(rng, 6, 8))
    with pytest.raises(ContractError):
        lora.LoraAdapter.create(rng, 8, 8, rank=0)


def test_only_adapter_receives_gradient():
    rng = np.random.default_rng(5)
    lin = Linear(rng, 8, 4)
    lin.set_requires_grad(False)
    lin.lora = _trained_adapter(rng, 8, 4, 2, 4.0)
    with GradTape() as tape:
        loss = ad.sum_(lin(rng.standard_normal((3, 8))))
    tape.backward(loss)
    assert lin.weight.grad is None and lin.bias.grad is None
    assert lin.lora.A.grad is not None and lin.lora.B.grad is not None


def test_attach_targets_and_metadata():
    vlm = VLM(VlmConfig(layers=2, model_dim=32, heads=2, ffn_dim=64), seed=0)
    adapters = lora.attach(vlm, np.random.default_rng(0), 8, 16.0, ("q", "k", "v", "o", "fc1", "fc2"))
    assert len(adapters) == 2 * 6
    meta = lora.lora_metadata(vlm)
    assert len(meta) == 12 and all(m.tolist() == [8.0, 16.0] for m in meta.values())
    assert "blocks.0.attn.q.lora.meta" in meta
    with pytest.raises(ContractError):
        lora.attach(vlm, np.random.default_rng(0), 8, 16.0, ("q",))
    assert lora.merge_all(vlm) == 12
    assert lora.lora_metadata(vlm) == {}
