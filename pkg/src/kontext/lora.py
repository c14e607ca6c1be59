"""Low-rank adapters: attach to linears, train, merge into the base weight, unmerge."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kontext import autodiff as ad
from kontext.autodiff import Tensor
from kontext.errors import ContractError, DimensionError


@dataclass(eq=False)
class LoraAdapter:
    A: Tensor  # rank x d_in
    B: Tensor  # d_out x rank
    rank: int
    alpha: float
    merged: bool = False

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Dense (alpha/r)·B·A, computed in float64."""
        return self.scale * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int, rank: int = 8, alpha: float = 16.0) -> "LoraAdapter":
        if rank < 1:
            raise ContractError(f"LoRA rank must be >= 1, got {rank}")
        A = Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)).astype(np.float32), requires_grad=True)
        B = Tensor(np.zeros((d_out, rank), dtype=np.float32), requires_grad=True)
        return cls(A, B, rank, float(alpha))


def lora_forward(x, weight: Tensor, adapter: LoraAdapter, bias: Tensor | None = None) -> Tensor:
    """y = x·Wᵀ (+ b) + (alpha/r)·x·Aᵀ·Bᵀ"""
    if adapter.merged:
        raise ContractError("adapter is merged into its base weight; forward through it would double count")
    if adapter.A.shape[1] != weight.shape[1] or adapter.B.shape[0] != weight.shape[0]:
        raise DimensionError(f"adapter A{adapter.A.shape}/B{adapter.B.shape} incompatible with weight {weight.shape}")
    base = ad.linear(x, weight, bias)
    low = ad.linear(ad.linear(x, adapter.A), adapter.B)
    return ad.add(base, ad.mul(low, adapter.scale))


def merge(adapter: LoraAdapter, weight: Tensor) -> Tensor:
    if adapter.merged:
        raise ContractError("adapter already merged")
    weight.data = (weight.data.astype(np.float64) + adapter.delta()).astype(np.float32)
    adapter.merged = True
    return weight


def unmerge(adapter: LoraAdapter, weight: Tensor) -> Tensor:
    if not adapter.merged:
        raise ContractError("adapter is not merged")
    weight.data = (weight.data.astype(np.float64) - adapter.delta()).astype(np.float32)
    adapter.merged = False
    return weight


def lora_linears(module, include: tuple[str, ...]) -> list[tuple[str, object]]:
    """Named Linear submodules whose last name component is in ``include``."""
    from kontext.nn import Linear

    return [(n, m) for n, m in module.named_modules() if isinstance(m, Linear) and n.rsplit(".", 1)[-1] in include]


def attach(module, rng: np.random.Generator, rank: int, alpha: float, include: tuple[str, ...]) -> list[LoraAdapter]:
    """Attach fresh adapters to matching linears; returns them in attachment order."""
    adapters = []
    for _, lin in lora_linears(module, include):
        if lin.lora is not None:
            raise ContractError("linear already carries an adapter")
        lin.lora = LoraAdapter.create(rng, lin.d_in, lin.d_out, rank, alpha)
        adapters.append(lin.lora)
    return adapters


def merge_all(module) -> int:
    """Merge every adapter in ``module`` into its base weight and detach it."""
    from kontext.nn import Linear

    n = 0
    for m in module.modules():
        if isinstance(m, Linear) and m.lora is not None:
            merge(m.lora, m.weight)
            m.lora = None
            n += 1
    return n


def lora_metadata(module) -> dict[str, np.ndarray]:
    """Checkpoint entries ``<layer>.lora.meta`` = [rank, alpha] for each attached adapter."""
    from kontext.nn import Linear

    return {
        f"{name}.lora.meta": np.array([m.lora.rank, m.lora.alpha], dtype=np.float32)
        for name, m in module.named_modules()
        if isinstance(m, Linear) and m.lora is not None
    }
