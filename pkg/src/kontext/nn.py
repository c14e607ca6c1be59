"""Small module system over :mod:`kontext.autodiff`: parameter naming, linears, MLPs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from kontext import autodiff as ad
from kontext.autodiff import Tensor
from kontext.errors import ContractError


class Module:
    """Parameters are Tensor attributes; children are Module attributes or lists of them."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for m in val:
                    yield from m.modules()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_modules(f"{prefix}{key}.{i}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, entries: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(entries))
            if missing:
                raise ContractError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name not in entries:
                continue
            arr = entries[name]
            if arr.shape != p.data.shape:
                raise ContractError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = np.array(arr, dtype=np.float32)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p._tracked = flag
            if not flag:
                p.grad = None

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        self.weight = param(rng, (d_out, d_in), std if std is not None else d_in**-0.5)
        self.bias = zeros((d_out,)) if bias else None
        self.lora = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        if self.lora is not None and not self.lora.merged:
            from kontext.lora import lora_forward

            return lora_forward(x, self.weight, self.lora, self.bias)
        return ad.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias
        if self.lora is not None:
            yield f"{prefix}lora.A", self.lora.A
            yield f"{prefix}lora.B", self.lora.B


class MLP(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int, act: str = "gelu", out_std: float | None = None):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out, std=out_std)
        self._act = ad.gelu if act == "gelu" else ad.silu

    def __call__(self, x) -> Tensor:
        return self.fc2(self._act(self.fc1(x)))


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = ones((dim,))
        self._eps = eps

    def __call__(self, x) -> Tensor:
        return ad.rms_norm(x, self.gamma, self._eps)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of t in [0, 1] (scaled by 1000), shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1) * 1000.0
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(np.float32)
