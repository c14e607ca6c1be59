"""Finite-difference gradient checks for every registered autodiff op."""

from __future__ import annotations

from typing import Callable

import numpy as np

from kontext import autodiff as ad
from kontext.autodiff import GradTape, Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator, h: float = 1e-3) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(fn(*inputs) * R)`` for a fixed random R, so
    every output element contributes. Runs in float64.
    """
    with ad.precision(np.float64):
        probe = None

        def scalar(arrays) -> float:
            out = fn(*[Tensor(a) for a in arrays])
            return float((out.data * probe).sum())

        leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
        with GradTape() as tape:
            out = fn(*leaves)
            probe = rng.standard_normal(out.shape)
            loss = ad.sum_(ad.mul(out, probe))
        tape.backward(loss, leaves)
        worst = 0.0
        for i, leaf in enumerate(leaves):
            num = np.zeros_like(inputs[i], dtype=np.float64)
            flat = num.reshape(-1)
            for j in range(flat.size):
                plus = [a.copy() for a in inputs]
                minus = [a.copy() for a in inputs]
                plus[i].reshape(-1)[j] += h
                minus[i].reshape(-1)[j] -= h
                flat[j] = (scalar(plus) - scalar(minus)) / (2 * h)
            worst = max(worst, relative_error(leaf.grad.astype(np.float64), num))
        return worst


_MSE_WEIGHT = np.array([1.0, 0.5, 0.0, 2.0])


def _away_from_zero(rng, shape, lo=0.5):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random instance per registered op; call again for a fresh instance."""
    n = rng.standard_normal
    L, d = int(rng.integers(2, 5)), 2 * int(rng.integers(1, 4))
    ids = rng.integers(0, 5, size=(2, 3))
    idx = rng.integers(0, 4, size=3)
    mask = np.where(rng.random((1, L, L)) < 0.3, -1e9, 0.0)
    mask[..., 0] = 0.0  # keep every row attending somewhere
    theta = rng.uniform(-3, 3, size=(L, d // 2))
    targets = rng.integers(0, 5, size=(2, 3))
    cases = {
        "add": (ad.add, [n((3, 4)), n((4,))]),
        "sub": (ad.sub, [n((3, 4)), n((3, 1))]),
        "mul": (ad.mul, [n((2, 3, 4)), n((3, 4))]),
        "div": (ad.div, [n((3, 4)), _away_from_zero(rng, (3, 4))]),
        "neg": (ad.neg, [n((3, 4))]),
        "power": (lambda x: ad.power(x, 3.0), [n((3, 4))]),
        "exp": (ad.exp, [n((3, 4))]),
        "tanh": (ad.tanh, [n((3, 4))]),
        "silu": (ad.silu, [n((3, 4))]),
        "gelu": (ad.gelu, [n((3, 4))]),
        "sum": (lambda x: ad.sum_(x, axis=1, keepdims=True), [n((3, 4, 2))]),
        "mean": (lambda x: ad.mean(x, axis=0), [n((3, 4))]),
        "reshape": (lambda x: ad.reshape(x, (4, 3)), [n((3, 4))]),
        "transpose": (lambda x: ad.transpose(x, (2, 0, 1)), [n((2, 3, 4))]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [n((2, 3)), n((2, 2))]),
        "getitem": (lambda x: ad.add(ad.getitem(x, (slice(1, 3), slice(None))), ad.getitem(x, idx)[:2]), [n((4, 3))]),
        "embedding": (lambda w: ad.embedding(w, ids), [n((5, 3))]),
        "matmul": (ad.matmul, [n((2, 3, 4)), n((4, 2))]),
        "linear": (ad.linear, [n((2, 3, 4)), n((5, 4)), n((5,))]),
        "softmax": (lambda x: ad.softmax(x, axis=-1), [n((3, 5))]),
        "rms_norm": (ad.rms_norm, [n((3, 6)), n((6,))]),
        "layer_norm": (ad.layer_norm, [n((3, 6))]),
        "attention": (lambda q, k, v: ad.attention(q, k, v, mask), [n((2, L, d)), n((2, L, d)), n((2, L, d))]),
        "rope_rotate": (lambda x: ad.rope_rotate(x, np.cos(theta), np.sin(theta)), [n((2, L, d))]),
        "mse": (lambda p, t: ad.mse(p, t, _MSE_WEIGHT), [n((3, 4)), n((3, 4))]),
        "cross_entropy": (lambda z: ad.cross_entropy(z, targets, targets > 0), [n((2, 3, 5))]),
    }
    return cases


def check_all(instances: int = 20, seed: int = 0, h: float = 1e-3) -> dict[str, float]:
    """Worst relative error per registered op over ``instances`` random instances."""
    worst: dict[str, float] = {}
    for k in range(instances):
        rng = np.random.default_rng([seed, k])
        for name, (fn, inputs) in op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check(fn, inputs, rng, h))
    return worst


def check_params(
    loss_fn: Callable[[], Tensor],
    params: list[Tensor],
    rng: np.random.Generator,
    per_tensor: int = 8,
    h: float = 1e-3,
) -> float:
    """Worst relative error over sampled entries of every parameter tensor.

    Call inside ``ad.precision(np.float64)`` with float64 parameters.
    """
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss, params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        num = np.empty(len(picks))
        for k, j in enumerate(picks):
            old = flat[j]
            flat[j] = old + h
            up = loss_fn().item()
            flat[j] = old - h
            down = loss_fn().item()
            flat[j] = old
            num[k] = (up - down) / (2 * h)
        worst = max(worst, relative_error(p.grad.reshape(-1)[picks].astype(np.float64), num))
    return worst
