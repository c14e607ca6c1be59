"""Dense f32 tensors with a define-by-run reverse-mode gradient tape.

Operations executed inside an active :class:`GradTape` are recorded in
execution order; :meth:`GradTape.backward` replays them in exact reverse.
Outside a tape every op is a plain numpy computation, which is what the
samplers and evaluators use.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from kontext.errors import ContractError, DimensionError

DTYPE = np.float32


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the tensor dtype (gradient checks run in float64)."""
    global DTYPE
    old, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = old

# Names of every differentiable op. The gradient-check suite iterates this.
REGISTERED_OPS: list[str] = []


def _register(name: str) -> None:
    if name not in REGISTERED_OPS:
        REGISTERED_OPS.append(name)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        # True for leaves with requires_grad and for outputs of recorded ops.
        self._tracked = self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


_state = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records ops in execution order while active (``with GradTape() as tape``)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        output._tracked = True
        self.nodes.append(_Node(kind, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients into ``.grad`` of every requires_grad leaf.

        Returns ``{leaf: grad}``. Leaves listed in ``params`` that the loss
        does not reach get zero gradients.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t._tracked:
                    continue
                if gi.shape != t.data.shape:
                    gi = _unbroadcast(gi, t.data.shape)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t.requires_grad:
                    leaves[key] = t
        # leaf gradients are whatever reached them after the full sweep
        out: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(DTYPE, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
            out[t] = t.grad
        if loss.requires_grad and id(loss) in grads:
            loss.grad = grads[id(loss)]
            out[loss] = loss.grad
        if params is not None:
            for p in params:
                if p.requires_grad and p not in out:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    out[p] = p.grad
        return out


def _tracking(*ts) -> GradTape | None:
    tape = _active_tape()
    if tape is None:
        return None
    for t in ts:
        if isinstance(t, Tensor) and t._tracked:
            return tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    tape = _tracking(a, b)
    if tape:
        tape.record("add", (a, b), out, lambda g: (g, g))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    tape = _tracking(a, b)
    if tape:
        tape.record("sub", (a, b), out, lambda g: (g, -g))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    tape = _tracking(a, b)
    if tape:
        tape.record(
            "mul",
            (a, b),
            out,
            lambda g: (g * bd if a._tracked else None, g * ad if b._tracked else None),
        )
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = Tensor(ad / bd)
    tape = _tracking(a, b)
    if tape:
        tape.record(
            "div",
            (a, b),
            out,
            lambda g: (g / bd if a._tracked else None, -g * ad / (bd * bd) if b._tracked else None),
        )
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    tape = _tracking(a)
    if tape:
        tape.record("neg", (a,), out, lambda g: (-g,))
    return out


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = Tensor(ad * ad if p == 2 else ad**p)
    tape = _tracking(a)
    if tape:
        tape.record("power", (a,), out, lambda g: (g * p * (ad if p == 2 else ad ** (p - 1)),))
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    tape = _tracking(a)
    if tape:
        tape.record("exp", (a,), out, lambda g: (g * y,))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    tape = _tracking(a)
    if tape:
        tape.record("tanh", (a,), out, lambda g: (g * (1.0 - y * y),))
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    out = Tensor(x * s)
    tape = _tracking(a)
    if tape:
        tape.record("silu", (a,), out, lambda g: (g * (s * (1.0 + x * (1.0 - s))),))
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    u = _GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + th))
    tape = _tracking(a)
    if tape:

        def back(g):
            du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

        tape.record("gelu", (a,), out, back)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    tape = _tracking(a)
    if tape:
        shape = a.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        tape.record("sum", (a,), out, back)
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    tape = _tracking(a)
    if tape:
        tape.record("reshape", (a,), out, lambda g: (g.reshape(old),))
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    tape = _tracking(a)
    if tape:
        tape.record("transpose", (a,), out, lambda g: (g.transpose(inv),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _tracking(*tensors)
    if tape:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def back(g):
            return tuple(np.split(g, splits, axis=axis))

        tape.record("concat", tuple(tensors), out, back)
    return out


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[index])
    tape = _tracking(a)
    if tape:
        shape = a.shape

        def back(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, index, g) if _has_fancy(index) else full.__setitem__(index, g)
            return (full,)

        tape.record("getitem", (a,), out, back)
    return out


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` (vocab × d) at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(f"embedding ids out of range [0, {weight.shape[0]})")
    out = Tensor(weight.data[ids])
    tape = _tracking(weight)
    if tape:

        def back(g):
            full = np.zeros_like(weight.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
            return (full,)

        tape.record("embedding", (weight,), out, back)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)
    tape = _tracking(a, b)
    if tape:

        def back(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a._tracked else None
            gb = np.swapaxes(ad, -1, -2) @ g if b._tracked else None
            return (ga, gb)

        tape.record("matmul", (a, b), out, back)
    return out


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (d_out × d_in)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])  # one GEMM instead of a batched loop
    y = (x2 @ wd.T).reshape(*lead, wd.shape[0])
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    tape = _tracking(*inputs)
    if tape:

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g2 @ wd).reshape(*lead, wd.shape[1]) if x._tracked else None
            gw = g2.T @ x2 if weight._tracked else None
            if bias is None:
                return (gx, gw)
            gb = g2.sum(axis=0) if bias._tracked else None
            return (gx, gw, gb)

        tape.record("linear", inputs, out, back)
    return out


# ---------------------------------------------------------------------------
# normalization, attention, losses


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. NaN inputs propagate to NaN outputs."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    tape = _tracking(x)
    if tape:
        tape.record("softmax", (x,), out, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))
    return out


def rms_norm(x, gamma: Tensor | None, eps: float = 1e-6) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    ms = (xd * xd).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    n = xd * r
    gd = gamma.data if gamma is not None else None
    out = Tensor(n * gd if gd is not None else n)
    inputs = (x,) if gamma is None else (x, gamma)
    tape = _tracking(*inputs)
    if tape:
        d = xd.shape[-1]

        def back(g):
            gn = g * gd if gd is not None else g
            gx = r * (gn - n * (gn * n).sum(axis=-1, keepdims=True) / d)
            if gamma is None:
                return (gx,)
            ggam = (g * n).reshape(-1, d).sum(axis=0) if gamma._tracked else None
            return (gx, ggam)

        tape.record("rms_norm", inputs, out, back)
    return out


def layer_norm(x, eps: float = 1e-6) -> Tensor:
    """Affine-free layer norm (scale/shift come from adaptive modulation)."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    n = xc * r
    out = Tensor(n)
    tape = _tracking(x)
    if tape:

        def back(g):
            gm = g.mean(axis=-1, keepdims=True)
            gnm = (g * n).mean(axis=-1, keepdims=True)
            return (r * (g - gm - n * gnm),)

        tape.record("layer_norm", (x,), out, back)
    return out


def attention(q, k, v, mask: np.ndarray | None = None, return_probs: bool = False):
    """Scaled dot-product attention over (..., L, d) inputs.

    ``mask`` is additive and broadcasts against the (..., Lq, Lk) scores.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if mask is not None:
        s = s + mask
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = Tensor(p @ vd)
    tape = _tracking(q, k, v)
    if tape:

        def back(g):
            gv = np.swapaxes(p, -1, -2) @ g
            gp = g @ np.swapaxes(vd, -1, -2)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            gq = gs @ kd
            gk = np.swapaxes(gs, -1, -2) @ qd
            return (gq, gk, gv)

        tape.record("attention", (q, k, v), out, back)
    return (out, p) if return_probs else out


def rope_rotate(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent pairs (x[2k], x[2k+1]) by angles given through cos/sin.

    ``cos``/``sin`` have last dim head_dim/2 and broadcast against x[..., ::2].
    """
    x = as_tensor(x)
    xd = x.data
    xe, xo = xd[..., 0::2], xd[..., 1::2]
    y = np.empty(xd.shape, dtype=DTYPE)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos
    out = Tensor(y)
    tape = _tracking(x)
    if tape:

        def back(g):
            ge, go = g[..., 0::2], g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * cos + go * sin
            gx[..., 1::2] = -ge * sin + go * cos
            return (gx,)

        tape.record("rope_rotate", (x,), out, back)
    return out


def mse(pred, target, weight: np.ndarray | None = None) -> Tensor:
    """Mean squared error; optional per-element weight (broadcast) normalizes by its sum."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    if weight is None:
        n = diff.size
        val = (diff * diff).sum() / n
        w = None
    else:
        w = np.broadcast_to(weight, diff.shape).astype(DTYPE)
        n = max(float(w.sum()), 1.0)
        val = (w * diff * diff).sum() / n
    out = Tensor(np.asarray(val, dtype=DTYPE))
    tape = _tracking(pred, target)
    if tape:

        def back(g):
            gd = 2.0 * diff / n * g
            if w is not None:
                gd = gd * w
            return (gd if pred._tracked else None, -gd if target._tracked else None)

        tape.record("mse", (pred, target), out, back)
    return out


def cross_entropy(logits, targets, mask: np.ndarray | None = None) -> Tensor:
    """Mean token cross entropy; logits (..., V), integer targets (...)."""
    logits = as_tensor(logits)
    ld = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    z = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    m = np.ones_like(nll) if mask is None else np.asarray(mask, dtype=DTYPE)
    n = max(float(m.sum()), 1.0)
    out = Tensor(np.asarray((nll * m).sum() / n, dtype=DTYPE))
    tape = _tracking(logits)
    if tape:

        def back(g):
            p = np.exp(logp)
            np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
            return (p * (m[..., None] / n) * g,)

        tape.record("cross_entropy", (logits,), out, back)
    return out


for _name in (
    "add", "sub", "mul", "div", "neg", "power", "exp", "tanh", "silu", "gelu",
    "sum", "reshape", "transpose", "concat", "getitem", "embedding",
    "matmul", "linear", "softmax", "rms_norm", "layer_norm", "attention",
    "rope_rotate", "mse", "cross_entropy",
):  # fmt: skip
    _register(_name)
