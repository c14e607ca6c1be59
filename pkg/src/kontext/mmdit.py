"""Joint-attention diffusion transformer over [T ; Q ; noisy latent ; conditioning latents].

Two streams share one attention per block: the context stream (connector
outputs) and the image stream (noisy target tokens followed by the clean
latents of any source/reference images). Each stream has its own projections
and AdaLN-Zero modulation driven by the timestep. Velocity is read only at
the target tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from kontext import autodiff as ad
from kontext.autodiff import Tensor
from kontext.errors import ConfigError, ContractError
from kontext.nn import MLP, Linear, Module, param, timestep_embedding
from kontext.rope import KONTEXT, SOURCE, TARGET, TEXT, RopeFreqs, TokenRole, coords_for_role
from kontext.vlm import NEG_INF, KontextBundle

LATENT_CHANNELS = 16
RATIO_BOUNDS = (8.0, 12.0)


@dataclass(frozen=True)
class DiffusionConfig:
    scale: str = "head"
    layers: int = 2
    heads: int = 4
    dim: int = 64
    ffn_dim: int = 256
    latent_channels: int = LATENT_CHANNELS
    t_freq_dim: int = 64
    rope_theta: float = 10000.0
    max_ref_images: int = 2

    def __post_init__(self):
        if self.scale not in ("head", "full"):
            raise ConfigError(f"scale must be 'head' or 'full', got {self.scale!r}")
        if self.layers < 1:
            raise ConfigError("diffusion model needs at least one layer")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if (self.dim // self.heads) % 4:
            raise ConfigError("head_dim must be divisible by 4 for 2D rotary pairs")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def rope(self) -> RopeFreqs:
        return RopeFreqs(self.head_dim, self.rope_theta)


HEAD = DiffusionConfig("head", layers=2, heads=4, dim=64, ffn_dim=256)
FULL = DiffusionConfig("full", layers=5, heads=4, dim=128, ffn_dim=512)


# ---------------------------------------------------------------------------
# sequence assembly


@dataclass
class ConditioningSequence:
    ctx: Tensor  # (B, Lc, d) text then kontext
    latents: np.ndarray  # (B, Li, C) noisy target tokens then conditioning tokens
    coords: np.ndarray  # (B, Lc + Li, 2)
    key_mask: np.ndarray  # (B, Lc + Li) bool
    roles: list[list[TokenRole]]  # per sample, per token
    offsets: dict[str, tuple[int, int]] = field(default_factory=dict)
    target_hw: tuple[int, int] = (8, 8)

    @property
    def n_target(self) -> int:
        return self.target_hw[0] * self.target_hw[1]

    @property
    def length(self) -> int:
        return self.coords.shape[1]


RoleSpec = TokenRole | Sequence[TokenRole]


def _roles_per_sample(role: RoleSpec, b: int) -> list[TokenRole]:
    if isinstance(role, TokenRole):
        return [role] * b
    roles = list(role)
    if len(roles) != b:
        raise ContractError(f"got {len(roles)} roles for a batch of {b}")
    return roles


def _check_cond_roles(roles: list[TokenRole], max_refs: int) -> None:
    if any(r.kind not in ("source", "reference") for r in roles):
        raise ContractError(f"conditioning images must be source or reference, got {[str(r) for r in roles]}")
    if sum(r.kind == "source" for r in roles) > 1:
        raise ContractError("at most one source image per sample")
    refs = [r.index for r in roles if r.kind == "reference"]
    if len(refs) != len(set(refs)):
        raise ContractError(f"duplicate reference index in {refs}")
    if len(roles) > max_refs:
        raise ContractError(f"{len(roles)} conditioning images exceed the maximum of {max_refs}")


def assemble(
    bundle: KontextBundle | None,
    noisy: np.ndarray,
    cond_images: Sequence[tuple[np.ndarray, RoleSpec]] = (),
    ctx: Tensor | None = None,
    ctx_mask: np.ndarray | None = None,
    rope_mode: str = "shifted",
    max_refs: int = 2,
) -> ConditioningSequence:
    """Build the in-context sequence; ``noisy`` and conditioning latents are (B, h, w, C).

    ``rope_mode="collapsed"`` places every conditioning latent on the target
    grid (the no-shifted-RoPE ablation).
    """
    noisy = np.asarray(noisy, dtype=np.float32)
    b, h, w, c = noisy.shape
    if ctx is None:
        ctx, ctx_mask = bundle.tokens, bundle.mask
        n_text, n_k = bundle.n_text, bundle.K
    else:
        n_text, n_k = ctx.shape[1], 0
    if ctx_mask is None:
        ctx_mask = np.ones(ctx.shape[:2], dtype=bool)
    if rope_mode not in ("shifted", "collapsed"):
        raise ConfigError(f"unknown rope_mode {rope_mode!r}")
    per_sample = [_roles_per_sample(r, b) for _, r in cond_images]
    for s in range(b):
        _check_cond_roles([roles[s] for roles in per_sample], max_refs)

    lat_parts = [noisy.reshape(b, h * w, c)]
    target_grid = coords_for_role(h, w, TARGET).coords
    coord_parts = [np.zeros((b, n_text + n_k, 2), np.int64), np.broadcast_to(target_grid, (b, h * w, 2))]
    roles = [[TEXT] * n_text + [KONTEXT] * n_k + [TARGET] * (h * w) for _ in range(b)]
    offsets = {"text": (0, n_text), "kontext": (n_text, n_text + n_k)}
    pos = n_text + n_k
    offsets["target"] = (pos, pos + h * w)
    pos += h * w
    for k, ((lat, _), slot_roles) in enumerate(zip(cond_images, per_sample)):
        lat = np.asarray(lat, dtype=np.float32)
        ch, cw = lat.shape[1:3]
        lat_parts.append(lat.reshape(b, ch * cw, c))
        grids = []
        for s in range(b):
            role = slot_roles[s]
            grid_role = TARGET if rope_mode == "collapsed" else role
            grids.append(coords_for_role(ch, cw, grid_role).coords)
            roles[s].extend([role] * (ch * cw))
        coord_parts.append(np.stack(grids))
        offsets[f"cond{k}"] = (pos, pos + ch * cw)
        pos += ch * cw
    latents = np.concatenate(lat_parts, axis=1)
    coords = np.concatenate(coord_parts, axis=1)
    key_mask = np.concatenate([np.asarray(ctx_mask, bool), np.ones((b, latents.shape[1]), bool)], axis=1)
    return ConditioningSequence(ctx, latents, coords, key_mask, roles, offsets, (h, w))


# ---------------------------------------------------------------------------
# model


class StreamParams(Module):
    """Per-stream weights of one joint block."""

    def __init__(self, rng, dim: int, ffn: int):
        self.mod = Linear(rng, dim, 6 * dim, std=0.0)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)
        self.mlp = MLP(rng, dim, ffn, dim)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), ad.add(scale, 1.0)), shift)


class JointBlock(Module):
    def __init__(self, rng, dim: int, heads: int, ffn: int):
        self.ctx = StreamParams(rng, dim, ffn)
        self.img = StreamParams(rng, dim, ffn)
        self._heads = heads

    def __call__(self, xc: Tensor, xi: Tensor, cond: Tensor, cos, sin, mask) -> tuple[Tensor, Tensor]:
        b, nc, d = xc.shape
        ni = xi.shape[1]
        h = self._heads
        dh = d // h
        streams = []
        qs, ks, vs = [], [], []
        for x, p in ((xc, self.ctx), (xi, self.img)):
            mod = ad.reshape(p.mod(cond), (b, 6, 1, d))
            chunks = [mod[:, i] for i in range(6)]
            hmod = _modulate(x, chunks[0], chunks[1])
            n = x.shape[1]

            def heads_of(t, n=n):
                return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

            qs.append(heads_of(p.q(hmod)))
            ks.append(heads_of(p.k(hmod)))
            vs.append(heads_of(p.v(hmod)))
            streams.append((x, p, chunks))
        q = ad.rms_norm(ad.concat(qs, axis=2), None)
        k = ad.rms_norm(ad.concat(ks, axis=2), None)
        v = ad.concat(vs, axis=2)
        q = ad.rope_rotate(q, cos, sin)
        k = ad.rope_rotate(k, cos, sin)
        att = ad.attention(q, k, v, mask)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, nc + ni, d))
        outs = []
        for (x, p, ch), sl in zip(streams, (slice(0, nc), slice(nc, nc + ni))):
            a = p.o(att[:, sl])
            x = ad.add(x, ad.mul(a, ch[2]))
            m = p.mlp(_modulate(x, ch[3], ch[4]))
            outs.append(ad.add(x, ad.mul(m, ch[5])))
        return outs[0], outs[1]


class MMDiT(Module):
    def __init__(self, cfg: DiffusionConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = cfg.dim
        self.latent_in = Linear(rng, cfg.latent_channels, d)
        self.null_ctx = param(rng, (1, 1, d), 0.02)
        self.t_mlp = MLP(rng, cfg.t_freq_dim, d, d, act="silu")
        self.blocks = [JointBlock(rng, d, cfg.heads, cfg.ffn_dim) for _ in range(cfg.layers)]
        self.final_mod = Linear(rng, d, 2 * d, std=0.0)
        self.out = Linear(rng, d, cfg.latent_channels, std=0.0)
        self._cfg = cfg

    @property
    def cfg(self) -> DiffusionConfig:
        return self._cfg

    def __call__(self, seq: ConditioningSequence, t, return_attention: bool = False) -> Tensor:
        """Velocity at target tokens, shape (B, h*w, C)."""
        cfg = self._cfg
        t = np.broadcast_to(np.asarray(t, dtype=np.float32).reshape(-1), (seq.latents.shape[0],))
        if np.any(t < 0) or np.any(t > 1):
            raise ContractError("t must lie in [0, 1]")
        if seq.ctx.shape[-1] != cfg.dim:
            raise ContractError(f"context width {seq.ctx.shape[-1]} != model dim {cfg.dim}")
        b = seq.latents.shape[0]
        temb = self.t_mlp(timestep_embedding(t, cfg.t_freq_dim))
        cond = ad.silu(temb)
        xc = seq.ctx
        xi = self.latent_in(seq.latents)
        cos, sin = cfg.rope.cos_sin(seq.coords)
        cos, sin = cos[:, None], sin[:, None]
        mask = np.where(seq.key_mask, 0.0, NEG_INF).astype(np.float32)[:, None, None, :]
        for blk in self.blocks:
            xc, xi = blk(xc, xi, cond, cos, sin, mask)
        fm = ad.reshape(self.final_mod(cond), (b, 2, 1, cfg.dim))
        tgt = xi[:, : seq.n_target]
        return self.out(_modulate(tgt, fm[:, 0], fm[:, 1]))

    def null_context(self, b: int, n: int) -> Tensor:
        return ad.mul(self.null_ctx, np.ones((b, n, 1), np.float32))


def build_model(cfg: DiffusionConfig, seed: int = 0) -> MMDiT:
    return MMDiT(cfg, seed)


def param_ratio(head: DiffusionConfig = HEAD, full: DiffusionConfig = FULL) -> float:
    """Full/Head parameter-count ratio; raises ConfigError outside [8, 12]."""
    ratio = MMDiT(full).num_params() / MMDiT(head).num_params()
    if not RATIO_BOUNDS[0] <= ratio <= RATIO_BOUNDS[1]:
        raise ConfigError(f"Full/Head parameter ratio {ratio:.2f} outside {RATIO_BOUNDS}")
    return ratio


# ---------------------------------------------------------------------------
# objective and sampler


def latent_tokens(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    return x.reshape(b, h * w, c)


def flow_loss(model: MMDiT, x0: np.ndarray, build_seq, rng: np.random.Generator, predictor=None) -> Tensor:
    """Rectified-flow velocity matching with t ~ U(0, 1).

    ``build_seq(x_t)`` returns the ConditioningSequence for the noisy latent.
    ``predictor`` (optional) replaces the model; used for oracle injection.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    b = x0.shape[0]
    t = rng.uniform(0.0, 1.0, size=b).astype(np.float32)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    tb = t[:, None, None, None]
    xt = (1.0 - tb) * x0 + tb * eps
    target = latent_tokens(eps - x0)
    if predictor is not None:
        v = ad.as_tensor(predictor(xt, t, eps, x0))
    else:
        v = model(build_seq(xt), t)
    return ad.mse(v, target)


def sample(
    velocity,
    shape: tuple[int, ...],
    steps: int,
    seed: int,
    cfg_scale: float = 1.0,
    uncond_velocity=None,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Euler integration of dx/dt = v from t=1 (noise) to t=0.

    ``velocity(x, t) -> (B, h, w, C)``. With ``cfg_scale != 1`` the guided
    velocity is ``v_u + s·(v_c − v_u)``.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    x = np.random.default_rng(seed).standard_normal(shape).astype(np.float32) if x_init is None else x_init.astype(np.float32)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        v = velocity(x, t)
        if cfg_scale != 1.0:
            vu = uncond_velocity(x, t)
            v = vu + cfg_scale * (v - vu)
        x = x - dt * v
    return x


def velocity_fn(model: MMDiT, make_seq):
    """Adapter from a model + sequence builder to the sampler's ``velocity(x, t)``."""

    def fn(x: np.ndarray, t: float) -> np.ndarray:
        seq = make_seq(x)
        v = model(seq, np.full(x.shape[0], t, np.float32)).data
        return v.reshape(x.shape)

    return fn
