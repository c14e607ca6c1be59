"""Small vision-language transformer with learnable kontext queries, plus the connector.

The sequence is ``[caption ; image patches (per slot) ; queries]`` under full
attention. Caption hidden states become the text stream T and query hidden
states the kontext stream Q; the two-layer connector maps both into the
diffusion model's width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kontext import autodiff as ad
from kontext.autodiff import Tensor
from kontext.errors import ContractError, DimensionError, TokenizerError
from kontext.nn import MLP, Linear, Module, RMSNorm, param

NEG_INF = np.float32(-1e9)


class Tokenizer:
    def __init__(self, vocab: list[str]):
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id = self.index["<pad>"]
        self.bos_id = self.index["<bos>"]
        self.eos_id = self.index["<eos>"]

    def __len__(self) -> int:
        return len(self.vocab)

    @classmethod
    def from_file(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    @classmethod
    def default(cls) -> "Tokenizer":
        from kontext.toyworld import vocabulary

        return cls(vocabulary())

    def encode(self, caption: str) -> list[int]:
        words = caption.split()
        unknown = sorted({w for w in words if w not in self.index})
        if unknown:
            raise TokenizerError(f"caption has tokens outside the grammar: {unknown}")
        return [self.index[w] for w in words]

    def decode(self, ids) -> str:
        return " ".join(self.vocab[i] for i in ids if self.vocab[i] not in ("<pad>", "<bos>", "<eos>"))

    def batch(self, captions: list[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded ids (B, max_len) and a validity mask."""
        ids = np.full((len(captions), max_len), self.pad_id, dtype=np.int64)
        mask = np.zeros((len(captions), max_len), dtype=bool)
        for b, cap in enumerate(captions):
            toks = self.encode(cap)
            if len(toks) > max_len:
                raise ContractError(f"caption longer than {max_len} tokens: {cap!r}")
            ids[b, : len(toks)] = toks
            mask[b, : len(toks)] = True
        return ids, mask


@dataclass
class VlmConfig:
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    vocab_size: int = 48
    K: int = 16
    max_ref_images: int = 2
    max_caption: int = 12
    patch: int = 8
    image_size: int = 64

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ContractError("model_dim must be divisible by heads")
        if self.K < 1:
            raise ContractError("K must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2


class SelfAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim, std=dim**-0.5 / 2)
        self._heads = heads

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        b, n, d = x.shape
        h = self._heads

        def split(t):
            return ad.transpose(ad.reshape(t, (b, n, h, d // h)), (0, 2, 1, 3))

        out = ad.attention(split(self.q(x)), split(self.k(x)), split(self.v(x)), mask)
        return self.o(ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, n, d)))


class Block(Module):
    def __init__(self, rng, dim: int, heads: int, ffn: int):
        self.norm1 = RMSNorm(dim)
        self.attn = SelfAttention(rng, dim, heads)
        self.norm2 = RMSNorm(dim)
        self.mlp = MLP(rng, dim, ffn, dim, out_std=ffn**-0.5 / 2)

    def __call__(self, x: Tensor, mask) -> Tensor:
        x = ad.add(x, self.attn(self.norm1(x), mask))
        return ad.add(x, self.mlp(self.norm2(x)))


LORA_TARGETS = ("q", "k", "v", "o", "fc1", "fc2")


class QueryTokens(Module):
    """The K learnable kontext queries; kept outside the VLM's own weights."""

    def __init__(self, rng, K: int, dim: int):
        self.tokens = param(rng, (K, dim), 0.02)

    @property
    def K(self) -> int:
        return self.tokens.shape[0]


class VLM(Module):
    def __init__(self, cfg: VlmConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d = cfg.model_dim
        self.token_emb = param(rng, (cfg.vocab_size, d), 0.02)
        self.cap_pos = param(rng, (cfg.max_caption + 2, d), 0.02)
        self.patch_proj = Linear(rng, cfg.patch * cfg.patch * 3, d)
        self.img_pos = param(rng, (cfg.n_patches, d), 0.02)
        self.segment = param(rng, (cfg.max_ref_images, d), 0.02)
        self.query_pos = param(rng, (cfg.K, d), 0.02)
        self.blocks = [Block(rng, d, cfg.heads, cfg.ffn_dim) for _ in range(cfg.layers)]
        self.norm = RMSNorm(d)
        self._cfg = cfg

    @property
    def cfg(self) -> VlmConfig:
        return self._cfg

    def encode_image_patches(self, img: np.ndarray, slot: int = 1) -> Tensor:
        """(B, H, W, 3) or (H, W, 3) image -> (B, n_patches, d) tokens for image slot ``slot`` (1-based)."""
        from kontext.codec import patchify

        cfg = self._cfg
        img = np.asarray(img, dtype=np.float32)
        single = img.ndim == 3
        if single:
            img = img[None]
        h, w = img.shape[1:3]
        if h % cfg.patch or w % cfg.patch:
            raise ContractError(f"image {h}x{w} not divisible by patch {cfg.patch}")
        if (h // cfg.patch) * (w // cfg.patch) != cfg.n_patches:
            raise ContractError(f"image {h}x{w} does not match the configured {cfg.image_size}px grid")
        if not 1 <= slot <= cfg.max_ref_images:
            raise ContractError(f"image slot {slot} outside [1, {cfg.max_ref_images}]")
        p = patchify(img, cfg.patch).reshape(img.shape[0], -1, cfg.patch * cfg.patch * 3)
        tok = ad.add(ad.add(self.patch_proj(p), self.img_pos), self.segment[slot - 1])
        return ad.getitem(tok, 0) if single else tok

    def _run(self, x: Tensor, mask) -> Tensor:
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)

    def forward(
        self,
        caption_ids: np.ndarray,
        caption_mask: np.ndarray,
        images: list[np.ndarray],
        queries: QueryTokens,
    ) -> tuple[Tensor, Tensor]:
        """caption_ids (B, L); images: list (len <= N) of (B, H, W, 3) arrays, slot order.

        Returns (T_hidden (B, L, d), Q_hidden (B, K, d)).
        """
        cfg = self._cfg
        caption_ids = np.asarray(caption_ids)
        b, n_cap = caption_ids.shape
        if n_cap > cfg.max_caption:
            raise ContractError(f"caption length {n_cap} exceeds {cfg.max_caption}")
        if len(images) > cfg.max_ref_images:
            raise ContractError(f"{len(images)} images exceed the maximum of {cfg.max_ref_images}")
        parts = [ad.add(ad.embedding(self.token_emb, caption_ids), self.cap_pos[:n_cap])]
        for slot, img in enumerate(images, start=1):
            parts.append(self.encode_image_patches(img, slot))
        q = ad.add(queries.tokens, self.query_pos)
        parts.append(ad.mul(q, np.ones((b, 1, 1), np.float32)))
        x = ad.concat(parts, axis=1)
        n_total = x.shape[1]
        key_ok = np.ones((b, n_total), dtype=bool)
        key_ok[:, :n_cap] = caption_mask
        mask = np.where(key_ok, 0.0, NEG_INF).astype(np.float32)[:, None, None, :]
        hid = self._run(x, mask)
        return hid[:, :n_cap], hid[:, n_total - queries.K :]

    def caption_logits(self, images: np.ndarray, ids_in: np.ndarray) -> Tensor:
        """Warm-up captioning: [image patches ; caption] with causal caption attention."""
        b, n_cap = ids_in.shape
        img_tok = self.encode_image_patches(images, 1)
        cap = ad.add(ad.embedding(self.token_emb, ids_in), self.cap_pos[:n_cap])
        x = ad.concat([img_tok, cap], axis=1)
        n_img = img_tok.shape[1]
        n = n_img + n_cap
        allowed = np.zeros((n, n), dtype=bool)
        allowed[:, :n_img] = True
        allowed[n_img:, n_img:] = np.tril(np.ones((n_cap, n_cap), dtype=bool))
        mask = np.where(allowed, 0.0, NEG_INF).astype(np.float32)
        hid = self._run(x, mask)
        return ad.matmul(hid[:, n_img:], ad.transpose(self.token_emb))


@dataclass
class KontextBundle:
    """Connector outputs: text embeddings then kontext embeddings."""

    T_proj: Tensor  # (B, L, d)
    Q_proj: Tensor  # (B, K, d)
    text_mask: np.ndarray  # (B, L) bool
    kontext_mask: np.ndarray = field(default=None)  # (B, K) bool; all True unless kontext is dropped

    def __post_init__(self):
        if self.kontext_mask is None:
            self.kontext_mask = np.ones(self.Q_proj.shape[:2], dtype=bool)

    @property
    def tokens(self) -> Tensor:
        return ad.concat([self.T_proj, self.Q_proj], axis=1)

    @property
    def mask(self) -> np.ndarray:
        return np.concatenate([self.text_mask, self.kontext_mask], axis=1)

    @property
    def n_text(self) -> int:
        return self.T_proj.shape[1]

    @property
    def K(self) -> int:
        return self.Q_proj.shape[1]


class Connector(Module):
    """Two-layer MLP (hidden width = diffusion width) shared by the text and kontext streams."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.mlp = MLP(rng, d_in, d_out, d_out)

    @property
    def d_in(self) -> int:
        return self.mlp.fc1.d_in

    @property
    def d_out(self) -> int:
        return self.mlp.fc2.d_out

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"connector expects width {self.d_in}, got {x.shape[-1]}")
        return self.mlp(x)

    def connect(self, T_hidden: Tensor, Q_hidden: Tensor, text_mask: np.ndarray | None = None) -> KontextBundle:
        if text_mask is None:
            text_mask = np.ones(T_hidden.shape[:2], dtype=bool)
        return KontextBundle(self(T_hidden), self(Q_hidden), np.asarray(text_mask, dtype=bool))
