"""Shifted 2D rotary positions for multi-image conditioning.

Target (noisy) latents keep their grid coordinates, the n-th reference image
is shifted by (w·n, h·n) into the positive quadrant, and the source image is
mirrored into the negative quadrant. Text and kontext tokens sit at the
origin, i.e. they are not rotated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from kontext import autodiff as ad
from kontext.autodiff import Tensor
from kontext.errors import ContractError


@dataclass(frozen=True)
class TokenRole:
    kind: str  # "target" | "source" | "reference" | "text" | "kontext"
    index: int = 0

    KINDS = ("target", "source", "reference", "text", "kontext")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ContractError(f"unknown token role {self.kind!r}")
        if self.kind == "reference" and self.index < 1:
            raise ContractError(f"reference index must be >= 1, got {self.index}")

    def __str__(self) -> str:
        return f"reference{self.index}" if self.kind == "reference" else self.kind

    @classmethod
    def parse(cls, text: str) -> "TokenRole":
        if text.startswith("reference"):
            return cls("reference", int(text[len("reference") :] or 1))
        return cls(text)


TARGET = TokenRole("target")
SOURCE = TokenRole("source")
TEXT = TokenRole("text")
KONTEXT = TokenRole("kontext")


def reference(n: int) -> TokenRole:
    return TokenRole("reference", n)


@dataclass
class PositionGrid:
    coords: np.ndarray  # (n_tokens, 2) int64, columns (i, j)
    roles: list[TokenRole]

    def __len__(self) -> int:
        return len(self.roles)

    @staticmethod
    def concat(grids: Iterable["PositionGrid"]) -> "PositionGrid":
        grids = list(grids)
        coords = np.concatenate([g.coords for g in grids], axis=0) if grids else np.zeros((0, 2), np.int64)
        roles = [r for g in grids for r in g.roles]
        return PositionGrid(coords, roles)


def coords_for_role(h: int, w: int, role: TokenRole) -> PositionGrid:
    """Row-major h×w grid; token (row j, column i) gets (i, j) before the role shift."""
    if h < 1 or w < 1:
        raise ContractError(f"grid dims must be >= 1, got {h}x{w}")
    jj, ii = np.meshgrid(np.arange(h, dtype=np.int64), np.arange(w, dtype=np.int64), indexing="ij")
    i, j = ii.reshape(-1), jj.reshape(-1)
    if role.kind == "reference":
        if role.index < 1:
            raise ContractError("reference index must be >= 1")
        i, j = i + w * role.index, j + h * role.index
    elif role.kind == "source":
        i, j = -i, -j
    elif role.kind in ("text", "kontext"):
        i, j = np.zeros_like(i), np.zeros_like(j)
    return PositionGrid(np.stack([i, j], axis=1), [role] * (h * w))


def origin_grid(n: int, role: TokenRole) -> PositionGrid:
    return PositionGrid(np.zeros((n, 2), np.int64), [role] * n)


@dataclass(frozen=True)
class RopeFreqs:
    head_dim: int
    base_theta: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2:
            raise ContractError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if self.head_dim % 4:
            raise ContractError(f"head_dim must be divisible by 4 (two axes), got {self.head_dim}")

    def axis_freqs(self) -> np.ndarray:
        n = self.head_dim // 4  # rotary pairs per axis
        return self.base_theta ** (-np.arange(n, dtype=np.float64) / n)

    def angles(self, coords: np.ndarray) -> np.ndarray:
        """(..., 2) integer coords -> (..., head_dim/2) angles; first half from i, second from j."""
        f = self.axis_freqs()
        c = np.asarray(coords, dtype=np.float64)
        return np.concatenate([c[..., :1] * f, c[..., 1:2] * f], axis=-1)

    def cos_sin(self, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = self.angles(coords)
        return np.cos(a).astype(np.float32), np.sin(a).astype(np.float32)


def apply_rope(x, grid: PositionGrid | np.ndarray, freqs: RopeFreqs) -> Tensor:
    """Rotate x of shape (tokens, heads, head_dim) by per-token coordinates."""
    x = ad.as_tensor(x)
    coords = grid.coords if isinstance(grid, PositionGrid) else np.asarray(grid)
    if x.shape[-1] % 2:
        raise ContractError(f"odd head_dim {x.shape[-1]}")
    if x.shape[-1] != freqs.head_dim:
        raise ContractError(f"head_dim {x.shape[-1]} does not match freqs ({freqs.head_dim})")
    if len(coords) != x.shape[0]:
        raise ContractError(f"grid has {len(coords)} tokens, input has {x.shape[0]}")
    cos, sin = freqs.cos_sin(coords)
    return ad.rope_rotate(x, cos[:, None, :], sin[:, None, :])


def collision_report(grids: Iterable[PositionGrid]) -> set[tuple[int, int]]:
    """Coordinates shared by two or more of the given grids (each grid is one role group)."""
    counts: dict[tuple[int, int], int] = {}
    for g in grids:
        for c in set(map(tuple, g.coords.tolist())):
            counts[c] = counts.get(c, 0) + 1
    return {c for c, k in counts.items() if k >= 2}
