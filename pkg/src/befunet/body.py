"""Body branch: Swin-style hierarchical transformer encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import LayerNorm, Linear, Mlp, Module, Parameter, Tensor, ops
from .grid import ConfigError, TokenGrid

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowConfig:
    window: int
    shift: int
    heads: int

    def __post_init__(self):
        if self.window < 1 or self.heads < 1:
            raise ConfigError(f"window and heads must be positive: {self}")
        if self.shift not in (0, self.window // 2):
            raise ConfigError(f"shift must be 0 or window//2, got {self.shift}")


def effective_window(grid: tuple[int, int], window: int) -> int:
    """Grids no larger than the window use a single window covering the grid."""
    return min(window, min(grid))


def check_window(grid: tuple[int, int], window: int, dim: int, heads: int) -> None:
    h, w = grid
    if h % window or w % window:
        raise ConfigError(f"grid {grid} not divisible by window {window}")
    if dim % heads:
        raise ConfigError(f"dim {dim} not divisible by {heads} heads")


def window_partition(x: Tensor, m: int) -> Tensor:
    """``[B, H, W, D]`` -> ``[B * nW, m*m, D]`` with windows in row-major order."""
    b, h, w, d = x.shape
    x = ops.reshape(x, (b, h // m, m, w // m, m, d))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b * (h // m) * (w // m), m * m, d))


def window_merge(x: Tensor, m: int, b: int, h: int, w: int) -> Tensor:
    d = x.shape[-1]
    x = ops.reshape(x, (b, h // m, w // m, m, m, d))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, h, w, d))


def shifted_window_mask(grid: tuple[int, int], m: int, shift: int) -> np.ndarray:
    """Boolean ``[nW, m*m, m*m]``: True where two tokens came from different regions
    before the cyclic shift and must not attend to each other."""
    h, w = grid
    region = np.zeros((h, w), dtype=np.int64)
    label = 0
    for hs in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
        for ws in (slice(0, -m), slice(-m, -shift), slice(-shift, None)):
            region[hs, ws] = label
            label += 1
    win = region.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    return win[:, :, None] != win[:, None, :]


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[N, T, D]`` -> ``[N, heads, T, D/heads]``."""
    n, t, d = x.shape
    return ops.transpose(ops.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    n, h, t, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (n, t, h * dh))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                         bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d) [+ bias], masked) v over the last two axes."""
    d = q.shape[-1]
    scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    if bias is not None:
        scores = ops.add(scores, bias)
    if mask is not None:
        scores = ops.masked_fill_const(scores, mask, MASK_VALUE)
    attn = ops.softmax(scores, -1)
    return ops.matmul(attn, v), attn


class PatchEmbed(Module):
    """Cut the image into P x P patches, flatten, project to C, add learned positions."""

    def __init__(self, rng, patch: int, dim: int, image_size: tuple[int, int], in_ch: int = 3):
        H, W = image_size
        if H % patch or W % patch:
            raise ConfigError(f"image {H}x{W} not divisible by patch size {patch}")
        self.patch = patch
        self.grid = (H // patch, W // patch)
        self.proj = Linear(rng, patch * patch * in_ch, dim)
        self.pos = Parameter(np.zeros((self.grid[0] * self.grid[1], dim)))

    def forward(self, image: Tensor) -> TokenGrid:
        b, H, W, c = image.shape
        p = self.patch
        gh, gw = H // p, W // p
        if (gh, gw) != self.grid:
            raise ConfigError(f"image {H}x{W} does not match the configured grid {self.grid}")
        x = ops.reshape(image, (b, gh, p, gw, p, c))
        x = ops.reshape(ops.transpose(x, (0, 1, 3, 2, 4, 5)), (b, gh * gw, p * p * c))
        return TokenGrid(ops.add(self.proj(x), self.pos), self.grid)


class WindowAttention(Module):
    def __init__(self, rng, dim: int, heads: int, window: int, rel_pos_bias: bool = False):
        self.heads = heads
        self.window = window
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.rel_table = None
        if rel_pos_bias:
            self.rel_table = Parameter(np.zeros(((2 * window - 1) ** 2, heads)))
            coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
            rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (window - 1)
            self._rel_index = rel[..., 0] * (2 * window - 1) + rel[..., 1]
        self.last_attention: np.ndarray | None = None

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``x``: ``[B*nW, T, D]``; ``mask``: ``[nW, T, T]`` boolean (True = blocked)."""
        nwb, t, d = x.shape
        qkv = self.qkv(x)
        q, k, v = (split_heads(qkv[:, :, i * d:(i + 1) * d], self.heads) for i in range(3))
        bias = None
        if self.rel_table is not None:
            bias = ops.transpose(self.rel_table[self._rel_index], (2, 0, 1))
        full_mask = None
        if mask is not None:
            nw = mask.shape[0]
            full_mask = np.tile(mask, (nwb // nw, 1, 1))[:, None]
        out, attn = scaled_dot_attention(q, k, v, full_mask, bias)
        self.last_attention = attn.data
        return self.proj(merge_heads(out))


class SwinBlock(Module):
    """Pre-norm (S)W-MSA and MLP sublayers, both residual."""

    def __init__(self, rng, dim: int, grid: tuple[int, int], cfg: WindowConfig,
                 mlp_ratio: int = 4, rel_pos_bias: bool = False):
        m = effective_window(grid, cfg.window)
        shift = cfg.shift if min(grid) > cfg.window else 0
        check_window(grid, m, dim, cfg.heads)
        self.grid = grid
        self.window = m
        self.shift = shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, cfg.heads, m, rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, mlp_ratio)
        self.mask = shifted_window_mask(grid, m, shift) if shift else None

    def attention(self, x: Tensor) -> Tensor:
        """(S)W-MSA on ``[B, N, D]`` tokens, without norm or residual."""
        b, _, d = x.shape
        h, w = self.grid
        m, s = self.window, self.shift
        fmap = ops.reshape(x, (b, h, w, d))
        if s:
            fmap = ops.roll(fmap, (-s, -s), (1, 2))
        out = self.attn(window_partition(fmap, m), self.mask)
        fmap = window_merge(out, m, b, h, w)
        if s:
            fmap = ops.roll(fmap, (s, s), (1, 2))
        return ops.reshape(fmap, (b, h * w, d))

    def forward(self, z: TokenGrid) -> TokenGrid:
        if z.grid != self.grid:
            raise ConfigError(f"block built for grid {self.grid}, got {z.grid}")
        x = z.tokens
        x = ops.add(x, self.attention(self.norm1(x)))
        x = ops.add(x, self.mlp(self.norm2(x)))
        return z.with_tokens(x)


def swin_block_pair(rng, dim: int, grid: tuple[int, int], window: int, heads: int,
                    **kw) -> list[SwinBlock]:
    """A W-MSA block followed by an SW-MSA block."""
    return [
        SwinBlock(rng, dim, grid, WindowConfig(window, 0, heads), **kw),
        SwinBlock(rng, dim, grid, WindowConfig(window, window // 2, heads), **kw),
    ]


class PatchMerging(Module):
    """Concatenate each 2x2 neighbourhood (4D), normalise, reduce linearly to 2D."""

    def __init__(self, rng, dim: int):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(rng, 4 * dim, 2 * dim, bias=False)

    def forward(self, z: TokenGrid) -> TokenGrid:
        h, w = z.grid
        if h % 2 or w % 2:
            raise ConfigError(f"patch merging needs an even grid, got {z.grid}")
        b, d = z.batch, z.dim
        x = ops.reshape(z.tokens, (b, h // 2, 2, w // 2, 2, d))
        # neighbour order (0,0), (1,0), (0,1), (1,1)
        x = ops.transpose(x, (0, 1, 3, 4, 2, 5))
        x = ops.reshape(x, (b, (h // 2) * (w // 2), 4 * d))
        return TokenGrid(self.reduction(self.norm(x)), (h // 2, w // 2))


class BodyEncoder(Module):
    """Patch embedding + four stages of alternating (S)W-MSA blocks, patch merging in between."""

    def __init__(
        self,
        rng,
        image_size: tuple[int, int],
        base_dim: int,
        patch: int = 4,
        window: int = 7,
        depths: Sequence[int] = (2, 2, 2, 2),
        heads: Sequence[int] = (1, 2, 4, 8),
        mlp_ratio: int = 4,
        rel_pos_bias: bool = False,
    ):
        H, W = image_size
        if H % 32 or W % 32:
            raise ConfigError(f"body encoder needs H, W divisible by 32, got {H}x{W}")
        if patch != 4:
            # the stage ladder H/4 .. H/32 assumes 4x4 patches
            raise ConfigError(f"patch size must be 4, got {patch}")
        self.patch_embed = PatchEmbed(rng, patch, base_dim, image_size)
        grid = self.patch_embed.grid
        self.merges: list[PatchMerging] = []
        self.stages: list[list[SwinBlock]] = []
        dim = base_dim
        for s in range(4):
            if s > 0:
                self.merges.append(PatchMerging(rng, dim))
                dim *= 2
                grid = (grid[0] // 2, grid[1] // 2)
            blocks = []
            for i in range(depths[s]):
                shift = window // 2 if i % 2 else 0
                blocks.append(SwinBlock(rng, dim, grid, WindowConfig(window, shift, heads[s]),
                                        mlp_ratio, rel_pos_bias))
            self.stages.append(blocks)

    def forward(self, image: Tensor) -> list[TokenGrid]:
        z = self.patch_embed(image)
        outs = []
        for s, blocks in enumerate(self.stages):
            if s > 0:
                z = self.merges[s - 1](z)
            for blk in blocks:
                z = blk(z)
            outs.append(z)
        return outs
