"""Local cross-attention fusion of edge and body token grids.

Edge tokens provide the queries, body tokens the keys and values, and
attention is restricted to non-overlapping ``h_l x w_l`` windows, so the
cost is linear in the token count for a fixed window.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Linear, Mlp, Module, ShapeError, Tensor, ops
from .body import merge_heads, scaled_dot_attention, split_heads
from .grid import ConfigError, TokenGrid

RESIDUAL_SOURCES = ("body", "edge", "sum")


@dataclass(frozen=True)
class LcafConfig:
    window: tuple[int, int]
    heads: int

    def __post_init__(self):
        if min(self.window) < 1 or self.heads < 1:
            raise ConfigError(f"window and heads must be positive: {self}")

    def key_dim(self, dim: int) -> int:
        return dim // self.heads

    def check(self, grid: tuple[int, int], dim: int) -> None:
        if grid[0] % self.window[0] or grid[1] % self.window[1]:
            raise ConfigError(f"grid {grid} not divisible by local window {self.window}")
        if dim % self.heads:
            raise ConfigError(f"dim {dim} not divisible by {self.heads} heads")


def clamp_window(grid: tuple[int, int], window: tuple[int, int]) -> tuple[int, int]:
    """A window larger than the grid along an axis shrinks to the grid size."""
    return min(window[0], grid[0]), min(window[1], grid[1])


def partition(x: Tensor, grid: tuple[int, int], window: tuple[int, int]) -> Tensor:
    """``[B, h*w, D]`` -> ``[B * nW, hl*wl, D]``, windows in row-major order."""
    b, _, d = x.shape
    h, w = grid
    hl, wl = window
    x = ops.reshape(x, (b, h // hl, hl, w // wl, wl, d))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b * (h // hl) * (w // wl), hl * wl, d))


def unpartition(x: Tensor, b: int, grid: tuple[int, int], window: tuple[int, int]) -> Tensor:
    h, w = grid
    hl, wl = window
    d = x.shape[-1]
    x = ops.reshape(x, (b, h // hl, w // wl, hl, wl, d))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, h * w, d))


def local_cross_attention(
    x_edge: TokenGrid,
    x_body: TokenGrid,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    cfg: LcafConfig,
) -> tuple[TokenGrid, Tensor]:
    """Per window and head, ``softmax(Q_edge K_body^T / sqrt(d_k)) V_body``; heads concatenated.

    Returns the attended grid and the attention weights ``[B*nW, heads, T, T]``.
    """
    if x_edge.tokens.shape != x_body.tokens.shape or x_edge.grid != x_body.grid:
        raise ShapeError(f"edge {x_edge.shape} and body {x_body.shape} grids differ")
    cfg.check(x_body.grid, x_body.dim)
    b, grid, win = x_body.batch, x_body.grid, cfg.window
    q = split_heads(partition(ops.matmul(x_edge.tokens, wq), grid, win), cfg.heads)
    k = split_heads(partition(ops.matmul(x_body.tokens, wk), grid, win), cfg.heads)
    v = split_heads(partition(ops.matmul(x_body.tokens, wv), grid, win), cfg.heads)
    out, attn = scaled_dot_attention(q, k, v)
    return x_body.with_tokens(unpartition(merge_heads(out), b, grid, win)), attn


def attention_cost(h: int, w: int, c: int, hl: int, wl: int) -> tuple[int, int]:
    """Multiply-add counts of global vs local multi-head cross-attention.

    ``gca = 4hwC^2 + 2(hw)^2 C`` and ``lca = 4hwC^2 + 2 h_l w_l hw C``:
    four projections plus the score and value products.
    """
    if min(h, w, c, hl, wl) < 1:
        raise ValueError("attention_cost arguments must be positive")
    n = h * w
    proj = 4 * n * c * c
    return proj + 2 * n * n * c, proj + 2 * hl * wl * n * c


def attention_cost_terms(h: int, w: int, c: int, hl: int, wl: int) -> dict[str, int]:
    n = h * w
    return {"projection": 4 * n * c * c, "gca_attention": 2 * n * n * c, "lca_attention": 2 * hl * wl * n * c}


class LCAF(Module):
    """One fusion stage: ``M = R + concat_h(LCA_h) W_o``, then ``X_f = FFN(M) + M``.

    ``R`` is selected by ``residual``: the body tokens (default), the edge
    tokens, or their sum.
    """

    def __init__(self, rng, dim: int, grid: tuple[int, int], window: tuple[int, int], heads: int,
                 residual: str = "body", mlp_ratio: int = 4):
        if residual not in RESIDUAL_SOURCES:
            raise ConfigError(f"residual must be one of {RESIDUAL_SOURCES}, got {residual!r}")
        self.cfg = LcafConfig(clamp_window(grid, tuple(window)), heads)
        self.cfg.check(grid, dim)
        self.grid = grid
        self.residual = residual
        self.wq = Linear(rng, dim, dim, bias=False)
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim, bias=False)
        self.wo = Linear(rng, dim, dim, bias=False)
        self.ffn = Mlp(rng, dim, mlp_ratio)
        self.last_attention: np.ndarray | None = None

    def cross_attention(self, x_edge: TokenGrid, x_body: TokenGrid) -> TokenGrid:
        out, attn = local_cross_attention(x_edge, x_body, self.wq.weight, self.wk.weight,
                                          self.wv.weight, self.cfg)
        self.last_attention = attn.data
        return out

    def m_lca(self, x_edge: TokenGrid, x_body: TokenGrid) -> TokenGrid:
        attended = self.cross_attention(x_edge, x_body)
        if self.residual == "body":
            res = x_body.tokens
        elif self.residual == "edge":
            res = x_edge.tokens
        else:
            res = ops.add(x_edge.tokens, x_body.tokens)
        return x_body.with_tokens(ops.add(res, self.wo(attended.tokens)))

    def forward(self, x_edge: TokenGrid, x_body: TokenGrid) -> TokenGrid:
        if x_body.grid != self.grid:
            raise ConfigError(f"fusion built for grid {self.grid}, got {x_body.grid}")
        m = self.m_lca(x_edge, x_body).tokens
        return x_body.with_tokens(ops.add(self.ffn(m), m))
