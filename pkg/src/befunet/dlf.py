"""Double-level fusion of the shallowest and deepest fused stages.

Each level gets a class token (mean of its layer-normalised tokens), runs
through its own stack of global self-attention encoders, and then the
class tokens are swapped: each one is projected into the other level's
dimension and used as the single query of a cross-attention over that
level's tokens. The result is projected back and broadcast into the home
level's tokens.
"""
from __future__ import annotations

import numpy as np

from .autograd import ContractError, LayerNorm, Linear, Mlp, Module, Parameter, Tensor, ops
from .body import merge_heads, scaled_dot_attention, split_heads
from .grid import ConfigError, TokenGrid

INJECT_MODES = ("add", "concat-project")


def make_class_token(level: TokenGrid, norm: LayerNorm) -> Tensor:
    """``[B, D]``: mean over tokens of the layer-normalised tokens."""
    if level.tokens.shape[1] == 0:
        raise ContractError("class token of an empty token grid")
    return ops.mean(norm(level.tokens), axis=1)


class MultiHeadAttention(Module):
    """Biased q/k/v/o projections; queries and keys/values may come from different sequences."""

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)
        self.last_attention: np.ndarray | None = None

    def forward(self, x_q: Tensor, x_kv: Tensor) -> Tensor:
        q = split_heads(self.q(x_q), self.heads)
        k = split_heads(self.k(x_kv), self.heads)
        v = split_heads(self.v(x_kv), self.heads)
        out, attn = scaled_dot_attention(q, k, v)
        self.last_attention = attn.data
        return self.o(merge_heads(out))


class EncoderBlock(Module):
    """Pre-norm global self-attention and MLP, both residual."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, mlp_ratio)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = ops.add(x, self.attn(h, h))
        return ops.add(x, self.mlp(self.norm2(x)))


class CrossLevel(Module):
    """One direction of the swap: a home class token queries the other level.

    ``y = f(cls) + MCA(LN([f(cls) || P_other]))`` with ``f(cls)`` as the only
    query; ``g`` maps ``y`` back to the home dimension.
    """

    def __init__(self, rng, home_dim: int, other_dim: int, heads: int):
        self.f = Linear(rng, home_dim, other_dim)
        self.norm = LayerNorm(other_dim)
        self.attn = MultiHeadAttention(rng, other_dim, heads)
        self.g = Linear(rng, other_dim, home_dim)

    def attend(self, cls: Tensor, other: Tensor) -> Tensor:
        """``cls [B, home_dim]``, ``other [B, N, other_dim]`` -> ``y [B, other_dim]``."""
        if cls.shape[-1] != self.f.weight.shape[0] or other.shape[-1] != self.f.weight.shape[1]:
            raise ConfigError(f"cross-level dims {cls.shape[-1]}->{other.shape[-1]} do not match "
                              f"projection {self.f.weight.shape}")
        fc = ops.reshape(self.f(cls), (cls.shape[0], 1, other.shape[-1]))
        x = self.norm(ops.concat([fc, other], axis=1))
        mca = self.attn(x[:, :1], x)
        return ops.reshape(ops.add(fc, mca), (cls.shape[0], other.shape[-1]))

    def forward(self, cls: Tensor, other: Tensor) -> Tensor:
        return self.g(self.attend(cls, other))


class DLF(Module):
    """Fuse ``P_s`` (fine, stage 1) and ``P_l`` (coarse, stage 4); shapes are preserved.

    ``inject`` controls how the back-projected class summary re-enters the
    spatial tokens: broadcast addition, or concatenation followed by a
    linear projection back to the level dimension.
    """

    def __init__(self, rng, dim_s: int, dim_l: int, tokens_s: int, tokens_l: int,
                 depth_s: int = 1, depth_l: int = 1, heads_s: int = 1, heads_l: int = 1,
                 inject: str = "add", mlp_ratio: int = 4):
        if depth_s < 1 or depth_l < 1:
            raise ConfigError(f"encoder depths must be >= 1, got S={depth_s} L={depth_l}")
        if inject not in INJECT_MODES:
            raise ConfigError(f"inject must be one of {INJECT_MODES}, got {inject!r}")
        self.inject = inject
        self.norm_s = LayerNorm(dim_s)
        self.norm_l = LayerNorm(dim_l)
        self.pos_s = Parameter(np.zeros((tokens_s + 1, dim_s)))
        self.pos_l = Parameter(np.zeros((tokens_l + 1, dim_l)))
        self.enc_s = [EncoderBlock(rng, dim_s, heads_s, mlp_ratio) for _ in range(depth_s)]
        self.enc_l = [EncoderBlock(rng, dim_l, heads_l, mlp_ratio) for _ in range(depth_l)]
        self.cross_s = CrossLevel(rng, dim_s, dim_l, heads_l)
        self.cross_l = CrossLevel(rng, dim_l, dim_s, heads_s)
        if inject == "concat-project":
            self.merge_s = Linear(rng, 2 * dim_s, dim_s)
            self.merge_l = Linear(rng, 2 * dim_l, dim_l)

    def _encode(self, level: TokenGrid, norm, pos, blocks) -> tuple[Tensor, Tensor]:
        b = level.batch
        cls = ops.reshape(make_class_token(level, norm), (b, 1, level.dim))
        x = ops.add(ops.concat([cls, level.tokens], axis=1), pos)
        for blk in blocks:
            x = blk(x)
        return x[:, 0], x[:, 1:]

    def _inject(self, tokens: Tensor, summary: Tensor, merge) -> Tensor:
        b, n, d = tokens.shape
        spread = ops.broadcast_to(ops.reshape(summary, (b, 1, d)), (b, n, d))
        if self.inject == "add":
            return ops.add(tokens, spread)
        return merge(ops.concat([tokens, spread], axis=-1))

    def encode_levels(self, p_s: TokenGrid, p_l: TokenGrid):
        """Class tokens and tokens of both levels after their encoder stacks."""
        return (self._encode(p_s, self.norm_s, self.pos_s, self.enc_s),
                self._encode(p_l, self.norm_l, self.pos_l, self.enc_l))

    def forward(self, p_s: TokenGrid, p_l: TokenGrid) -> tuple[TokenGrid, TokenGrid]:
        (cls_s, tok_s), (cls_l, tok_l) = self.encode_levels(p_s, p_l)
        # swapped: each class token attends over the other level's tokens
        back_s = self.cross_s(cls_s, tok_l)
        back_l = self.cross_l(cls_l, tok_s)
        z_s = self._inject(tok_s, back_s, getattr(self, "merge_s", None))
        z_l = self._inject(tok_l, back_l, getattr(self, "merge_l", None))
        return p_s.with_tokens(z_s), p_l.with_tokens(z_l)
