"""Token grids: the currency between encoder stages and fusion modules."""
from __future__ import annotations

from dataclasses import dataclass

from .autograd import Tensor, ops


class ConfigError(ValueError):
    """An architectural hyperparameter combination is invalid."""


@dataclass
class TokenGrid:
    """``tokens`` is ``[B, H'*W', D]`` laid out row-major over ``grid = (H', W')``."""

    tokens: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.ndim != 3 or self.tokens.shape[1] != h * w:
            raise ValueError(f"tokens {self.tokens.shape} do not fit grid {self.grid}")

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        """``(H', W', D)``."""
        return (*self.grid, self.dim)

    def to_map(self) -> Tensor:
        return ops.reshape(self.tokens, (self.batch, *self.grid, self.dim))

    @classmethod
    def from_map(cls, fmap: Tensor) -> "TokenGrid":
        b, h, w, d = fmap.shape
        return cls(ops.reshape(fmap, (b, h * w, d)), (h, w))

    def with_tokens(self, tokens: Tensor) -> "TokenGrid":
        return TokenGrid(tokens, self.grid)
