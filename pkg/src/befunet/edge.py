"""Edge branch: pixel difference convolutions and the four-stage edge encoder.

A PDC kernel responds to differences between pixel pairs inside its
footprint instead of raw pixel values. Difference maps are formed first
and weighted afterwards, exactly as the response is defined.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Conv2d, Module, Parameter, ShapeError, Tensor, ops
from .autograd.tensor import make_result
from .autograd.nn import uniform_fan_in
from .grid import ConfigError, TokenGrid

Pair = tuple[int, int]

# Footprint positions are row-major indices into a k x k window.
PAIR_SETS: dict[str, tuple[int, tuple[Pair, ...]]] = {
    # every neighbour minus the centre
    "central": (3, tuple((i, 4) for i in range(9) if i != 4)),
    # each ring pixel minus its clockwise neighbour
    "angular": (3, ((0, 1), (1, 2), (2, 5), (3, 0), (5, 8), (6, 3), (7, 6), (8, 7))),
    # outer 5x5 ring minus the matching inner-ring pixel
    "radial": (5, ((0, 6), (2, 7), (4, 8), (10, 11), (14, 13), (20, 16), (22, 17), (24, 18))),
}
VARIANTS = ("central", "angular", "radial", "vanilla")


def pair_set(variant: str) -> tuple[int, tuple[Pair, ...]]:
    """``(footprint, pairs)``; vanilla has no pairs and a 3x3 footprint."""
    if variant == "vanilla":
        return 3, ()
    try:
        return PAIR_SETS[variant]
    except KeyError:
        raise ConfigError(f"unknown PDC variant {variant!r}; expected one of {VARIANTS}") from None


def _shifted(pos: int, k: int, ho: int, wo: int) -> tuple:
    r, c = divmod(pos, k)
    return (slice(None), slice(r, r + ho), slice(c, c + wo), slice(None))


def pair_differences(x: Tensor, variant: str) -> Tensor:
    """Stack of pixel-pair difference maps, ``[B, Ho, Wo, n_terms, C]`` (valid positions).

    Term ``p`` is ``x[pos_i] - x[pos_i']`` for pair ``p``; vanilla terms are the raw
    footprint pixels. Differences are taken before any weighting, so flat
    regions give exact zeros.
    """
    k, pairs = pair_set(variant)
    terms = pairs or tuple((i, None) for i in range(k * k))
    B, H, W, C = x.shape
    ho, wo = H - k + 1, W - k + 1
    xd = x.data
    out = np.empty((B, ho, wo, len(terms), C), dtype=xd.dtype)
    for p, (i, j) in enumerate(terms):
        out[:, :, :, p, :] = xd[_shifted(i, k, ho, wo)]
        if j is not None:
            out[:, :, :, p, :] -= xd[_shifted(j, k, ho, wo)]

    def bw(g):
        gx = np.zeros_like(xd)
        for p, (i, j) in enumerate(terms):
            gx[_shifted(i, k, ho, wo)] += g[:, :, :, p, :]
            if j is not None:
                gx[_shifted(j, k, ho, wo)] -= g[:, :, :, p, :]
        return (gx,)

    return make_result(out, (x,), bw)


@dataclass
class PdcKernel:
    """Pixel-difference kernel.

    ``weight`` holds one entry per pair (per input/output channel):
    ``[n_terms, C]`` when ``depthwise`` else ``[n_terms, C_in, C_out]``.
    Vanilla kernels have ``k*k`` terms, one per footprint position.
    """

    variant: str
    weight: Tensor
    depthwise: bool = True

    def __post_init__(self):
        k, pairs = pair_set(self.variant)
        for i, j in pairs:
            if not (0 <= i < k * k and 0 <= j < k * k):
                raise ConfigError(f"pair ({i}, {j}) outside the {k}x{k} footprint")
        n_terms = len(pairs) if pairs else k * k
        if self.weight.shape[0] != n_terms:
            raise ConfigError(f"{self.variant} kernel needs {n_terms} terms, weight has {self.weight.shape[0]}")

    @property
    def footprint(self) -> int:
        return pair_set(self.variant)[0]

    @property
    def pairs(self) -> tuple[Pair, ...]:
        return pair_set(self.variant)[1]


def pdc_forward(x: Tensor, kernel: PdcKernel, same: bool = True) -> Tensor:
    """Apply a PDC kernel to an NHWC feature map.

    ``same=True`` replicate-pads so the output keeps the input size; border
    pixels then still see zero differences on flat regions. ``same=False`` is
    a valid (unpadded) convolution and needs the map to cover the footprint.
    """
    k = kernel.footprint
    c = x.shape[-1]
    expected = kernel.weight.shape[1]
    if c != expected:
        raise ShapeError(f"pdc_forward: input has {c} channels, kernel expects {expected}")
    if same:
        x = ops.pad_edge(x, k // 2)
    elif x.shape[1] < k or x.shape[2] < k:
        raise ShapeError(f"pdc_forward: input {x.shape[1:3]} smaller than the {k}x{k} footprint")
    d = pair_differences(x, kernel.variant)
    b, ho, wo, n, c = d.shape
    w = kernel.weight
    if kernel.depthwise:
        return ops.sum(ops.mul(d, w), axis=3)
    flat = ops.reshape(d, (b, ho, wo, n * c))
    return ops.matmul(flat, ops.reshape(w, (n * c, w.shape[-1])))


class PdcBlock(Module):
    """Depthwise PDC -> ReLU -> 1x1 conv, with an identity shortcut."""

    def __init__(self, rng, channels: int, variant: str):
        k, pairs = pair_set(variant)
        n_terms = len(pairs) if pairs else k * k
        self.variant = variant
        self.pdc_weight = Parameter(uniform_fan_in(rng, (n_terms, channels), n_terms))
        self.pointwise = Conv2d(rng, channels, channels, 1)

    @property
    def kernel(self) -> PdcKernel:
        return PdcKernel(self.variant, self.pdc_weight, depthwise=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.pdc_weight.shape[1]:
            raise ShapeError(f"PdcBlock: input has {x.shape[-1]} channels, block width is {self.pdc_weight.shape[1]}")
        y = self.pointwise(ops.relu(pdc_forward(x, self.kernel)))
        return ops.add(x, y)


@dataclass
class EdgeStageOutput:
    features: TokenGrid
    side_edge_map: Tensor  # [B, H, W, 1], values in [0, 1]


class EdgeEncoder(Module):
    """Stem (two stride-2 convs) then four stages of PDC blocks, max-pooled in between.

    Stage ``l`` runs at ``H / 2**(l+2)`` with ``C * 2**l`` channels; a 1x1
    conv after each max-pool widens the channels. Each stage owns a 1x1 side
    head producing a full-resolution sigmoid edge map.
    """

    def __init__(
        self,
        rng,
        base_dim: int,
        blocks_per_stage: int = 4,
        variants: Sequence[str] = ("central", "angular", "radial", "vanilla"),
    ):
        dims = [base_dim * 2 ** i for i in range(4)]
        self.dims = dims
        self.stem1 = Conv2d(rng, 3, base_dim, 3, stride=2, padding=1)
        self.stem2 = Conv2d(rng, base_dim, base_dim, 3, stride=2, padding=1)
        self.transitions = [Conv2d(rng, dims[i - 1], dims[i], 1) for i in range(1, 4)]
        self.stages = [
            [PdcBlock(rng, dims[s], variants[b % len(variants)]) for b in range(blocks_per_stage)]
            for s in range(4)
        ]
        self.side_heads = [Conv2d(rng, d, 1, 1) for d in dims]

    def forward(self, image: Tensor) -> list[EdgeStageOutput]:
        _, H, W, _ = image.shape
        if H % 32 or W % 32:
            raise ConfigError(f"edge encoder needs H, W divisible by 32, got {H}x{W}")
        x = self.stem2(ops.relu(self.stem1(image)))
        outputs = []
        for s in range(4):
            if s > 0:
                x = self.transitions[s - 1](ops.maxpool2d(x, 2))
            for block in self.stages[s]:
                x = block(x)
            side = ops.sigmoid(self.side_heads[s](x))
            side = ops.upsample_nearest(side, H // x.shape[1])
            outputs.append(EdgeStageOutput(TokenGrid.from_map(x), side))
        return outputs
