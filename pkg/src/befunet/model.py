"""Full network: dual-branch encoder, per-stage fusion, double-level fusion, U-shaped decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autograd import Conv2d, Module, Tensor, make_rng, no_grad, ops
from .body import BodyEncoder, effective_window
from .dlf import DLF, INJECT_MODES
from .edge import EdgeEncoder
from .grid import ConfigError, TokenGrid
from .lcaf import LCAF, RESIDUAL_SOURCES, clamp_window


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    base_dim: int = 16
    patch: int = 4
    window: int = 2
    lca_window: tuple[int, int] = (2, 2)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    dlf_depths: tuple[int, int] = (1, 1)
    num_classes: int = 3
    edge_blocks: int = 4
    mlp_ratio: int = 4
    use_edge: bool = True
    use_lcaf: bool = True
    use_dlf: bool = True
    lcaf_residual: str = "body"
    dlf_inject: str = "add"
    lambda_ce: float = 0.6
    lambda_dice: float = 0.4
    gamma: float = 0.2
    edge_lambda: float = 1.1
    eta: float = 0.3

    def __post_init__(self):
        # tolerate lists (e.g. from JSON) for the tuple-valued fields
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        self.validate()

    def validate(self) -> None:
        H, W = self.image_size
        if H % 32 or W % 32 or H <= 0 or W <= 0:
            raise ConfigError(f"image size must be positive multiples of 32, got {H}x{W}")
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("depths and heads need one entry per stage (4)")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.use_lcaf and not self.use_edge:
            raise ConfigError("LCAF fusion requires the edge encoder")
        if self.lcaf_residual not in RESIDUAL_SOURCES:
            raise ConfigError(f"lcaf_residual must be one of {RESIDUAL_SOURCES}")
        if self.dlf_inject not in INJECT_MODES:
            raise ConfigError(f"dlf_inject must be one of {INJECT_MODES}")
        for name in ("lambda_ce", "lambda_dice", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not self.edge_lambda > 0:
            raise ConfigError(f"edge_lambda must be positive, got {self.edge_lambda}")
        if not 0.0 < self.eta < 1.0:
            raise ConfigError(f"eta must lie in (0, 1), got {self.eta}")
        if self.patch != 4:
            raise ConfigError(f"patch size must be 4, got {self.patch}")
        if min(self.depths) < 1 or min(self.dlf_depths) < 1 or len(self.dlf_depths) != 2:
            raise ConfigError("stage and DLF depths must be positive (DLF takes two)")
        if self.base_dim < 1 or self.window < 1 or min(self.lca_window) < 1 or min(self.heads) < 1:
            raise ConfigError("base_dim, window, lca_window and heads must be positive")
        # the submodule divisibility rules, checked here so nothing fails mid-build
        for s, (grid, dim) in enumerate(zip(self.stage_grids(), self.stage_dims())):
            m = effective_window(grid, self.window)
            if grid[0] % m or grid[1] % m:
                raise ConfigError(f"stage {s + 1} grid {grid} not divisible by window {m}")
            if dim % self.heads[s]:
                raise ConfigError(f"stage {s + 1} dim {dim} not divisible by {self.heads[s]} heads")
            if self.use_lcaf:
                hl, wl = clamp_window(grid, self.lca_window)
                if grid[0] % hl or grid[1] % wl:
                    raise ConfigError(f"stage {s + 1} grid {grid} not divisible by local window {(hl, wl)}")

    def stage_dims(self) -> list[int]:
        return [self.base_dim * 2 ** s for s in range(4)]

    def stage_grids(self) -> list[tuple[int, int]]:
        H, W = self.image_size
        return [(H // 2 ** (s + 2), W // 2 ** (s + 2)) for s in range(4)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelOutput:
    logits: Tensor  # [B, H, W, K]
    side_edge_maps: list[Tensor] = field(default_factory=list)  # 4 x [B, H, W, 1] when the edge branch is on


class UpBlock(Module):
    """2x nearest upsample, concatenate the skip, two 3x3 conv + ReLU."""

    def __init__(self, rng, c_in: int, c_skip: int, c_out: int):
        self.conv1 = Conv2d(rng, c_in + c_skip, c_out, 3, padding=1)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, padding=1)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = ops.concat([ops.upsample_nearest(x, 2), skip], axis=-1)
        return ops.relu(self.conv2(ops.relu(self.conv1(x))))


class Decoder(Module):
    """Three up-blocks from the deepest level, then a 4x bilinear upsample and a 1x1 head."""

    def __init__(self, rng, dims: list[int], num_classes: int):
        self.ups = [UpBlock(rng, dims[s + 1], dims[s], dims[s]) for s in (2, 1, 0)]
        self.head = Conv2d(rng, dims[0], num_classes, 1)

    def forward(self, deepest: Tensor, skips: list[Tensor]) -> Tensor:
        x = deepest
        for up, skip in zip(self.ups, skips):
            x = up(x, skip)
        return self.head(ops.upsample_bilinear(x, 4))


class BEFUnet(Module):
    """Segmentation network; ``use_edge``/``use_lcaf``/``use_dlf`` select the ablation variant.

    With the edge branch off the body stages feed the decoder directly; with
    the edge branch on but LCAF off, stages are fused by elementwise sum.
    """

    def __init__(self, cfg: ModelConfig, rng=None):
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else make_rng(0)
        dims, grids = cfg.stage_dims(), cfg.stage_grids()
        self.body = BodyEncoder(rng, cfg.image_size, cfg.base_dim, cfg.patch, cfg.window,
                                cfg.depths, cfg.heads, cfg.mlp_ratio)
        self.edge = EdgeEncoder(rng, cfg.base_dim, cfg.edge_blocks) if cfg.use_edge else None
        self.lcaf = [
            LCAF(rng, dims[s], grids[s], cfg.lca_window, cfg.heads[s], cfg.lcaf_residual, cfg.mlp_ratio)
            for s in range(4)
        ] if cfg.use_lcaf else []
        self.dlf = DLF(
            rng, dims[0], dims[3], grids[0][0] * grids[0][1], grids[3][0] * grids[3][1],
            cfg.dlf_depths[0], cfg.dlf_depths[1], cfg.heads[0], cfg.heads[3], cfg.dlf_inject, cfg.mlp_ratio,
        ) if cfg.use_dlf else None
        self.decoder = Decoder(rng, dims, cfg.num_classes)

    def encode(self, image: Tensor) -> tuple[list[TokenGrid], list[Tensor]]:
        """Fused stage grids and (if present) the side edge maps."""
        H, W = self.cfg.image_size
        if image.ndim != 4 or image.shape[1:] != (H, W, 3):
            raise ConfigError(f"expected images [B, {H}, {W}, 3], got {image.shape}")
        fused = self.body(image)
        side = []
        if self.edge is not None:
            edge_out = self.edge(image)
            side = [e.side_edge_map for e in edge_out]
            if self.lcaf:
                fused = [f(e.features, b) for f, e, b in zip(self.lcaf, edge_out, fused)]
            else:
                fused = [b.with_tokens(ops.add(b.tokens, e.features.tokens)) for e, b in zip(edge_out, fused)]
        return fused, side

    def forward(self, image: Tensor) -> ModelOutput:
        fused, side = self.encode(image)
        z_s, z_l = fused[0], fused[3]
        if self.dlf is not None:
            z_s, z_l = self.dlf(z_s, z_l)
        logits = self.decoder(z_l.to_map(), [fused[2].to_map(), fused[1].to_map(), z_s.to_map()])
        return ModelOutput(logits, side)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Class index map ``[B, H, W]`` for images ``[B, H, W, 3]``."""
        with no_grad():
            logits = self.forward(Tensor(np.asarray(images, dtype=self.body.patch_embed.proj.weight.dtype)))
        return logits.logits.data.argmax(axis=-1)


ABLATIONS = {
    "baseline": dict(use_edge=False, use_lcaf=False, use_dlf=False),
    "baseline+dlf": dict(use_edge=False, use_lcaf=False, use_dlf=True),
    "baseline+ee": dict(use_edge=True, use_lcaf=False, use_dlf=False),
    "baseline+ee+lcaf": dict(use_edge=True, use_lcaf=True, use_dlf=False),
    "full": dict(use_edge=True, use_lcaf=True, use_dlf=True),
}


def build_ablation(cfg: ModelConfig, edge: bool, lcaf: bool, dlf: bool, rng=None) -> BEFUnet:
    """Model with the given modules switched on; LCAF without the edge branch is rejected."""
    d = cfg.to_dict()
    d.update(use_edge=edge, use_lcaf=lcaf, use_dlf=dlf)
    return BEFUnet(ModelConfig.from_dict(d), rng)
