"""Miniature ViT: image -> M patch features of width d_x."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import compute as C
from .compute import Tensor
from .errors import ConfigError
from .nn import INIT_STD, Block, LayerNorm, Linear, Module, normal


def patch_count(resolution: int, patch_size: int) -> int:
    """Tokens from a non-overlapping stride-``patch_size`` grid; trailing pixels are dropped.

    384 px at patch 14 gives 27 x 27 = 729 (the last 6 pixel rows/columns are unused).
    """
    if patch_size <= 0 or resolution < patch_size:
        raise ConfigError(f"patch size {patch_size} does not fit resolution {resolution}")
    return (resolution // patch_size) ** 2


@dataclass(frozen=True)
class VisionConfig:
    resolution: int = 24
    patch_size: int = 8
    depth: int = 2
    width: int = 64
    heads: int = 4
    channels: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        patch_count(self.resolution, self.patch_size)
        if self.resolution % self.patch_size:
            raise ConfigError(f"resolution {self.resolution} is not a multiple of patch size {self.patch_size}")
        if self.depth < 1:
            raise ConfigError("vision depth must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"vision width {self.width} not divisible by {self.heads} heads")

    @property
    def num_patches(self) -> int:
        return patch_count(self.resolution, self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def share_freeze_k(self) -> int:
        """Prefix length frozen by the share recipe (12 at paper depth)."""
        return 12 if self.depth >= 12 else self.depth // 2

    def to_json(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, M, C*p*p)``, patches in row-major grid order."""
    b, c, h, w = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch_size * patch_size)


class VisionEncoder(Module):
    def __init__(self, cfg: VisionConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.patch_embed = Linear(cfg.patch_dim, cfg.width, rng, dtype)
        self.pos = normal(rng, (cfg.num_patches, cfg.width), INIT_STD, dtype)
        self.blocks = [Block(cfg.width, cfg.heads, rng, dtype, cfg.depth, cfg.mlp_ratio)
                       for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(cfg.width, dtype)

    def encode(self, images: np.ndarray) -> Tensor:
        """Patch features ``(B, M, d_x)``; a single ``(C, H, W)`` image gives ``(M, d_x)``."""
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        cfg = self.cfg
        if images.shape[1:] != (cfg.channels, cfg.resolution, cfg.resolution):
            raise C.ShapeError(
                f"image shape {images.shape[1:]} does not match "
                f"({cfg.channels}, {cfg.resolution}, {cfg.resolution})")
        patches = Tensor(patchify(images.astype(self.dtype, copy=False), cfg.patch_size))
        x = self.patch_embed(patches) + self.pos
        for block in self.blocks:
            x = block(x, causal=False)
        x = self.ln_f(x)
        return x[0] if single else x

    __call__ = encode

    def set_freeze_prefix(self, k: int) -> None:
        """Freeze the embeddings and the first ``k`` blocks; everything after trains.

        ``k = 0`` leaves the whole encoder trainable.
        """
        if not 0 <= k <= self.cfg.depth:
            raise ConfigError(f"freeze prefix {k} outside [0, {self.cfg.depth}]")
        self.set_trainable(True)
        if k == 0:
            return
        self.patch_embed.set_trainable(False)
        self.pos.trainable = False
        for block in self.blocks[:k]:
            block.set_trainable(False)
