"""Decoder-only language model over mixed text/visual embedding sequences."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import compute as C
from .compute import Tensor
from .errors import ConfigError
from .nn import INIT_STD, Block, LayerNorm, Module, normal


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    width: int = 128
    depth: int = 4
    heads: int = 4
    max_len: int = 320
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"LM width {self.width} not divisible by {self.heads} heads")
        if self.depth < 1 or self.vocab_size < 1 or self.max_len < 1:
            raise ConfigError("LM depth, vocab size and max length must be positive")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingSequence:
    embeddings: Tensor          # (L, d) or (B, L, d)
    visual: np.ndarray          # bool, same leading shape; True where a row came from the connector

    def __len__(self) -> int:
        return self.embeddings.shape[-2]


class LanguageModel(Module):
    def __init__(self, cfg: LmConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.tok_embed = normal(rng, (cfg.vocab_size, cfg.width), INIT_STD, dtype)
        self.pos = normal(rng, (cfg.max_len, cfg.width), INIT_STD, dtype)
        self.blocks = [Block(cfg.width, cfg.heads, rng, dtype, cfg.depth, cfg.mlp_ratio)
                       for _ in range(cfg.depth)]
        self.ln_f = LayerNorm(cfg.width, dtype)

    def decode(self, seq: EmbeddingSequence | Tensor) -> Tensor:
        x = seq.embeddings if isinstance(seq, EmbeddingSequence) else seq
        single = x.ndim == 2
        if single:
            x = C.reshape(x, (1,) + x.shape)
        length = x.shape[1]
        if length < 1:
            raise ValueError("cannot decode an empty sequence")
        if length > self.cfg.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        x = x + self.pos[:length]
        for block in self.blocks:
            x = block(x, causal=True)
        x = self.ln_f(x)
        return x[0] if single else x

    def lm_logits(self, hidden: Tensor) -> Tensor:
        """Tied, unbiased output head: ``hidden @ tok_embed.T``."""
        return C.matmul(hidden, C.transpose(self.tok_embed, (1, 0)))
