"""Connectors from patch features (width d_x) into the LM embedding space (width d)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import compute as C
from .compute import Tensor
from .errors import ConfigError
from .nn import INIT_STD, FeedForward, LayerNorm, Linear, Module, _merge_heads, _split_heads, attend, normal

CONNECTORS = ("mlp", "resampler")


@dataclass(frozen=True)
class ConnectorConfig:
    kind: str = "mlp"
    queries: int = 16
    heads: int = 4

    def __post_init__(self):
        if self.kind not in CONNECTORS:
            raise ConfigError(f"unknown connector {self.kind!r}; expected one of {CONNECTORS}")
        if self.queries < 1 or self.heads < 1:
            raise ConfigError("resampler needs at least one query and one head")

    def to_json(self) -> dict:
        return asdict(self)


def _batched(v: Tensor) -> tuple[Tensor, bool]:
    if v.ndim == 2:
        return C.reshape(v, (1,) + v.shape), True
    return v, False


class MlpConnector(Module):
    """Two linear layers with GELU between, applied to each patch independently."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d_in, d_out, rng, dtype)
        self.fc2 = Linear(d_out, d_out, rng, dtype)

    def __call__(self, v: Tensor) -> Tensor:
        return self.fc2(C.gelu(self.fc1(v)))

    def output_length(self, m: int) -> int:
        return m


class ResamplerConnector(Module):
    """Learned queries cross-attend once over the (position-free) patch features.

    Output length is the number of queries, independent of the patch count.
    """

    def __init__(self, d_in: int, d_out: int, queries: int, heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        if d_out % heads:
            raise ConfigError(f"resampler width {d_out} not divisible by {heads} heads")
        self.heads = heads
        self.kv_in = Linear(d_in, d_out, rng, dtype)
        self.latents = normal(rng, (queries, d_out), INIT_STD, dtype)
        self.ln_q = LayerNorm(d_out, dtype)
        self.ln_kv = LayerNorm(d_out, dtype)
        self.wq = Linear(d_out, d_out, rng, dtype)
        self.wk = Linear(d_out, d_out, rng, dtype)
        self.wv = Linear(d_out, d_out, rng, dtype)
        self.wo = Linear(d_out, d_out, rng, dtype)
        self.ln_mlp = LayerNorm(d_out, dtype)
        self.mlp = FeedForward(d_out, 4 * d_out, rng, dtype, INIT_STD)
        self.ln_out = LayerNorm(d_out, dtype)
        self.out = Linear(d_out, d_out, rng, dtype)

    def output_length(self, m: int) -> int:
        return self.latents.shape[0]

    def __call__(self, v: Tensor) -> Tensor:
        v, single = _batched(v)
        if v.shape[1] == 0:
            raise ValueError("resampler needs at least one patch feature")
        q_len, d = self.latents.shape
        kv = self.ln_kv(self.kv_in(v))
        q = self.wq(self.ln_q(self.latents))
        q = _split_heads(C.reshape(q, (1, q_len, d)), self.heads)
        k = _split_heads(self.wk(kv), self.heads)
        val = _split_heads(self.wv(kv), self.heads)
        h = self.wo(_merge_heads(attend(q, k, val))) + self.latents
        h = h + self.mlp(self.ln_mlp(h))
        out = self.out(self.ln_out(h))
        return out[0] if single else out


def build_connector(cfg: ConnectorConfig, d_in: int, d_out: int, rng: np.random.Generator,
                    dtype=np.float32) -> Module:
    if cfg.kind == "mlp":
        return MlpConnector(d_in, d_out, rng, dtype)
    return ResamplerConnector(d_in, d_out, cfg.queries, cfg.heads, rng, dtype)
