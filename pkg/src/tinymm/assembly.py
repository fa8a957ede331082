"""The composed model: LM( splice( connector( vision(image) ) ) ), its losses, and greedy decoding."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import compute as C
from .compute import Tensor
from .connector import ConnectorConfig, build_connector
from .conversation import (ASSISTANT, BOS, EOS, HUMAN, IGNORE, IMAGE, PAD, ConversationRecord, TokenizedSample,
                           Vocab, render_prompt)
from .errors import ConfigError, ValidationError
from .lm import EmbeddingSequence, LanguageModel, LmConfig
from .nn import Module
from .vision import VisionConfig, VisionEncoder

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    lm_width: int = 128
    lm_depth: int = 4
    lm_heads: int = 4
    lm_max_len: int = 320
    lm_mlp_ratio: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    def lm_config(self, vocab_size: int) -> LmConfig:
        return LmConfig(vocab_size, self.lm_width, self.lm_depth, self.lm_heads, self.lm_max_len,
                        self.lm_mlp_ratio)

    def to_json(self) -> dict:
        return {
            "vision": self.vision.to_json(),
            "connector": self.connector.to_json(),
            "lm": {"width": self.lm_width, "depth": self.lm_depth, "heads": self.lm_heads,
                   "max_len": self.lm_max_len, "mlp_ratio": self.lm_mlp_ratio},
            "dtype": self.dtype,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        lm = obj.get("lm", {})
        unknown = set(obj) - {"vision", "connector", "lm", "dtype"}
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        try:
            return cls(
                vision=VisionConfig(**obj.get("vision", {})),
                connector=ConnectorConfig(**obj.get("connector", {})),
                lm_width=lm.get("width", 128), lm_depth=lm.get("depth", 4),
                lm_heads=lm.get("heads", 4), lm_max_len=lm.get("max_len", 320),
                lm_mlp_ratio=lm.get("mlp_ratio", 4),
                dtype=obj.get("dtype", "float32"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def with_dtype(self, dtype: str) -> "ModelConfig":
        obj = self.to_json()
        obj["dtype"] = dtype
        return ModelConfig.from_json(obj)


def config_hash(cfg: ModelConfig, vocab: Vocab) -> str:
    blob = json.dumps({"model": cfg.to_json(), "vocab": vocab.to_json()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class TinyMM(Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocab, seed: int = 0):
        self.cfg = cfg
        self.vocab = vocab
        dtype = DTYPES[cfg.dtype]
        rng = np.random.default_rng(seed)
        self.vision = VisionEncoder(cfg.vision, rng, dtype)
        self.connector = build_connector(cfg.connector, cfg.vision.width, cfg.lm_width, rng, dtype)
        self.lm = LanguageModel(cfg.lm_config(len(vocab)), rng, dtype)

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg, self.vocab)

    @property
    def num_visual_tokens(self) -> int:
        return self.connector.output_length(self.cfg.vision.num_patches)

    def submodules(self) -> dict[str, Module]:
        return {"vision": self.vision, "connector": self.connector, "lm": self.lm}

    def visual_tokens(self, images: np.ndarray) -> Tensor:
        """``(B, C, H, W)`` -> ``(B, m, d)``."""
        return self.connector(self.vision.encode(images))

    # -- splicing ----------------------------------------------------------
    def splice_index(self, ids_list: Sequence[np.ndarray], m: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
        """Row indices into ``[tok_embed; visual rows]`` for a right-padded batch.

        Returns ``(index, visual_mask, lengths)``.
        """
        vocab_size = len(self.vocab)
        lengths = []
        for ids in ids_list:
            _check_single_image(ids)
            lengths.append(len(ids) - 1 + m)
        width = max(lengths)
        index = np.full((len(ids_list), width), PAD, dtype=np.int64)
        visual = np.zeros((len(ids_list), width), dtype=bool)
        for b, ids in enumerate(ids_list):
            p = int(np.flatnonzero(ids == IMAGE)[0])
            index[b, :p] = ids[:p]
            index[b, p:p + m] = vocab_size + b * m + np.arange(m)
            index[b, p + m:lengths[b]] = ids[p + 1:]
            visual[b, p:p + m] = True
        return index, visual, lengths

    def embed_batch(self, visual: Tensor, ids_list: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray, list[int]]:
        b, m, d = visual.shape
        index, vis_mask, lengths = self.splice_index(ids_list, m)
        table = C.concat([self.lm.tok_embed, C.reshape(visual, (b * m, d))], axis=0)
        return C.take_rows(table, index), vis_mask, lengths

    def forward(self, images: np.ndarray, samples: Sequence[TokenizedSample]) -> tuple[Tensor, np.ndarray]:
        """Teacher-forced logits ``(B, L, V)`` and spliced labels ``(B, L)``."""
        visual = self.visual_tokens(images)
        x, vis_mask, lengths = self.embed_batch(visual, [s.ids for s in samples])
        labels = np.full(vis_mask.shape, IGNORE, dtype=np.int64)
        for b, s in enumerate(samples):
            labels[b] = splice_labels(s.labels, s.image_pos, visual.shape[1], labels.shape[1])
        logits = self.lm.lm_logits(self.lm.decode(x))
        return logits, labels

    def per_sample_loss(self, images: np.ndarray, samples: Sequence[TokenizedSample]) -> Tensor:
        logits, labels = self.forward(images, samples)
        return token_loss(logits, labels)

    def batch_loss(self, images: np.ndarray, samples: Sequence[TokenizedSample]) -> Tensor:
        """Mean over samples of each sample's token-averaged loss."""
        return C.mean(self.per_sample_loss(images, samples))

    def loss_sft(self, image: np.ndarray, sample: TokenizedSample) -> Tensor:
        if sample.num_supervised == 0:
            raise ValidationError("sample has no supervised labels")
        return C.reshape(self.per_sample_loss(image[None], [sample]), ())

    def loss_pretrain(self, image: np.ndarray, caption_sample: TokenizedSample) -> Tensor:
        if caption_sample.num_supervised == 0:
            raise ValidationError("caption sample has no supervised labels")
        if len(caption_sample.spans) > 1:
            raise ValidationError("caption sample must have a single supervised response")
        return self.loss_sft(image, caption_sample)

    # -- decoding ----------------------------------------------------------
    def next_token_logits(self, visual: Tensor, ids_list: Sequence[np.ndarray]) -> np.ndarray:
        """Logits ``(B, V)`` at the last real position of each sequence."""
        x, _, lengths = self.embed_batch(visual, ids_list)
        hidden = self.lm.decode(x).data[np.arange(len(ids_list)), np.asarray(lengths) - 1]
        return self.lm.lm_logits(Tensor(hidden)).data

    def generate_ids(self, images: np.ndarray, prompts: Sequence[TokenizedSample],
                     max_new: int) -> list[list[int]]:
        """Greedy decoding for a batch; each output stops at (and excludes) EOS."""
        outputs: list[list[int]] = [[] for _ in prompts]
        if max_new <= 0 or not prompts:
            return outputs
        for p in prompts:
            if p.ids[-1] != ASSISTANT:
                raise ValidationError("prompt must end with the assistant marker")
        with C.no_grad():
            visual = self.visual_tokens(images)
            seqs = [list(p.ids) for p in prompts]
            active = list(range(len(prompts)))
            m = visual.shape[1]
            banned = [PAD, BOS, IMAGE, HUMAN, ASSISTANT]
            for _ in range(max_new):
                active = [b for b in active if len(seqs[b]) - 1 + m < self.lm.cfg.max_len]
                if not active:
                    break
                logits = self.next_token_logits(
                    Tensor(visual.data[active]), [np.asarray(seqs[b]) for b in active])
                # responses only ever contain text characters and the closing EOS
                logits[:, banned] = -np.inf
                tokens = np.argmax(logits, axis=-1)
                still = []
                for b, tok in zip(active, tokens):
                    tok = int(tok)
                    if tok == EOS:
                        continue
                    seqs[b].append(tok)
                    outputs[b].append(tok)
                    still.append(b)
                active = still
                if not active:
                    break
        return outputs

    def generate(self, image: np.ndarray, prompt: ConversationRecord, max_new: int) -> str:
        sample = render_prompt(prompt, self.vocab)
        ids = self.generate_ids(image[None], [sample], max_new)[0]
        return self.vocab.decode(ids)

    def generate_batch(self, images: np.ndarray, prompts: Sequence[ConversationRecord],
                       max_new: int) -> list[str]:
        samples = [render_prompt(p, self.vocab) for p in prompts]
        return [self.vocab.decode(ids) for ids in self.generate_ids(images, samples, max_new)]


def _check_single_image(ids: np.ndarray) -> None:
    n = int(np.sum(np.asarray(ids) == IMAGE))
    if n != 1:
        raise ValidationError(f"expected exactly one <image> token, found {n}")


def splice_labels(labels: np.ndarray, image_pos: int, m: int, width: int | None = None) -> np.ndarray:
    """Labels after replacing the image token with ``m`` IGNORE-labelled visual slots."""
    out = np.concatenate([labels[:image_pos], np.full(m, IGNORE, dtype=np.int64), labels[image_pos + 1:]])
    if width is not None:
        out = np.concatenate([out, np.full(width - len(out), IGNORE, dtype=np.int64)])
    return out


def splice_visual(sample: TokenizedSample, visual: Tensor, embed_table: Tensor) -> tuple[EmbeddingSequence, np.ndarray]:
    """Single-sample splice: text embeddings with the image row replaced by ``visual`` (m x d)."""
    ids = np.asarray(sample.ids)
    _check_single_image(ids)
    p = int(np.flatnonzero(ids == IMAGE)[0])
    m = visual.shape[0]
    parts = [C.embed(embed_table, ids[:p]), visual, C.embed(embed_table, ids[p + 1:])]
    seq = C.concat(parts, axis=0)
    origin = np.zeros(len(ids) - 1 + m, dtype=bool)
    origin[p:p + m] = True
    return EmbeddingSequence(seq, origin), splice_labels(sample.labels, p, m)


def token_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample mean next-token cross-entropy over supervised (non-IGNORE) labels."""
    targets = labels[:, 1:]
    return C.masked_token_nll(logits[:, :-1], targets, targets != IGNORE)
