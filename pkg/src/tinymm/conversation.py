"""Character tokenizer, chat template, and assistant-only label masking.

Template (no system slot)::

    <bos> <human> q1 <assistant> a1 <eos> <human> q2 <assistant> a2 <eos> ...

Only the response characters and the EOS that closes each response are
supervised; every other label is :data:`IGNORE`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

IMAGE_PLACEHOLDER = "<image>"
SPECIALS = ("<pad>", "<bos>", "<eos>", IMAGE_PLACEHOLDER, "<human>", "<assistant>")
PAD, BOS, EOS, IMAGE, HUMAN, ASSISTANT = range(len(SPECIALS))
IGNORE = -100

HUMAN_ROLE = "human"
ASSISTANT_ROLE = "assistant"


@dataclass(frozen=True)
class Turn:
    role: str
    text: str


@dataclass
class ConversationRecord:
    image: str
    turns: list[Turn]

    @property
    def num_pairs(self) -> int:
        return len(self.turns) // 2

    def validate(self, complete: bool = True) -> None:
        """Check alternation and image placement.

        With ``complete=False`` the record may end on a human turn (a prompt).
        """
        if not self.turns:
            raise ValidationError("conversation has no turns")
        for i, turn in enumerate(self.turns):
            expected = HUMAN_ROLE if i % 2 == 0 else ASSISTANT_ROLE
            if turn.role != expected:
                raise ValidationError(f"turn {i} has role {turn.role!r}, expected {expected!r}")
        if complete and len(self.turns) % 2:
            raise ValidationError("conversation ends on a human turn")
        counts = [t.text.count(IMAGE_PLACEHOLDER) for t in self.turns]
        if counts[0] != 1 or sum(counts) != 1:
            raise ValidationError("exactly one <image> placeholder must appear, in the first human turn")

    def prefix(self, n_turns: int) -> "ConversationRecord":
        return ConversationRecord(self.image, list(self.turns[:n_turns]))

    def to_json(self) -> dict:
        return {"image": self.image, "turns": [{"role": t.role, "text": t.text} for t in self.turns]}

    @classmethod
    def from_json(cls, obj: dict) -> "ConversationRecord":
        try:
            turns = [Turn(t["role"], t["text"]) for t in obj["turns"]]
            return cls(str(obj["image"]), turns)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad conversation record: {exc}") from exc


@dataclass
class TokenizedSample:
    ids: np.ndarray
    labels: np.ndarray
    image_pos: int | None
    spans: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_supervised(self) -> int:
        return int(np.sum(self.labels != IGNORE))


class Vocab:
    """Bijection between tokens (specials, then single characters) and ids."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValidationError("vocabulary must start with the reserved specials")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("duplicate vocabulary entries")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for k, piece in enumerate(text.split(IMAGE_PLACEHOLDER)):
            if k:
                ids.append(IMAGE)
            for ch in piece:
                try:
                    ids.append(self.index[ch])
                except KeyError:
                    raise ValidationError(f"character {ch!r} not in vocabulary") from None
        return ids

    def decode(self, ids: Iterable[int], keep_specials: bool = False) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < len(SPECIALS):
                if keep_specials or i == IMAGE:
                    out.append(SPECIALS[i])
                continue
            out.append(self.tokens[i])
        return "".join(out)

    def to_json(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Vocab":
        return cls(tokens)


def build_vocab(corpus: Iterable[str]) -> Vocab:
    chars: set[str] = set()
    for text in corpus:
        chars.update(text.replace(IMAGE_PLACEHOLDER, ""))
    return Vocab(list(SPECIALS) + sorted(chars))


def corpus_texts(records: Iterable[ConversationRecord]) -> Iterable[str]:
    for rec in records:
        for turn in rec.turns:
            yield turn.text


def mask_labels(ids: Sequence[int], assistant_spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Labels equal to ``ids`` inside the half-open spans, IGNORE elsewhere."""
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.full(len(ids), IGNORE, dtype=np.int64)
    covered = np.zeros(len(ids), dtype=bool)
    for start, stop in assistant_spans:
        if not 0 <= start <= stop <= len(ids):
            raise ValidationError(f"span [{start}, {stop}) outside sequence of length {len(ids)}")
        if covered[start:stop].any():
            raise ValidationError(f"span [{start}, {stop}) overlaps an earlier span")
        covered[start:stop] = True
        labels[start:stop] = ids[start:stop]
    return labels


def _render(turns: Sequence[Turn], vocab: Vocab, open_assistant: bool) -> tuple[list[int], list[tuple[int, int]]]:
    ids = [BOS]
    spans = []
    for turn in turns:
        if turn.role == HUMAN_ROLE:
            ids.append(HUMAN)
            ids.extend(vocab.encode(turn.text))
        else:
            ids.append(ASSISTANT)
            start = len(ids)
            ids.extend(vocab.encode(turn.text))
            ids.append(EOS)
            spans.append((start, len(ids)))
    if open_assistant:
        ids.append(ASSISTANT)
    return ids, spans


def _image_pos(ids: Sequence[int]) -> int | None:
    where = [i for i, t in enumerate(ids) if t == IMAGE]
    return where[0] if len(where) == 1 else None


def render_conversation(rec: ConversationRecord, vocab: Vocab) -> TokenizedSample:
    rec.validate()
    ids, spans = _render(rec.turns, vocab, open_assistant=False)
    return TokenizedSample(np.asarray(ids, dtype=np.int64), mask_labels(ids, spans), _image_pos(ids), spans)


def render_prompt(rec: ConversationRecord, vocab: Vocab) -> TokenizedSample:
    """Render a prefix ending on a human turn, followed by the assistant marker."""
    rec.validate(complete=False)
    if len(rec.turns) % 2 == 0:
        raise ValidationError("a prompt must end on a human turn")
    ids, spans = _render(rec.turns, vocab, open_assistant=True)
    return TokenizedSample(np.asarray(ids, dtype=np.int64), mask_labels(ids, spans), _image_pos(ids), spans)


def derive_caption_pair(rec: ConversationRecord, vocab: Vocab) -> TokenizedSample:
    """Image context plus the first response as the only supervised span."""
    if len(rec.turns) < 2:
        raise ValidationError("record has no assistant turn")
    return render_conversation(rec.prefix(2), vocab)


def read_jsonl(path: str | Path) -> list[ConversationRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ConversationRecord.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_jsonl(path: str | Path, records: Iterable[ConversationRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
