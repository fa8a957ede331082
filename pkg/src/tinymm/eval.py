"""Exact-match QA, a POPE-style presence probe, perplexity, and run reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import compute as C
from .assembly import TinyMM, token_loss
from .conversation import ASSISTANT_ROLE, HUMAN_ROLE, ConversationRecord, TokenizedSample, Turn
from .data import CAPTION_PROMPT, COUNT_QUESTION, SceneSpec, answer

PRESENCE_PREFIX = "is there a "
COLOR_PREFIX = "what color is the "


def normalize(text: str) -> str:
    return text.strip().lower()


def exact_match(predictions: Sequence[str], golds: Sequence[str]) -> float:
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        return 0.0
    return sum(normalize(p) == normalize(g) for p, g in zip(predictions, golds)) / len(golds)


@dataclass(frozen=True)
class QAItem:
    image: str
    question: str
    answer: str
    kind: str          # caption | color | count | presence


def question_kind(question: str) -> str:
    if question == CAPTION_PROMPT:
        return "caption"
    if question.startswith(PRESENCE_PREFIX):
        return "presence"
    if question.startswith(COLOR_PREFIX):
        return "color"
    if question == COUNT_QUESTION:
        return "count"
    return "other"


def extract_items(records: Sequence[ConversationRecord]) -> list[QAItem]:
    items = []
    for rec in records:
        for q, a in zip(rec.turns[0::2], rec.turns[1::2]):
            items.append(QAItem(rec.image, q.text, a.text, question_kind(q.text)))
    return items


def oracle_answer(item: QAItem, scene: SceneSpec) -> str:
    """Answer recomputed from the scene alone (independent of the stored record)."""
    if item.kind == "caption":
        return answer(scene, "caption")
    if item.kind == "count":
        return answer(scene, "count")
    if item.kind == "color":
        return answer(scene, "color", shape=item.question[len(COLOR_PREFIX):-1])
    if item.kind == "presence":
        color, shape = item.question[len(PRESENCE_PREFIX):-1].split(" ")
        return answer(scene, "presence", shape=shape, color=color)
    raise ValueError(f"no oracle for question {item.question!r}")


# -- presence probe ----------------------------------------------------------

def parse_yes_no(text: str) -> str | None:
    t = normalize(text)
    if t.startswith("yes"):
        return "yes"
    if t.startswith("no"):
        return "no"
    return None


def presence_metrics(answers: Sequence[str], golds: Sequence[str]) -> dict[str, float]:
    """Accuracy, fraction answered yes, and F1 with "no" (absent object) as the positive class."""
    if len(answers) != len(golds):
        raise ValueError("answers and golds differ in length")
    parsed = [parse_yes_no(a) for a in answers]
    golds = [normalize(g) for g in golds]
    n = len(golds)
    correct = sum(p == g for p, g in zip(parsed, golds))
    yes = sum(p == "yes" for p in parsed)
    tn = sum(p == "no" and g == "no" for p, g in zip(parsed, golds))
    pred_no = sum(p == "no" for p in parsed)
    gold_no = sum(g == "no" for g in golds)
    precision = tn / pred_no if pred_no else 0.0
    recall = tn / gold_no if gold_no else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": correct / n if n else 0.0, "yes_rate": yes / n if n else 0.0, "f1_negative": f1}


Responder = Callable[[Sequence[QAItem]], list[str]]


def presence_probe(responder: Responder, items: Sequence[QAItem]) -> dict[str, float]:
    items = [it for it in items if it.kind == "presence"]
    return presence_metrics(responder(items), [it.answer for it in items])


class ModelResponder:
    """Answers questions the way the model is trained to: caption first, then the question.

    The caption in the context is the model's own greedy output, never the gold one.
    """

    def __init__(self, model: TinyMM, images, batch_size: int = 64, max_caption: int = 96, max_answer: int = 8):
        self.model, self.images = model, images
        self.batch_size, self.max_caption, self.max_answer = batch_size, max_caption, max_answer
        self.captions: dict[str, str] = {}

    def _caption_all(self, image_ids: Sequence[str]) -> None:
        todo = sorted(set(image_ids) - set(self.captions))
        for start in range(0, len(todo), self.batch_size):
            chunk = todo[start:start + self.batch_size]
            prompts = [ConversationRecord(i, [Turn(HUMAN_ROLE, CAPTION_PROMPT)]) for i in chunk]
            outs = self.model.generate_batch(self.images.stack(chunk), prompts, self.max_caption)
            self.captions.update(zip(chunk, outs))

    def __call__(self, items: Sequence[QAItem]) -> list[str]:
        self._caption_all([it.image for it in items])
        answers: list[str] = []
        for start in range(0, len(items), self.batch_size):
            chunk = items[start:start + self.batch_size]
            prompts = []
            for it in chunk:
                if it.kind == "caption":
                    prompts.append(None)
                    continue
                prompts.append(ConversationRecord(it.image, [
                    Turn(HUMAN_ROLE, CAPTION_PROMPT), Turn(ASSISTANT_ROLE, self.captions[it.image]),
                    Turn(HUMAN_ROLE, it.question)]))
            live = [k for k, p in enumerate(prompts) if p is not None]
            outs = self.model.generate_batch(self.images.stack([chunk[k].image for k in live]),
                                             [prompts[k] for k in live], self.max_answer) if live else []
            by_pos = dict(zip(live, outs))
            answers.extend(by_pos.get(k, self.captions[it.image]) for k, it in enumerate(chunk))
        return answers


def constant_responder(reply: str) -> Responder:
    return lambda items: [reply] * len(items)


def oracle_responder(scenes: dict[str, SceneSpec]) -> Responder:
    return lambda items: [oracle_answer(it, scenes[it.image]) for it in items]


# -- perplexity ----------------------------------------------------------------

def perplexity(model: TinyMM, images: np.ndarray, samples: Sequence[TokenizedSample], batch_size: int = 32) -> float:
    """``exp`` of the mean cross-entropy over every supervised token in the split."""
    if not samples:
        raise ValueError("perplexity needs a non-empty split")
    total, count = 0.0, 0
    with C.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = list(samples[start:start + batch_size])
            logits, labels = model.forward(images[start:start + batch_size], chunk)
            per_sample = token_loss(logits, labels).data
            n = (labels[:, 1:] != -100).sum(axis=1)
            total += float(np.sum(per_sample.astype(np.float64) * n))
            count += int(n.sum())
    return math.exp(total / count)


# -- full evaluation -------------------------------------------------------------

def evaluate(model: TinyMM, records: Sequence[ConversationRecord], images, samples: Sequence[TokenizedSample] | None = None,
             responder: Responder | None = None) -> dict[str, float]:
    """Held-out metrics: QA exact match (color and count), caption match, presence probe, perplexity."""
    items = extract_items(records)
    responder = responder or ModelResponder(model, images)
    answers = responder(items)
    by_kind: dict[str, tuple[list[str], list[str]]] = {}
    for it, a in zip(items, answers):
        preds, golds = by_kind.setdefault(it.kind, ([], []))
        preds.append(a)
        golds.append(it.answer)
    qa_preds = by_kind.get("color", ([], []))[0] + by_kind.get("count", ([], []))[0]
    qa_golds = by_kind.get("color", ([], []))[1] + by_kind.get("count", ([], []))[1]
    metrics = {
        "qa_exact_match": exact_match(qa_preds, qa_golds),
        "color_exact_match": exact_match(*by_kind.get("color", ([], []))),
        "count_exact_match": exact_match(*by_kind.get("count", ([], []))),
        "caption_exact_match": exact_match(*by_kind.get("caption", ([], []))),
    }
    pres = presence_metrics(*by_kind.get("presence", ([], [])))
    metrics.update({f"presence_{k}": v for k, v in pres.items()})
    if samples is not None:
        stacked = images.stack([r.image for r in records])
        metrics["perplexity"] = perplexity(model, stacked, samples)
    return metrics


# -- reports -------------------------------------------------------------------

def _sort_key(row: dict):
    return (str(row.get("recipe", "")), int(row.get("model_size", 0)), str(row.get("connector", "")),
            str(row.get("run_id", "")))


def report(results: Sequence[dict], out_dir: str | Path | None = None) -> tuple[str, str]:
    """JSON document and plain-text table, one row per run sorted by (recipe, size).

    Each result follows ``{"run_id", "config_hash", "metrics": {...}, "step"}``
    plus optional ``recipe``/``connector``/``model_size`` labels.
    """
    rows = sorted(results, key=_sort_key)
    metric_names = sorted({k for r in rows for k in r.get("metrics", {})})
    header = ["run_id", "recipe", "connector", "model_size", "step"] + metric_names
    lines = ["\t".join(header)]
    for r in rows:
        cells = [str(r.get("run_id", "")), str(r.get("recipe", "")), str(r.get("connector", "")),
                 str(r.get("model_size", "")), str(r.get("step", ""))]
        for name in metric_names:
            v = r.get("metrics", {}).get(name)
            cells.append("" if v is None else f"{v:.4f}")
        lines.append("\t".join(cells))
    table = "\n".join(lines) + "\n"
    doc = json.dumps({"runs": list(rows)}, sort_keys=True, indent=1) + "\n"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(doc, encoding="utf-8")
        (out / "report.txt").write_text(table, encoding="utf-8")
    return doc, table
