"""Procedural shapes corpus: rendered scenes plus caption and QA conversations.

Scenes place 1-3 objects with distinct shapes on a 3x3 grid of cells.  A fixed
set of (shape, color, cell) triples is reserved for the test split, so held-out
scenes only contain object placements never seen in training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .conversation import ASSISTANT_ROLE, HUMAN_ROLE, IMAGE_PLACEHOLDER, ConversationRecord, Turn, read_jsonl, write_jsonl
from .errors import ValidationError

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
}
COLOR_NAMES = tuple(COLORS)
GRID = 3
CELL_NAMES = ("top left", "top", "top right", "left", "center", "right",
              "bottom left", "bottom", "bottom right")
COUNT_WORDS = ("zero", "one", "two", "three")

CAPTION_PROMPT = IMAGE_PLACEHOLDER + "\ndescribe the image."
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int

    @property
    def triple(self) -> tuple[str, str, int]:
        return (self.shape, self.color, self.cell)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    resolution: int = 24

    def validate(self) -> None:
        if not 1 <= len(self.objects) <= 3:
            raise ValidationError(f"scene needs 1-3 objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValidationError("two objects share a grid cell")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS or not 0 <= o.cell < GRID * GRID:
                raise ValidationError(f"invalid object {o}")
        if self.resolution < GRID:
            raise ValidationError(f"resolution {self.resolution} too small for a {GRID}x{GRID} grid")

    def pairs(self) -> set[tuple[str, str]]:
        return {(o.shape, o.color) for o in self.objects}

    def to_json(self) -> dict:
        return {"resolution": self.resolution,
                "objects": [{"shape": o.shape, "color": o.color, "cell": o.cell} for o in self.objects]}

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        objs = tuple(SceneObject(o["shape"], o["color"], int(o["cell"])) for o in obj["objects"])
        return cls(objs, int(obj["resolution"]))


def _cell_bounds(cell: int, resolution: int) -> tuple[int, int, int, int]:
    r, c = divmod(cell, GRID)
    edges = [round(i * resolution / GRID) for i in range(GRID + 1)]
    return edges[r], edges[r + 1], edges[c], edges[c + 1]


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Filled shapes on a white canvas, float32 ``(3, R, R)`` in [0, 1]."""
    spec.validate()
    res = spec.resolution
    img = np.ones((3, res, res), dtype=np.float32)
    for obj in spec.objects:
        top, bottom, left, right = _cell_bounds(obj.cell, res)
        ys, xs = np.mgrid[top:bottom, left:right].astype(np.float64) + 0.5
        cy, cx = (top + bottom) / 2, (left + right) / 2
        size = min(bottom - top, right - left)
        dy, dx = ys - cy, xs - cx
        if obj.shape == "circle":
            inside = dy ** 2 + dx ** 2 <= (0.4 * size) ** 2
        elif obj.shape == "square":
            inside = (np.abs(dy) <= 0.34 * size) & (np.abs(dx) <= 0.34 * size)
        else:
            # apex up; half-width grows linearly from apex to base
            h = 0.4 * size
            frac = (dy + h) / (2 * h)
            inside = (frac >= 0) & (frac <= 1) & (np.abs(dx) <= frac * 0.45 * size)
        color = np.asarray(COLORS[obj.color], dtype=np.float32)
        region = img[:, top:bottom, left:right]
        region[:, inside] = color[:, None]
    return img


def reserved_triples() -> frozenset[tuple[str, str, int]]:
    """Triples seen only in the test split.

    Exactly one cell per (shape, color); every (shape, color), (shape, cell) and
    (color, cell) pair still occurs in the training pool.
    """
    out = set()
    for s, shape in enumerate(SHAPES):
        for c, color in enumerate(COLOR_NAMES):
            out.add((shape, color, (-s - 2 * c) % (GRID * GRID)))
    return frozenset(out)


def all_triples() -> frozenset[tuple[str, str, int]]:
    return frozenset((s, c, cell) for s in SHAPES for c in COLOR_NAMES for cell in range(GRID * GRID))


def _sample_scene(rng: np.random.Generator, pool: frozenset, resolution: int) -> SceneSpec:
    by_shape = {s: sorted(t for t in pool if t[0] == s) for s in SHAPES}
    while True:
        n = int(rng.integers(1, 4))
        shapes = [SHAPES[i] for i in sorted(rng.choice(len(SHAPES), size=n, replace=False))]
        objects, used = [], set()
        for shape in shapes:
            options = [t for t in by_shape[shape] if t[2] not in used]
            if not options:
                break
            _, color, cell = options[int(rng.integers(len(options)))]
            used.add(cell)
            objects.append(SceneObject(shape, color, cell))
        else:
            objects.sort(key=lambda o: o.cell)
            return SceneSpec(tuple(objects), resolution)


def caption(spec: SceneSpec) -> str:
    parts = [f"{o.color} {o.shape} at {CELL_NAMES[o.cell]}" for o in sorted(spec.objects, key=lambda o: o.cell)]
    return ", ".join(parts) + "."


def color_question(shape: str) -> str:
    return f"what color is the {shape}?"


COUNT_QUESTION = "how many shapes?"


def presence_question(shape: str, color: str) -> str:
    return f"is there a {color} {shape}?"


def answer(spec: SceneSpec, kind: str, shape: str | None = None, color: str | None = None) -> str:
    """Ground-truth answer for a question template; the generator and evaluator share it."""
    if kind == "caption":
        return caption(spec)
    if kind == "count":
        return COUNT_WORDS[len(spec.objects)]
    if kind == "color":
        colors = [o.color for o in spec.objects if o.shape == shape]
        if len(colors) != 1:
            raise ValidationError(f"color question needs exactly one {shape}")
        return colors[0]
    if kind == "presence":
        return "yes" if (shape, color) in spec.pairs() else "no"
    raise ValueError(f"unknown question kind {kind!r}")


PROBES = 3


def gen_record(seed, pool: frozenset | None = None, resolution: int = 24,
               image_id: str | None = None, polarity: Sequence[bool] | None = None) -> tuple[SceneSpec, ConversationRecord]:
    """One scene and its conversation: caption first, then shuffled QA turns.

    The QA turns are color-of-shape, object count and one presence probe per
    entry of ``polarity`` (True asks about a present pair, False about an absent
    one).  ``None`` draws ``PROBES`` independent coin flips from the seed.
    Probes never repeat within a record unless a scene has fewer present pairs
    than requested positives.
    """
    rng = np.random.default_rng(seed)
    spec = _sample_scene(rng, pool if pool is not None else all_triples(), resolution)
    target = spec.objects[int(rng.integers(len(spec.objects)))]
    coins = [bool(c) for c in rng.integers(2, size=PROBES)]
    polarity = coins if polarity is None else [bool(p) for p in polarity]
    present = sorted(spec.pairs())
    absent = [(s, c) for s in SHAPES for c in COLOR_NAMES if (s, c) not in spec.pairs()]
    qa = [
        (color_question(target.shape), answer(spec, "color", shape=target.shape)),
        (COUNT_QUESTION, answer(spec, "count")),
    ]
    asked: set[tuple[str, str]] = set()
    for positive in polarity:
        pool_ = present if positive else absent
        fresh = [p for p in pool_ if p not in asked] or pool_
        probe = fresh[int(rng.integers(len(fresh)))]
        asked.add(probe)
        qa.append((presence_question(*probe), answer(spec, "presence", *probe)))
    order = rng.permutation(len(qa))
    turns = [Turn(HUMAN_ROLE, CAPTION_PROMPT), Turn(ASSISTANT_ROLE, caption(spec))]
    for i in order:
        q, a = qa[i]
        turns += [Turn(HUMAN_ROLE, q), Turn(ASSISTANT_ROLE, a)]
    if image_id is None:
        image_id = f"scene-{seed}"
    return spec, ConversationRecord(image_id, turns)


def split_sizes(n: int) -> dict[str, int]:
    n_test = n_val = n // 10
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def gen_corpus(n: int, seed: int, out_dir: str | Path, resolution: int = 24) -> dict[str, int]:
    """Write ``{train,val,test}.jsonl``, ``scenes.json``, ``images.bin`` and ``images.json``.

    Train and val draw from the non-reserved triples, test only from the
    reserved ones.  Output is byte-identical for equal ``(n, seed, resolution)``.
    """
    if n < 10:
        raise ValueError("corpus needs at least 10 records")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reserved = reserved_triples()
    pools = {"train": all_triples() - reserved, "val": all_triples() - reserved, "test": reserved}
    sizes = split_sizes(n)
    scenes, index, offset = {}, {}, 0
    with open(out / "images.bin", "wb") as blob:
        for code, split in enumerate(SPLITS):
            records = []
            # a shuffled half-yes/half-no schedule balances each split to within one probe
            total = PROBES * sizes[split]
            schedule = np.random.default_rng([seed, code, 1]).permutation(
                np.arange(total) < (total + 1) // 2).tolist()
            for i in range(sizes[split]):
                image_id = f"{split}-{i:05d}"
                spec, rec = gen_record([seed, code, i], pools[split], resolution, image_id,
                                       schedule[PROBES * i:PROBES * (i + 1)])
                pixels = render_scene(spec).astype("<f4")
                blob.write(pixels.tobytes())
                index[image_id] = {"offset": offset, "shape": list(pixels.shape)}
                offset += pixels.nbytes
                scenes[image_id] = spec.to_json()
                records.append(rec)
            write_jsonl(out / f"{split}.jsonl", records)
    _dump(out / "images.json", index)
    _dump(out / "scenes.json", scenes)
    _dump(out / "meta.json", {"n": n, "seed": seed, "resolution": resolution, "splits": sizes})
    return sizes


def _dump(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


class ImageArchive:
    """Random access into ``images.bin`` through the JSON offset index."""

    def __init__(self, directory: str | Path):
        directory = Path(directory)
        with open(directory / "images.json", encoding="utf-8") as fh:
            self.index = json.load(fh)
        self._blob = np.fromfile(directory / "images.bin", dtype="<f4")

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.index

    def __getitem__(self, image_id: str) -> np.ndarray:
        entry = self.index[image_id]
        start = entry["offset"] // 4
        size = int(np.prod(entry["shape"]))
        return self._blob[start:start + size].reshape(entry["shape"])

    def stack(self, image_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self[i] for i in image_ids])


@dataclass
class Corpus:
    directory: Path
    splits: dict[str, list[ConversationRecord]]
    scenes: dict[str, SceneSpec]
    images: ImageArchive

    @classmethod
    def load(cls, directory: str | Path) -> "Corpus":
        directory = Path(directory)
        splits = {}
        for split in SPLITS:
            path = directory / f"{split}.jsonl"
            if not path.exists():
                raise FileNotFoundError(f"missing corpus file {path}")
            splits[split] = read_jsonl(path)
        with open(directory / "scenes.json", encoding="utf-8") as fh:
            scenes = {k: SceneSpec.from_json(v) for k, v in json.load(fh).items()}
        return cls(directory, splits, scenes, ImageArchive(directory))

    def all_records(self) -> list[ConversationRecord]:
        return [r for split in SPLITS for r in self.splits[split]]
