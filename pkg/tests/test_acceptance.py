"""Acceptance criteria 1-9; each test records one PASS/FAIL line for the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_config
from tinymm import compute as C
from tinymm.assembly import ModelConfig, TinyMM
from tinymm.cli import main as cli_main
from tinymm.connector import ConnectorConfig, ResamplerConnector
from tinymm.conversation import (IGNORE, build_vocab, corpus_texts, derive_caption_pair, render_conversation)
from tinymm.data import Corpus, gen_corpus, gen_record, render_scene
from tinymm.errors import ConfigError
from tinymm.eval import evaluate
from tinymm.gradcheck import SMALL_MODEL, TOLERANCE, run_all
from tinymm.training import RecipeConfig, Trainer, load_checkpoint, model_from_checkpoint, train_stage
from tinymm.vision import VisionConfig, patch_count

ROOT = Path(__file__).resolve().parents[1]
E2E_CONFIG = ROOT / "configs" / "e2e.json"
RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


def _snapshot(model: TinyMM) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters()}


def _changed(before: dict, model: TinyMM) -> set[str]:
    return {n for n, p in model.named_parameters() if p.data.tobytes() != before[n].tobytes()}


def _records(n: int, resolution: int = 8, seed: int = 11):
    pairs = [gen_record([seed, i], resolution=resolution) for i in range(n)]
    return [s for s, _ in pairs], [r for _, r in pairs]


@pytest.fixture(scope="module")
def setup():
    scenes, records = _records(24)
    vocab = build_vocab(corpus_texts(records))
    images = np.stack([render_scene(s) for s in scenes])
    return scenes, records, vocab, images


# -- 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    ok, results = run_all(SMALL_MODEL, log=lambda _msg: None)
    elapsed = time.perf_counter() - start
    worst = max(r.error for r in results)
    model_rows = [r for r in results if r.name.startswith("loss_")]
    largest = max(r.entries for r in model_rows)
    record(1, ok and elapsed < 60 and largest <= 10_000,
           f"{len(results)} checks, max rel err {worst:.2e} (< {TOLERANCE:g}), "
           f"largest model {largest} params, {elapsed:.1f}s (< 60s)")


# -- 2 ---------------------------------------------------------------------------

def test_criterion_2_masking_exactness():
    scenes, records = _records(100, seed=21)
    vocab = build_vocab(corpus_texts(records))
    model = TinyMM(tiny_config(), vocab, 0)
    rng = np.random.default_rng(2)
    leaks = mutated = 0
    for spec, rec in zip(scenes, records):
        sample = render_conversation(rec, vocab)
        image = render_scene(spec)[None]
        logits, labels = model.forward(image, [sample])
        logits.retain_grad()
        targets = labels[:, 1:]
        keep = targets != IGNORE
        loss = C.sum(C.masked_token_nll(logits[:, :-1], targets, keep))
        model.zero_grad()
        loss.backward()
        g = logits.grad
        ignored_rows = np.concatenate([~keep, np.ones((1, 1), dtype=bool)], axis=1)
        if np.any(g[ignored_rows] != 0):
            leaks += 1
        noisy = np.where(keep, targets, rng.integers(-1000, 1000, size=targets.shape))
        again = C.sum(C.masked_token_nll(logits[:, :-1], noisy, keep))
        if again.data.tobytes() != loss.data.tobytes():
            mutated += 1
    record(2, leaks == 0 and mutated == 0,
           f"100 samples: {leaks} with non-zero IGNORE-row logit grads, {mutated} loss changes after label mutation")


# -- 3 ---------------------------------------------------------------------------

def _partition_model(vocab) -> TinyMM:
    cfg = ModelConfig(vision=VisionConfig(resolution=8, patch_size=4, depth=4, width=8, heads=2),
                      connector=ConnectorConfig("mlp"), lm_width=12, lm_depth=2, lm_heads=2,
                      lm_max_len=320, lm_mlp_ratio=2, dtype="float64")
    return TinyMM(cfg, vocab, 0)


def test_criterion_3_recipe_partitions(setup, tmp_path):
    scenes, records, vocab, images = setup
    caps = [derive_caption_pair(r, vocab) for r in records]
    convs = [render_conversation(r, vocab) for r in records]
    fast = dict(learning_rate=1e-2, batch_size=4, micro_batch_size=4, epochs=2)
    problems = []

    model = _partition_model(vocab)
    before = _snapshot(model)
    pt = train_stage(model, images, caps, RecipeConfig.defaults("base", "PT", **fast), 0, max_steps=10)
    changed = _changed(before, model)
    connector = {n for n in before if n.startswith("connector.")}
    if changed != connector:
        problems.append("base PT changed non-connector or missed connector params")
    ckpt_path = tmp_path / "pt.ckpt"
    pt.save(ckpt_path)

    model = model_from_checkpoint(load_checkpoint(ckpt_path))
    before = _snapshot(model)
    train_stage(model, images, convs, RecipeConfig.defaults("base", "SFT", **fast), 0,
                init_from=load_checkpoint(ckpt_path), max_steps=10)
    changed = _changed(before, model)
    if any(n.startswith("vision.") for n in changed) or not any(n.startswith("lm.") for n in changed):
        problems.append("base SFT touched vision or left the LM unchanged")

    model = _partition_model(vocab)
    k = model.cfg.vision.share_freeze_k()
    before = _snapshot(model)
    train_stage(model, images, caps, RecipeConfig.defaults("share", "PT", **fast), 0,
                init_from=load_checkpoint(ckpt_path), max_steps=10)
    changed = _changed(before, model)
    prefix = [n for n in before if n.startswith("vision.") and
              (not n.startswith("vision.blocks.") or int(n.split(".")[2]) < k)]
    prefix = [n for n in prefix if not n.startswith("vision.ln_f")]
    later = [n for n in before if n.startswith("vision.blocks.") and int(n.split(".")[2]) >= k]
    if any(n in changed for n in prefix):
        problems.append("share PT changed a frozen-prefix vision param")
    if not all(n in changed for n in later):
        problems.append("share PT left a later vision block unchanged")

    refused = False
    try:
        train_stage(_partition_model(vocab), images, caps, RecipeConfig.defaults("share", "PT"), 0, max_steps=1)
    except ConfigError:
        refused = True
    if not refused:
        problems.append("share PT started without a connector checkpoint")
    record(3, not problems,
           f"k={k}, {len(prefix)} prefix tensors frozen, {len(later)} later tensors changed"
           if not problems else "; ".join(problems))


# -- 4 ---------------------------------------------------------------------------

def test_criterion_4_objective_equivalence():
    scenes, records = _records(50, seed=41)
    vocab = build_vocab(corpus_texts(records))
    model = TinyMM(tiny_config(), vocab, 0)
    worst = 0.0
    with C.no_grad():
        for spec, rec in zip(scenes, records):
            image = render_scene(spec)
            pre = model.loss_pretrain(image, derive_caption_pair(rec, vocab)).item()
            full = render_conversation(rec, vocab)
            first_end = full.spans[0][1]
            labels = full.labels.copy()
            labels[first_end:] = IGNORE
            restricted = dataclasses.replace(full, labels=labels, spans=full.spans[:1])
            sft = model.loss_sft(image, restricted).item()
            worst = max(worst, abs(pre - sft))
    record(4, worst < 1e-9, f"50 records, max |loss_pretrain - loss_sft(first turn)| = {worst:.2e} (< 1e-9)")


# -- 5 ---------------------------------------------------------------------------

def test_criterion_5_visual_token_arithmetic():
    got = (patch_count(336, 14), patch_count(384, 14))
    record(5, got == (576, 729), f"patch_count(336,14)={got[0]}, patch_count(384,14)={got[1]} (want 576, 729)")


# -- 6 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_end_to_end_learning(tmp_path):
    cfg = json.loads(E2E_CONFIG.read_text())
    start = time.perf_counter()
    gen_corpus(2000, cfg.get("seed", 0), tmp_path / "corpus", cfg["model"]["vision"]["resolution"])
    corpus = Corpus.load(tmp_path / "corpus")
    vocab = build_vocab(corpus_texts(corpus.all_records()))
    model_cfg = ModelConfig.from_json(cfg["model"])
    seed = cfg.get("seed", 0)
    train = corpus.splits["train"]
    images = corpus.images.stack([r.image for r in train])
    model = TinyMM(model_cfg, vocab, seed)
    n_params = model.num_parameters()

    untrained = evaluate(model, corpus.splits["test"], corpus.images)

    pt_recipe = RecipeConfig.from_json({"recipe": "base", "stage": "PT", **cfg.get("pretrain", {})})
    pt = train_stage(model, images, [derive_caption_pair(r, vocab) for r in train], pt_recipe, seed)
    pt.save(tmp_path / "pt.ckpt")
    pt_ckpt = load_checkpoint(tmp_path / "pt.ckpt")
    model = model_from_checkpoint(pt_ckpt)
    sft_recipe = RecipeConfig.from_json({"recipe": "base", "stage": "SFT", **cfg.get("finetune", {})})
    train_stage(model, images, [render_conversation(r, vocab) for r in train], sft_recipe, seed, init_from=pt_ckpt)
    trained_at = time.perf_counter() - start
    metrics = evaluate(model, corpus.splits["test"], corpus.images)
    elapsed = time.perf_counter() - start

    ok = (n_params <= 2_000_000 and metrics["qa_exact_match"] >= 0.9 and metrics["presence_accuracy"] >= 0.8
          and untrained["qa_exact_match"] <= 0.25 and elapsed < 15 * 60)
    record(6, ok,
           f"{n_params} params, test QA {metrics['qa_exact_match']:.3f} (>= 0.9), "
           f"presence {metrics['presence_accuracy']:.3f} (>= 0.8), caption {metrics['caption_exact_match']:.3f}, "
           f"untrained QA {untrained['qa_exact_match']:.3f} (<= 0.25), "
           f"train {trained_at:.0f}s, total {elapsed:.0f}s (< 900s)")


# -- 7 ---------------------------------------------------------------------------

SMALL_RUN = {
    "seed": 0,
    "model": {"vision": {"resolution": 8, "patch_size": 4, "depth": 4, "width": 8, "heads": 2, "mlp_ratio": 2},
              "connector": {"kind": "mlp"},
              "lm": {"width": 16, "depth": 1, "heads": 2, "max_len": 320, "mlp_ratio": 2}},
    "pretrain": {"batch_size": 8},
    "finetune": {"learning_rate": 1e-3, "batch_size": 8},
}


def _cli(*args) -> None:
    code = cli_main([str(a) for a in args])
    assert code == 0, f"tinymm {' '.join(map(str, args))} exited {code}"


def _pipeline(tmp: Path, cfg_path: Path, data: Path, recipe: str, base_pt: Path | None = None) -> Path:
    pt = tmp / f"{recipe}_pt.ckpt"
    extra = ["--init-connector", base_pt] if recipe == "share" else []
    _cli("pretrain", "--config", cfg_path, "--data", data, "--out", pt, "--recipe", recipe, "--log-every", 0, *extra)
    sft = tmp / f"{recipe}_sft.ckpt"
    _cli("finetune", "--config", cfg_path, "--data", data, "--out", sft, "--init", pt, "--recipe", recipe,
         "--log-every", 0)
    _cli("eval", "--checkpoint", sft, "--data", data, "--report", tmp / recipe, "--run-id", recipe)
    return pt


def test_criterion_7_recipe_comparison(tmp_path, capsys):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(SMALL_RUN))
    data = tmp_path / "data"
    _cli("gen-data", "--n", 40, "--seed", 0, "--out", data, "--resolution", 8)
    base_pt = _pipeline(tmp_path, cfg_path, data, "base")
    share_pt = _pipeline(tmp_path, cfg_path, data, "share", base_pt)
    _cli("report", tmp_path / "base" / "results.json", tmp_path / "share" / "results.json", "--out", tmp_path / "cmp")
    capsys.readouterr()
    runs = json.loads((tmp_path / "cmp" / "report.json").read_text())["runs"]
    rows = (tmp_path / "cmp" / "report.txt").read_text().strip().splitlines()[1:]

    def trainable(path: Path) -> int:
        ckpt = load_checkpoint(path)
        return sum(ckpt.arrays["param/" + n].size for n, flag in ckpt.header["trainable"].items() if flag)

    base_n, share_n = trainable(base_pt), trainable(share_pt)
    ok = len(runs) == 2 and len(rows) == 2 and {r["recipe"] for r in runs} == {"base", "share"} and share_n > base_n
    ok = ok and (tmp_path / "cmp" / "metrics.png").exists()
    record(7, ok, f"{len(rows)}-row report (base, share); PT trainable params base={base_n} share={share_n}")


# -- 8 ---------------------------------------------------------------------------

def test_criterion_8_connector_swap(setup):
    scenes, records, vocab, images = setup
    samples = [render_conversation(r, vocab) for r in records]
    interfaces = {}
    for kind in ("mlp", "resampler"):
        model = TinyMM(tiny_config(kind), vocab, 0)
        recipe = RecipeConfig.defaults("base", "SFT", learning_rate=1e-3, batch_size=8, micro_batch_size=8)
        trainer = Trainer(model, images, samples, recipe, 0)
        trainer.run(max_steps=2)
        visual = model.visual_tokens(images[:2])
        logits, labels = model.forward(images[:2], samples[:2])
        metrics = evaluate(model, records[:2], _Images(records, images))
        interfaces[kind] = (visual.shape[0], visual.shape[2], logits.shape[-1], sorted(metrics),
                            len(trainer.loss_log))
    same = interfaces["mlp"] == interfaces["resampler"]

    rng = np.random.default_rng(8)
    lengths, worst = {}, 0.0
    res = ResamplerConnector(16, 16, queries=5, heads=2, rng=rng, dtype=np.float64)
    for m in (16, 64):
        v = rng.normal(size=(2, m, 16))
        with C.no_grad():
            out = res(C.Tensor(v)).data
            perm = rng.permutation(m)
            out_p = res(C.Tensor(v[:, perm])).data
        lengths[m] = out.shape[1]
        worst = max(worst, float(np.max(np.abs(out - out_p))))
    ok = same and lengths == {16: 5, 64: 5} and worst < 1e-9
    record(8, ok, f"mlp/resampler interfaces {'match' if same else 'differ'}; resampler lengths {lengths} (Q=5); "
                  f"permutation diff {worst:.1e} (< 1e-9)")


class _Images:
    def __init__(self, records, images):
        self.by_id = {r.image: img for r, img in zip(records, images)}

    def __getitem__(self, key):
        return self.by_id[key]

    def stack(self, keys):
        return np.stack([self.by_id[k] for k in keys])


# -- 9 ---------------------------------------------------------------------------

def test_criterion_9_determinism_and_resume(setup, tmp_path):
    scenes, records, vocab, images = setup
    samples = [render_conversation(r, vocab) for r in records]
    recipe = RecipeConfig.defaults("base", "SFT", learning_rate=1e-3, batch_size=4, micro_batch_size=2, epochs=2)

    def fresh() -> Trainer:
        return Trainer(TinyMM(tiny_config(dtype="float32"), vocab, 3), images, samples, recipe, seed=5)

    a, b = fresh(), fresh()
    a.run(max_steps=8)
    b.run(max_steps=8)
    same_log = [x.hex() for x in a.loss_log] == [x.hex() for x in b.loss_log]

    first = fresh()
    first.run(max_steps=4)
    first.save(tmp_path / "mid.ckpt")
    resumed = fresh()
    resumed.restore(load_checkpoint(tmp_path / "mid.ckpt", expected_hash=resumed.model.config_hash))
    resumed.run(max_steps=4)
    same_resume = [x.hex() for x in resumed.loss_log] == [x.hex() for x in a.loss_log]
    same_params = all(p.data.tobytes() == q.data.tobytes()
                      for (_, p), (_, q) in zip(a.model.named_parameters(), resumed.model.named_parameters()))
    record(9, same_log and same_resume and same_params,
           f"8-step loss logs bitwise {'equal' if same_log else 'different'}; resume at step 4 "
           f"{'matches' if same_resume and same_params else 'diverges from'} the uninterrupted run")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
