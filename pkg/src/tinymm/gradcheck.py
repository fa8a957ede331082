"""Central-difference verification of every op and of the full model losses (float64)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import compute as C
from .assembly import ModelConfig, TinyMM
from .connector import ConnectorConfig
from .conversation import (ConversationRecord, Turn, build_vocab, corpus_texts, derive_caption_pair,
                           render_conversation)
from .data import gen_record, render_scene
from .vision import VisionConfig

TOLERANCE = 1e-4
STEP = 1e-5

SMALL_MODEL = ModelConfig(
    vision=VisionConfig(resolution=8, patch_size=4, depth=2, width=8, heads=2, mlp_ratio=2),
    connector=ConnectorConfig("mlp"),
    lm_width=8, lm_depth=2, lm_heads=2, lm_max_len=40, lm_mlp_ratio=2,
    dtype="float64",
)

# short two-turn conversation: exercises masking across turns at low cost
CHECK_TURNS = (("human", "<image>\nwhat?"), ("assistant", "red circle."), ("human", "count?"), ("assistant", "one"))


@dataclass
class CheckResult:
    name: str
    error: float
    entries: int

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def check_function(name: str, loss_fn: Callable[[], C.Tensor], params: list[C.Tensor]) -> CheckResult:
    """Compare backward() gradients of ``loss_fn`` with central differences, for every entry."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst, entries = 0.0, 0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        with C.no_grad():
            numeric = C.numeric_grad(lambda: float(loss_fn().data), p.data, STEP)
        worst = max(worst, C.relative_error(analytic, numeric))
        entries += p.data.size
    return CheckResult(name, worst, entries)


def _leaf(rng, *shape) -> C.Parameter:
    return C.Parameter(rng.normal(size=shape))


def _weights(rng, shape) -> C.Tensor:
    """Fixed random upstream weights, so sum-reductions see a non-uniform gradient."""
    return C.tensor(rng.normal(size=shape))


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    wm = _weights(rng, (3, 2))
    out.append(check_function("matmul", lambda: C.sum(C.mul(C.matmul(a, b), wm)), [a, b]))

    ab, bb = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 3)
    w = _weights(rng, (2, 3, 3))
    out.append(check_function("batched_matmul", lambda: C.sum(C.mul(C.matmul(ab, bb), w)), [ab, bb]))

    x = _leaf(rng, 5, 3)
    wx = _weights(rng, (5, 3))
    out.append(check_function("gelu", lambda: C.sum(C.mul(C.gelu(x), wx)), [x]))

    g, bias = _leaf(rng, 3), _leaf(rng, 3)
    out.append(check_function("layer_norm", lambda: C.sum(C.mul(C.layer_norm(x, g, bias), wx)), [x, g, bias]))

    mask = np.tril(np.ones((5, 3), dtype=bool))
    out.append(check_function("softmax", lambda: C.sum(C.mul(C.softmax(x, mask), wx)), [x]))

    q, k, v = _leaf(rng, 2, 4, 3), _leaf(rng, 2, 4, 3), _leaf(rng, 2, 4, 2)
    causal = np.tril(np.ones((4, 4), dtype=bool))
    wa = _weights(rng, (2, 4, 2))
    out.append(check_function("attention", lambda: C.sum(C.mul(C.attention(q, k, v, causal), wa)), [q, k, v]))

    logits = _leaf(rng, 6)
    out.append(check_function("softmax_cross_entropy", lambda: C.softmax_cross_entropy(logits, 2), [logits]))

    table = _leaf(rng, 7, 3)
    ids = np.array([0, 3, 3, 6])
    wt = _weights(rng, (4, 3))
    out.append(check_function("embed", lambda: C.sum(C.mul(C.embed(table, ids), wt)), [table]))

    seq = _leaf(rng, 2, 5, 7)
    targets = rng.integers(0, 7, size=(2, 5))
    keep = rng.random((2, 5)) < 0.6
    keep[:, 0] = True
    out.append(check_function("masked_token_nll",
                              lambda: C.sum(C.masked_token_nll(seq, targets, keep)), [seq]))

    parts = [_leaf(rng, 2, 3), _leaf(rng, 1, 3)]
    wc = _weights(rng, (3, 3))
    out.append(check_function("concat", lambda: C.sum(C.mul(C.concat(parts, 0), wc)), parts))

    src = _leaf(rng, 4, 3)
    rows = np.array([[0, 3], [3, 1]])
    wr = _weights(rng, (2, 2, 3))
    out.append(check_function("take_rows", lambda: C.sum(C.mul(C.take_rows(src, rows), wr)), [src]))

    cube = _leaf(rng, 2, 3, 4)
    wtr = _weights(rng, (4, 2, 3))
    out.append(check_function("transpose_reshape",
                              lambda: C.sum(C.mul(C.reshape(C.transpose(cube, (2, 0, 1)), (4, 2, 3)), wtr)), [cube]))
    wg = _weights(rng, (2, 2))
    out.append(check_function("getitem", lambda: C.sum(C.mul(cube[:, 1:, np.array([0, 0])][:, :, 1], wg)), [cube]))
    out.append(check_function("mean", lambda: C.mean(C.mul(cube, cube)), [cube]))
    return out


def _perturb(model: TinyMM, seed: int, std: float = 0.3) -> None:
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        base = 1.0 if name.endswith(".gain") else 0.0
        p.data[...] = base + rng.normal(0.0, std, size=p.shape)


def model_checks(cfg: ModelConfig = SMALL_MODEL, seed: int = 0) -> list[CheckResult]:
    """Every parameter entry of loss_pretrain and loss_sft (MLP connector) and loss_sft (resampler)."""
    cfg = cfg.with_dtype("float64")
    spec, _ = gen_record(seed, resolution=cfg.vision.resolution)
    image = render_scene(spec).astype(np.float64)
    rec = ConversationRecord("check", [Turn(role, text) for role, text in CHECK_TURNS])
    vocab = build_vocab(corpus_texts([rec]))
    caption = derive_caption_pair(rec, vocab)
    sample = render_conversation(rec, vocab)
    results = []
    for kind in ("mlp", "resampler"):
        obj = cfg.to_json()
        obj["connector"] = dict(obj["connector"], kind=kind, queries=3, heads=2)
        model = TinyMM(ModelConfig.from_json(obj), vocab, seed)
        _perturb(model, seed + 1)
        params = model.parameters()
        if kind == "mlp":
            results.append(check_function(f"loss_pretrain[{kind}]", lambda: model.loss_pretrain(image, caption),
                                          params))
        results.append(check_function(f"loss_sft[{kind}]", lambda: model.loss_sft(image, sample), params))
    return results


def run_all(cfg: ModelConfig = SMALL_MODEL, log=print) -> tuple[bool, list[CheckResult]]:
    start = time.perf_counter()
    results = op_checks() + model_checks(cfg)
    for r in results:
        log(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max rel err {r.error:.3e} over {r.entries} entries")
    log(f"gradcheck finished in {time.perf_counter() - start:.1f}s")
    return all(r.passed for r in results), results
