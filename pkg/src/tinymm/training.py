"""Two-stage training (feature-alignment PT, then SFT) under the base and share recipes."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import compute as C
from .assembly import ModelConfig, TinyMM
from .compute import Parameter
from .conversation import TokenizedSample, Vocab
from .errors import CheckpointError, ConfigError

RECIPES = ("base", "share")
STAGES = ("PT", "SFT")

# (recipe, stage) -> (learning rate, batch size, epochs) as published
PAPER_HPARAMS = {
    ("base", "PT"): (1e-3, 256, 1),
    ("base", "SFT"): (2e-5, 128, 1),
    ("share", "PT"): (2e-5, 256, 1),
    ("share", "SFT"): (2e-5, 128, 1),
}
DESK_BATCH = {"PT": 32, "SFT": 16}


@dataclass
class RecipeConfig:
    recipe: str = "base"
    stage: str = "PT"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    micro_batch_size: int = 16
    freeze_prefix_k: int | None = None
    init_connector_from: str | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03

    @classmethod
    def defaults(cls, recipe: str, stage: str, preset: str = "desk", **overrides) -> "RecipeConfig":
        """Paper learning rates and epochs; ``desk`` shrinks batch sizes to 32 (PT) / 16 (SFT)."""
        if (recipe, stage) not in PAPER_HPARAMS:
            raise ConfigError(f"unknown recipe/stage {recipe!r}/{stage!r}")
        if preset not in ("desk", "paper"):
            raise ConfigError(f"unknown preset {preset!r}")
        lr, batch, epochs = PAPER_HPARAMS[(recipe, stage)]
        if preset == "desk":
            batch = DESK_BATCH[stage]
        cfg = cls(recipe=recipe, stage=stage, learning_rate=lr, batch_size=batch, epochs=epochs,
                  micro_batch_size=min(batch, 16))
        return cfg.replace(**overrides)

    def replace(self, **overrides) -> "RecipeConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown recipe fields: {sorted(unknown)}")
        obj = asdict(self)
        obj.update(overrides)
        obj["betas"] = tuple(obj["betas"])
        out = RecipeConfig(**obj)
        out.validate()
        return out

    def validate(self) -> None:
        if self.recipe not in RECIPES or self.stage not in STAGES:
            raise ConfigError(f"unknown recipe/stage {self.recipe!r}/{self.stage!r}")
        if self.batch_size < 1 or self.micro_batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch sizes must be positive and epochs non-negative")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("learning rate, weight decay and eps must be non-negative")

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["betas"] = list(self.betas)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "RecipeConfig":
        base = cls.defaults(obj.get("recipe", "base"), obj.get("stage", "PT"), obj.get("preset", "desk"))
        rest = {k: v for k, v in obj.items() if k != "preset"}
        return base.replace(**rest)


# ---------------------------------------------------------------------------
# trainable partitions
# ---------------------------------------------------------------------------

def param_partition(recipe: str, stage: str, model: TinyMM, freeze_prefix_k: int | None = None) -> tuple[list[str], list[str]]:
    """Apply the recipe's trainable flags; return ``(trainable, frozen)`` parameter names.

    base/PT: connector only.  */SFT: connector and LM, vision frozen.
    share/PT: everything except the vision embeddings and first ``k`` blocks.
    """
    if (recipe, stage) not in PAPER_HPARAMS:
        raise ConfigError(f"unknown recipe/stage {recipe!r}/{stage!r}")
    model.set_trainable(False)
    model.connector.set_trainable(True)
    if stage == "SFT":
        model.lm.set_trainable(True)
    elif recipe == "share":
        model.lm.set_trainable(True)
        k = model.cfg.vision.share_freeze_k() if freeze_prefix_k is None else freeze_prefix_k
        model.vision.set_freeze_prefix(k)
    named = list(model.named_parameters())
    return [n for n, p in named if p.trainable], [n for n, p in named if not p.trainable]


def partition_counts(model: TinyMM) -> dict[str, dict[str, int]]:
    out = {}
    for name, module in model.submodules().items():
        params = module.parameters()
        trainable = int(sum(p.data.size for p in params if p.trainable))
        total = int(sum(p.data.size for p in params))
        out[name] = {"trainable": trainable, "frozen": total - trainable}
    return out


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float,
               betas: tuple[float, float], eps: float, weight_decay: float, step: int) -> None:
    """In-place AdamW update with bias correction; ``step`` counts from 1."""
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    if weight_decay:
        param *= param.dtype.type(1 - lr * weight_decay)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


class AdamW:
    def __init__(self, named_params: Sequence[tuple[str, Parameter]], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = [(n, p) for n, p in named_params if p.trainable]
        self.betas, self.eps, self.weight_decay = tuple(betas), eps, weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params:
            if not p.trainable or p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.m[name], self.v[name], lr, self.betas, self.eps,
                       self.weight_decay, self.t)


def warmup_steps(total_steps: int, ratio: float = 0.03) -> int:
    return math.ceil(ratio * total_steps)


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup over ``ceil(ratio * total)`` steps, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, warmup_ratio)
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"TINYMMCK"
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.header["config_hash"]

    @property
    def step(self) -> int:
        return int(self.header["step"])

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_json(self.header["model"])

    def vocab(self) -> Vocab:
        return Vocab.from_json(self.header["vocab"])


def save_checkpoint(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Single file: magic, header length, JSON header, then raw little-endian arrays."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = dict(header, tensors=entries, payload_sha256=hashlib.sha256(payload).hexdigest())
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + _LEN.size:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = _LEN.unpack_from(raw, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    payload = raw[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"checkpoint payload of {path} is corrupt")
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {header.get('config_hash')} vs expected {expected_hash}")
    arrays = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(header, arrays)


def model_from_checkpoint(ckpt: Checkpoint, dtype: str | None = None) -> TinyMM:
    cfg = ckpt.model_config()
    if dtype is not None:
        cfg = cfg.with_dtype(dtype)
    model = TinyMM(cfg, ckpt.vocab(), seed=int(ckpt.header.get("seed", 0)))
    load_params(model, ckpt, prefix="")
    flags = ckpt.header.get("trainable", {})
    for name, p in model.named_parameters():
        if name in flags:
            p.trainable = flags[name]
    return model


def load_params(model: TinyMM, ckpt: Checkpoint, prefix: str = "") -> None:
    """Copy every checkpoint parameter whose name starts with ``prefix`` into the model."""
    for name, p in model.named_parameters():
        if not name.startswith(prefix):
            continue
        key = "param/" + name
        if key not in ckpt.arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        arr = ckpt.arrays[key]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data[...] = arr.astype(p.dtype)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


class Trainer:
    """Runs one stage; ``state_arrays``/``header`` make it resumable bit for bit."""

    def __init__(self, model: TinyMM, images: np.ndarray, samples: Sequence[TokenizedSample],
                 recipe: RecipeConfig, seed: int = 0):
        recipe.validate()
        if len(samples) == 0 or len(images) != len(samples):
            raise ValueError("need a non-empty, aligned set of images and samples")
        self.model, self.images, self.samples = model, images, list(samples)
        longest = max(len(s.ids) for s in self.samples) - 1 + model.num_visual_tokens
        if longest > model.cfg.lm_max_len:
            raise ConfigError(f"longest spliced sample has {longest} positions; lm max_len is {model.cfg.lm_max_len}")
        self.recipe, self.seed = recipe, seed
        self.trainable, self.frozen = param_partition(recipe.recipe, recipe.stage, model, recipe.freeze_prefix_k)
        self.opt = AdamW(model.named_parameters(), recipe.betas, recipe.eps, recipe.weight_decay)
        self.steps_per_epoch = math.ceil(len(samples) / recipe.batch_size)
        self.total_steps = recipe.epochs * self.steps_per_epoch
        self.step = 0
        self.loss_log: list[float] = []

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        perm = epoch_permutation(self.seed, epoch, len(self.samples))
        return perm[k * self.recipe.batch_size:(k + 1) * self.recipe.batch_size]

    def train_step(self) -> float:
        idx = self.batch_indices(self.step)
        self.model.zero_grad()
        total = 0.0
        mb = self.recipe.micro_batch_size
        for start in range(0, len(idx), mb):
            chunk = idx[start:start + mb]
            per_sample = self.model.per_sample_loss(self.images[chunk], [self.samples[i] for i in chunk])
            # batch loss = mean over the full batch of per-sample losses
            loss = C.scale(C.sum(per_sample), 1.0 / len(idx))
            loss.backward()
            total += float(loss.data)
        if not math.isfinite(total):
            raise FloatingPointError(f"non-finite loss at step {self.step}")
        lr = lr_schedule(self.step + 1, self.total_steps, self.recipe.learning_rate, self.recipe.warmup_ratio)
        self.opt.step(lr)
        self.step += 1
        self.loss_log.append(total)
        return total

    def run(self, max_steps: int | None = None, log_every: int = 0, log=print) -> list[float]:
        end = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        while self.step < end:
            loss = self.train_step()
            if log_every and (self.step % log_every == 0 or self.step == end):
                log(f"[{self.recipe.recipe}/{self.recipe.stage}] step {self.step}/{self.total_steps} loss {loss:.4f}")
        return self.loss_log

    # -- persistence -----------------------------------------------------
    def header(self) -> dict:
        return {
            "format": 1,
            "config_hash": self.model.config_hash,
            "model": self.model.cfg.to_json(),
            "vocab": self.model.vocab.to_json(),
            "recipe": self.recipe.to_json(),
            "seed": self.seed,
            "seed_state": {"seed": self.seed, "epoch": self.step // self.steps_per_epoch},
            "step": self.step,
            "optimizer_t": self.opt.t,
            "total_steps": self.total_steps,
            "num_samples": len(self.samples),
            "loss_log": [float(x) for x in self.loss_log],
            "trainable": {n: p.trainable for n, p in self.model.named_parameters()},
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"param/" + n: p.data for n, p in self.model.named_parameters()}
        for n in self.opt.m:
            arrays["adam_m/" + n] = self.opt.m[n]
            arrays["adam_v/" + n] = self.opt.v[n]
        return arrays

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.header(), self.state_arrays())

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume from a checkpoint written by a Trainer with the same configuration."""
        if ckpt.config_hash != self.model.config_hash:
            raise CheckpointError("checkpoint belongs to a different model configuration")
        if ckpt.header["recipe"] != self.recipe.to_json() or ckpt.header["seed"] != self.seed:
            raise CheckpointError("checkpoint was written under a different recipe or seed")
        if ckpt.header["num_samples"] != len(self.samples):
            raise CheckpointError("checkpoint was written for a different corpus size")
        load_params(self.model, ckpt)
        for n in self.opt.m:
            self.opt.m[n][...] = ckpt.arrays["adam_m/" + n]
            self.opt.v[n][...] = ckpt.arrays["adam_v/" + n]
        self.opt.t = int(ckpt.header["optimizer_t"])
        self.step = ckpt.step
        self.loss_log = list(ckpt.header["loss_log"])


def train_stage(model: TinyMM, images: np.ndarray, samples: Sequence[TokenizedSample], recipe: RecipeConfig,
                seed: int = 0, init_from: Checkpoint | None = None, allow_without_pretrain: bool = False,
                max_steps: int | None = None, log_every: int = 0, log=print) -> Trainer:
    """Run a full stage and return the finished :class:`Trainer` (checkpoint + loss log).

    SFT starts from a PT checkpoint (``init_from``) unless explicitly overridden.
    Share PT copies the connector from a base-PT checkpoint (``init_from`` or
    ``recipe.init_connector_from``).
    """
    if recipe.stage == "PT" and recipe.recipe == "share":
        if init_from is None and recipe.init_connector_from:
            init_from = load_checkpoint(recipe.init_connector_from)
        if init_from is None:
            raise ConfigError("share PT needs a base-PT connector checkpoint (init_connector_from)")
        _check_base_pt(init_from, model)
        load_params(model, init_from, prefix="connector.")
    elif recipe.stage == "SFT":
        if init_from is None and not allow_without_pretrain:
            raise ConfigError("SFT needs a PT checkpoint to start from (or an explicit override)")
        if init_from is not None:
            if init_from.config_hash != model.config_hash:
                raise CheckpointError("PT checkpoint belongs to a different model configuration")
            load_params(model, init_from)
    trainer = Trainer(model, images, samples, recipe, seed)
    trainer.run(max_steps=max_steps, log_every=log_every, log=log)
    return trainer


def _check_base_pt(ckpt: Checkpoint, model: TinyMM) -> None:
    recipe = ckpt.header.get("recipe", {})
    if recipe.get("recipe") != "base" or recipe.get("stage") != "PT":
        raise ConfigError("connector must come from a base-recipe PT checkpoint")
    if ckpt.config_hash != model.config_hash:
        raise CheckpointError("base-PT checkpoint belongs to a different model configuration")
