"""``tinymm`` command line: data generation, the two training stages, eval, checks."""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .assembly import ModelConfig, TinyMM
from .conversation import build_vocab, corpus_texts, derive_caption_pair, render_conversation
from .data import Corpus, gen_corpus
from .errors import CheckpointError, ConfigError, ValidationError
from .training import RecipeConfig, load_checkpoint, model_from_checkpoint, partition_counts, train_stage

CONFIG_KEYS = {"seed", "recipe", "preset", "model", "pretrain", "finetune"}
REPORT_METRICS = ("qa_exact_match", "color_exact_match", "count_exact_match", "caption_exact_match",
                  "presence_accuracy", "presence_yes_rate", "presence_f1_negative")


class CliError(Exception):
    """Bad input detected by the command line layer; ``kind`` names the error class."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig.from_json(cfg.get("model", {}))
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from exc


def recipe_config(cfg: dict, stage: str, args: argparse.Namespace) -> RecipeConfig:
    section = dict(cfg.get("pretrain" if stage == "PT" else "finetune", {}))
    section.setdefault("recipe", cfg.get("recipe", "base"))
    section.setdefault("preset", cfg.get("preset", "desk"))
    if args.recipe is not None:
        section["recipe"] = args.recipe
    section["stage"] = stage
    for flag, key in (("lr", "learning_rate"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("micro_batch_size", "micro_batch_size")):
        if getattr(args, flag) is not None:
            section[key] = getattr(args, flag)
    try:
        return RecipeConfig.from_json(section)
    except TypeError as exc:
        raise ConfigError(f"invalid {stage} section: {exc}") from exc


def _seed(cfg: dict, args: argparse.Namespace) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _load_corpus(path: str) -> Corpus:
    if not Path(path).is_dir():
        raise CliError("FileNotFound", f"data directory {path} does not exist")
    return Corpus.load(path)


def _train_inputs(corpus: Corpus, vocab, stage: str):
    train = corpus.splits["train"]
    render = derive_caption_pair if stage == "PT" else render_conversation
    return corpus.images.stack([r.image for r in train]), [render(r, vocab) for r in train]


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> None:
    sizes = gen_corpus(args.n, args.seed, args.out, args.resolution)
    print("\t".join(f"{k}={v}" for k, v in sizes.items()))


def cmd_pretrain(args) -> None:
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    recipe = recipe_config(cfg, "PT", args)
    if recipe.recipe == "share" and not args.init_connector:
        raise ConfigError("share-recipe pretraining requires --init-connector <base PT checkpoint>")
    corpus = _load_corpus(args.data)
    vocab = build_vocab(corpus_texts(corpus.all_records()))
    model = TinyMM(model_config(cfg), vocab, seed)
    init = load_checkpoint(args.init_connector) if args.init_connector else None
    images, samples = _train_inputs(corpus, vocab, "PT")
    trainer = train_stage(model, images, samples, recipe, seed, init_from=init,
                          max_steps=args.max_steps, log_every=args.log_every, log=_log)
    trainer.save(args.out)
    print(f"checkpoint\t{args.out}\tstep={trainer.step}\tconfig_hash={model.config_hash}")


def cmd_finetune(args) -> None:
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    recipe = recipe_config(cfg, "SFT", args)
    if args.init is None and not args.skip_pretrain:
        raise ConfigError("finetune requires --init <PT checkpoint> (or --skip-pretrain)")
    corpus = _load_corpus(args.data)
    init = None
    if args.init is not None:
        init = load_checkpoint(args.init)
        model = model_from_checkpoint(init)
        if "model" in cfg and model_config(cfg) != init.model_config():
            raise ConfigError("model section differs from the PT checkpoint's model")
    else:
        vocab = build_vocab(corpus_texts(corpus.all_records()))
        model = TinyMM(model_config(cfg), vocab, seed)
    images, samples = _train_inputs(corpus, model.vocab, "SFT")
    trainer = train_stage(model, images, samples, recipe, seed, init_from=init,
                          allow_without_pretrain=args.skip_pretrain,
                          max_steps=args.max_steps, log_every=args.log_every, log=_log)
    trainer.save(args.out)
    print(f"checkpoint\t{args.out}\tstep={trainer.step}\tconfig_hash={model.config_hash}")


def run_result(ckpt, model: TinyMM, metrics: dict, run_id: str) -> dict:
    recipe = ckpt.header.get("recipe", {})
    flags = ckpt.header.get("trainable", {})
    trainable = sum(p.data.size for n, p in model.named_parameters() if flags.get(n, False))
    return {
        "trainable_params": int(trainable),
        "run_id": run_id,
        "config_hash": ckpt.config_hash,
        "step": ckpt.step,
        "recipe": recipe.get("recipe", ""),
        "stage": recipe.get("stage", ""),
        "connector": model.cfg.connector.kind,
        "model_size": model.num_parameters(),
        "metrics": metrics,
    }


def write_report(results: list[dict], out_dir: str | Path, loss_logs: dict | None = None) -> str:
    from .eval import report
    from .plotting import plot_loss_curves, plot_metrics

    doc, table = report(results, out_dir)
    rows = json.loads(doc)["runs"]
    plot_metrics(rows, [m for m in REPORT_METRICS if any(m in r["metrics"] for r in rows)],
                 Path(out_dir) / "metrics.png")
    if loss_logs:
        plot_loss_curves(loss_logs, Path(out_dir) / "loss.png")
    return table


def cmd_eval(args) -> None:
    from .eval import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    corpus = _load_corpus(args.data)
    records = corpus.splits[args.split]
    if args.limit is not None:
        records = records[:args.limit]
    samples = [render_conversation(r, model.vocab) for r in records]
    metrics = evaluate(model, records, corpus.images, samples)
    run_id = args.run_id or Path(args.checkpoint).stem
    result = run_result(ckpt, model, metrics, run_id)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    log = ckpt.header.get("loss_log", [])
    table = write_report([result], out, {run_id: list(enumerate(log, start=1))})
    sys.stdout.write(table)


def cmd_report(args) -> None:
    results = []
    for path in args.results:
        with open(path, encoding="utf-8") as fh:
            results.append(json.load(fh))
    sys.stdout.write(write_report(results, args.out))


def cmd_gradcheck(args) -> None:
    from .gradcheck import SMALL_MODEL, run_all

    cfg = load_config(args.config)
    model_cfg = model_config(cfg) if "model" in cfg else SMALL_MODEL
    ok, _ = run_all(model_cfg, log=print)
    if not ok:
        raise CliError("GradcheckFailed", "at least one gradient check exceeded tolerance")


def cmd_inspect(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    flags = ckpt.header.get("trainable", {})
    for name, p in model.named_parameters():
        p.trainable = bool(flags.get(name, True))
    recipe = ckpt.header.get("recipe", {})
    print(f"# recipe={recipe.get('recipe')} stage={recipe.get('stage')} step={ckpt.step} "
          f"config_hash={ckpt.config_hash}")
    print("submodule\ttrainable\tfrozen")
    for name, counts in partition_counts(model).items():
        print(f"{name}\t{counts['trainable']}\t{counts['frozen']}")


# -- parser ------------------------------------------------------------------------

def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (see README for the schema)")
    p.add_argument("--data", required=True, help="corpus directory written by gen-data")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--recipe", choices=("base", "share"), help="overrides the config recipe")
    p.add_argument("--lr", type=float, help="overrides the stage learning rate")
    p.add_argument("--epochs", type=int, help="overrides the stage epoch count")
    p.add_argument("--batch-size", type=int, help="overrides the stage batch size")
    p.add_argument("--micro-batch-size", type=int, help="gradient-accumulation chunk size")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--log-every", type=int, default=10, help="progress line interval (stderr)")


class _Parser(argparse.ArgumentParser):
    """Usage errors (unknown flags, missing arguments) become one JSON line, exit code 2."""

    def error(self, message):
        self.exit(2, json.dumps({"error": "UsageError", "message": f"{self.prog}: {message}"}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tinymm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic shapes corpus")
    p.add_argument("--n", type=int, default=2000, help="total number of records")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resolution", type=int, default=24, help="image side in pixels")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="feature-alignment stage on caption pairs")
    _training_flags(p)
    p.add_argument("--init-connector", help="base PT checkpoint (required for the share recipe)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="instruction-tuning stage on full conversations")
    _training_flags(p)
    p.add_argument("--init", help="PT checkpoint to start from")
    p.add_argument("--skip-pretrain", action="store_true", help="allow finetuning a freshly initialized model")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="held-out metrics, report table and figures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output directory for results.json, report.* and PNGs")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--limit", type=int, help="evaluate only the first N records")
    p.add_argument("--run-id", help="row label (defaults to the checkpoint file stem)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge results.json files into one report")
    p.add_argument("results", nargs="+", help="results.json files written by eval")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and both losses")
    p.add_argument("--config", help="config JSON whose model section sets the checked model")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="trainable/frozen parameter counts per submodule")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def _thread_limit():
    value = os.environ.get("TINYMM_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"TINYMM_THREADS must be an integer, got {value!r}") from None
    return threadpool_limits(limits=max(n, 1))


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), 1)
    except (ConfigError, ValidationError) as exc:
        return _fail(type(exc).__name__, str(exc), 2)
    except CheckpointError as exc:
        return _fail("CheckpointError", str(exc), 3)
    except FileNotFoundError as exc:
        return _fail("FileNotFound", str(exc), 4)
    return 0


if __name__ == "__main__":
    sys.exit(main())
