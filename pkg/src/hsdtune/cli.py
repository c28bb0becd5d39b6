"""``hsdtune`` command line: one subcommand per pipeline stage.

Every subcommand reads a flat JSON run config (``--config``) and lets
``--key value`` flags override individual keys.  Progress is logged as
``step,loss,lr`` CSV lines on stderr; reports go to stdout or ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import typing
from dataclasses import replace

import numpy as np

from . import CLASSES, __version__
from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig
from .encoder import init_parameters, reset_head
from .metrics import EvalReport, evaluate
from .optim import OptimizerState, TrainPlan, default_warmup, layer_lr, schedule_lr
from .pipeline import (CLASS_INDEX, TrainState, augment_training_set, predict, run_kfold,
                       stratified_kfold, train_classifier, tune_mlm)
from .preprocess import DataError, clean, format_line, iter_tsv, load_clean
from .tokenizer import Vocabulary, atomic_write_text, build_vocab

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MAX_SKIP_FRACTION = 0.01

log = logging.getLogger("hsdtune")


class InvariantError(RuntimeError):
    """Internal consistency failure (exit code 3)."""


# ---------------------------------------------------------------- argument handling


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional(inner):
    def parse(text):
        return None if text.lower() in ("none", "null", "auto", "") else inner(text)
    parse.__name__ = inner.__name__
    return parse


def _arg_type(annotation):
    hints = {"int": int, "float": float, "str": str, "bool": _parse_bool,
             "Optional[int]": _optional(int), "Optional[float]": _optional(float), "Optional[str]": str}
    return hints[annotation if isinstance(annotation, str) else annotation.__name__]


SUBCOMMANDS = {
    "gen-synth": "write a labelled synthetic corpus (--output)",
    "preprocess": "normalize, mask PII and tokenize a raw TSV (--input, --output)",
    "build-vocab": "learn a BPE vocabulary from a cleaned corpus (--corpus, --vocab)",
    "pretrain-mlm": "masked-LM training from a fresh initialization (--corpus, --vocab, --checkpoint)",
    "tune-mlm": "continue masked-LM training from --init on domain text (--checkpoint)",
    "augment": "append MLM-rewritten copies of HATE/OFFENSIVE rows (--corpus, --vocab, --init, --output)",
    "train": "fine-tune the classifier (--corpus, --vocab, --checkpoint; --init, --resume optional)",
    "evaluate": "score a classifier checkpoint on a labelled corpus (--corpus, --vocab, --checkpoint)",
    "kfold": "stratified k-fold fine-tuning report (--corpus, --vocab; --init optional)",
    "schedule-dump": "print the LR multiplier per step as CSV (--warmup_steps, --total_steps)",
    "ablate": "technique ablation on synthetic corpora, one per seed (--ablation_seeds, --out)",
}


KEY_HELP = {
    "corpus": "cleaned (or raw) label<TAB>text corpus", "vocab": "vocabulary JSON",
    "checkpoint": "output checkpoint (evaluate: input)", "init": "checkpoint to start from",
    "resume": "'<checkpoint>.state' file written by an earlier train run", "input": "raw TSV for preprocess",
    "output": "TSV output path", "out": "report path (JSON; a .csv and .png are written alongside)",
    "figure": "figure path override", "warmup_steps": "none = ceil(steps_per_epoch / 8)",
    "total_steps": "schedule-dump only; training uses steps_per_epoch * epochs",
    "steps_per_epoch": "schedule-dump only", "freeze_epochs": "epochs that update the head alone",
    "blockwise_decay": "LR factor per block going down the stack",
    "mlm_lr": "peak LR of masked-LM training", "fusion_blocks": "e.g. '7-12' or '3,4'; empty = last six blocks",
    "fusion_mode": "concatenate or add", "alpha": "label smoothing", "k": "folds",
    "valid_fold": "train: fold held out for validation, -1 for none",
    "augment_copies": "augmented copies per HATE/OFFENSIVE row (needs --init)",
    "augment_repetitions": "positions rewritten per copy", "temperature": "none = argmax fills",
    "ablation_seeds": "ablate: seeds as '0-4' or '0,2,5'", "target_vocab": "BPE vocabulary size", "synth_total": "gen-synth corpus size",
    "jobs": "parallel folds", "log_every": "steps between log lines",
}


def build_parser() -> argparse.ArgumentParser:
    defaults = RunConfig()
    parser = argparse.ArgumentParser(
        prog="hsdtune", description="Transformer fine-tuning pipeline for three-class hate speech detection.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal failure")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    hints = typing.get_type_hints(RunConfig)
    for name, summary in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary)
        p.add_argument("--config", help="JSON run config; flags below override its keys")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        group = p.add_argument_group("run config keys")
        for key in RunConfig.keys():
            annotation = str(hints[key]).replace("typing.", "").replace("<class '", "").replace("'>", "")
            group.add_argument(f"--{key}", type=_arg_type(annotation), default=argparse.SUPPRESS,
                               metavar=annotation.replace("Optional[", "").rstrip("]").upper(),
                               help=f"{KEY_HELP.get(key, key.replace('_', ' '))} (default: {getattr(defaults, key)})")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: getattr(args, k) for k in RunConfig.keys() if hasattr(args, k)}
    return replace(cfg, **overrides)


# ---------------------------------------------------------------- shared helpers


def _labelled(docs, what="corpus"):
    out = [d for d in docs if d.label is not None]
    if not out:
        raise DataError(f"{what} has no labelled rows")
    return out


def _encode_all(docs, vocab: Vocabulary, max_len: int):
    return [vocab.encode(d, max_len) for d in docs]


def _log_step(step, loss, lr):
    print(f"{step},{loss:.6f},{lr:.6g}", file=sys.stderr, flush=True)


def _emit_report(cfg: RunConfig, report: EvalReport, extra: dict, figure_fn=None):
    payload = {**report.to_dict(), **extra}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if cfg.out:
        atomic_write_text(cfg.out, text)
        stem = os.path.splitext(cfg.out)[0]
        atomic_write_text(stem + ".csv", report.to_csv())
        if figure_fn is not None:
            figure_fn(cfg.figure or stem + ".png")
    else:
        sys.stdout.write(text)
        if figure_fn is not None and cfg.figure:
            figure_fn(cfg.figure)


def _check_finite(params):
    bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
    if bad:
        raise InvariantError(f"non-finite parameters after training: {', '.join(bad[:5])}")


def _load_checkpoint(path):
    try:
        return ckpt_io.load(path)
    except ckpt_io.CheckpointError as exc:
        raise ckpt_io.CheckpointError(f"{path}: {exc}") from exc


def _model_for(cfg: RunConfig, vocab: Vocabulary, fusion_dim=None):
    """Architecture + params: from ``--init`` when given, otherwise a fresh init."""
    if cfg.init:
        ck = _load_checkpoint(cfg.init)
        if ck.config.vocab_size != len(vocab):
            raise ckpt_io.CheckpointError(
                f"{cfg.init}: vocab_size {ck.config.vocab_size} does not match vocabulary size {len(vocab)}")
        return ck.config, ck.params
    config = cfg.encoder_config(len(vocab))
    return config, init_parameters(config, cfg.seed, fusion_dim)


# ---------------------------------------------------------------- subcommands


def cmd_gen_synth(cfg: RunConfig):
    from .synthetic import generate_synthetic_corpus, table_sizes
    if not cfg.output:
        raise ConfigError(["output: required"])
    docs = generate_synthetic_corpus(cfg.seed, table_sizes(cfg.synth_total))
    atomic_write_text(cfg.output, "".join(f"{d.label}\t{d.text}\n" for d in docs))
    log.info("wrote %d rows to %s", len(docs), cfg.output)


def cmd_preprocess(cfg: RunConfig):
    cfg.validate(["input"])
    if not cfg.output:
        raise ConfigError(["output: required"])
    errors: list = []
    rows = [format_line(d.label, clean(d).tokens) for d in iter_tsv(cfg.input, errors)]
    atomic_write_text(cfg.output, "".join(rows))
    for exc in errors:
        print(f"skipped {exc}", file=sys.stderr)
    total = len(rows) + len(errors)
    if errors and len(errors) > MAX_SKIP_FRACTION * total:
        raise DataError(f"{len(errors)} of {total} lines malformed (over {MAX_SKIP_FRACTION:.0%})")
    log.info("cleaned %d rows, skipped %d", len(rows), len(errors))


def cmd_build_vocab(cfg: RunConfig):
    cfg.validate(["corpus"])
    if not cfg.vocab:
        raise ConfigError(["vocab: required"])
    vocab = build_vocab(load_clean(cfg.corpus), cfg.target_vocab)
    vocab.save(cfg.vocab)
    log.info("vocabulary of %d entries written to %s", len(vocab), cfg.vocab)


def _mlm_stage(cfg: RunConfig, fresh: bool):
    cfg.validate(["corpus", "vocab"] + ([] if fresh else ["init"]))
    if not cfg.checkpoint:
        raise ConfigError(["checkpoint: required"])
    vocab = Vocabulary.load(cfg.vocab)
    if fresh:
        cfg = replace(cfg, init=None)
    config, params = _model_for(cfg, vocab, cfg.fusion().dim(cfg.hidden_size))
    seqs = _encode_all(load_clean(cfg.corpus), vocab, config.max_positions)

    def on_log(step, loss, plan, state):
        _log_step(step, loss, plan.base_encoder_lr * schedule_lr(step, plan))

    params, losses = tune_mlm(params, config, seqs, vocab, cfg.mlm_plan(), cfg.masking(), cfg.mlm_steps,
                              cfg.batch_size, cfg.seed, cfg.log_every, on_log)
    _check_finite(params)
    meta = {"stage": "mlm", "steps": cfg.mlm_steps, "final_loss": float(np.mean(losses[-cfg.log_every:]))
            if losses else None, "run": cfg.to_dict()}
    ckpt_io.save(cfg.checkpoint, ckpt_io.Checkpoint(config, params, None, meta))


def cmd_pretrain_mlm(cfg: RunConfig):
    _mlm_stage(cfg, fresh=True)


def cmd_tune_mlm(cfg: RunConfig):
    _mlm_stage(cfg, fresh=False)


def cmd_augment(cfg: RunConfig):
    cfg.validate(["corpus", "vocab", "init"])
    if not cfg.output:
        raise ConfigError(["output: required"])
    vocab = Vocabulary.load(cfg.vocab)
    config, params = _model_for(cfg, vocab)
    docs = _labelled(load_clean(cfg.corpus))
    seqs = _encode_all(docs, vocab, config.max_positions)
    labels = [CLASS_INDEX[d.label] for d in docs]
    extra, extra_labels = augment_training_set(seqs, labels, params, config, vocab, cfg.augment_copies,
                                               cfg.augment_repetitions, cfg.seed, cfg.temperature)
    rows = [format_line(d.label, d.tokens) for d in docs]
    rows += [format_line(CLASSES[lab], vocab.decode(ids)) for ids, lab in zip(extra, extra_labels)]
    atomic_write_text(cfg.output, "".join(rows))
    log.info("wrote %d original and %d augmented rows", len(docs), len(extra))


def _split(cfg: RunConfig, seqs, labels):
    if cfg.valid_fold < 0 or cfg.k < 2:
        return seqs, labels, None, None
    tr, va = stratified_kfold(labels, cfg.k, cfg.seed).train_valid(cfg.valid_fold)
    return ([seqs[i] for i in tr], [labels[i] for i in tr], [seqs[i] for i in va], [labels[i] for i in va])


def _state_path(path: str) -> str:
    return path + ".state"


def _train_meta(cfg, state: TrainState, fusion) -> dict:
    return {"stage": "classifier", "epoch": state.epoch, "best_epoch": state.best_epoch,
            "best_f1": state.best_f1, "history": state.history, "fusion": list(fusion.block_indices),
            "fusion_mode": fusion.combine_mode, "alpha": cfg.alpha, "run": cfg.to_dict()}


def _restore_state(path, config, fusion) -> TrainState:
    last = _load_checkpoint(path)
    if last.optimizer is None or last.meta.get("stage") != "classifier":
        raise ckpt_io.CheckpointError(f"{path}: not a resumable classifier checkpoint")
    if last.config != config or tuple(last.meta["fusion"]) != fusion.block_indices:
        raise ckpt_io.CheckpointError(f"{path}: architecture or fusion differs from the current run")
    best = _load_checkpoint(last.meta["best_path"]).params if last.meta.get("best_path") else None
    return TrainState(last.params, last.optimizer, last.meta["epoch"], best, last.meta["best_f1"],
                      last.meta["best_epoch"], list(last.meta["history"]))


def cmd_train(cfg: RunConfig):
    cfg.validate(["corpus", "vocab"] + (["resume"] if cfg.resume else []) + (["init"] if cfg.init else []))
    if not cfg.checkpoint:
        raise ConfigError(["checkpoint: required"])
    vocab = Vocabulary.load(cfg.vocab)
    docs = _labelled(load_clean(cfg.corpus))
    config, params = _model_for(cfg, vocab)
    fusion = cfg.fusion(config.num_layers)
    params = reset_head(params, config, fusion.dim(config.hidden_size), cfg.seed)
    seqs = _encode_all(docs, vocab, config.max_positions)
    labels = [CLASS_INDEX[d.label] for d in docs]
    tr_s, tr_l, va_s, va_l = _split(cfg, seqs, labels)
    if cfg.init and cfg.augment_copies:
        extra, extra_l = augment_training_set(tr_s, tr_l, params, config, vocab, cfg.augment_copies,
                                              cfg.augment_repetitions, cfg.seed, cfg.temperature)
        tr_s, tr_l = tr_s + extra, tr_l + extra_l
    state = _restore_state(cfg.resume, config, fusion) if cfg.resume else None
    best_path, state_path = cfg.checkpoint, _state_path(cfg.checkpoint)

    def on_step(step, loss, plan):
        if step % cfg.log_every == 0:
            _log_step(step, loss, plan.head_lr * schedule_lr(step, plan))

    def on_epoch(st: TrainState):
        meta = _train_meta(cfg, st, fusion)
        ckpt_io.save(best_path, ckpt_io.Checkpoint(config, st.best_params or st.params, None, meta))
        ckpt_io.save(state_path, ckpt_io.Checkpoint(config, st.params, st.optimizer,
                                                    {**meta, "best_path": best_path}))

    state = train_classifier(params, config, tr_s, tr_l, cfg.train_plan(), fusion, cfg.alpha, cfg.epochs,
                             vocab.pad_id, va_s, va_l, cfg.batch_size, cfg.seed, state, on_step, on_epoch)
    _check_finite(state.params)
    on_epoch(state)
    eval_s, eval_l = (va_s, va_l) if va_s is not None else (tr_s, tr_l)
    pred = predict(state.best_params, config, eval_s, fusion, vocab.pad_id)
    report = evaluate([CLASSES[i] for i in pred], [CLASSES[i] for i in eval_l])

    def figure(path):
        from .plotting import plot_history
        if state.history:
            plot_history(state.history, path)

    _emit_report(cfg, report, {"split": "valid" if va_s is not None else "train", "best_epoch": state.best_epoch,
                               "history": state.history, "fusion": fusion.label()}, figure)


def cmd_evaluate(cfg: RunConfig):
    cfg.validate(["corpus", "vocab", "checkpoint"])
    vocab = Vocabulary.load(cfg.vocab)
    ck = _load_checkpoint(cfg.checkpoint)
    if "fusion" not in ck.meta:
        raise ckpt_io.CheckpointError(f"{cfg.checkpoint}: no classifier head (run 'train' first)")
    from .objectives import FusionSpec
    fusion = FusionSpec(tuple(ck.meta["fusion"]), ck.meta.get("fusion_mode", "concatenate"))
    docs = _labelled(load_clean(cfg.corpus))
    pred = predict(ck.params, ck.config, _encode_all(docs, vocab, ck.config.max_positions), fusion, vocab.pad_id)
    report = evaluate([CLASSES[i] for i in pred], [d.label for d in docs])

    def figure(path):
        from .plotting import plot_kfold
        plot_kfold(report, path)

    _emit_report(cfg, report, {"checkpoint": cfg.checkpoint, "n": len(docs)}, figure)


def cmd_kfold(cfg: RunConfig):
    cfg.validate(["corpus", "vocab"] + (["init"] if cfg.init else []))
    if cfg.k < 2:
        raise ConfigError(["k: k-fold needs k >= 2"])
    vocab = Vocabulary.load(cfg.vocab)
    docs = _labelled(load_clean(cfg.corpus))
    config, params = _model_for(cfg, vocab)
    fusion = cfg.fusion(config.num_layers)
    seqs = _encode_all(docs, vocab, config.max_positions)
    labels = [CLASS_INDEX[d.label] for d in docs]
    copies = cfg.augment_copies if cfg.init else 0
    report = run_kfold(params, config, seqs, labels, cfg.train_plan(), fusion, cfg.alpha, cfg.epochs,
                       vocab.pad_id, cfg.k, cfg.seed, cfg.batch_size, vocab, copies, cfg.augment_repetitions,
                       cfg.jobs, augment_temperature=cfg.temperature)

    def figure(path):
        from .plotting import plot_kfold
        plot_kfold(report, path)

    _emit_report(cfg, report, {"fusion": fusion.label(), "alpha": cfg.alpha, "augment_copies": copies}, figure)


def cmd_schedule_dump(cfg: RunConfig):
    cfg.validate()
    warm = cfg.warmup_steps
    if warm is None:
        if cfg.steps_per_epoch is None:
            raise ConfigError(["warmup_steps: give warmup_steps or steps_per_epoch"])
        warm = default_warmup(cfg.steps_per_epoch)
    total = cfg.total_steps
    if total is None:
        if cfg.steps_per_epoch is None:
            raise ConfigError(["total_steps: give total_steps or steps_per_epoch"])
        total = cfg.steps_per_epoch * cfg.epochs
    if warm > total:
        raise ConfigError([f"warmup_steps: {warm} exceeds total_steps {total}"])
    plan = replace(cfg.train_plan(), warmup_steps=warm, total_steps=total)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    top, emb = f"block_{cfg.num_layers}", "embedding"
    writer.writerow(["step", "multiplier", "lr_head", f"lr_{top}", f"lr_{emb}"])
    steps, mults = [], []
    for step in range(total + 1):
        m = schedule_lr(step, plan)
        steps.append(step)
        mults.append(m)
        writer.writerow([step, repr(m), repr(m * layer_lr("head", plan, cfg.num_layers)),
                         repr(m * layer_lr(top, plan, cfg.num_layers)), repr(m * layer_lr(emb, plan, cfg.num_layers))])
    if cfg.out:
        atomic_write_text(cfg.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    fig_path = cfg.figure or (os.path.splitext(cfg.out)[0] + ".png" if cfg.out else None)
    if fig_path:
        from .plotting import plot_schedule
        plot_schedule(steps, mults, fig_path, warm)


def cmd_ablate(cfg: RunConfig):
    from .ablation import AblationSettings, run_seed, summarize
    cfg.validate()
    settings = AblationSettings()
    per_seed = {}

    def on_result(seed, name, f1, seconds):
        log.info("seed %d %-9s macro-F1 %.4f (%.0fs)", seed, name, f1, seconds)

    for seed in cfg.seed_list():
        per_seed[seed] = run_seed(seed, settings, on_result=on_result)
    summary = {**summarize(per_seed), "settings": settings.to_dict()}
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "condition", "macro_f1"])
    for seed, row in sorted(per_seed.items()):
        for name, f1 in row.items():
            writer.writerow([seed, name, f"{f1:.6f}"])
    for name, f1 in summary["mean"].items():
        writer.writerow(["mean", name, f"{f1:.6f}"])
    if cfg.out:
        atomic_write_text(cfg.out, text)
        stem = os.path.splitext(cfg.out)[0]
        atomic_write_text(stem + ".csv", buf.getvalue())
        from .plotting import plot_ablation
        plot_ablation([(n, m, [r[n] for r in per_seed.values()]) for n, m in summary["mean"].items()],
                      cfg.figure or stem + ".png")
    else:
        sys.stdout.write(text)


COMMANDS = {
    "gen-synth": cmd_gen_synth, "preprocess": cmd_preprocess, "build-vocab": cmd_build_vocab,
    "pretrain-mlm": cmd_pretrain_mlm, "tune-mlm": cmd_tune_mlm, "augment": cmd_augment, "train": cmd_train,
    "evaluate": cmd_evaluate, "kfold": cmd_kfold, "schedule-dump": cmd_schedule_dump, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("# %(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"hsdtune: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"hsdtune: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ckpt_io.CheckpointError, OSError, ValueError) as exc:
        print(f"hsdtune: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - everything else is an internal failure
        log.debug("internal failure", exc_info=True)
        print(f"hsdtune: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
