"""Two-stage adaptation: domain MLM tuning, MLM-based augmentation and
classifier fine-tuning, plus stratified k-fold evaluation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import CLASSES
from .encoder import (Batch, EncoderConfig, add_grads, backward, encoder_names, forward,
                      pad_batch, reset_head)
from .metrics import EvalReport, evaluate, mean_report
from .objectives import FusionSpec, classifier_loss, mlm_logits, mlm_loss, predict_proba
from .optim import OptimizerState, TrainPlan, adamw_step, all_depth_tags, apply_freeze, default_warmup
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)

CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}


class ClassTooSmall(ValueError):
    pass


class NoEligiblePosition(ValueError):
    pass


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ------------------------------------------------------------------ masking


@dataclass(frozen=True)
class MaskingSpec:
    mask_ratio: float = 0.15
    replace_mask: float = 0.8
    replace_random: float = 0.1
    keep_original: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        total = self.replace_mask + self.replace_random + self.keep_original
        if abs(total - 1.0) > 1e-9 or min(self.replace_mask, self.replace_random, self.keep_original) < 0:
            raise ValueError("replacement probabilities must be nonnegative and sum to 1")


def eligible_positions(token_ids, attention_mask, vocab: Vocabulary) -> np.ndarray:
    structural = np.fromiter(vocab.structural_ids, dtype=np.int64)
    return np.asarray(attention_mask, bool) & ~np.isin(token_ids, structural)


def mask_batch(batch: Batch, spec: MaskingSpec, vocab: Vocabulary, seed) -> Batch:
    """BERT-style corruption: select eligible positions with ``mask_ratio``,
    then 80/10/10 ``<mask>`` / random token / unchanged.

    Every sequence with an eligible position gets at least one selection.
    """
    rng = _rng(seed)
    ids = batch.token_ids
    eligible = eligible_positions(ids, batch.attention_mask, vocab)
    selected = eligible & (rng.random(ids.shape) < spec.mask_ratio)
    for row in np.flatnonzero(eligible.any(1) & ~selected.any(1)):
        cols = np.flatnonzero(eligible[row])
        selected[row, rng.choice(cols)] = True
    action = rng.random(ids.shape)
    content = np.asarray(vocab.content_ids(), dtype=ids.dtype)
    random_ids = content[rng.integers(0, len(content), ids.shape)]
    out = ids.copy()
    to_mask = selected & (action < spec.replace_mask)
    to_random = selected & (action >= spec.replace_mask) & (action < spec.replace_mask + spec.replace_random)
    out[to_mask] = vocab.mask_id
    out[to_random] = random_ids[to_random]
    targets = np.where(selected, ids, vocab.pad_id)
    return Batch(out, batch.attention_mask, batch.labels, targets, selected)


# ------------------------------------------------------------------ training helpers


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _mlm_names(params) -> list[str]:
    return [n for n in params if not n.startswith("cls.")]


def tune_mlm(params: dict, config: EncoderConfig, sequences: Sequence[Sequence[int]], vocab: Vocabulary,
             plan: TrainPlan, spec: MaskingSpec, steps: int, batch_size: int = 32, seed: int = 0,
             log_every: int = 50, on_log: Optional[Callable] = None):
    """Masked-LM training for ``steps`` optimizer steps on ``sequences``.

    Returns ``(params, losses)`` where ``losses`` holds every step's loss.
    The input dictionary is not modified.
    """
    params = dict(params)
    if steps <= 0:
        return params, []
    n = len(sequences)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    warm = default_warmup(steps_per_epoch) if plan.warmup_steps is None else plan.warmup_steps
    plan = replace(plan, total_steps=steps, warmup_steps=min(warm, steps))
    state = OptimizerState()
    tags = all_depth_tags(config.num_layers)
    names = set(_mlm_names(params))
    losses = []
    step = 0
    epoch = 0
    while step < steps:
        rng = np.random.default_rng([seed, epoch])
        for idx in _batches(n, batch_size, rng):
            if step >= steps:
                break
            batch = pad_batch([sequences[i] for i in idx], vocab.pad_id)
            batch = mask_batch(batch, spec, vocab, rng)
            hs, cache = forward(params, config, batch, train_mode=True, rng=rng, return_cache=True)
            loss, head, bg = mlm_loss(params, config, hs, batch.mlm_targets, batch.loss_mask)
            grads = add_grads(backward(params, config, cache, bg), head)
            grads = {k: g for k, g in grads.items() if k in names}
            step += 1
            adamw_step(params, grads, state, plan, step, tags, config.num_layers)
            losses.append(loss)
            if on_log is not None and (step % log_every == 0 or step == steps):
                on_log(step, float(np.mean(losses[-log_every:])), plan, state)
        epoch += 1
    return params, losses


def mlm_eval_loss(params, config, sequences, vocab, spec: MaskingSpec, seed: int = 0, batch_size: int = 64) -> float:
    """Masked-LM loss under a fixed seeded corruption, in eval mode."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for idx in _batches(len(sequences), batch_size, None):
        batch = mask_batch(pad_batch([sequences[i] for i in idx], vocab.pad_id), spec, vocab, rng)
        hs = forward(params, config, batch)
        loss, _, _ = mlm_loss(params, config, hs, batch.mlm_targets, batch.loss_mask)
        k = int(batch.loss_mask.sum())
        total += loss * k
        count += k
    return total / count


# ------------------------------------------------------------------ augmentation


def augment(ids: Sequence[int], params, config: EncoderConfig, vocab: Vocabulary, repetitions: int = 5,
            seed=0, temperature: Optional[float] = None) -> list[int]:
    """Rewrite ``repetitions`` positions, one at a time, with the MLM's fill.

    Each round masks a random eligible position and replaces it with the
    argmax prediction (or a temperature sample when ``temperature`` is set).
    Positions already rewritten are skipped while fresh ones remain.
    """
    out = list(int(i) for i in ids)
    if repetitions <= 0:
        return out
    rng = _rng(seed)
    arr = np.asarray(out, dtype=np.int64)[None, :]
    eligible = np.flatnonzero(eligible_positions(arr, np.ones_like(arr, bool), vocab)[0])
    if eligible.size == 0:
        raise NoEligiblePosition("sequence has no maskable position")
    content = np.asarray(vocab.content_ids(), dtype=np.int64)
    touched: set = set()
    mask = np.ones((1, len(out)), dtype=bool)
    for _ in range(repetitions):
        fresh = [p for p in eligible if p not in touched]
        pos = int(rng.choice(fresh if fresh else eligible))
        work = np.asarray(out, dtype=np.int64)[None, :]
        work[0, pos] = vocab.mask_id
        hs = forward(params, config, Batch(work, mask))
        logits = mlm_logits(params, config, hs[-1][0, pos])[content].astype(np.float64)
        if temperature:
            z = logits / temperature
            p = np.exp(z - z.max())
            choice = rng.choice(len(content), p=p / p.sum())
        else:
            choice = int(np.argmax(logits))
        out[pos] = int(content[choice])
        touched.add(pos)
    return out


def augment_training_set(sequences, labels, params, config, vocab, copies: int = 1, repetitions: int = 5,
                         seed: int = 0, temperature: Optional[float] = None, classes=("HATE", "OFFENSIVE")):
    """Extra (sequence, label) pairs for the minority ``classes``; labels are inherited."""
    targets = {CLASS_INDEX[c] for c in classes}
    new_seqs, new_labels = [], []
    rng = np.random.default_rng([seed, 104729])
    for seq, lab in zip(sequences, labels):
        if lab not in targets:
            continue
        for _ in range(copies):
            try:
                new_seqs.append(augment(seq, params, config, vocab, repetitions, rng, temperature))
            except NoEligiblePosition:
                continue
            new_labels.append(lab)
    return new_seqs, new_labels


# ------------------------------------------------------------------ stratified folds


@dataclass
class FoldSplit:
    k: int
    folds: list  # list of sorted index lists

    def train_valid(self, fold: int):
        valid = self.folds[fold]
        train = sorted(i for j, f in enumerate(self.folds) if j != fold for i in f)
        return train, list(valid)


def stratified_kfold(labels: Sequence, k: int = 10, seed: int = 0) -> FoldSplit:
    """Shuffle each class with ``seed`` and deal it round-robin across ``k`` folds.

    The dealing position carries over between classes so fold totals stay
    balanced as well.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    by_class: dict = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    for lab, idx in by_class.items():
        if len(idx) < k:
            raise ClassTooSmall(f"class {lab!r} has {len(idx)} members, fewer than k={k}")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    pos = 0
    for lab in sorted(by_class, key=str):
        for i in rng.permutation(by_class[lab]):
            folds[pos % k].append(int(i))
            pos += 1
    return FoldSplit(k, [sorted(f) for f in folds])


# ------------------------------------------------------------------ classifier fine-tuning


@dataclass
class TrainState:
    params: dict
    optimizer: OptimizerState
    epoch: int = 0  # epochs completed
    best_params: Optional[dict] = None
    best_f1: float = -1.0
    best_epoch: int = -1
    history: list = field(default_factory=list)


def predict(params, config: EncoderConfig, sequences, fusion: FusionSpec, pad_id: int,
            batch_size: int = 64) -> np.ndarray:
    """Class indices for ``sequences`` (eval mode, length-bucketed batches)."""
    order = sorted(range(len(sequences)), key=lambda i: len(sequences[i]))
    out = np.zeros(len(sequences), dtype=np.int64)
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        batch = pad_batch([sequences[j] for j in idx], pad_id)
        probs = predict_proba(params, forward(params, config, batch), fusion)
        out[idx] = probs.argmax(-1)
    return out


def macro_f1_of(pred_idx, labels) -> EvalReport:
    return evaluate([CLASSES[i] for i in pred_idx], [CLASSES[i] for i in labels])


def train_classifier(params, config: EncoderConfig, train_seqs, train_labels, plan: TrainPlan,
                     fusion: FusionSpec, alpha: float, epochs: int, pad_id: int,
                     valid_seqs=None, valid_labels=None, batch_size: int = 32, seed: int = 0,
                     state: Optional[TrainState] = None, on_step: Optional[Callable] = None,
                     on_epoch: Optional[Callable] = None) -> TrainState:
    """Fine-tune encoder + head with freezing, block-wise LRs, warm-up and label smoothing.

    Epoch ``e`` draws its shuffling and dropout from ``default_rng([seed, e])``
    so a run resumed from ``state`` continues exactly where it stopped.
    After every epoch the model is scored on the validation split and the
    best macro-F1 parameters are kept (the last epoch wins if there is no
    validation data).
    """
    n = len(train_seqs)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    plan = plan.resolved(steps_per_epoch, epochs)
    if state is None:
        state = TrainState(dict(params), OptimizerState())
    labels = np.asarray(train_labels, dtype=np.int64)
    names = set(encoder_names(state.params)) | {"cls.w", "cls.b"}
    encoder_only = set(encoder_names(state.params))
    for epoch in range(state.epoch, epochs):
        rng = np.random.default_rng([seed, epoch])
        updatable = apply_freeze(epoch, plan, config.num_layers)
        frozen_encoder = updatable == {"head"}
        losses = []
        for idx in _batches(n, batch_size, rng):
            batch = pad_batch([train_seqs[i] for i in idx], pad_id, labels[idx])
            p = state.params
            if frozen_encoder:
                hs, cache = forward(p, config, batch, train_mode=True, rng=rng), None
            else:
                hs, cache = forward(p, config, batch, train_mode=True, rng=rng, return_cache=True)
            loss, _, head, bg = classifier_loss(p, config, hs, batch.labels, fusion, alpha, True, rng)
            if frozen_encoder:
                grads = head
            else:
                grads = {k: g for k, g in backward(p, config, cache, bg).items() if k in encoder_only}
                grads.update(head)
            grads = {k: g for k, g in grads.items() if k in names}
            step = state.optimizer.t + 1
            adamw_step(state.params, grads, state.optimizer, plan, step, updatable, config.num_layers)
            losses.append(loss)
            if on_step is not None:
                on_step(step, loss, plan)
        state.epoch = epoch + 1
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if valid_seqs is not None and len(valid_seqs):
            rep = macro_f1_of(predict(state.params, config, valid_seqs, fusion, pad_id), valid_labels)
            record["valid_macro_f1"] = rep.macro_f1
            if rep.macro_f1 > state.best_f1:
                state.best_f1, state.best_epoch = rep.macro_f1, epoch
                state.best_params = {k: v.copy() for k, v in state.params.items()}
        else:
            state.best_params = {k: v.copy() for k, v in state.params.items()}
            state.best_epoch = epoch
        state.history.append(record)
        log.info("epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(state)
    if state.best_params is None:
        state.best_params = {k: v.copy() for k, v in state.params.items()}
    return state


# ------------------------------------------------------------------ k-fold protocol


@dataclass
class FoldJob:
    fold: int
    params: dict
    config: EncoderConfig
    sequences: list
    labels: list
    train_idx: list
    valid_idx: list
    plan: TrainPlan
    fusion: FusionSpec
    alpha: float
    epochs: int
    pad_id: int
    batch_size: int
    seed: int
    vocab: Optional[Vocabulary] = None
    augment_copies: int = 0
    augment_repetitions: int = 5
    augment_temperature: Optional[float] = None


def run_fold(job: FoldJob) -> EvalReport:
    seed = job.seed + job.fold
    params = reset_head(job.params, job.config, job.fusion.dim(job.config.hidden_size), seed)
    tr_seqs = [job.sequences[i] for i in job.train_idx]
    tr_labels = [job.labels[i] for i in job.train_idx]
    if job.augment_copies and job.vocab is not None:
        extra, extra_labels = augment_training_set(tr_seqs, tr_labels, job.params, job.config, job.vocab,
                                                   job.augment_copies, job.augment_repetitions, seed,
                                                   job.augment_temperature)
        tr_seqs, tr_labels = tr_seqs + extra, tr_labels + extra_labels
    va_seqs = [job.sequences[i] for i in job.valid_idx]
    va_labels = [job.labels[i] for i in job.valid_idx]
    state = train_classifier(params, job.config, tr_seqs, tr_labels, job.plan, job.fusion, job.alpha, job.epochs,
                             job.pad_id, va_seqs, va_labels, job.batch_size, seed)
    report = macro_f1_of(predict(state.best_params, job.config, va_seqs, job.fusion, job.pad_id), va_labels)
    report.fold = job.fold
    return report


def run_kfold(params, config: EncoderConfig, sequences, labels, plan: TrainPlan, fusion: FusionSpec,
              alpha: float, epochs: int, pad_id: int, k: int = 10, seed: int = 0, batch_size: int = 32,
              vocab: Optional[Vocabulary] = None, augment_copies: int = 0, augment_repetitions: int = 5,
              jobs: int = 1, folds: Optional[Sequence[int]] = None,
              augment_temperature: Optional[float] = None) -> EvalReport:
    """Train one classifier per fold (fold ``i`` uses seed ``seed + i``) and average the reports."""
    split = stratified_kfold(labels, k, seed)
    todo = range(k) if folds is None else folds
    fold_jobs = []
    for f in todo:
        tr, va = split.train_valid(f)
        fold_jobs.append(FoldJob(f, params, config, list(sequences), list(labels), tr, va, plan, fusion, alpha,
                                 epochs, pad_id, batch_size, seed, vocab, augment_copies, augment_repetitions,
                                 augment_temperature))
    if jobs > 1 and len(fold_jobs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run_fold, fold_jobs))
    else:
        reports = [run_fold(j) for j in fold_jobs]
    return mean_report(reports)
