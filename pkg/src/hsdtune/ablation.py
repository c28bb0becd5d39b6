"""Technique ablation on the synthetic corpus.

Four conditions share one data split, one initialization and one
warm-up/decay recipe:

* ``base``      plain cross-entropy, encoder from a fresh init
* ``smoothing`` label-smoothed cross-entropy
* ``mlm``       encoder first trained as a masked LM on the whole corpus
* ``combined``  masked LM + smoothing + head-only first epoch + block-wise
                LR decay + MLM augmentation of the minority classes
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .encoder import EncoderConfig, init_parameters
from .objectives import FusionSpec
from .optim import TrainPlan
from .pipeline import (CLASS_INDEX, MaskingSpec, augment_training_set, stratified_kfold, train_classifier,
                       tune_mlm)
from .preprocess import clean
from .synthetic import generate_synthetic_corpus, table_sizes
from .tokenizer import build_vocab

CONDITIONS = ("base", "smoothing", "mlm", "combined")


@dataclass(frozen=True)
class AblationSettings:
    corpus_size: int = 5000
    vocab_size: int = 1000
    num_layers: int = 4
    hidden_size: int = 32
    num_heads: int = 4
    ffn_size: int = 128
    max_len: int = 64
    dropout_rate: float = 0.1
    encoder_lr: float = 1e-3
    head_lr: float = 3e-3
    mlm_lr: float = 3e-3
    mlm_steps: int = 1000
    epochs: int = 8
    batch_size: int = 32
    alpha: float = 0.2
    freeze_epochs: int = 1
    blockwise_decay: float = 0.9
    augment_copies: int = 1
    augment_repetitions: int = 5
    folds: int = 5

    def to_dict(self):
        return asdict(self)


def run_seed(seed: int, settings: AblationSettings = AblationSettings(), conditions=CONDITIONS,
             on_result: Optional[Callable] = None) -> dict:
    """Validation macro-F1 (best epoch) per condition for one seed."""
    s = settings
    docs = [clean(d) for d in generate_synthetic_corpus(seed, table_sizes(s.corpus_size))]
    vocab = build_vocab(docs, s.vocab_size)
    seqs = [vocab.encode(d, s.max_len) for d in docs]
    labels = [CLASS_INDEX[d.label] for d in docs]
    cfg = EncoderConfig(s.num_layers, s.hidden_size, s.num_heads, s.ffn_size, s.max_len, len(vocab),
                        s.dropout_rate)
    fusion = FusionSpec.last(s.num_layers, 6)
    tr, va = stratified_kfold(labels, s.folds, seed).train_valid(0)
    tr_s, tr_l = [seqs[i] for i in tr], [labels[i] for i in tr]
    va_s, va_l = [seqs[i] for i in va], [labels[i] for i in va]
    init = init_parameters(cfg, seed, fusion.dim(s.hidden_size))

    mlm_params = None
    if any(c in ("mlm", "combined") for c in conditions):
        plan = TrainPlan(s.mlm_lr, s.mlm_lr, blockwise_decay=1.0, freeze_epochs=0)
        mlm_params, _ = tune_mlm(init, cfg, seqs, vocab, plan, MaskingSpec(), s.mlm_steps, s.batch_size, seed)

    def plan_for(combined):
        return TrainPlan(s.encoder_lr, s.head_lr, freeze_epochs=s.freeze_epochs if combined else 0,
                         blockwise_decay=s.blockwise_decay if combined else 1.0)

    results = {}
    for name in conditions:
        start = time.perf_counter()
        params = mlm_params if name in ("mlm", "combined") else init
        train_s, train_l = tr_s, tr_l
        if name == "combined" and s.augment_copies:
            extra, extra_l = augment_training_set(tr_s, tr_l, params, cfg, vocab, s.augment_copies,
                                                  s.augment_repetitions, seed)
            train_s, train_l = tr_s + extra, tr_l + extra_l
        alpha = s.alpha if name in ("smoothing", "combined") else 0.0
        state = train_classifier(params, cfg, train_s, train_l, plan_for(name == "combined"), fusion, alpha,
                                 s.epochs, vocab.pad_id, va_s, va_l, s.batch_size, seed)
        results[name] = state.best_f1
        if on_result is not None:
            on_result(seed, name, state.best_f1, time.perf_counter() - start)
    return results


def summarize(per_seed: dict) -> dict:
    """Means, deltas against the reference conditions, and the acceptance verdicts."""
    conds = list(next(iter(per_seed.values())))
    means = {c: float(np.mean([r[c] for r in per_seed.values()])) for c in conds}
    out = {"seeds": sorted(per_seed), "per_seed": {str(k): v for k, v in sorted(per_seed.items())},
           "mean": means}
    if {"base", "smoothing", "mlm", "combined"} <= set(conds):
        out["delta_mlm"] = means["mlm"] - means["base"]
        out["delta_smoothing"] = means["smoothing"] - means["base"]
        others = max(means["base"], means["smoothing"], means["mlm"])
        out["delta_combined"] = means["combined"] - others
        out["mlm_not_worse"] = out["delta_mlm"] >= -0.005
        out["smoothing_not_worse"] = out["delta_smoothing"] >= -0.005
        out["combined_best"] = means["combined"] > others
    return out
