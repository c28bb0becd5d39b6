import copy
from collections import Counter

import numpy as np
import pytest

from hsdtune import CLASSES
from hsdtune.encoder import Batch, EncoderConfig, init_parameters, pad_batch, reset_head
from hsdtune.metrics import EvalReport, LengthMismatch, UnknownLabel, evaluate, mean_report
from hsdtune.objectives import FusionSpec
from hsdtune.optim import TrainPlan
from hsdtune.pipeline import (CLASS_INDEX, ClassTooSmall, MaskingSpec, NoEligiblePosition, augment,
                              augment_training_set, mask_batch, predict, stratified_kfold, train_classifier,
                              tune_mlm)
from hsdtune.preprocess import clean
from hsdtune.synthetic import TABLE_COUNTS, generate_synthetic_corpus, table_sizes

# ------------------------------------------------------------------ masking


def random_batch(vocab, rows, length, rng):
    content = vocab.content_ids()
    seqs = []
    for _ in range(rows):
        n = int(rng.integers(1, length - 1))
        seqs.append([vocab.bos_id] + list(rng.choice(content, n)) + [vocab.eos_id])
    return pad_batch(seqs, vocab.pad_id)


def test_mask_statistics(small_vocab):
    rng = np.random.default_rng(0)
    batch = random_batch(small_vocab, 5000, 50, rng)
    out = mask_batch(batch, MaskingSpec(), small_vocab, 1)
    eligible = batch.attention_mask & ~np.isin(batch.token_ids, list(small_vocab.structural_ids))
    n = int(eligible.sum())
    assert n >= 100_000
    sel = out.loss_mask
    frac = sel.sum() / n
    assert 0.14 <= frac <= 0.16
    masked = (out.token_ids == small_vocab.mask_id) & sel
    changed = (out.token_ids != batch.token_ids) & sel & ~masked
    kept = (out.token_ids == batch.token_ids) & sel
    k = sel.sum()
    assert 0.79 <= masked.sum() / k <= 0.81
    # random replacements that happen to draw the original id count as "kept"
    assert abs(changed.sum() / k - 0.1) <= 0.01
    assert abs(kept.sum() / k - 0.1) <= 0.01
    assert not (sel & ~eligible).any()
    np.testing.assert_array_equal(out.mlm_targets[sel], batch.token_ids[sel])


def test_mask_floor_rule(small_vocab):
    rng = np.random.default_rng(0)
    batch = random_batch(small_vocab, 200, 12, rng)
    out = mask_batch(batch, MaskingSpec(mask_ratio=1e-9), small_vocab, 3)
    np.testing.assert_array_equal(out.loss_mask.sum(1), 1)


def test_mask_never_selects_specials(small_vocab):
    rng = np.random.default_rng(4)
    batch = random_batch(small_vocab, 50, 10, rng)
    out = mask_batch(batch, MaskingSpec(mask_ratio=0.99), small_vocab, 5)
    assert not out.loss_mask[:, 0].any()
    assert not (out.loss_mask & ~batch.attention_mask).any()
    assert not (out.loss_mask & (batch.token_ids == small_vocab.eos_id)).any()


def test_masking_spec_validation():
    with pytest.raises(ValueError):
        MaskingSpec(mask_ratio=0.0)
    with pytest.raises(ValueError):
        MaskingSpec(replace_mask=0.5)


# ------------------------------------------------------------------ stratified folds


def test_kfold_table_counts():
    labels = [c for c, n in TABLE_COUNTS.items() for _ in range(n)]
    split = stratified_kfold(labels, 10, 0)
    seen = sorted(i for f in split.folds for i in f)
    assert seen == list(range(len(labels)))
    for fold in split.folds:
        counts = Counter(labels[i] for i in fold)
        assert counts["HATE"] in (70, 71)
        assert counts["OFFENSIVE"] in (102, 103)
        assert counts["CLEAN"] in (1861, 1862)
        for c, n in TABLE_COUNTS.items():
            assert abs(counts[c] - n / 10) <= 1


def test_kfold_properties():
    rng = np.random.default_rng(0)
    for k in (1, 2, 5, 7):
        labels = list(rng.choice(list(CLASSES), 300))
        split = stratified_kfold(labels, k, k)
        assert sorted(i for f in split.folds for i in f) == list(range(300))
        for c in CLASSES:
            per = [sum(labels[i] == c for i in f) for f in split.folds]
            assert max(per) - min(per) <= 1
        tr, va = split.train_valid(0)
        assert not set(tr) & set(va) and len(tr) + len(va) == 300
    assert stratified_kfold(["A"] * 3 + ["B"] * 3, 1, 0).folds == [list(range(6))]


def test_kfold_too_small():
    with pytest.raises(ClassTooSmall):
        stratified_kfold(["A"] * 5 + ["B"] * 2, 3, 0)


def test_kfold_seeded():
    labels = ["A"] * 30 + ["B"] * 20
    assert stratified_kfold(labels, 5, 1).folds == stratified_kfold(labels, 5, 1).folds
    assert stratified_kfold(labels, 5, 1).folds != stratified_kfold(labels, 5, 2).folds


# ------------------------------------------------------------------ metrics


def brute_force_macro(pred, truth):
    f1s = []
    for c in CLASSES:
        tp = sum(p == c and t == c for p, t in zip(pred, truth))
        fp = sum(p == c and t != c for p, t in zip(pred, truth))
        fn = sum(p != c and t == c for p, t in zip(pred, truth))
        if tp == 0:
            f1s.append(0.0)
            continue
        prec, rec = tp / (tp + fp), tp / (tp + fn)
        f1s.append(2 * prec * rec / (prec + rec))
    return f1s, sum(f1s) / 3


def test_evaluate_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        truth = list(rng.choice(CLASSES, n))
        pred = list(rng.choice(CLASSES, n))
        rep = evaluate(pred, truth)
        f1s, macro = brute_force_macro(pred, truth)
        assert [rep.per_class[c]["f1"] for c in CLASSES] == f1s
        assert rep.macro_f1 == macro


def test_evaluate_examples():
    truth = ["HATE", "OFFENSIVE", "CLEAN"] * 4
    assert evaluate(truth, truth).macro_f1 == 1.0
    rep = evaluate(["CLEAN"] * 12, truth)
    assert rep.per_class["CLEAN"]["f1"] == pytest.approx(0.5)
    assert rep.per_class["HATE"]["f1"] == 0.0
    assert rep.macro_f1 == pytest.approx(1 / 6)
    with pytest.raises(LengthMismatch):
        evaluate(["CLEAN"], [])
    with pytest.raises(UnknownLabel):
        evaluate(["SPAM"], ["CLEAN"])


def test_report_serialization():
    a = evaluate(["CLEAN", "HATE", "OFFENSIVE"], ["CLEAN", "HATE", "HATE"])
    a.fold = 0
    b = evaluate(["CLEAN"] * 3, ["CLEAN", "HATE", "OFFENSIVE"])
    b.fold = 1
    m = mean_report([a, b])
    assert m.macro_f1 == pytest.approx((a.macro_f1 + b.macro_f1) / 2)
    assert EvalReport.from_dict(m.to_dict()).to_dict() == m.to_dict()
    lines = m.to_csv().strip().splitlines()
    assert lines[0] == "fold,class,precision,recall,f1,macro_f1"
    assert len(lines) == 1 + 3 * 3
    assert all(0 <= float(x) <= 1 for line in lines[1:] for x in line.split(",")[2:])


# ------------------------------------------------------------------ synthetic corpus


def test_synthetic_deterministic_and_sized():
    sizes = {"HATE": 7, "OFFENSIVE": 11, "CLEAN": 40}
    a = generate_synthetic_corpus(3, sizes)
    b = generate_synthetic_corpus(3, sizes)
    assert [(d.text, d.label) for d in a] == [(d.text, d.label) for d in b]
    assert Counter(d.label for d in a) == sizes
    assert sum(table_sizes(5000).values()) == 5000


def test_synthetic_has_noise_features():
    docs = generate_synthetic_corpus(0, table_sizes(1000))
    tokens = Counter(t for d in docs for t in clean(d).tokens)
    assert tokens["EMOJI"] > 0 and tokens["PHONE"] > 0 and tokens["EMAIL"] > 0


def test_synthetic_bow_learnable():
    from sklearn.feature_extraction.text import CountVectorizer
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.metrics import f1_score

    scores = []
    for seed in range(5):
        docs = generate_synthetic_corpus(seed, table_sizes(5000))
        text = [" ".join(clean(d).tokens) for d in docs]
        y = [d.label for d in docs]
        a, b, ya, yb = train_test_split(text, y, test_size=0.2, stratify=y, random_state=seed)
        vec = CountVectorizer(token_pattern=r"\S+")
        model = LogisticRegression(max_iter=2000).fit(vec.fit_transform(a), ya)
        scores.append(f1_score(yb, model.predict(vec.transform(b)), average="macro"))
    assert np.mean(scores) > 0.6
    assert np.mean(scores) < 0.95


# ------------------------------------------------------------------ MLM tuning and augmentation


@pytest.fixture(scope="module")
def mlm_setup(small_corpus, small_vocab):
    cfg = EncoderConfig(num_layers=2, hidden_size=32, num_heads=2, ffn_size=64, max_positions=64,
                        vocab_size=len(small_vocab), dropout_rate=0.1)
    seqs = [small_vocab.encode(d, 64) for d in small_corpus[:200]]
    return cfg, seqs


def test_tune_mlm_reduces_loss(mlm_setup, small_vocab):
    cfg, seqs = mlm_setup
    p0 = init_parameters(cfg, 0)
    plan = TrainPlan(base_encoder_lr=3e-3, head_lr=3e-3, blockwise_decay=1.0)
    from hsdtune.pipeline import mlm_eval_loss
    before = mlm_eval_loss(p0, cfg, seqs, small_vocab, MaskingSpec(), seed=1)
    p1, losses = tune_mlm(p0, cfg, seqs, small_vocab, plan, MaskingSpec(), 500, 32, seed=0)
    after = mlm_eval_loss(p1, cfg, seqs, small_vocab, MaskingSpec(), seed=1)
    assert len(losses) == 500
    assert after < before
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_tune_mlm_determinism_and_zero_steps(mlm_setup, small_vocab):
    cfg, seqs = mlm_setup
    p0 = init_parameters(cfg, 0)
    plan = TrainPlan(base_encoder_lr=1e-3, head_lr=1e-3)
    same, _ = tune_mlm(p0, cfg, seqs, small_vocab, plan, MaskingSpec(), 0)
    assert all(same[k].tobytes() == p0[k].tobytes() for k in p0)
    _, a = tune_mlm(p0, cfg, seqs, small_vocab, plan, MaskingSpec(), 15, 16, seed=4)
    _, b = tune_mlm(p0, cfg, seqs, small_vocab, plan, MaskingSpec(), 15, 16, seed=4)
    assert a == b


def test_augment_contracts(mlm_setup, small_vocab):
    cfg, seqs = mlm_setup
    p = init_parameters(cfg, 1)
    seq = seqs[0]
    assert augment(seq, p, cfg, small_vocab, 0, seed=0) == list(seq)
    for reps in (1, 3, 5, 50):
        out = augment(seq, p, cfg, small_vocab, reps, seed=2)
        assert len(out) == len(seq)
        assert sum(a != b for a, b in zip(out, seq)) <= reps
        assert out[0] == seq[0] and out[-1] == seq[-1]
        assert out == augment(seq, p, cfg, small_vocab, reps, seed=2)
    with pytest.raises(NoEligiblePosition):
        augment([small_vocab.bos_id, small_vocab.eos_id], p, cfg, small_vocab, 1, seed=0)


def test_augment_degenerate_head(mlm_setup, small_vocab):
    cfg, seqs = mlm_setup
    cfg = EncoderConfig(**{**cfg.to_dict(), "tie_mlm": False})
    p = init_parameters(cfg, 1)
    z = small_vocab.content_ids()[17]
    p["mlm.w"][:] = 0
    p["mlm.bias"][:] = 0
    p["mlm.bias"][z] = 10.0
    seq = max(seqs, key=len)
    out = augment(seq, p, cfg, small_vocab, 5, seed=0)
    changed = [i for i, (a, b) in enumerate(zip(out, seq)) if a != b]
    assert changed
    assert all(out[i] == z for i in changed)
    assert sum(t == z for t in out) >= min(5, len(seq) - 2)


def test_augment_training_set_only_minority(mlm_setup, small_vocab):
    cfg, seqs = mlm_setup
    p = init_parameters(cfg, 1)
    labels = [0, 1, 2, 0, 2]
    new, new_labels = augment_training_set(seqs[:5], labels, p, cfg, small_vocab, copies=2, repetitions=2)
    assert new_labels == [1, 1, 2, 2, 2, 2]
    assert len(new) == 6


# ------------------------------------------------------------------ classifier fine-tuning


@pytest.fixture(scope="module")
def cls_setup(small_corpus, small_vocab):
    cfg = EncoderConfig(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32, max_positions=64,
                        vocab_size=len(small_vocab), dropout_rate=0.1)
    docs = small_corpus[:120]
    seqs = [small_vocab.encode(d, 64) for d in docs]
    labels = [CLASS_INDEX[d.label] for d in docs]
    return cfg, seqs, labels


def test_frozen_epoch_keeps_encoder(cls_setup, small_vocab):
    cfg, seqs, labels = cls_setup
    fusion = FusionSpec((1, 2))
    p = init_parameters(cfg, 0, fusion_dim=fusion.dim(16))
    plan = TrainPlan(base_encoder_lr=1e-3, head_lr=1e-3, freeze_epochs=1)
    snaps = []
    state = train_classifier(p, cfg, seqs, labels, plan, fusion, 0.2, 2, small_vocab.pad_id, seqs[:30], labels[:30],
                             16, seed=0, on_epoch=lambda s: snaps.append({k: v.copy() for k, v in s.params.items()}))
    for k in p:
        if k.startswith("cls."):
            assert not np.array_equal(snaps[0][k], p[k])
        else:
            assert snaps[0][k].tobytes() == p[k].tobytes(), k
    assert any(not np.array_equal(snaps[1][k], p[k]) for k in p if k.startswith("blocks."))
    assert state.epoch == 2 and len(state.history) == 2


def test_train_classifier_deterministic(cls_setup, small_vocab):
    cfg, seqs, labels = cls_setup
    fusion = FusionSpec((2,))
    p = init_parameters(cfg, 0, fusion_dim=16)
    plan = TrainPlan(base_encoder_lr=1e-3, head_lr=1e-3, freeze_epochs=0)
    run = lambda: train_classifier(p, cfg, seqs[:80], labels[:80], plan, fusion, 0.2, 2, small_vocab.pad_id,
                                   seqs[80:], labels[80:], 16, seed=3)
    a, b = run(), run()
    assert a.best_f1 == b.best_f1 and a.history == b.history


def test_resume_matches_uninterrupted(cls_setup, small_vocab):
    cfg, seqs, labels = cls_setup
    fusion = FusionSpec((1, 2))
    p = init_parameters(cfg, 0, fusion_dim=32)
    plan = TrainPlan(base_encoder_lr=1e-3, head_lr=1e-3, freeze_epochs=1)
    args = (cfg, seqs[:80], labels[:80], plan, fusion, 0.2, 3, small_vocab.pad_id, seqs[80:], labels[80:], 16, 5)
    states = []
    full = train_classifier(p, *args, on_epoch=lambda s: states.append(copy.deepcopy(s)))
    resumed = train_classifier(p, *args, state=copy.deepcopy(states[1]))
    assert resumed.history == full.history
    assert all(resumed.params[k].tobytes() == full.params[k].tobytes() for k in p)
    assert all(resumed.best_params[k].tobytes() == full.best_params[k].tobytes() for k in p)


def test_predict_order_independent_of_bucketing(cls_setup, small_vocab):
    cfg, seqs, labels = cls_setup
    fusion = FusionSpec((1, 2))
    p = reset_head(init_parameters(cfg, 0, fusion_dim=32), cfg, 32, 1)
    rng = np.random.default_rng(0)
    p["cls.w"] = rng.normal(size=p["cls.w"].shape).astype(np.float32)
    full = predict(p, cfg, seqs, fusion, small_vocab.pad_id, batch_size=7)
    single = np.array([predict(p, cfg, [s], fusion, small_vocab.pad_id)[0] for s in seqs])
    np.testing.assert_array_equal(full, single)
