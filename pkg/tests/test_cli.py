import csv
import io
import json

import pytest

from hsdtune import cli
from hsdtune.config import RunConfig

SMALL = ["--num_layers", "2", "--hidden_size", "16", "--num_heads", "2", "--ffn_size", "32"]
FAST = ["--base_encoder_lr", "1e-3", "--head_lr", "3e-3", "--log_every", "1000"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-synth", "--output", d / "raw.tsv", "--synth_total", 400, "--seed", 1) == 0
    assert run("preprocess", "--input", d / "raw.tsv", "--output", d / "clean.tsv") == 0
    assert run("build-vocab", "--corpus", d / "clean.tsv", "--vocab", d / "v.json", "--target_vocab", 250) == 0
    assert run("pretrain-mlm", "--corpus", d / "clean.tsv", "--vocab", d / "v.json", "--checkpoint",
               d / "m.ulma", "--mlm_steps", 5, *SMALL) == 0
    return d


def test_schedule_dump_peak_and_end(capsys):
    assert run("schedule-dump", "--warmup_steps", 100, "--total_steps", 800) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    mult = [float(r["multiplier"]) for r in rows]
    assert len(rows) == 801
    assert mult[0] == 0.0 and mult[100] == 1.0 and mult[-1] == 0.0
    assert max(mult) == 1.0 and mult.index(1.0) == 100
    assert float(rows[100]["lr_head"]) == 1e-4


def test_schedule_dump_default_warmup_and_figure(tmp_path):
    out = tmp_path / "sched.csv"
    assert run("schedule-dump", "--steps_per_epoch", 80, "--epochs", 2, "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert float(rows[10]["multiplier"]) == 1.0 and len(rows) == 161
    assert (tmp_path / "sched.png").stat().st_size > 0


def test_help_lists_every_key_with_reference_defaults(capsys):
    assert run("train", "--help") == 0
    text = " ".join(capsys.readouterr().out.split()).split("run config keys:", 1)[1]
    for key in RunConfig.keys():
        assert f"--{key}" in text
    for key, value in [("base_encoder_lr", "1e-05"), ("head_lr", "0.0001"), ("weight_decay", "0.01"),
                       ("alpha", "0.2"), ("mask_ratio", "0.15"), ("k", "10"), ("epochs", "10"),
                       ("batch_size", "32")]:
        chunk = text.split(f"--{key} ", 1)[1].split(" --", 1)[0]
        assert f"(default: {value})" in chunk, key
    assert "ceil(steps_per_epoch / 8)" in text


def test_preprocess_examples(tmp_path):
    src, dst = tmp_path / "in.tsv", tmp_path / "out.tsv"
    src.write_text("")
    assert run("preprocess", "--input", src, "--output", dst) == 0
    assert dst.read_text() == ""
    src.write_text("HATE\thello 😀\n")
    assert run("preprocess", "--input", src, "--output", dst) == 0
    assert dst.read_text() == "HATE\thello EMOJI\n"


def test_preprocess_skips_and_fails_over_threshold(tmp_path, capsys):
    src, dst = tmp_path / "in.tsv", tmp_path / "out.tsv"
    src.write_text("CLEAN\tok\nno tab here\nHATE\tbad\n")
    assert run("preprocess", "--input", src, "--output", dst) == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "line 2" in err
    assert dst.read_text().count("\n") == 2
    src.write_text("".join("CLEAN\tfine text\n" for _ in range(200)) + "broken\n")
    assert run("preprocess", "--input", src, "--output", dst) == 0


def test_config_file_and_override(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"warmup_steps": 3, "total_steps": 10}))
    assert run("schedule-dump", "--config", conf, "--total_steps", 6) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 7 and float(rows[3]["multiplier"]) == 1.0


def test_validation_lists_every_field(tmp_path, capsys):
    code = run("train", "--corpus", tmp_path / "missing.tsv", "--alpha", "1.5", "--k", "0", "--num_heads", "5")
    assert code == cli.EXIT_USAGE
    err = capsys.readouterr().err
    for field in ("corpus", "vocab", "alpha", "k", "encoder"):
        assert f"{field}:" in err, field


def test_unknown_config_key(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"learning_rate": 1}))
    assert run("schedule-dump", "--config", conf) == cli.EXIT_USAGE


def test_bad_checkpoint_is_data_error(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.ulma"
    bad.write_bytes(b"NOPE!" + bytes(20))
    code = run("evaluate", "--corpus", workdir / "clean.tsv", "--vocab", workdir / "v.json", "--checkpoint", bad)
    assert code == cli.EXIT_DATA
    assert "magic" in capsys.readouterr().err


def test_train_resume_reproduces_metrics(workdir, capsys):
    common = ["--corpus", workdir / "clean.tsv", "--vocab", workdir / "v.json", "--init", workdir / "m.ulma",
              "--epochs", 2, "--k", 4, *FAST]
    assert run("train", *common, "--checkpoint", workdir / "c.ulma", "--out", workdir / "train.json") == 0
    first = json.loads((workdir / "train.json").read_text())
    assert (workdir / "train.csv").exists() and (workdir / "train.png").exists()
    assert len(first["history"]) == 2
    assert run("train", *common, "--checkpoint", workdir / "c2.ulma", "--resume", workdir / "c.ulma.state",
               "--out", workdir / "again.json") == 0
    again = json.loads((workdir / "again.json").read_text())
    assert again["per_class"] == first["per_class"]
    assert again["macro_f1"] == first["macro_f1"]
    assert again["history"] == first["history"]
    # the saved best checkpoint scores the same split identically
    assert run("evaluate", "--corpus", workdir / "clean.tsv", "--vocab", workdir / "v.json",
               "--checkpoint", workdir / "c.ulma") == 0
    assert "macro_f1" in json.loads(capsys.readouterr().out)


def test_train_is_deterministic(workdir):
    common = ["--corpus", workdir / "clean.tsv", "--vocab", workdir / "v.json", "--epochs", 1, "--k", 4,
              "--log_every", 1000, *SMALL]
    assert run("train", *common, "--checkpoint", workdir / "d1.ulma", "--out", workdir / "d1.json") == 0
    assert run("train", *common, "--checkpoint", workdir / "d2.ulma", "--out", workdir / "d2.json") == 0
    assert (workdir / "d1.json").read_text() == (workdir / "d2.json").read_text()


def test_augment_writes_extra_rows(workdir):
    out = workdir / "aug.tsv"
    assert run("augment", "--corpus", workdir / "clean.tsv", "--vocab", workdir / "v.json",
               "--init", workdir / "m.ulma", "--output", out, "--augment_repetitions", 2) == 0
    base = (workdir / "clean.tsv").read_text().splitlines()
    rows = out.read_text().splitlines()
    minority = sum(1 for r in base if r.split("\t")[0] in ("HATE", "OFFENSIVE"))
    assert rows[:len(base)] == base
    assert len(rows) == len(base) + minority
    assert all(r.split("\t")[0] in ("HATE", "OFFENSIVE") for r in rows[len(base):])


def test_kfold_report_shape(workdir):
    out = workdir / "kfold.json"
    assert run("kfold", "--corpus", workdir / "clean.tsv", "--vocab", workdir / "v.json", "--epochs", 1,
               "--out", out, "--log_every", 1000, *SMALL) == 0
    report = json.loads(out.read_text())
    assert report["k"] == 10 and len(report["folds"]) == 10
    assert sorted(f["fold"] for f in report["folds"]) == list(range(10))
    assert abs(report["mean_macro_f1"] - sum(f["macro_f1"] for f in report["folds"]) / 10) < 1e-12
    rows = list(csv.DictReader((workdir / "kfold.csv").open()))
    assert len(rows) == 33 and rows[-1]["fold"] == "mean"
    assert (workdir / "kfold.png").stat().st_size > 0


def test_tune_mlm_requires_init(workdir):
    assert run("tune-mlm", "--corpus", workdir / "clean.tsv", "--vocab", workdir / "v.json",
               "--checkpoint", workdir / "t.ulma") == cli.EXIT_USAGE


def test_ablate_writes_report(tmp_path, monkeypatch):
    from hsdtune import ablation
    tiny = ablation.AblationSettings(corpus_size=300, vocab_size=200, num_layers=2, hidden_size=16, num_heads=2,
                                     ffn_size=32, mlm_steps=3, epochs=1, folds=3)
    monkeypatch.setattr(ablation, "AblationSettings", lambda: tiny)
    out = tmp_path / "abl.json"
    assert run("ablate", "--ablation_seeds", "0-1", "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["seeds"] == [0, 1]
    assert set(report["mean"]) == set(ablation.CONDITIONS)
    assert report["settings"]["corpus_size"] == 300
    rows = list(csv.DictReader((tmp_path / "abl.csv").open()))
    assert len(rows) == 12
    assert (tmp_path / "abl.png").stat().st_size > 0
