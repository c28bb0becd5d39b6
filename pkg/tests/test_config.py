import json

import pytest

from hsdtune.ablation import summarize
from hsdtune.config import ConfigError, RunConfig


def test_defaults_are_valid_and_match_reference_values():
    cfg = RunConfig()
    assert cfg.problems() == []
    plan = cfg.train_plan()
    assert (plan.base_encoder_lr, plan.head_lr, plan.weight_decay) == (1e-5, 1e-4, 0.01)
    assert plan.warmup_steps is None and plan.resolved(80, 10).warmup_steps == 10
    assert (cfg.alpha, cfg.mask_ratio, cfg.k, cfg.epochs, cfg.batch_size) == (0.2, 0.15, 10, 10, 32)
    assert cfg.masking().mask_ratio == 0.15


def test_default_fusion_is_last_six_blocks():
    assert RunConfig(num_layers=12).fusion().block_indices == tuple(range(7, 13))
    assert RunConfig().fusion().block_indices == (1, 2, 3, 4)
    assert RunConfig(fusion_blocks="2,4", fusion_mode="add").fusion().combine_mode == "add"


def test_problems_lists_every_violation(tmp_path):
    cfg = RunConfig(alpha=1.0, k=0, batch_size=0, num_heads=3, fusion_blocks="9", corpus=str(tmp_path / "nope"))
    problems = cfg.problems(["corpus", "vocab"])
    text = "\n".join(problems)
    for key in ("corpus", "vocab", "alpha", "k", "batch_size", "encoder", "fusion_blocks"):
        assert f"{key}:" in text, key
    with pytest.raises(ConfigError) as err:
        cfg.validate(["corpus"])
    assert len(err.value.problems) >= 6


def test_from_file_round_trip(tmp_path):
    path = tmp_path / "run.json"
    cfg = RunConfig(epochs=3, seed=7, warmup_steps=5)
    path.write_text(cfg.to_json())
    assert RunConfig.from_file(path) == cfg
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_seed_list():
    assert RunConfig(ablation_seeds="0-4").seed_list() == [0, 1, 2, 3, 4]
    assert RunConfig(ablation_seeds="3, 5-6").seed_list() == [3, 5, 6]
    assert RunConfig(ablation_seeds="a").seed_list(quiet=True) == []


def test_ablation_summary_verdicts():
    per_seed = {0: {"base": 0.60, "smoothing": 0.62, "mlm": 0.70, "combined": 0.72},
                1: {"base": 0.62, "smoothing": 0.60, "mlm": 0.66, "combined": 0.70}}
    s = summarize(per_seed)
    assert s["mean"]["base"] == pytest.approx(0.61)
    assert s["delta_smoothing"] == pytest.approx(0.0)
    assert s["mlm_not_worse"] and s["smoothing_not_worse"] and s["combined_best"]
    per_seed[1]["combined"] = 0.64
    assert not summarize(per_seed)["combined_best"]
