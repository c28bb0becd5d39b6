"""Flat JSON run configuration shared by every subcommand."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .encoder import EncoderConfig
from .objectives import FusionSpec, SmoothingSpec
from .optim import TrainPlan
from .pipeline import MaskingSpec


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class RunConfig:
    # paths
    corpus: Optional[str] = None
    vocab: Optional[str] = None
    checkpoint: Optional[str] = None
    init: Optional[str] = None
    resume: Optional[str] = None
    input: Optional[str] = None
    output: Optional[str] = None
    out: Optional[str] = None
    figure: Optional[str] = None
    # encoder
    num_layers: int = 4
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    max_positions: int = 64
    vocab_size: int = 2000
    dropout_rate: float = 0.1
    tie_mlm: bool = True
    # optimizer / schedule
    base_encoder_lr: float = 1e-5
    head_lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    warmup_steps: Optional[int] = None
    total_steps: Optional[int] = None
    steps_per_epoch: Optional[int] = None
    use_warmup: bool = True
    freeze_epochs: int = 1
    blockwise_decay: float = 0.9
    # masked LM
    mask_ratio: float = 0.15
    replace_mask: float = 0.8
    replace_random: float = 0.1
    keep_original: float = 0.1
    mlm_steps: int = 10000
    mlm_lr: float = 3e-5
    # classification
    fusion_blocks: str = ""
    fusion_mode: str = "concatenate"
    alpha: float = 0.2
    k: int = 10
    epochs: int = 10
    batch_size: int = 32
    valid_fold: int = 0
    # augmentation
    augment_copies: int = 1
    augment_repetitions: int = 5
    temperature: Optional[float] = None
    # data / misc
    target_vocab: int = 2000
    synth_total: int = 5000
    seed: int = 0
    ablation_seeds: str = "0-4"
    jobs: int = 1
    log_every: int = 50

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # ---------------------------------------------------------------- views

    def encoder_config(self, vocab_size: Optional[int] = None) -> EncoderConfig:
        return EncoderConfig(self.num_layers, self.hidden_size, self.num_heads, self.ffn_size, self.max_positions,
                             vocab_size or self.vocab_size, self.dropout_rate, 3, self.tie_mlm)

    def train_plan(self) -> TrainPlan:
        total = max(self.total_steps or 1, self.warmup_steps or 0)
        return TrainPlan(self.base_encoder_lr, self.head_lr, self.weight_decay, (self.beta1, self.beta2),
                         self.epsilon, self.warmup_steps, total, self.freeze_epochs, self.blockwise_decay,
                         self.use_warmup)

    def mlm_plan(self) -> TrainPlan:
        return TrainPlan(self.mlm_lr, self.mlm_lr, self.weight_decay, (self.beta1, self.beta2), self.epsilon,
                         self.warmup_steps, max(self.mlm_steps, self.warmup_steps or 0), 0, 1.0, self.use_warmup)

    def masking(self) -> MaskingSpec:
        return MaskingSpec(self.mask_ratio, self.replace_mask, self.replace_random, self.keep_original)

    def fusion(self, num_layers: Optional[int] = None) -> FusionSpec:
        L = num_layers or self.num_layers
        if not self.fusion_blocks:
            return FusionSpec.last(L, 6, self.fusion_mode)
        return FusionSpec.parse(self.fusion_blocks, self.fusion_mode)

    def smoothing(self) -> SmoothingSpec:
        return SmoothingSpec(self.alpha, 3)

    def seed_list(self, quiet: bool = False) -> list:
        """``"0-4"`` or ``"0,3,7"`` as a list of ints."""
        try:
            out = []
            for part in self.ablation_seeds.split(","):
                lo, _, hi = part.strip().partition("-")
                out.extend(range(int(lo), int(hi or lo) + 1))
            return out
        except ValueError:
            if quiet:
                return []
            raise

    # ---------------------------------------------------------------- validation

    def problems(self, required_inputs=()) -> list:
        out = []
        for name in required_inputs:
            value = getattr(self, name)
            if value is None:
                out.append(f"{name}: required")
            elif not os.path.exists(value):
                out.append(f"{name}: path {value!r} does not exist")
        try:
            out += [f"encoder: {p}" for p in self.encoder_config().problems()]
        except ValueError as exc:
            out.append(f"encoder: {exc}")
        checks = [
            ("base_encoder_lr", self.base_encoder_lr >= 0), ("head_lr", self.head_lr >= 0),
            ("mlm_lr", self.mlm_lr >= 0), ("weight_decay", self.weight_decay >= 0),
            ("beta1", 0 <= self.beta1 < 1), ("beta2", 0 <= self.beta2 < 1), ("epsilon", self.epsilon > 0),
            ("warmup_steps", self.warmup_steps is None or self.warmup_steps >= 0),
            ("total_steps", self.total_steps is None or self.total_steps >= (self.warmup_steps or 0)),
            ("steps_per_epoch", self.steps_per_epoch is None or self.steps_per_epoch >= 1),
            ("freeze_epochs", self.freeze_epochs >= 0), ("blockwise_decay", 0 < self.blockwise_decay <= 1),
            ("mask_ratio", 0 < self.mask_ratio < 1),
            ("replace_mask", abs(self.replace_mask + self.replace_random + self.keep_original - 1) < 1e-9
             and min(self.replace_mask, self.replace_random, self.keep_original) >= 0),
            ("mlm_steps", self.mlm_steps >= 0), ("fusion_mode", self.fusion_mode in ("concatenate", "add")),
            ("alpha", 0 <= self.alpha < 1), ("k", self.k >= 1), ("epochs", self.epochs >= 0),
            ("batch_size", self.batch_size >= 1), ("valid_fold", -1 <= self.valid_fold < self.k),
            ("augment_copies", self.augment_copies >= 0), ("augment_repetitions", self.augment_repetitions >= 0),
            ("temperature", self.temperature is None or self.temperature > 0),
            ("target_vocab", self.target_vocab >= 1), ("synth_total", self.synth_total >= 3),
            ("jobs", self.jobs >= 1), ("ablation_seeds", bool(self.seed_list(quiet=True))), ("log_every", self.log_every >= 1),
        ]
        out += [f"{name}: value {getattr(self, name)!r} out of range" for name, ok in checks if not ok]
        try:
            fusion = self.fusion()
            if fusion.block_indices[-1] > self.num_layers:
                out.append(f"fusion_blocks: block {fusion.block_indices[-1]} exceeds num_layers {self.num_layers}")
        except ValueError as exc:
            out.append(f"fusion_blocks: {exc}")
        return out

    def validate(self, required_inputs=()) -> "RunConfig":
        problems = self.problems(required_inputs)
        if problems:
            raise ConfigError(problems)
        return self
