"""AdamW with decay exclusions, warm-up/decay schedule, block-wise learning rates
and the freeze-then-unfreeze plan."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Optional

import numpy as np

from .encoder import ShapeMismatch, param_tags


class StepOutOfRange(ValueError):
    pass


@dataclass
class TrainPlan:
    base_encoder_lr: float = 1e-5
    head_lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    warmup_steps: Optional[int] = None
    total_steps: int = 1
    freeze_epochs: int = 1
    blockwise_decay: float = 0.9
    use_warmup: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.total_steps < 0 or (self.warmup_steps is not None and self.warmup_steps < 0):
            out.append("warmup_steps and total_steps must be >= 0")
        if self.warmup_steps is not None and self.warmup_steps > self.total_steps:
            out.append("warmup_steps must not exceed total_steps")
        if not 0.0 < self.blockwise_decay <= 1.0:
            out.append("blockwise_decay must lie in (0, 1]")
        if self.base_encoder_lr < 0 or self.head_lr < 0:
            out.append("learning rates must be >= 0")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            out.append("betas must lie in [0, 1)")
        if self.freeze_epochs < 0:
            out.append("freeze_epochs must be >= 0")
        return out

    def resolved(self, steps_per_epoch: int, epochs: int) -> "TrainPlan":
        """Copy with ``total_steps`` set and an unset ``warmup_steps`` defaulted."""
        total = steps_per_epoch * epochs
        warm = default_warmup(steps_per_epoch) if self.warmup_steps is None else self.warmup_steps
        return replace(self, total_steps=total, warmup_steps=min(warm, total))

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def default_warmup(steps_per_epoch: int) -> int:
    """One eighth of one epoch's optimizer steps, rounded up."""
    return math.ceil(steps_per_epoch / 8)


def schedule_lr(step: int, plan: TrainPlan) -> float:
    """Linear ramp 0 -> 1 over ``warmup_steps`` then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= plan.total_steps:
        raise StepOutOfRange(f"step {step} outside 0..{plan.total_steps}")
    if not plan.use_warmup:
        return 1.0
    if plan.warmup_steps is None:
        raise ValueError("warmup_steps unresolved; call TrainPlan.resolved first")
    w, n = plan.warmup_steps, plan.total_steps
    if step < w:
        return step / w
    if n == w:
        return 1.0
    return (n - step) / (n - w)


def layer_lr(depth_tag: str, plan: TrainPlan, num_layers: int) -> float:
    if depth_tag == "head":
        return plan.head_lr
    if depth_tag == "embedding":
        return plan.base_encoder_lr * plan.blockwise_decay ** num_layers
    if depth_tag.startswith("block_"):
        l = int(depth_tag[len("block_"):])
        if not 1 <= l <= num_layers:
            raise ValueError(f"{depth_tag} outside 1..{num_layers}")
        return plan.base_encoder_lr * plan.blockwise_decay ** (num_layers - l)
    raise ValueError(f"unknown depth tag {depth_tag!r}")


def all_depth_tags(num_layers: int) -> frozenset:
    return frozenset(["embedding", "head"] + [f"block_{l}" for l in range(1, num_layers + 1)])


def apply_freeze(epoch: int, plan: TrainPlan, num_layers: int) -> frozenset:
    """Depth tags that may be updated during ``epoch`` (0-based)."""
    if epoch < plan.freeze_epochs:
        return frozenset({"head"})
    return all_depth_tags(num_layers)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    # Per-parameter update counts drive bias correction, so arrays that sat
    # frozen start from a properly corrected first step.
    counts: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: Mapping[str, np.ndarray], state: OptimizerState, plan: TrainPlan,
               step: int, updatable: Iterable[str], num_layers: int) -> tuple[dict, OptimizerState]:
    """One AdamW update, in place on ``params`` and ``state``.

    Only parameters present in ``grads`` whose depth tag is in ``updatable``
    move; everything else, moments included, is left untouched.
    """
    if step != state.t + 1:
        raise ValueError(f"step {step} does not follow optimizer step {state.t}")
    updatable = frozenset(updatable)
    mult = schedule_lr(step, plan)
    b1, b2 = plan.betas
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        group, depth = param_tags(name)
        if depth not in updatable:
            continue
        lr = layer_lr(depth, plan, num_layers) * mult
        n = state.counts.get(name, 0) + 1
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** n)
        v_hat = v / (1.0 - b2 ** n)
        if group == "decayable" and plan.weight_decay:
            w = w * (1.0 - lr * plan.weight_decay)
        w = w - lr * m_hat / (np.sqrt(v_hat) + plan.epsilon)
        params[name] = w.astype(params[name].dtype, copy=False)
        state.m[name], state.v[name], state.counts[name] = m.astype(w.dtype), v.astype(w.dtype), n
    state.t = step
    return params, state
