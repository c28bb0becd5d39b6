"""Task heads and losses: multi-block feature fusion, linear classifier, MLM head,
label smoothing and cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .encoder import EncoderConfig, ShapeMismatch, dropout_mask, softmax

PROB_FLOOR = 1e-12


class NotOneHot(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NoMaskedPositions(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class FusionSpec:
    block_indices: tuple[int, ...]
    combine_mode: str = "concatenate"

    def __post_init__(self):
        blocks = tuple(int(b) for b in self.block_indices)
        object.__setattr__(self, "block_indices", blocks)
        if not blocks:
            raise ValueError("block_indices must be nonempty")
        if any(b >= a for b, a in zip(blocks, blocks[1:])) or blocks[0] < 1:
            raise ValueError("block_indices must be strictly increasing and >= 1")
        if self.combine_mode not in ("concatenate", "add"):
            raise ValueError(f"unknown combine_mode {self.combine_mode!r}")

    def dim(self, hidden_size: int) -> int:
        return hidden_size * len(self.block_indices) if self.combine_mode == "concatenate" else hidden_size

    @classmethod
    def last(cls, num_layers: int, count: int, mode: str = "concatenate") -> "FusionSpec":
        count = min(count, num_layers)
        return cls(tuple(range(num_layers - count + 1, num_layers + 1)), mode)

    @classmethod
    def parse(cls, text: str, mode: str = "concatenate") -> "FusionSpec":
        """``"7-12"`` or ``"6,12"`` or ``"3-6,12"``."""
        blocks: list[int] = []
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-")
                blocks.extend(range(int(lo), int(hi) + 1))
            elif part:
                blocks.append(int(part))
        return cls(tuple(sorted(set(blocks))), mode)

    def label(self) -> str:
        b = self.block_indices
        if list(b) == list(range(b[0], b[-1] + 1)) and len(b) > 1:
            return f"{b[0]}-{b[-1]}"
        return ",".join(map(str, b))


@dataclass(frozen=True)
class SmoothingSpec:
    alpha: float = 0.2
    num_classes: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")


def smooth_labels(one_hot, spec: SmoothingSpec) -> np.ndarray:
    y = np.asarray(one_hot, dtype=np.float64)
    if y.shape[-1] != spec.num_classes:
        raise NotOneHot(f"expected {spec.num_classes} classes, got {y.shape[-1]}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(-1) == 1)):
        raise NotOneHot("input is not one-hot")
    return y * (1.0 - spec.alpha) + spec.alpha / spec.num_classes


def smoothed_targets(labels, spec: SmoothingSpec) -> np.ndarray:
    """Smoothed target rows for integer class labels."""
    return smooth_labels(np.eye(spec.num_classes)[np.asarray(labels)], spec)


def cross_entropy(target, predicted) -> float:
    """-sum(target * log(predicted)); 2-D inputs are averaged over rows."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if t.shape != p.shape:
        raise LengthMismatch(f"target shape {t.shape} != predicted shape {p.shape}")
    losses = -(t * np.log(np.maximum(p, PROB_FLOOR))).sum(-1)
    return float(losses.mean())


def log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Mean soft-target cross-entropy from logits, and its gradient ``(p - y) / N``."""
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -(targets * logp).sum() / n
    grad = (np.exp(logp) - targets) / n
    return float(loss), grad.astype(logits.dtype)


# ------------------------------------------------------------------ fusion + classifier


def fuse_features(block_outputs: Sequence[np.ndarray], fusion: FusionSpec) -> np.ndarray:
    """First-position vector of each selected block, concatenated or summed."""
    L = len(block_outputs)
    for b in fusion.block_indices:
        if not 1 <= b <= L:
            raise IndexOutOfRange(f"block {b} outside 1..{L}")
    firsts = [block_outputs[b - 1][:, 0, :] for b in fusion.block_indices]
    if fusion.combine_mode == "concatenate":
        return np.concatenate(firsts, axis=-1)
    return np.sum(firsts, axis=0)


def fuse_backward(d_fused: np.ndarray, fusion: FusionSpec, shape) -> dict[int, np.ndarray]:
    B, T, H = shape
    out = {}
    for i, b in enumerate(fusion.block_indices):
        g = np.zeros((B, T, H), dtype=d_fused.dtype)
        g[:, 0, :] = d_fused[:, i * H:(i + 1) * H] if fusion.combine_mode == "concatenate" else d_fused
        out[b] = g
    return out


def classify(fused, weight, bias, train_mode: bool = False, rate: float = 0.0,
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """softmax(fused @ weight + bias), with dropout on ``fused`` in train mode."""
    if fused.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeMismatch(f"features {fused.shape} incompatible with head {weight.shape}")
    if train_mode:
        m = dropout_mask(fused.shape, rate, rng, fused.dtype.type)
        if m is not None:
            fused = fused * m
    return softmax(fused @ weight + bias)


def classifier_loss(params: Mapping[str, np.ndarray], config: EncoderConfig, block_outputs,
                    labels, fusion: FusionSpec, alpha: float = 0.0, train_mode: bool = False,
                    rng: Optional[np.random.Generator] = None):
    """Label-smoothed classification loss.

    Returns ``(loss, probs, head_grads, block_grads)``.
    """
    fused = fuse_features(block_outputs, fusion)
    w, b = params["cls.w"], params["cls.b"]
    if fused.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"fused width {fused.shape[-1]} != head input {w.shape[0]}")
    m = dropout_mask(fused.shape, config.dropout_rate, rng, fused.dtype.type) if train_mode else None
    x = fused * m if m is not None else fused
    logits = x @ w + b
    targets = smoothed_targets(labels, SmoothingSpec(alpha, config.num_classes)).astype(logits.dtype)
    loss, dlogits = softmax_cross_entropy(logits, targets)
    head = {"cls.w": x.T @ dlogits, "cls.b": dlogits.sum(0)}
    dx = dlogits @ w.T
    if m is not None:
        dx = dx * m
    blocks = fuse_backward(dx, fusion, block_outputs[0].shape)
    return loss, softmax(logits), head, blocks


def predict_proba(params, block_outputs, fusion: FusionSpec) -> np.ndarray:
    return classify(fuse_features(block_outputs, fusion), params["cls.w"], params["cls.b"])


# ------------------------------------------------------------------ masked LM head


def mlm_logits(params, config: EncoderConfig, hidden):
    proj = params["emb.tok"].T if config.tie_mlm else params["mlm.w"]
    return hidden @ proj + params["mlm.bias"]


def mlm_loss(params: Mapping[str, np.ndarray], config: EncoderConfig, block_outputs,
             targets, loss_mask):
    """Mean cross-entropy over masked positions, from the last block's states.

    Returns ``(loss, head_grads, block_grads)``; with tied weights the
    projection gradient lands on ``emb.tok``.
    """
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if not loss_mask.any():
        raise NoMaskedPositions("loss mask selects no positions")
    last = block_outputs[-1]
    h = last[loss_mask]
    logits = mlm_logits(params, config, h)
    V = logits.shape[-1]
    tgt = np.asarray(targets)[loss_mask]
    onehot = np.zeros_like(logits)
    onehot[np.arange(len(tgt)), tgt] = 1.0
    loss, dlogits = softmax_cross_entropy(logits, onehot)
    head = {"mlm.bias": dlogits.sum(0)}
    if config.tie_mlm:
        head["emb.tok"] = dlogits.T @ h
        dh = dlogits @ params["emb.tok"]
    else:
        head["mlm.w"] = h.T @ dlogits
        dh = dlogits @ params["mlm.w"].T
    g = np.zeros_like(last)
    g[loss_mask] = dh
    assert V == config.vocab_size
    return loss, head, {len(block_outputs): g}
