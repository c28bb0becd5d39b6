"""Central finite-difference oracle for the encoder and heads."""
from __future__ import annotations

import numpy as np

from .encoder import Batch, EncoderConfig, add_grads, backward, forward
from .objectives import FusionSpec, classifier_loss, mlm_loss

ABS_FLOOR = 1e-6


def combined_loss(params, config: EncoderConfig, batch: Batch, fusion: FusionSpec, alpha: float):
    """Classification + MLM loss, so every parameter sits on the loss path."""
    hs = forward(params, config, batch)
    cls, _, _, _ = classifier_loss(params, config, hs, batch.labels, fusion, alpha)
    mlm, _, _ = mlm_loss(params, config, hs, batch.mlm_targets, batch.loss_mask)
    return cls + mlm


def analytic_grads(params, config: EncoderConfig, batch: Batch, fusion: FusionSpec, alpha: float):
    hs, cache = forward(params, config, batch, return_cache=True)
    _, _, head_c, blocks_c = classifier_loss(params, config, hs, batch.labels, fusion, alpha)
    _, head_m, blocks_m = mlm_loss(params, config, hs, batch.mlm_targets, batch.loss_mask)
    upstream = add_grads(dict(blocks_c), blocks_m)
    grads = backward(params, config, cache, upstream)
    add_grads(grads, head_c)
    add_grads(grads, head_m)
    return grads


def numeric_grad(loss_fn, array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    out = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        old = array[idx]
        array[idx] = old + h
        up = loss_fn()
        array[idx] = old - h
        down = loss_fn()
        array[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor covers gradients that are exactly zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(params, config: EncoderConfig, batch: Batch, fusion: FusionSpec, alpha: float = 0.2,
                    h: float = 1e-4) -> dict[str, float]:
    """Per-parameter max relative error between backprop and finite differences."""
    grads = analytic_grads(params, config, batch, fusion, alpha)
    errors = {}
    for name, arr in params.items():
        num = numeric_grad(lambda: combined_loss(params, config, batch, fusion, alpha), arr, h)
        errors[name] = relative_error(grads[name], num)
    return errors
