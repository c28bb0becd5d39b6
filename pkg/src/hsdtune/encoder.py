"""Mini RoBERTa-style encoder in NumPy with hand-written backpropagation.

Blocks are post-LayerNorm (attention -> add & norm -> FFN -> add & norm) and
the FFN uses the tanh approximation of GELU. ``forward`` returns the output of
every block so callers can fuse several of them; ``backward`` accepts an
upstream gradient for any subset of blocks.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
INIT_STD = 0.02
NEG_INF = -1e9


class SequenceTooLong(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    max_positions: int = 64
    vocab_size: int = 2000
    dropout_rate: float = 0.1
    num_classes: int = 3
    tie_mlm: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.num_layers < 1:
            out.append("num_layers must be >= 1")
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            out.append("hidden_size must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            out.append("dropout_rate must lie in [0, 1)")
        for name in ("hidden_size", "ffn_size", "max_positions", "vocab_size", "num_classes"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        return out

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels: Optional[np.ndarray] = None
    mlm_targets: Optional[np.ndarray] = None
    loss_mask: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.token_ids.shape


def pad_batch(sequences, pad_id: int, labels=None, length: Optional[int] = None) -> Batch:
    """Right-pad id sequences into a ``Batch``."""
    T = length or max(len(s) for s in sequences)
    ids = np.full((len(sequences), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), T), dtype=bool)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return Batch(ids, mask, lab)


# ------------------------------------------------------------------ parameters

_BLOCK_RE = re.compile(r"^blocks\.(\d+)\.")


def param_tags(name: str) -> tuple[str, str]:
    """(group, depth) for a parameter name; bias and LayerNorm arrays are ``no_decay``."""
    group = "no_decay" if (name.endswith(".b") or name.endswith("bias") or ".ln" in name) else "decayable"
    if name.startswith("emb."):
        depth = "embedding"
    elif (m := _BLOCK_RE.match(name)):
        depth = f"block_{m.group(1)}"
    else:
        depth = "head"
    return group, depth


def param_shapes(config: EncoderConfig, fusion_dim: Optional[int] = None) -> dict[str, tuple]:
    H, F, V = config.hidden_size, config.ffn_size, config.vocab_size
    shapes = {
        "emb.tok": (V, H),
        "emb.pos": (config.max_positions, H),
        "emb.ln.gamma": (H,),
        "emb.ln.beta": (H,),
    }
    for l in range(1, config.num_layers + 1):
        p = f"blocks.{l}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.w"] = (H, H)
            shapes[p + f"attn.{proj}.b"] = (H,)
        shapes[p + "ln1.gamma"] = (H,)
        shapes[p + "ln1.beta"] = (H,)
        shapes[p + "ffn.in.w"] = (H, F)
        shapes[p + "ffn.in.b"] = (F,)
        shapes[p + "ffn.out.w"] = (F, H)
        shapes[p + "ffn.out.b"] = (H,)
        shapes[p + "ln2.gamma"] = (H,)
        shapes[p + "ln2.beta"] = (H,)
    if not config.tie_mlm:
        shapes["mlm.w"] = (H, V)
    shapes["mlm.bias"] = (V,)
    shapes["cls.w"] = (fusion_dim or H, config.num_classes)
    shapes["cls.b"] = (config.num_classes,)
    return shapes


def _init_array(name: str, shape, rng, dtype):
    if name.endswith("gamma"):
        return np.ones(shape, dtype=dtype)
    if name.endswith("beta") or name.endswith(".b") or name.endswith("bias"):
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * INIT_STD).astype(dtype)


def init_parameters(config: EncoderConfig, seed: int, fusion_dim: Optional[int] = None,
                    dtype=np.float32) -> dict[str, np.ndarray]:
    """Weights ~ N(0, 0.02^2), biases 0, LayerNorm gamma 1 / beta 0. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return {name: _init_array(name, shape, rng, dtype)
            for name, shape in param_shapes(config, fusion_dim).items()}


def reset_head(params: dict, config: EncoderConfig, fusion_dim: int, seed: int) -> dict:
    """Fresh classification head for a new feature width; other arrays are shared."""
    rng = np.random.default_rng([seed, 7919])
    dtype = params["emb.tok"].dtype
    out = dict(params)
    out["cls.w"] = _init_array("cls.w", (fusion_dim, config.num_classes), rng, dtype)
    out["cls.b"] = np.zeros(config.num_classes, dtype=dtype)
    return out


def encoder_names(params) -> list[str]:
    return [n for n in params if param_tags(n)[1] != "head"]


# ------------------------------------------------------------------ primitives


def layer_norm(x, gamma, beta, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def layer_norm_backward(dy, gamma, saved):
    xhat, rstd = saved
    dxhat = dy * gamma
    H = dy.shape[-1]
    dgamma = (dy * xhat).reshape(-1, H).sum(0)
    dbeta = dy.reshape(-1, H).sum(0)
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgamma, dbeta


def gelu(x):
    t = np.tanh(GELU_C * (x + GELU_K * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy, x, t):
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x))


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def dropout_mask(shape, rate, rng, dtype):
    if rate <= 0.0 or rng is None:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


def _split_heads(x, A):
    B, T, H = x.shape
    return x.reshape(B, T, A, H // A).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, A, T, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, A * d)


def _matmul_grad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# ------------------------------------------------------------------ forward / backward


@dataclass
class ForwardCache:
    token_ids: np.ndarray
    key_mask: np.ndarray
    emb: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)


def forward(params: Mapping[str, np.ndarray], config: EncoderConfig, batch: Batch,
            train_mode: bool = False, rng: Optional[np.random.Generator] = None,
            return_cache: bool = False):
    """Run the encoder and return the list of per-block hidden states (each B x T x H).

    Dropout is applied only when ``train_mode`` is set and an ``rng`` is given.
    With ``return_cache`` the intermediates needed by ``backward`` are returned too.
    """
    ids, mask = batch.token_ids, batch.attention_mask
    B, T = ids.shape
    if T > config.max_positions:
        raise SequenceTooLong(f"sequence length {T} exceeds max_positions {config.max_positions}")
    tok = params["emb.tok"]
    dtype = tok.dtype.type
    rate = config.dropout_rate if train_mode else 0.0
    A, eps = config.num_heads, config.layer_norm_eps
    scale = dtype(1.0 / math.sqrt(config.head_dim))

    key_bias = np.where(mask, dtype(0.0), dtype(NEG_INF))[:, None, None, :]
    cache = ForwardCache(ids, mask)

    x = tok[ids] + params["emb.pos"][:T]
    x, ln = layer_norm(x, params["emb.ln.gamma"], params["emb.ln.beta"], eps)
    dm = dropout_mask(x.shape, rate, rng, dtype)
    if dm is not None:
        x = x * dm
    cache.emb = {"ln": ln, "drop": dm}

    outputs = []
    for l in range(1, config.num_layers + 1):
        p = f"blocks.{l}."
        c = {"x": x}
        q = _split_heads(x @ params[p + "attn.q.w"] + params[p + "attn.q.b"], A)
        k = _split_heads(x @ params[p + "attn.k.w"] + params[p + "attn.k.b"], A)
        v = _split_heads(x @ params[p + "attn.v.w"] + params[p + "attn.v.b"], A)
        probs = softmax(q @ k.transpose(0, 1, 3, 2) * scale + key_bias)
        c.update(q=q, k=k, v=v, probs=probs)
        pm = dropout_mask(probs.shape, rate, rng, dtype)
        pd = probs * pm if pm is not None else probs
        c["probs_drop"], c["probs_mask"] = pd, pm
        ctx = _merge_heads(pd @ v)
        c["ctx"] = ctx
        a = ctx @ params[p + "attn.o.w"] + params[p + "attn.o.b"]
        am = dropout_mask(a.shape, rate, rng, dtype)
        if am is not None:
            a = a * am
        c["attn_mask"] = am
        h1, c["ln1"] = layer_norm(x + a, params[p + "ln1.gamma"], params[p + "ln1.beta"], eps)
        c["h1"] = h1
        f1 = h1 @ params[p + "ffn.in.w"] + params[p + "ffn.in.b"]
        g, t = gelu(f1)
        c.update(f1=f1, gelu_t=t, g=g)
        f2 = g @ params[p + "ffn.out.w"] + params[p + "ffn.out.b"]
        fm = dropout_mask(f2.shape, rate, rng, dtype)
        if fm is not None:
            f2 = f2 * fm
        c["ffn_mask"] = fm
        x, c["ln2"] = layer_norm(h1 + f2, params[p + "ln2.gamma"], params[p + "ln2.beta"], eps)
        cache.blocks.append(c)
        outputs.append(x)
    if return_cache:
        return outputs, cache
    return outputs


def backward(params: Mapping[str, np.ndarray], config: EncoderConfig, cache: ForwardCache,
             block_grads: Mapping[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every encoder parameter.

    ``block_grads`` maps a 1-based block index to dLoss/d(block output).
    Head parameters are not touched here; their gradients come from the
    objective functions.
    """
    L = config.num_layers
    B, T = cache.token_ids.shape
    H = config.hidden_size
    for l, g in block_grads.items():
        if not 1 <= l <= L:
            raise ShapeMismatch(f"block index {l} outside 1..{L}")
        if g.shape != (B, T, H):
            raise ShapeMismatch(f"upstream gradient for block {l} has shape {g.shape}, expected {(B, T, H)}")
    dtype = params["emb.tok"].dtype
    scale = dtype.type(1.0 / math.sqrt(config.head_dim))
    grads: dict[str, np.ndarray] = {}
    dx = np.zeros((B, T, H), dtype=dtype)

    for l in range(L, 0, -1):
        p = f"blocks.{l}."
        c = cache.blocks[l - 1]
        if l in block_grads:
            dx = dx + block_grads[l]
        dr2, grads[p + "ln2.gamma"], grads[p + "ln2.beta"] = layer_norm_backward(dx, params[p + "ln2.gamma"], c["ln2"])
        df2 = dr2 * c["ffn_mask"] if c["ffn_mask"] is not None else dr2
        grads[p + "ffn.out.w"] = _matmul_grad(c["g"], df2)
        grads[p + "ffn.out.b"] = df2.reshape(-1, H).sum(0)
        df1 = gelu_backward(df2 @ params[p + "ffn.out.w"].T, c["f1"], c["gelu_t"])
        grads[p + "ffn.in.w"] = _matmul_grad(c["h1"], df1)
        grads[p + "ffn.in.b"] = df1.reshape(-1, df1.shape[-1]).sum(0)
        dh1 = dr2 + df1 @ params[p + "ffn.in.w"].T

        dr1, grads[p + "ln1.gamma"], grads[p + "ln1.beta"] = layer_norm_backward(dh1, params[p + "ln1.gamma"], c["ln1"])
        da = dr1 * c["attn_mask"] if c["attn_mask"] is not None else dr1
        grads[p + "attn.o.w"] = _matmul_grad(c["ctx"], da)
        grads[p + "attn.o.b"] = da.reshape(-1, H).sum(0)
        dctx = _split_heads(da @ params[p + "attn.o.w"].T, config.num_heads)
        dpd = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["probs_drop"].transpose(0, 1, 3, 2) @ dctx
        dprobs = dpd * c["probs_mask"] if c["probs_mask"] is not None else dpd
        probs = c["probs"]
        ds = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * scale
        dq = _merge_heads(ds @ c["k"])
        dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ c["q"])
        dv = _merge_heads(dv)
        x = c["x"]
        dx_new = dr1
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            grads[p + f"attn.{name}.w"] = _matmul_grad(x, d)
            grads[p + f"attn.{name}.b"] = d.reshape(-1, H).sum(0)
            dx_new = dx_new + d @ params[p + f"attn.{name}.w"].T
        dx = dx_new

    if cache.emb["drop"] is not None:
        dx = dx * cache.emb["drop"]
    de, grads["emb.ln.gamma"], grads["emb.ln.beta"] = layer_norm_backward(dx, params["emb.ln.gamma"], cache.emb["ln"])
    dtok = np.zeros_like(params["emb.tok"])
    np.add.at(dtok, cache.token_ids.reshape(-1), de.reshape(-1, H))
    grads["emb.tok"] = dtok
    dpos = np.zeros_like(params["emb.pos"])
    dpos[:T] = de.sum(0)
    grads["emb.pos"] = dpos
    return grads


def add_grads(total: dict, more: Mapping[str, np.ndarray]) -> dict:
    for k, g in more.items():
        total[k] = total[k] + g if k in total else g
    return total
