"""Transformer decoder blocks shared by the talker and the thinker stub.

Pre-norm residual layout throughout: x + Attn(LN(x)), then + MLP(LN(.)).
Attention and MLP projections carry no bias; the layer norms carry a
gain/bias pair each. KV caches are plain numpy buffers and exist for
inference only -- training always runs the full sequence.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import (
    AlignmentError,
    CacheError,
    ContractError,
    DegenerateBatchError,
    ShapeError,
    VocabError,
)
from .tensor import Tensor, _node, gather_cols, log_softmax, matmul, softmax, take_rows

BOS_ID = 0
EOS_ID = 1

_SQRT2 = math.sqrt(2.0)


def gelu(x: Tensor) -> Tensor:
    return x * 0.5 * ((x * (1.0 / _SQRT2)).erf() + 1.0)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "gelu": gelu,
    "relu": lambda x: x.relu(),
    "tanh": lambda x: x.tanh(),
}


class EmbeddingTable:
    """vocab_size x dim lookup table. Ids 0 and 1 are reserved (BOS, EOS)."""

    def __init__(self, vocab_size: int, dim: int, rg: np.random.Generator, scale: float = 0.02):
        self.vocab_size = vocab_size
        self.dim = dim
        self.weight = Tensor(rg.normal(0.0, scale, size=(vocab_size, dim)), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            offender = ids[(ids < 0) | (ids >= self.vocab_size)][0]
            raise VocabError(f"token id {offender} out of range [0, {self.vocab_size})")
        return take_rows(self.weight, ids)


def embed(table: EmbeddingTable, ids) -> Tensor:
    return table(ids)


class PositionTable:
    """Learned absolute position embeddings up to a fixed maximum length."""

    def __init__(self, max_len: int, dim: int, rg: np.random.Generator, scale: float = 0.02):
        self.max_len = max_len
        self.weight = Tensor(rg.normal(0.0, scale, size=(max_len, dim)), requires_grad=True)

    def rows(self, offset: int, n: int) -> Tensor:
        if offset + n > self.max_len:
            raise ContractError(
                f"position {offset + n - 1} exceeds configured max length {self.max_len}"
            )
        return take_rows(self.weight, np.arange(offset, offset + n))


class KVCache:
    """Per-layer key/value history for one decoding session."""

    def __init__(self, n_layers: int, width: int):
        self.width = width
        self.keys = [np.zeros((0, width)) for _ in range(n_layers)]
        self.values = [np.zeros((0, width)) for _ in range(n_layers)]

    def update(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if k.shape != v.shape or k.ndim != 2 or k.shape[1] != self.width:
            raise CacheError(
                f"cache width {self.width} does not accept key/value shapes {k.shape}/{v.shape}"
            )
        self.keys[layer] = np.concatenate([self.keys[layer], k], axis=0)
        self.values[layer] = np.concatenate([self.values[layer], v], axis=0)
        return self.keys[layer], self.values[layer]

    @property
    def length(self) -> int:
        return self.keys[0].shape[0]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-position zero-mean unit-variance normalization, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(out):
        g = out.grad
        dxhat = g * gain.data
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (dxhat - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        gain._accum((g * xhat).sum(axis=lead))
        bias._accum(g.sum(axis=lead))

    return _node(data, (x, gain, bias), bwd)


class DecoderLayerParams:
    """Weights for one pre-norm decoder layer (bias-free projections)."""

    def __init__(self, d: int, rg: np.random.Generator, mlp_ratio: int = 4, scale: float = 0.02):
        def w(*shape):
            return Tensor(rg.normal(0.0, scale, size=shape), requires_grad=True)

        self.d = d
        self.wq, self.wk, self.wv, self.wo = w(d, d), w(d, d), w(d, d), w(d, d)
        self.w1 = w(d, mlp_ratio * d)
        self.w2 = w(mlp_ratio * d, d)
        self.ln1_gain = Tensor(np.ones(d), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(d), requires_grad=True)
        self.ln2_gain = Tensor(np.ones(d), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(d), requires_grad=True)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        names = ["wq", "wk", "wv", "wo", "w1", "w2",
                 "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"]
        return {f"{prefix}{n}": getattr(self, n) for n in names}


def _causal_mask(t_new: int, t_total: int) -> np.ndarray:
    # query row i sits at absolute position (t_total - t_new + i)
    offset = t_total - t_new
    i = np.arange(t_new)[:, None] + offset
    j = np.arange(t_total)[None, :]
    return np.where(j <= i, 0.0, -1e30)


def causal_self_attention(
    params: DecoderLayerParams,
    x: Tensor,
    n_heads: int,
    cache: KVCache | None = None,
    layer: int = 0,
) -> Tensor:
    """Multi-head causal attention over ``x`` ([t, d]).

    With a cache, ``x`` holds only the new positions; keys/values are
    appended and attention runs against the full history. The cached path
    is inference-only: history gradients are detached.
    """
    t, d = x.shape
    if d % n_heads != 0:
        raise ContractError(f"width {d} is not divisible by {n_heads} heads")
    dh = d // n_heads

    q = matmul(x, params.wq)
    k = matmul(x, params.wk)
    v = matmul(x, params.wv)
    if cache is not None:
        k_all, v_all = cache.update(layer, k.data, v.data)
        k, v = Tensor(k_all), Tensor(v_all)
    t_total = k.shape[0]

    qh = q.reshape((t, n_heads, dh)).transpose((1, 0, 2))
    kh = k.reshape((t_total, n_heads, dh)).transpose((1, 2, 0))
    vh = v.reshape((t_total, n_heads, dh)).transpose((1, 0, 2))

    scores = matmul(qh, kh) * (1.0 / math.sqrt(dh))
    attn = softmax(scores + Tensor(_causal_mask(t, t_total)), axis=-1)
    ctx = matmul(attn, vh).transpose((1, 0, 2)).reshape((t, d))
    return matmul(ctx, params.wo)


def decoder_layer(
    params: DecoderLayerParams,
    x: Tensor,
    n_heads: int,
    cache: KVCache | None = None,
    layer: int = 0,
) -> Tensor:
    h = x + causal_self_attention(
        params, layer_norm(x, params.ln1_gain, params.ln1_bias), n_heads, cache, layer
    )
    z = layer_norm(h, params.ln2_gain, params.ln2_bias)
    return h + matmul(gelu(matmul(z, params.w1)), params.w2)


class DecoderStack:
    """A stack of decoder layers sharing one head count."""

    def __init__(self, n_layers: int, d: int, n_heads: int, rg: np.random.Generator):
        self.d = d
        self.n_heads = n_heads
        self.layers = [DecoderLayerParams(d, rg) for _ in range(n_layers)]

    def __call__(self, x: Tensor, cache: KVCache | None = None) -> Tensor:
        for i, p in enumerate(self.layers):
            x = decoder_layer(p, x, self.n_heads, cache, i)
        return x

    def new_cache(self) -> KVCache:
        return KVCache(len(self.layers), self.d)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, p in enumerate(self.layers):
            out.update(p.named_parameters(f"{prefix}{i}."))
        return out


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood over the non-ignored positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise AlignmentError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    vocab = logits.shape[1]
    keep = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    if not keep.any():
        raise DegenerateBatchError("cross_entropy: every position is ignored")
    checked = targets[keep]
    if checked.min() < 0 or checked.max() >= vocab:
        offender = checked[(checked < 0) | (checked >= vocab)][0]
        raise VocabError(f"target id {offender} out of range [0, {vocab})")

    safe = np.where(keep, targets, 0)
    picked = gather_cols(log_softmax(logits, axis=-1), safe)
    weights = Tensor(keep.astype(np.float64))
    return (picked * weights).sum() * (-1.0 / keep.sum())
