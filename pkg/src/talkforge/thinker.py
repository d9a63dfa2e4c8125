"""Toy decoder-only text LM standing in for the upstream model.

Emits (token id, hidden state) pairs strictly in order; the hidden state
paired with a token is the backbone output at the position that
predicted it, which is also what the fusion layer sees during staged
training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractError
from .nn import BOS_ID, EOS_ID, DecoderStack, EmbeddingTable, KVCache, PositionTable
from .tensor import Tensor, matmul, no_grad


@dataclass
class ThinkerConfig:
    vocab: int = 64
    d: int = 48
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 512


class ThinkerStub:
    def __init__(self, cfg: ThinkerConfig, rg: np.random.Generator):
        self.cfg = cfg
        self.emb = EmbeddingTable(cfg.vocab, cfg.d, rg)
        self.pos = PositionTable(cfg.max_len, cfg.d, rg)
        self.stack = DecoderStack(cfg.n_layers, cfg.d, cfg.n_heads, rg)
        self.head = Tensor(rg.normal(0.0, 0.02, size=(cfg.d, cfg.vocab)), requires_grad=True)

    def forward(self, ids, cache: KVCache | None = None) -> tuple[Tensor, Tensor]:
        """Return (logits, hidden) over the given positions."""
        ids = np.asarray(ids, dtype=np.int64)
        offset = cache.length if cache is not None else 0
        x = self.emb(ids) + self.pos.rows(offset, len(ids))
        h = self.stack(x, cache)
        return matmul(h, self.head), h

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}emb.weight": self.emb.weight, f"{prefix}pos.weight": self.pos.weight}
        out.update(self.stack.named_parameters(f"{prefix}stack."))
        out[f"{prefix}head"] = self.head
        return out


def thinker_stream(
    stub: ThinkerStub, prompt_ids, max_tokens: int
) -> Iterator[tuple[int, np.ndarray, float]]:
    """Greedy decode yielding (token, hidden, busy_ms) incrementally.

    Stops at EOS (not yielded) or after ``max_tokens`` tokens.
    """
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if prompt_ids.size == 0:
        raise ContractError("thinker: prompt must be non-empty")
    if max_tokens < 1:
        raise ContractError(f"thinker: max_tokens must be >= 1, got {max_tokens}")
    with no_grad():
        cache = stub.stack.new_cache()
        start = time.perf_counter()
        logits, hidden = stub.forward(prompt_ids, cache)
        emitted = 0
        while True:
            token = int(np.argmax(logits.data[-1]))
            state = hidden.data[-1].copy()
            busy_ms = (time.perf_counter() - start) * 1000.0
            if token == EOS_ID:
                return
            yield token, state, busy_ms
            emitted += 1
            if emitted >= max_tokens:
                return
            start = time.perf_counter()
            logits, hidden = stub.forward([token], cache)


def thinker_generate(stub: ThinkerStub, prompt_ids, max_tokens: int) -> list[tuple[int, np.ndarray]]:
    """Greedy autoregressive decode; returns aligned (token, hidden) pairs."""
    return [(tok, hid) for tok, hid, _ in thinker_stream(stub, prompt_ids, max_tokens)]


def teacher_forced_hidden(stub: ThinkerStub, text_ids) -> Tensor:
    """Hidden states aligned with each text token under teacher forcing.

    Row i is the state that predicts token i (inputs are BOS + text[:-1]),
    matching the pairing produced by live generation.
    """
    text_ids = np.asarray(text_ids, dtype=np.int64)
    inputs = np.concatenate([[BOS_ID], text_ids[:-1]])
    _, hidden = stub.forward(inputs)
    return hidden
