"""Text/hidden-state fusion and the upsample/truncate-or-pad schedule.

``fuse`` merges text-token embeddings with upstream hidden states through
two linear layers into one vector per text position. ``upsample_schedule``
stretches those vectors to the audio frame rate: each fused vector
occupies one slot, followed by ``factor - 1`` zero vectors, and the
result is truncated or zero-padded to the requested length. Slots are
positional, so growing the target length never rewrites earlier entries
(prefix stability), which is what keeps streaming decode coherent.
"""

from __future__ import annotations

import numpy as np

from .errors import AlignmentError, ContractError
from .nn import ACTIVATIONS, EmbeddingTable
from .tensor import Tensor, concat, matmul, take_rows


class FusionParams:
    """Two linear layers over [text embedding || hidden state]."""

    def __init__(
        self,
        v_txt: int,
        d_emb: int,
        d_hidden_in: int,
        d_mid: int,
        d_out: int,
        rg: np.random.Generator,
        activation: str = "gelu",
        scale: float = 0.02,
    ):
        if activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.activation = activation
        self.d_hidden_in = d_hidden_in
        self.text_emb = EmbeddingTable(v_txt, d_emb, rg)
        self.w1 = Tensor(rg.normal(0.0, scale, size=(d_emb + d_hidden_in, d_mid)), requires_grad=True)
        self.b1 = Tensor(np.zeros(d_mid), requires_grad=True)
        self.w2 = Tensor(rg.normal(0.0, scale, size=(d_mid, d_out)), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_out), requires_grad=True)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}text_emb.weight": self.text_emb.weight}
        for n in ("w1", "b1", "w2", "b2"):
            out[f"{prefix}{n}"] = getattr(self, n)
        return out


def fuse(text_ids, thinker_hidden, params: FusionParams) -> Tensor:
    """One fused vector per text position: Linear(act(Linear(emb || hidden)))."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    hidden = thinker_hidden if isinstance(thinker_hidden, Tensor) else Tensor(thinker_hidden)
    if hidden.ndim != 2 or hidden.shape[0] != text_ids.shape[0]:
        raise AlignmentError(
            f"fuse: {text_ids.shape[0]} text ids vs hidden states of shape {hidden.shape}"
        )
    if hidden.shape[1] != params.d_hidden_in:
        raise AlignmentError(
            f"fuse: hidden width {hidden.shape[1]} != configured {params.d_hidden_in}"
        )
    x = concat(params.text_emb(text_ids), hidden, axis=-1)
    h = ACTIVATIONS[params.activation](matmul(x, params.w1) + params.b1)
    return matmul(h, params.w2) + params.b2


def slot_source(position: int, factor: int) -> int | None:
    """Fused-vector index occupying 0-based context slot ``position``, else None."""
    if position % factor == 0:
        return position // factor
    return None


def schedule_indices(n_fused: int, t: int, factor: int) -> np.ndarray:
    """Row map for the schedule: source index per slot, ``n_fused`` = zero row."""
    if t < 0 or factor < 1 or n_fused < 0:
        raise ContractError(f"bad schedule arguments: n={n_fused}, t={t}, factor={factor}")
    idx = np.full(t, n_fused, dtype=np.int64)
    p = np.arange(t)
    slots = (p % factor == 0) & (p // factor < n_fused)
    idx[slots] = p[slots] // factor
    return idx


def upsample_schedule(fused, t: int, factor: int = 3) -> Tensor:
    """Stretch fused vectors to ``t`` slots, truncating or zero-padding.

    Slot p (0-based) holds fused[p // factor] when p is a multiple of
    ``factor`` and that source exists; every other slot is the zero
    vector. Pure and prefix-stable in ``t``.
    """
    fused = fused if isinstance(fused, Tensor) else Tensor(fused)
    if fused.ndim != 2:
        raise ContractError(f"fused sequence must be 2-d, got shape {fused.shape}")
    n, d = fused.shape
    idx = schedule_indices(n, t, factor)
    padded = concat(fused, Tensor(np.zeros((1, d))), axis=0)
    return take_rows(padded, idx)
