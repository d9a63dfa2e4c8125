"""Eight-track autoregressive decoder with multi-token-prediction stages.

Input position i carries the context vector for slot i plus the summed
embeddings of the previous frame's tokens, one embedding table per
codebook. The backbone predicts the next frame through one linear head
per codebook (stage 0); each MTP stage is a further causal decoder layer
whose heads predict one frame deeper into the future, so a single
backbone step can emit ``n_mtp + 1`` frames.

Decoding is greedy by default. A session keeps KV caches for the
backbone and every MTP layer; frames emitted by one call are fed back as
a batched append on the next call, which keeps the cached stream exactly
equal to an offline full-sequence forward.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    ArityError,
    ContractError,
    DegenerateBatchError,
    SessionClosedError,
    VocabError,
)
from .fusion import schedule_indices
from .nn import (
    EOS_ID,
    DecoderStack,
    DecoderLayerParams,
    EmbeddingTable,
    KVCache,
    PositionTable,
    cross_entropy,
    decoder_layer,
)
from .tensor import Tensor, matmul, no_grad, rng, softmax, take_rows


@dataclass
class TalkerConfig:
    codebooks: int = 8
    vocab: int = 1024
    d: int = 64
    n_heads: int = 4
    n_layers: int = 2
    n_mtp: int = 4
    max_len: int = 512
    share_mtp_heads: bool = False
    temperature: float = 0.0
    top_k: int = 0


class TalkerParams:
    def __init__(self, cfg: TalkerConfig, rg: np.random.Generator):
        self.cfg = cfg
        self.emb = [EmbeddingTable(cfg.vocab, cfg.d, rg) for _ in range(cfg.codebooks)]
        self.pos = PositionTable(cfg.max_len, cfg.d, rg)
        self.backbone = DecoderStack(cfg.n_layers, cfg.d, cfg.n_heads, rg)
        self.mtp = [DecoderLayerParams(cfg.d, rg) for _ in range(cfg.n_mtp)]
        n_banks = 1 if cfg.share_mtp_heads else cfg.n_mtp + 1
        self.heads = [
            [Tensor(rg.normal(0.0, 0.02, size=(cfg.d, cfg.vocab)), requires_grad=True)
             for _ in range(cfg.codebooks)]
            for _ in range(n_banks)
        ]

    def head_bank(self, stage: int) -> list[Tensor]:
        return self.heads[0] if self.cfg.share_mtp_heads else self.heads[stage]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for j, table in enumerate(self.emb):
            out[f"{prefix}emb.{j}.weight"] = table.weight
        out[f"{prefix}pos.weight"] = self.pos.weight
        out.update(self.backbone.named_parameters(f"{prefix}backbone."))
        for n, layer in enumerate(self.mtp):
            out.update(layer.named_parameters(f"{prefix}mtp.{n}."))
        for s, bank in enumerate(self.heads):
            for j, head in enumerate(bank):
                out[f"{prefix}heads.{s}.{j}"] = head
        return out


class TalkerCaches:
    """KV caches for the backbone stack and each MTP layer."""

    def __init__(self, params: TalkerParams):
        cfg = params.cfg
        self.backbone = params.backbone.new_cache()
        self.mtp = [KVCache(1, cfg.d) for _ in range(cfg.n_mtp)]

    @property
    def length(self) -> int:
        return self.backbone.length


@dataclass
class TalkerOutput:
    """Per-stage, per-codebook logits ([t, vocab] each) plus updated caches.

    Stage n logits at row i score the frame i + n + 1 steps after the
    history that produced row i.
    """

    logits: list[list[Tensor]]
    caches: TalkerCaches | None = None


def bos_frame(codebooks: int) -> np.ndarray:
    return np.zeros(codebooks, dtype=np.int64)


def _validate_frames(frames, cfg: TalkerConfig) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.int64)
    if frames.ndim == 1:
        frames = frames[None, :]
    if frames.ndim != 2 or frames.shape[1] != cfg.codebooks:
        raise ArityError(
            f"frames of shape {frames.shape} do not carry {cfg.codebooks} codebook tracks"
        )
    if frames.size and (frames.min() < 0 or frames.max() >= cfg.vocab):
        raise VocabError(f"frame token outside [0, {cfg.vocab})")
    return frames


def talker_forward(
    params: TalkerParams,
    h_up,
    frames,
    caches: TalkerCaches | None = None,
    max_stage: int | None = None,
) -> TalkerOutput:
    """Teacher-forced forward pass over ``t`` positions.

    ``h_up`` supplies one context vector per position; ``frames`` the
    token history (first row is the all-BOS frame by convention). With
    caches only the new positions are passed and appended.
    """
    cfg = params.cfg
    frames = _validate_frames(frames, cfg)
    h_up = h_up if isinstance(h_up, Tensor) else Tensor(h_up)
    t = frames.shape[0]
    if h_up.shape != (t, cfg.d):
        raise AlignmentError(
            f"context of shape {h_up.shape} does not align with {t} frame positions (width {cfg.d})"
        )
    if t < 1:
        raise ContractError("talker_forward: need at least one position")

    offset = caches.length if caches is not None else 0
    x = h_up + params.pos.rows(offset, t)
    for j in range(cfg.codebooks):
        x = x + params.emb[j](frames[:, j])

    n_stages = cfg.n_mtp + 1 if max_stage is None else max_stage + 1
    h = params.backbone(x, caches.backbone if caches is not None else None)
    logits = [[matmul(h, w) for w in params.head_bank(0)]]
    for n in range(1, n_stages):
        mtp_cache = caches.mtp[n - 1] if caches is not None else None
        h = decoder_layer(params.mtp[n - 1], h, cfg.n_heads, mtp_cache, 0)
        logits.append([matmul(h, w) for w in params.head_bank(n)])
    return TalkerOutput(logits, caches)


@dataclass
class TalkerLoss:
    total: Tensor                    # sum over stages, positions, codebooks
    mean: Tensor                     # grand mean; optimizers step on this
    per_stage_codebook: np.ndarray   # [stages, codebooks] mean loss
    positions_per_stage: list[int]


def talker_loss(output: TalkerOutput, target_frames) -> TalkerLoss:
    """Teacher-forced loss: stage n, row i is scored against target i + n.

    Positions whose target index falls past the end of ``target_frames``
    are masked out. With zero MTP stages this is exactly the summed
    per-codebook cross-entropy of next-frame prediction.
    """
    targets = np.asarray(target_frames, dtype=np.int64)
    stages = len(output.logits)
    n_codebooks = len(output.logits[0])
    t = output.logits[0][0].shape[0]
    if targets.ndim != 2 or targets.shape[1] != n_codebooks:
        raise ArityError(f"targets of shape {targets.shape} do not carry {n_codebooks} tracks")
    m = targets.shape[0]
    if m > t:
        raise AlignmentError(f"{m} targets extend past {t} logit positions")

    total = None
    count = 0
    per = np.zeros((stages, n_codebooks))
    positions = []
    for n in range(stages):
        valid = min(t, m - n)
        positions.append(max(valid, 0))
        if valid <= 0:
            continue
        rows = np.arange(valid)
        for j in range(n_codebooks):
            logits_nj = take_rows(output.logits[n][j], rows)
            ce = cross_entropy(logits_nj, targets[n : n + valid, j])
            per[n, j] = ce.item()
            term = ce * float(valid)
            total = term if total is None else total + term
            count += valid
    if total is None:
        raise DegenerateBatchError("talker_loss: no position has a target")
    return TalkerLoss(total, total * (1.0 / count), per, positions)


@dataclass
class CallRecord:
    wall_ms: float
    positions: int
    frames: int


@dataclass
class StepTrace:
    calls: list[CallRecord] = field(default_factory=list)

    @property
    def backbone_calls(self) -> int:
        return len(self.calls)

    @property
    def frames_emitted(self) -> int:
        return sum(c.frames for c in self.calls)


class DecodeSession:
    """State for one streaming decode: caches, pending inputs, trace."""

    def __init__(self, params: TalkerParams, ignore_eos: bool = False, seed: int = 0):
        self.params = params
        self.caches = TalkerCaches(params)
        self.pending = [bos_frame(params.cfg.codebooks)]
        self.t_processed = 0
        self.closed = False
        self.ignore_eos = ignore_eos
        self.trace = StepTrace()
        self._rng = rng(seed)

    def _select(self, logits_row: np.ndarray) -> int:
        cfg = self.params.cfg
        if cfg.temperature <= 0.0:
            return int(np.argmax(logits_row))
        scaled = logits_row / cfg.temperature
        if cfg.top_k > 0:
            cutoff = np.sort(scaled)[-cfg.top_k]
            scaled = np.where(scaled >= cutoff, scaled, -np.inf)
        probs = softmax(Tensor(scaled)).data
        return int(self._rng.choice(len(probs), p=probs))


def decode_step(
    params: TalkerParams,
    session: DecodeSession,
    h_up_next,
    mode: str = "mtp",
) -> np.ndarray:
    """Process the session's pending positions; emit 1 (backbone_only)
    or ``n_mtp + 1`` (mtp) new frames from the newest position."""
    if mode not in ("backbone_only", "mtp"):
        raise ContractError(f"unknown decode mode {mode!r}")
    if session.closed:
        raise SessionClosedError("decode_step: session already emitted EOS")
    cfg = params.cfg
    k = len(session.pending)
    h_up_next = np.asarray(h_up_next, dtype=np.float64)
    if h_up_next.shape != (k, cfg.d):
        raise AlignmentError(
            f"context of shape {h_up_next.shape} does not cover {k} pending positions"
        )

    start = time.perf_counter()
    max_stage = 0 if mode == "backbone_only" else None
    with no_grad():
        out = talker_forward(
            params, h_up_next, np.stack(session.pending), session.caches, max_stage=max_stage
        )
        emitted = []
        for bank in out.logits:
            frame = np.array([session._select(bank[j].data[-1]) for j in range(cfg.codebooks)])
            emitted.append(frame)
    elapsed_ms = (time.perf_counter() - start) * 1000.0

    session.t_processed += k
    session.pending = list(emitted)
    session.trace.calls.append(CallRecord(elapsed_ms, k, len(emitted)))
    if not session.ignore_eos and any(f[0] == EOS_ID for f in emitted):
        session.closed = True
    return np.stack(emitted)


def generate(
    params: TalkerParams,
    fused,
    max_frames: int,
    mode: str = "mtp",
    factor: int = 3,
    ignore_eos: bool = False,
    seed: int = 0,
) -> tuple[np.ndarray, StepTrace]:
    """Decode up to ``max_frames`` frames against a fixed fused context.

    Context vectors come from the upsample schedule; generation stops at
    the first frame whose first-codebook token is EOS (dropped from the
    output) unless ``ignore_eos`` is set.
    """
    if max_frames < 1:
        raise ContractError(f"max_frames must be >= 1, got {max_frames}")
    fused = np.asarray(fused.data if isinstance(fused, Tensor) else fused, dtype=np.float64)
    cfg = params.cfg
    session = DecodeSession(params, ignore_eos=ignore_eos, seed=seed)
    out: list[np.ndarray] = []
    while len(out) < max_frames and not session.closed:
        k = len(session.pending)
        idx = schedule_indices(fused.shape[0], session.t_processed + k, factor)
        idx = idx[session.t_processed :]
        padded = np.concatenate([fused, np.zeros((1, cfg.d))], axis=0)
        frames = decode_step(params, session, padded[idx], mode)
        for frame in frames:
            if not ignore_eos and frame[0] == EOS_ID:
                session.closed = True
                break
            out.append(frame)
            if len(out) >= max_frames:
                break
    frames_arr = np.stack(out) if out else np.zeros((0, cfg.codebooks), dtype=np.int64)
    return frames_arr, session.trace


def write_frames(path, frames) -> None:
    """Token-stream file: one line per frame, space-separated token ids."""
    frames = np.asarray(frames, dtype=np.int64)
    lines = [" ".join(str(int(v)) for v in row) for row in frames]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def read_frames(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([int(v) for v in line.split()])
    if not rows:
        return np.zeros((0, 0), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64)
