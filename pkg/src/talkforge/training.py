"""Synthetic corpora and the three-stage training driver.

Stage 1 (``talker_tts``) pre-trains the talker plus fusion layer on
text-to-frames pairs, with the fusion layer fed zero hidden states.
Stage 2 (``thinker_text``) trains the toy text LM. Stage 3
(``end_to_end``) resumes from both checkpoints and fine-tunes fusion and
talker against the thinker's teacher-forced hidden states (thinker
frozen unless configured otherwise).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .codec import CodecModel, rvq_encode, train_codebooks
from .config import Config
from .errors import ContractError, StagingError
from .fusion import FusionParams, fuse, upsample_schedule
from .nn import BOS_ID, EOS_ID, cross_entropy
from .optim import Adam
from .talker import (
    TalkerConfig,
    TalkerParams,
    bos_frame,
    talker_forward,
    talker_loss,
    write_frames,
    read_frames,
)
from .tensor import Tensor, backward, no_grad, rng
from .thinker import ThinkerConfig, ThinkerStub, teacher_forced_hidden

STAGES = ("talker_tts", "thinker_text", "end_to_end")


# --- model bundle ---------------------------------------------------------


@dataclass
class Bundle:
    thinker: ThinkerStub
    talker: TalkerParams
    fusion: FusionParams
    codec: CodecModel


def build_thinker(config: Config, rg: np.random.Generator) -> ThinkerStub:
    cfg = ThinkerConfig(
        vocab=config.v_txt,
        d=config.d_th,
        n_heads=config.n_heads,
        n_layers=config.thinker_layers,
        max_len=config.max_len,
    )
    return ThinkerStub(cfg, rg)


def build_talker(config: Config, rg: np.random.Generator) -> TalkerParams:
    cfg = TalkerConfig(
        codebooks=config.codebooks,
        vocab=config.v_cb,
        d=config.d,
        n_heads=config.n_heads,
        n_layers=config.talker_layers,
        n_mtp=config.n_mtp,
        max_len=config.max_len,
        share_mtp_heads=config.share_mtp_heads,
        temperature=config.temperature,
        top_k=config.top_k,
    )
    return TalkerParams(cfg, rg)


def build_fusion(config: Config, rg: np.random.Generator) -> FusionParams:
    return FusionParams(
        v_txt=config.v_txt,
        d_emb=config.d_emb,
        d_hidden_in=config.d_th,
        d_mid=config.fusion_hidden,
        d_out=config.d,
        rg=rg,
        activation=config.activation,
    )


def fresh_bundle(config: Config, codec: CodecModel) -> Bundle:
    rg = rng(config.seed)
    return Bundle(build_thinker(config, rg), build_talker(config, rg),
                  build_fusion(config, rg), codec)


def talker_fusion_params(talker: TalkerParams, fusion: FusionParams):
    out = talker.named_parameters("talker.")
    out.update(fusion.named_parameters("fusion."))
    return out


def save_talker_ckpt(path, talker: TalkerParams, fusion: FusionParams) -> None:
    save_checkpoint(path, talker_fusion_params(talker, fusion))


def load_talker_ckpt(path, talker: TalkerParams, fusion: FusionParams) -> None:
    load_into(talker_fusion_params(talker, fusion), load_checkpoint(path))


def load_bundle(config: Config, base_dir: str | Path = ".") -> Bundle:
    base = Path(base_dir)
    codec = CodecModel.load(base / config.codec_ckpt)
    bundle = fresh_bundle(config, codec)
    load_into(bundle.thinker.named_parameters("thinker."),
              load_checkpoint(base / config.thinker_ckpt))
    load_talker_ckpt(base / config.talker_ckpt, bundle.talker, bundle.fusion)
    return bundle


# --- synthetic corpus -----------------------------------------------------


@dataclass
class Corpus:
    texts: list[np.ndarray]
    features: list[np.ndarray]
    frames: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.texts)


def _trajectory(rg: np.random.Generator, length: int, dim: int, step: float,
                smooth: int = 3) -> np.ndarray:
    walk = np.cumsum(rg.normal(0.0, step, size=(length, dim)), axis=0)
    if smooth > 1 and length:
        kernel = np.ones(smooth) / smooth
        walk = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), 0, walk)
    return walk


def feature_pool(config: Config, seed: int, n_frames: int = 4000) -> np.ndarray:
    """Feature soup for codec training, drawn from the corpus process."""
    rg = rng(seed)
    chunks = []
    total = 0
    while total < n_frames:
        traj = _trajectory(rg, 50, config.feature_dim, config.feature_step)
        chunks.append(traj)
        total += len(traj)
    return np.concatenate(chunks)[:n_frames]


def train_codec(config: Config, seed: int | None = None) -> CodecModel:
    seed = config.seed if seed is None else seed
    pool = feature_pool(config, seed + 1)
    return train_codebooks(
        pool,
        n_codebooks=config.codebooks,
        vocab=config.v_cb,
        iters=config.codec_iters,
        frame_rate=config.frame_rate,
        seed=seed,
    )


def gen_corpus(config: Config, codec: CodecModel, seed: int | None = None) -> Corpus:
    """Deterministic parallel corpus: text ids, feature walks, frame targets.

    Frame length is ``upsample_factor`` times the text length by
    construction. The EOS id is blocked from the first codebook's targets
    so it stays a pure control token.
    """
    seed = config.seed if seed is None else seed
    rg = rng(seed)
    # distinct first tokens keep utterances separable from the very first
    # frame (at that point the only conditioning is the first text slot)
    n_ids = config.v_txt - 2
    if n_ids >= config.utterances:
        firsts = rg.choice(np.arange(2, config.v_txt), size=config.utterances, replace=False)
    else:
        firsts = rg.integers(2, config.v_txt, size=config.utterances)
    texts, features, frames = [], [], []
    for u in range(config.utterances):
        n = int(rg.integers(config.text_len_lo, config.text_len_hi + 1))
        text = rg.integers(2, config.v_txt, size=n)
        text[0] = firsts[u]
        texts.append(text)
        traj = _trajectory(rg, n * config.upsample_factor, config.feature_dim,
                           config.feature_step)
        features.append(traj)
        frames.append(rvq_encode(codec, traj, forbid={0: {EOS_ID}}))
    return Corpus(texts, features, frames)


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "texts.txt", "w", encoding="utf-8") as fh:
        for text in corpus.texts:
            fh.write(" ".join(str(int(v)) for v in text) + "\n")
    save_checkpoint(out / "features.ckpt",
                    {f"utt.{i}": f for i, f in enumerate(corpus.features)})
    for i, fr in enumerate(corpus.frames):
        write_frames(out / f"frames.{i:03d}.txt", fr)


def load_corpus(in_dir) -> Corpus:
    base = Path(in_dir)
    if not (base / "texts.txt").exists():
        raise StagingError(f"no corpus at {base}")
    texts = []
    with open(base / "texts.txt", "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                texts.append(np.array([int(v) for v in line.split()], dtype=np.int64))
    feats = load_checkpoint(base / "features.ckpt")
    features = [feats[f"utt.{i}"] for i in range(len(texts))]
    frames = [read_frames(base / f"frames.{i:03d}.txt") for i in range(len(texts))]
    return Corpus(texts, features, frames)


# --- staged training ------------------------------------------------------


@dataclass
class TrainResult:
    stage: str
    losses: list[float]
    checkpoint: Path | None = None
    curve_path: Path | None = None
    extra_checkpoint: Path | None = None


def talker_example(text_ids, hidden, frames, fusion: FusionParams, factor: int):
    """Teacher-forcing tensors for one utterance.

    Inputs are BOS + frames, targets are frames + an all-EOS terminal
    frame, and the context schedule covers every input row.
    """
    codebooks = frames.shape[1]
    fused = fuse(text_ids, hidden, fusion)
    targets = np.concatenate([frames, np.full((1, codebooks), EOS_ID)], axis=0)
    inputs = np.concatenate([bos_frame(codebooks)[None], frames], axis=0)
    h_up = upsample_schedule(fused, len(inputs), factor)
    return h_up, inputs, targets


def _write_curve(path: Path, losses: list[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, f"{v:.8f}"])


def train_stage(stage: str, corpus: Corpus, config: Config, out_dir,
                codec: CodecModel | None = None) -> TrainResult:
    if stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}; expected one of {STAGES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    factor = config.upsample_factor
    losses: list[float] = []

    if stage == "talker_tts":
        rg = rng(config.seed)
        talker = build_talker(config, rg)
        fusion = build_fusion(config, rg)
        opt = Adam(talker_fusion_params(talker, fusion), lr=config.lr)
        zero_hidden = [np.zeros((len(t), config.d_th)) for t in corpus.texts]
        for step in range(config.train_steps):
            i = step % len(corpus)
            h_up, inputs, targets = talker_example(
                corpus.texts[i], zero_hidden[i], corpus.frames[i], fusion, factor)
            opt.zero_grad()
            loss = talker_loss(talker_forward(talker, h_up, inputs), targets).mean
            backward(loss)
            opt.step()
            losses.append(loss.item())
        ckpt = out / config.talker_ckpt
        save_talker_ckpt(ckpt, talker, fusion)
        curve = out / "loss_talker_tts.csv"
        _write_curve(curve, losses)
        return TrainResult(stage, losses, ckpt, curve)

    if stage == "thinker_text":
        thinker = build_thinker(config, rng(config.seed))
        opt = Adam(thinker.named_parameters(), lr=config.lr)
        for step in range(config.train_steps):
            text = corpus.texts[step % len(corpus)]
            inputs = np.concatenate([[BOS_ID], text])
            targets = np.concatenate([text, [EOS_ID]])
            opt.zero_grad()
            logits, _ = thinker.forward(inputs)
            loss = cross_entropy(logits, targets)
            backward(loss)
            opt.step()
            losses.append(loss.item())
        ckpt = out / config.thinker_ckpt
        save_checkpoint(ckpt, thinker.named_parameters("thinker."))
        curve = out / "loss_thinker_text.csv"
        _write_curve(curve, losses)
        return TrainResult(stage, losses, ckpt, curve)

    # end_to_end
    talker_path = out / config.talker_ckpt
    thinker_path = out / config.thinker_ckpt
    for path, name in ((talker_path, "talker_tts"), (thinker_path, "thinker_text")):
        if not path.exists():
            raise StagingError(f"end_to_end needs the {name} checkpoint at {path}")
    rg = rng(config.seed)
    talker = build_talker(config, rg)
    fusion = build_fusion(config, rg)
    thinker = build_thinker(config, rg)
    load_talker_ckpt(talker_path, talker, fusion)
    load_into(thinker.named_parameters("thinker."), load_checkpoint(thinker_path))

    trainable = talker_fusion_params(talker, fusion)
    if config.unfreeze_thinker:
        trainable.update(thinker.named_parameters("thinker."))
    opt = Adam(trainable, lr=config.lr)
    for step in range(config.train_steps):
        i = step % len(corpus)
        text = corpus.texts[i]
        if config.unfreeze_thinker:
            hidden = teacher_forced_hidden(thinker, text)
        else:
            with no_grad():
                hidden = Tensor(teacher_forced_hidden(thinker, text).data)
        h_up, inputs, targets = talker_example(text, hidden, corpus.frames[i], fusion, factor)
        opt.zero_grad()
        loss = talker_loss(talker_forward(talker, h_up, inputs), targets).mean
        backward(loss)
        opt.step()
        losses.append(loss.item())
    save_talker_ckpt(talker_path, talker, fusion)
    extra = None
    if config.unfreeze_thinker:
        save_checkpoint(thinker_path, thinker.named_parameters("thinker."))
        extra = thinker_path
    curve = out / "loss_end_to_end.csv"
    _write_curve(curve, losses)
    return TrainResult(stage, losses, talker_path, curve, extra_checkpoint=extra)


def talker_metrics(talker: TalkerParams, fusion: FusionParams, corpus: Corpus,
                   config: Config, thinker: ThinkerStub | None = None):
    """Teacher-forced grand-mean loss and stage-0 per-codebook accuracy."""
    factor = config.upsample_factor
    total_loss = 0.0
    total_count = 0
    hits = np.zeros(config.codebooks)
    counts = 0
    with no_grad():
        for i in range(len(corpus)):
            text = corpus.texts[i]
            if thinker is not None:
                hidden = teacher_forced_hidden(thinker, text)
            else:
                hidden = np.zeros((len(text), config.d_th))
            h_up, inputs, targets = talker_example(text, hidden, corpus.frames[i],
                                                   fusion, factor)
            out = talker_forward(talker, h_up, inputs)
            loss = talker_loss(out, targets)
            n_terms = sum(loss.positions_per_stage) * config.codebooks
            total_loss += loss.total.item()
            total_count += n_terms
            for j in range(config.codebooks):
                pred = np.argmax(out.logits[0][j].data, axis=1)
                hits[j] += (pred == targets[:, j]).sum()
            counts += targets.shape[0]
    return total_loss / total_count, hits / counts
