"""Toy multi-codebook residual-VQ tokenizer and deterministic synthesis.

Encoding quantizes a feature frame stage by stage: each codebook absorbs
the residual left by the previous one (greedy nearest-centroid, ties to
the lowest index). Entry 0 of every codebook is pinned to the zero
vector, so keeping the residual is always available and residual norms
never increase across stages.

Synthesis is a fixed bank of sinusoidal tones, one per feature
coordinate, rendered block by block; it is exactly linear in the
features and has a closed-form matched-filter inverse, which keeps the
vocoder stage of the pipeline analyzable.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, DataError, FeatureError, VocabError
from .tensor import rng


@dataclass
class CodecModel:
    codebooks: np.ndarray          # [n_codebooks, vocab, feature_dim]
    frame_rate: float = 12.5
    training_log: list[list[float]] | None = field(default=None, repr=False)

    @property
    def n_codebooks(self) -> int:
        return self.codebooks.shape[0]

    @property
    def vocab(self) -> int:
        return self.codebooks.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.codebooks.shape[2]

    def save(self, path) -> None:
        tensors = {f"codebook.{j}": self.codebooks[j] for j in range(self.n_codebooks)}
        tensors["frame_rate"] = np.array([self.frame_rate])
        save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path) -> "CodecModel":
        loaded = load_checkpoint(path)
        n = sum(1 for k in loaded if k.startswith("codebook."))
        books = np.stack([loaded[f"codebook.{j}"] for j in range(n)])
        return cls(books, float(loaded["frame_rate"][0]))


def _check_features(model: CodecModel, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    if features.ndim != 2 or features.shape[1] != model.feature_dim:
        raise FeatureError(
            f"features of shape {features.shape} do not match codec width {model.feature_dim}"
        )
    return features


def rvq_encode(model: CodecModel, features, forbid: dict[int, set[int]] | None = None) -> np.ndarray:
    """Greedy residual quantization: codes[m, j] indexes codebook j.

    ``forbid`` optionally blocks ids per codebook (used to keep control
    ids like EOS out of language-model targets); a blocked id is simply
    never selected, the next-nearest centroid wins.
    """
    features = _check_features(model, features)
    m = features.shape[0]
    codes = np.zeros((m, model.n_codebooks), dtype=np.int64)
    residual = features.copy()
    for j in range(model.n_codebooks):
        book = model.codebooks[j]
        d2 = ((residual[:, None, :] - book[None, :, :]) ** 2).sum(axis=2)
        if forbid and j in forbid:
            d2[:, sorted(forbid[j])] = np.inf
        idx = np.argmin(d2, axis=1)
        codes[:, j] = idx
        residual -= book[idx]
    return codes


def rvq_decode(model: CodecModel, codes, n_codebooks: int | None = None) -> np.ndarray:
    """Sum of selected centroids; linear and order-independent."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim == 1:
        codes = codes[None, :]
    use = model.n_codebooks if n_codebooks is None else n_codebooks
    if codes.shape[1] < use:
        raise ContractError(f"codes carry {codes.shape[1]} tracks, need {use}")
    if codes.size and (codes.min() < 0 or codes[:, :use].max() >= model.vocab):
        raise VocabError(f"code outside [0, {model.vocab})")
    out = np.zeros((codes.shape[0], model.feature_dim))
    for j in range(use):
        out += model.codebooks[j][codes[:, j]]
    return out


def _kmeans_pp_seed(data: np.ndarray, k: int, rg: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with the pinned zero vector as an already-chosen center."""
    chosen = [np.zeros(data.shape[1])]
    d2 = (data ** 2).sum(axis=1)
    for _ in range(k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rg.integers(0, data.shape[0]))
        else:
            pick = int(rg.choice(data.shape[0], p=d2 / total))
        chosen.append(data[pick].copy())
        d2 = np.minimum(d2, ((data - data[pick]) ** 2).sum(axis=1))
    return np.stack(chosen[1:])


def train_codebooks(
    frames,
    n_codebooks: int = 8,
    vocab: int = 1024,
    iters: int = 20,
    feature_dim: int | None = None,
    frame_rate: float = 12.5,
    seed: int = 0,
) -> CodecModel:
    """Stage-wise Lloyd k-means on residuals.

    Entry 0 of every codebook stays pinned to zero (never updated).
    Within a stage the assignment objective is non-increasing across
    iterations; empty clusters are reseeded onto the current farthest
    point. The per-iteration objective trail is kept on the returned
    model's ``training_log`` (one list per stage).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise FeatureError(f"training frames must be 2-d, got {frames.shape}")
    if feature_dim is not None and frames.shape[1] != feature_dim:
        raise FeatureError(f"frames width {frames.shape[1]} != requested {feature_dim}")
    if frames.shape[0] < vocab:
        raise DataError(f"need at least {vocab} training frames, got {frames.shape[0]}")

    rg = rng(seed)
    residual = frames.copy()
    books = []
    log: list[list[float]] = []
    for _stage in range(n_codebooks):
        book = np.zeros((vocab, frames.shape[1]))
        book[1:] = _kmeans_pp_seed(residual, vocab - 1, rg)
        trail = []
        assign = np.zeros(residual.shape[0], dtype=np.int64)
        for _it in range(iters):
            d2 = ((residual[:, None, :] - book[None, :, :]) ** 2).sum(axis=2)
            assign = np.argmin(d2, axis=1)
            cost = d2[np.arange(len(assign)), assign]
            trail.append(float(cost.mean()))
            # update step: entry 0 stays pinned, empties move to the farthest point
            empties = []
            for v in range(1, vocab):
                members = residual[assign == v]
                if len(members):
                    book[v] = members.mean(axis=0)
                else:
                    empties.append(v)
            if empties:
                order = np.argsort(-cost)
                for rank, v in enumerate(empties):
                    book[v] = residual[order[rank % len(order)]]
        books.append(book)
        log.append(trail)
        # final assignment against the settled book before peeling the residual
        d2 = ((residual[:, None, :] - book[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        residual -= book[assign]
    return CodecModel(np.stack(books), frame_rate, training_log=log)


def samples_per_frame(frame_rate: float, sample_rate: int = 16000) -> int:
    if frame_rate <= 0:
        raise ContractError(f"frame_rate must be positive, got {frame_rate}")
    n = int(round(sample_rate / frame_rate))
    if n < 2:
        raise ContractError(f"frame_rate {frame_rate} leaves fewer than 2 samples per frame")
    return n


def _tone_bank(n_samples: int, n_tones: int) -> np.ndarray:
    # harmonics of the frame window; mutually orthogonal over the block,
    # each with energy n_samples / 2
    i = np.arange(n_samples) + 0.5
    k = np.arange(1, n_tones + 1)[:, None]
    return np.sin(2.0 * np.pi * k * i[None, :] / n_samples)


def matched_filter_scale(frame_rate: float, sample_rate: int = 16000) -> float:
    """feature_extract(synth_waveform(f)) == this constant times f."""
    return samples_per_frame(frame_rate, sample_rate) / 2.0


def synth_waveform(features, frame_rate: float = 12.5, sample_rate: int = 16000) -> np.ndarray:
    """Render each frame as a block of amplitude-modulated basis tones."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise FeatureError(f"features must be 2-d, got shape {features.shape}")
    n = samples_per_frame(frame_rate, sample_rate)
    bank = _tone_bank(n, features.shape[1])
    return (features @ bank).reshape(-1)


def feature_extract(samples, frame_rate: float = 12.5, sample_rate: int = 16000,
                    feature_dim: int = 16) -> np.ndarray:
    """Matched filter against the synthesis tone bank, frame by frame.

    A trailing partial frame is dropped. The output is the raw inner
    product; divide by ``matched_filter_scale`` to invert synthesis.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    n = samples_per_frame(frame_rate, sample_rate)
    m = len(samples) // n
    bank = _tone_bank(n, feature_dim)
    return samples[: m * n].reshape(m, n) @ bank.T


def write_wav(path, samples, sample_rate: int = 16000, gain: float = 1.0) -> None:
    """16-bit mono PCM RIFF file."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64) * gain, -1.0, 1.0)
    ints = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(ints.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    ints = np.frombuffer(raw, dtype="<i2")
    return ints.astype(np.float64) / 32767.0, rate
