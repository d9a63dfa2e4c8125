"""Run configuration: one flat dataclass, loadable from a TOML file.

Every key in the file must match a field name below; unknown keys are
rejected so typos fail loudly. All defaults are chosen for desk-scale
runs (documented in the README key table).
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ContractError


@dataclass
class Config:
    seed: int = 0

    # model dims
    d: int = 64                      # talker width
    n_heads: int = 4
    talker_layers: int = 2
    thinker_layers: int = 2
    d_th: int = 48                   # thinker width
    d_emb: int = 32                  # fusion text-embedding width
    fusion_hidden: int = 64
    v_txt: int = 64                  # text vocabulary
    v_cb: int = 1024                 # codebook vocabulary
    codebooks: int = 8
    n_mtp: int = 4
    max_len: int = 512
    activation: str = "gelu"         # fusion nonlinearity: gelu | relu | tanh
    share_mtp_heads: bool = False

    # schedule
    upsample_factor: int = 3
    underrun: str = "pad_zeros"      # pad_zeros | stall

    # codec
    feature_dim: int = 16
    frame_rate: float = 12.5
    sample_rate: int = 16000
    codec_iters: int = 15

    # decoding
    mode: str = "mtp"                # mtp | backbone_only
    temperature: float = 0.0
    top_k: int = 0
    max_frames: int = 64
    max_text_tokens: int = 24
    ignore_eos: bool = False
    prompt: list[int] = field(default_factory=lambda: [0, 2])

    # chunking / pipeline
    first_chunk_seconds: float = 0.8
    subsequent_chunk_seconds: float = 0.8
    start_after_tokens: int = 0      # 0 = auto: ceil(first-chunk frames / factor)
    overlap: bool = True
    repetitions: int = 5
    queue_size: int = 64
    vocoder_profile: str = "direct_codec"  # direct_codec | flow_matching_proxy

    # training
    lr: float = 3e-3
    train_steps: int = 2000
    unfreeze_thinker: bool = False

    # corpus
    utterances: int = 8
    text_len_lo: int = 3
    text_len_hi: int = 5
    feature_step: float = 0.05

    # modeled costs (ms); see README for the calibration derivation
    cost_thinker_token_ms: float = 57.215
    cost_talker_call_ms: float = 30.0
    cost_vocoder_direct_ms: float = 60.0
    cost_vocoder_flow_ms: float = 197.04

    # checkpoint paths (used by the CLI and run_pipeline)
    codec_ckpt: str = "codec.ckpt"
    thinker_ckpt: str = "thinker.ckpt"
    talker_ckpt: str = "talker.ckpt"
    corpus_dir: str = "corpus"

    def frames_per_first_chunk(self) -> int:
        n = round(self.first_chunk_seconds * self.frame_rate)
        if n < 1:
            raise ContractError(
                f"first chunk of {self.first_chunk_seconds}s holds no frame at "
                f"{self.frame_rate} frames/s"
            )
        return n

    def frames_per_chunk(self) -> int:
        return max(1, round(self.subsequent_chunk_seconds * self.frame_rate))

    def tokens_before_speech(self) -> int:
        if self.start_after_tokens > 0:
            return self.start_after_tokens
        return -(-self.frames_per_first_chunk() // self.upsample_factor)

    def validate(self) -> "Config":
        if self.mode not in ("mtp", "backbone_only"):
            raise ContractError(f"mode must be mtp or backbone_only, got {self.mode!r}")
        if self.underrun not in ("pad_zeros", "stall"):
            raise ContractError(f"underrun must be pad_zeros or stall, got {self.underrun!r}")
        if self.vocoder_profile not in ("direct_codec", "flow_matching_proxy"):
            raise ContractError(f"unknown vocoder_profile {self.vocoder_profile!r}")
        if self.upsample_factor < 1:
            raise ContractError("upsample_factor must be >= 1")
        for name in ("cost_thinker_token_ms", "cost_talker_call_ms",
                     "cost_vocoder_direct_ms", "cost_vocoder_flow_ms"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        return self


def load_config(path: str | Path | None = None, **overrides) -> Config:
    """Config from a TOML file (flat keys) plus keyword overrides."""
    values: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    values.update(overrides)
    known = {f.name for f in dataclasses.fields(Config)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ContractError(f"unknown config keys: {', '.join(unknown)}")
    return Config(**values).validate()
