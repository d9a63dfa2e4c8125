"""First-chunk latency reports and the closed-form cost model.

The first-chunk latency decomposes into three parts: text-token
generation (thinker), speech-token generation (talker), and token-to-
waveform conversion (vocoder). Live runs measure each part's busy time
with a monotonic clock; residual scheduling overhead is reported as an
explicit fourth field so the parts plus residual always equal the
total. ``simulate_cost`` produces the same report schema from injected
per-unit costs, which is where the reference wall-clock totals are
reproduced (they are not reachable with toy models on desk hardware).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError

STAGES = ("thinker", "talker", "vocoder")


@dataclass
class StageTiming:
    thinker_ms: float = 0.0
    talker_ms: float = 0.0
    vocoder_ms: float = 0.0
    total_ms: float = 0.0

    @property
    def residual_ms(self) -> float:
        return self.total_ms - (self.thinker_ms + self.talker_ms + self.vocoder_ms)

    def as_dict(self) -> dict[str, float]:
        d = dataclasses.asdict(self)
        d["residual_ms"] = self.residual_ms
        return d


def _mean_stderr(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass
class LatencyReport:
    mode: str
    n_mtp: int
    seed: int
    repetitions: int
    source: str                                   # "live" or "simulated"
    first_chunk: list[StageTiming]                # one entry per repetition
    frames_first_chunk: int
    backbone_calls_first_chunk: int
    chunk_timeline_ms: list[list[float]] = field(default_factory=list)
    underrun: bool = False

    def stage_values(self, stage: str) -> list[float]:
        return [getattr(t, f"{stage}_ms") for t in self.first_chunk]

    def mean(self, stage: str) -> float:
        return _mean_stderr(self.stage_values(stage))[0]

    def stderr(self, stage: str) -> float:
        return _mean_stderr(self.stage_values(stage))[1]

    def summary(self) -> dict:
        out = {}
        for stage in (*STAGES, "total", "residual"):
            m, se = _mean_stderr(self.stage_values(stage))
            out[stage] = {"mean_ms": m, "stderr_ms": se}
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_mtp": self.n_mtp,
            "seed": self.seed,
            "repetitions": self.repetitions,
            "source": self.source,
            "frames_first_chunk": self.frames_first_chunk,
            "backbone_calls_first_chunk": self.backbone_calls_first_chunk,
            "underrun": self.underrun,
            "first_chunk": [t.as_dict() for t in self.first_chunk],
            "summary": self.summary(),
            "chunk_timeline_ms": self.chunk_timeline_ms,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_rows(self) -> list[dict]:
        rows = []
        for stage in (*STAGES, "total"):
            values = self.stage_values(stage)
            m, se = _mean_stderr(values)
            for v in values:
                rows.append({"stage": stage, "ms": f"{v:.6f}",
                             "mean": f"{m:.6f}", "stderr": f"{se:.6f}"})
        return rows

    def write_csv(self, path) -> None:
        rows = self.csv_rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["stage", "ms", "mean", "stderr"])
            writer.writeheader()
            writer.writerows(rows)

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


@dataclass
class CostModel:
    """Injected per-unit costs (ms) for the closed-form simulator."""

    thinker_token_ms: float = 57.215
    talker_call_ms: float = 30.0
    vocoder_direct_ms: float = 60.0
    vocoder_flow_ms: float = 197.04

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ContractError(f"cost {f.name} must be >= 0")

    def vocoder_ms(self, profile: str) -> float:
        if profile == "direct_codec":
            return self.vocoder_direct_ms
        if profile == "flow_matching_proxy":
            return self.vocoder_flow_ms
        raise ContractError(f"unknown vocoder profile {profile!r}")


@dataclass
class Scenario:
    """What the simulator prices: chunk plan, rates, decode mode, vocoder."""

    n_mtp: int = 4
    mode: str = "mtp"                       # mtp | backbone_only
    vocoder: str = "direct_codec"           # direct_codec | flow_matching_proxy
    frame_rate: float = 12.5
    first_chunk_seconds: float = 0.8
    upsample_factor: int = 3
    repetitions: int = 5
    seed: int = 0

    def frames_first_chunk(self) -> int:
        n = round(self.first_chunk_seconds * self.frame_rate)
        if n < 1:
            raise ContractError("first chunk shorter than one frame")
        return n

    def tokens_needed(self) -> int:
        return -(-self.frames_first_chunk() // self.upsample_factor)

    def backbone_calls(self) -> int:
        frames = self.frames_first_chunk()
        if self.mode == "mtp":
            return -(-frames // (self.n_mtp + 1))
        if self.mode == "backbone_only":
            return frames
        raise ContractError(f"unknown mode {self.mode!r}")


def single_codebook_flow_scenario(**kw) -> Scenario:
    """Baseline configuration: one codebook, flow-matching vocoder, no MTP."""
    return Scenario(n_mtp=0, mode="backbone_only", vocoder="flow_matching_proxy", **kw)


def multi_codebook_mtp_scenario(**kw) -> Scenario:
    """Direct multi-codebook synthesis with four MTP stages."""
    return Scenario(n_mtp=4, mode="mtp", vocoder="direct_codec", **kw)


def simulate_cost(cost_model: CostModel, scenario: Scenario) -> LatencyReport:
    """Additive first-chunk latency under the injected costs."""
    thinker = scenario.tokens_needed() * cost_model.thinker_token_ms
    calls = scenario.backbone_calls()
    talker = calls * cost_model.talker_call_ms
    vocoder = cost_model.vocoder_ms(scenario.vocoder)
    total = thinker + talker + vocoder
    timing = StageTiming(thinker, talker, vocoder, total)
    return LatencyReport(
        mode=scenario.mode,
        n_mtp=scenario.n_mtp,
        seed=scenario.seed,
        repetitions=scenario.repetitions,
        source="simulated",
        first_chunk=[dataclasses.replace(timing) for _ in range(scenario.repetitions)],
        frames_first_chunk=scenario.frames_first_chunk(),
        backbone_calls_first_chunk=calls,
        chunk_timeline_ms=[[total] for _ in range(scenario.repetitions)],
    )
