"""Streaming three-stage generation pipeline with latency instrumentation.

Thinker, talker, and vocoder run as concurrent units connected by
ordered bounded queues (threads; back-pressure blocks producers). The
talker starts once enough text exists to cover the first chunk's
schedule slots and afterwards waits per slot, so the emitted content is
identical under any interleaving -- only the timing varies. Eq.-style
zero padding of the context applies only once the thinker has finished;
in ``stall`` mode generation instead ends with an explicit underrun
report.

Per-stage first-chunk busy times are measured with a monotonic clock;
``run_pipeline`` repeats the run, checks the content is bit-identical
across repetitions, and reports mean and standard error per stage.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from queue import Queue

import numpy as np

from .codec import rvq_decode, samples_per_frame, synth_waveform, write_wav
from .config import Config
from .errors import PipelineError
from .fusion import fuse, slot_source
from .latency import LatencyReport, StageTiming
from .nn import EOS_ID
from .talker import DecodeSession, decode_step, write_frames
from .tensor import no_grad
from .thinker import thinker_stream
from .training import Bundle, load_bundle


@dataclass
class _TalkerResult:
    frames: list[np.ndarray] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    busy_at_frame: list[float] = field(default_factory=list)
    calls_at_frame: list[int] = field(default_factory=list)
    total_calls: int = 0
    underrun: bool = False


def _consume_text_and_decode(bundle: Bundle, config: Config, pull, emit) -> _TalkerResult:
    """Talker stage body, shared by the threaded and sequential paths.

    ``pull()`` blocks until the next (token, hidden, busy_ms) item or
    returns None when the thinker is done; ``emit(frame)`` hands one
    frame downstream.
    """
    cfg = bundle.talker.cfg
    factor = config.upsample_factor
    res = _TalkerResult()
    session = DecodeSession(bundle.talker, ignore_eos=config.ignore_eos, seed=config.seed)
    fused_rows: list[np.ndarray] = []
    text_done = False
    busy = 0.0

    def ensure(idx: int) -> bool:
        nonlocal busy, text_done
        while len(fused_rows) <= idx:
            if text_done:
                return False
            item = pull()
            if item is None:
                text_done = True
                return len(fused_rows) > idx
            token, hidden, _ = item
            res.tokens.append(token)
            tic = time.perf_counter()
            with no_grad():
                row = fuse([token], hidden[None, :], bundle.fusion).data[0]
            busy += (time.perf_counter() - tic) * 1000.0
            fused_rows.append(row)
        return True

    for s in range(config.tokens_before_speech()):
        if not ensure(s):
            break

    while len(res.frames) < config.max_frames and not session.closed:
        k = len(session.pending)
        rows = np.zeros((k, cfg.d))
        stalled = False
        for i, p in enumerate(range(session.t_processed, session.t_processed + k)):
            src = slot_source(p, factor)
            if src is None:
                continue
            if ensure(src):
                rows[i] = fused_rows[src]
            elif config.underrun == "stall":
                stalled = True
                break
            # pad_zeros: the row stays zero (thinker is finished here)
        if stalled:
            res.underrun = True
            break
        tic = time.perf_counter()
        emitted = decode_step(bundle.talker, session, rows, config.mode)
        busy += (time.perf_counter() - tic) * 1000.0
        for frame in emitted:
            if not config.ignore_eos and frame[0] == EOS_ID:
                break
            res.frames.append(frame)
            res.busy_at_frame.append(busy)
            res.calls_at_frame.append(session.trace.backbone_calls)
            emit(frame)
            if len(res.frames) >= config.max_frames:
                break

    res.total_calls = session.trace.backbone_calls
    # drain the remaining text so the transcript covers the full emission
    while not text_done:
        item = pull()
        if item is None:
            text_done = True
        else:
            res.tokens.append(item[0])
    return res


@dataclass
class _VocoderResult:
    chunks: list[np.ndarray] = field(default_factory=list)
    busy_ms: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)


class _Vocoder:
    def __init__(self, bundle: Bundle, config: Config, t0: float):
        self.bundle = bundle
        self.config = config
        self.t0 = t0
        self.result = _VocoderResult()
        self._buf: list[np.ndarray] = []
        self._target = config.frames_per_first_chunk()

    def push(self, frame: np.ndarray) -> None:
        self._buf.append(frame)
        if len(self._buf) >= self._target:
            self._flush()
            self._target = self.config.frames_per_chunk()

    def finish(self) -> None:
        if self._buf:
            self._flush()

    def _flush(self) -> None:
        config = self.config
        tic = time.perf_counter()
        if config.vocoder_profile == "flow_matching_proxy":
            time.sleep(config.cost_vocoder_flow_ms / 1000.0)
        features = rvq_decode(self.bundle.codec, np.stack(self._buf))
        samples = synth_waveform(features, config.frame_rate, config.sample_rate)
        now = time.perf_counter()
        self.result.busy_ms.append((now - tic) * 1000.0)
        self.result.wall_ms.append((now - self.t0) * 1000.0)
        self.result.chunks.append(samples)
        self._buf = []


@dataclass
class _RunOutcome:
    frames: np.ndarray
    tokens: list[int]
    chunk_samples: list[np.ndarray]
    timing: StageTiming
    chunk_walls: list[float]
    backbone_calls_first: int
    frames_first: int
    underrun: bool


def _assemble(config: Config, t0: float, thinker_busy: list[float],
              talker: _TalkerResult, voc: _VocoderResult) -> _RunOutcome:
    frames_target = config.frames_per_first_chunk()
    frames_first = min(frames_target, len(talker.frames))
    tokens_needed = min(config.tokens_before_speech(), len(thinker_busy))
    thinker_ms = sum(thinker_busy[:tokens_needed])
    talker_ms = talker.busy_at_frame[frames_first - 1] if frames_first else 0.0
    calls_first = talker.calls_at_frame[frames_first - 1] if frames_first else talker.total_calls
    vocoder_ms = voc.busy_ms[0] if voc.busy_ms else 0.0
    total_ms = voc.wall_ms[0] if voc.wall_ms else (time.perf_counter() - t0) * 1000.0
    frames = (np.stack(talker.frames) if talker.frames
              else np.zeros((0, config.codebooks), dtype=np.int64))
    return _RunOutcome(
        frames=frames,
        tokens=talker.tokens,
        chunk_samples=voc.chunks,
        timing=StageTiming(thinker_ms, talker_ms, vocoder_ms, total_ms),
        chunk_walls=voc.wall_ms,
        backbone_calls_first=calls_first,
        frames_first=frames_first,
        underrun=talker.underrun,
    )


def _run_threads(bundle: Bundle, config: Config) -> _RunOutcome:
    t0 = time.perf_counter()
    text_q: Queue = Queue(maxsize=config.queue_size)
    frame_q: Queue = Queue(maxsize=config.queue_size)
    errors: dict[str, BaseException] = {}
    thinker_busy: list[float] = []
    talker_box: dict[str, _TalkerResult] = {}

    def thinker_stage():
        try:
            for token, hidden, busy in thinker_stream(
                bundle.thinker, config.prompt, config.max_text_tokens
            ):
                thinker_busy.append(busy)
                text_q.put((token, hidden, busy))
        except BaseException as exc:
            errors["thinker"] = exc
        finally:
            text_q.put(None)

    def talker_stage():
        try:
            talker_box["r"] = _consume_text_and_decode(
                bundle, config, text_q.get, frame_q.put
            )
        except BaseException as exc:
            errors["talker"] = exc
        finally:
            frame_q.put(None)

    threads = [threading.Thread(target=thinker_stage, name="thinker"),
               threading.Thread(target=talker_stage, name="talker")]
    for t in threads:
        t.start()

    voc = _Vocoder(bundle, config, t0)
    try:
        while True:
            frame = frame_q.get()
            if frame is None:
                break
            voc.push(frame)
        voc.finish()
    except BaseException as exc:
        errors["vocoder"] = exc
    for t in threads:
        t.join()
    for stage in ("thinker", "talker", "vocoder"):
        if stage in errors:
            raise PipelineError(f"pipeline stage '{stage}' failed: {errors[stage]}") from errors[stage]

    return _assemble(config, t0, thinker_busy, talker_box["r"], voc.result)


def _run_sequential(bundle: Bundle, config: Config) -> _RunOutcome:
    t0 = time.perf_counter()
    items = []
    thinker_busy = []
    try:
        for token, hidden, busy in thinker_stream(
            bundle.thinker, config.prompt, config.max_text_tokens
        ):
            thinker_busy.append(busy)
            items.append((token, hidden, busy))
    except BaseException as exc:
        raise PipelineError(f"pipeline stage 'thinker' failed: {exc}") from exc

    feed = iter(items + [None])
    try:
        talker = _consume_text_and_decode(bundle, config, lambda: next(feed), lambda f: None)
    except BaseException as exc:
        raise PipelineError(f"pipeline stage 'talker' failed: {exc}") from exc

    voc = _Vocoder(bundle, config, t0)
    try:
        for frame in talker.frames:
            voc.push(frame)
        voc.finish()
    except BaseException as exc:
        raise PipelineError(f"pipeline stage 'vocoder' failed: {exc}") from exc
    return _assemble(config, t0, thinker_busy, talker, voc.result)


def _run_once(bundle: Bundle, config: Config) -> _RunOutcome:
    return _run_threads(bundle, config) if config.overlap else _run_sequential(bundle, config)


@dataclass
class PipelineResult:
    frames: np.ndarray
    tokens: list[int]
    samples: np.ndarray
    report: LatencyReport
    underrun: bool
    paths: dict[str, Path] = field(default_factory=dict)


def run_pipeline(config: Config, bundle: Bundle | None = None,
                 base_dir: str | Path = ".", out_dir: str | Path | None = None) -> PipelineResult:
    """Run the full pipeline ``config.repetitions`` times.

    Content (tokens, frames, call counts) must be identical across
    repetitions; timings are aggregated into the latency report. With
    ``out_dir`` set, writes out.wav, transcript.txt, tokens.txt and the
    JSON/CSV reports there.
    """
    config.validate()
    if bundle is None:
        bundle = load_bundle(config, base_dir)

    outcomes = [_run_once(bundle, config) for _ in range(config.repetitions)]
    head = outcomes[0]
    for other in outcomes[1:]:
        same = (
            np.array_equal(other.frames, head.frames)
            and other.tokens == head.tokens
            and other.backbone_calls_first == head.backbone_calls_first
        )
        if not same:
            raise PipelineError(
                "pipeline stage 'consistency' failed: content differs across repetitions"
            )

    report = LatencyReport(
        mode=config.mode,
        n_mtp=config.n_mtp,
        seed=config.seed,
        repetitions=config.repetitions,
        source="live",
        first_chunk=[o.timing for o in outcomes],
        frames_first_chunk=head.frames_first,
        backbone_calls_first_chunk=head.backbone_calls_first,
        chunk_timeline_ms=[o.chunk_walls for o in outcomes],
        underrun=any(o.underrun for o in outcomes),
    )
    samples = (np.concatenate(head.chunk_samples) if head.chunk_samples
               else np.zeros(0))
    result = PipelineResult(head.frames, head.tokens, samples, report,
                            underrun=report.underrun)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        wav_path = out / "out.wav"
        write_wav(wav_path, samples, config.sample_rate)
        transcript = out / "transcript.txt"
        write_frames(transcript, result.frames)
        tokens_path = out / "tokens.txt"
        tokens_path.write_text(" ".join(str(t) for t in result.tokens) + "\n", encoding="utf-8")
        report_json = out / "report.json"
        report.write_json(report_json)
        report_csv = out / "report.csv"
        report.write_csv(report_csv)
        result.paths = {"wav": wav_path, "transcript": transcript,
                        "tokens": tokens_path, "report_json": report_json,
                        "report_csv": report_csv}
    return result
