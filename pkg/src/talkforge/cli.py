"""Command-line entry points.

Subcommands: train-codec, gen-corpus, train, generate, bench, simulate,
selftest. Global flags (--config, --seed, --out-dir) attach to every
subcommand. Exit status 0 on success, 1 on a failed stage or check
(named in the diagnostic), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config
from .errors import TalkForgeError
from .latency import (
    CostModel,
    Scenario,
    multi_codebook_mtp_scenario,
    simulate_cost,
    single_codebook_flow_scenario,
)
from .pipeline import run_pipeline
from .training import (
    STAGES,
    fresh_bundle,
    gen_corpus,
    load_bundle,
    load_corpus,
    save_corpus,
    train_codec,
    train_stage,
)


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"{value!r} is not an integer") from exc
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", default=None,
                        help="TOML config file (flat keys; see README)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out-dir", default="out", help="artifact directory (default: out)")


def _load(args) -> Config:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, **overrides)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="talkforge",
        description="desk-scale multi-codebook speech-token generation stack",
    )
    parser.add_argument("--version", action="version", version=f"talkforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-codec", help="train the residual-VQ codec")
    _common(p)

    p = sub.add_parser("gen-corpus", help="generate the synthetic parallel corpus")
    _common(p)

    p = sub.add_parser("train", help="run one training stage")
    _common(p)
    p.add_argument("--stage", choices=STAGES, required=True)

    p = sub.add_parser("generate", help="run the pipeline; write WAV + transcript + report")
    _common(p)
    p.add_argument("--mode", choices=("mtp", "backbone_only"), default=None)
    p.add_argument("--max-frames", type=_positive_int, default=None)

    p = sub.add_parser("bench", help="repeated latency runs; CSV per-stage breakdown")
    _common(p)
    p.add_argument("--mode", choices=("mtp", "backbone_only"), default=None)
    p.add_argument("--repeats", type=_positive_int, default=None)

    p = sub.add_parser("simulate", help="closed-form cost model latency report")
    _common(p)
    p.add_argument("--scenario", choices=("single_codebook_flow", "multi_codebook_mtp", "custom"),
                   default="multi_codebook_mtp")
    p.add_argument("--n-mtp", type=int, default=None)
    p.add_argument("--mode", choices=("mtp", "backbone_only"), default=None)
    p.add_argument("--vocoder", choices=("direct_codec", "flow_matching_proxy"), default=None)

    p = sub.add_parser("selftest", help="run the bundled oracle checks")
    _common(p)
    return parser


def _cmd_train_codec(args) -> int:
    config = _load(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    codec = train_codec(config)
    path = out / config.codec_ckpt
    codec.save(path)
    pool_errors = [trail[-1] for trail in codec.training_log]
    print(f"trained {config.codebooks} codebooks of {config.v_cb} entries -> {path}")
    print("per-stage final quantization error: "
          + " ".join(f"{e:.5f}" for e in pool_errors))
    return 0


def _cmd_gen_corpus(args) -> int:
    config = _load(args)
    out = Path(args.out_dir)
    codec_path = out / config.codec_ckpt
    if not codec_path.exists():
        print(f"gen-corpus: missing codec checkpoint {codec_path} (run train-codec first)",
              file=sys.stderr)
        return 1
    from .codec import CodecModel

    corpus = gen_corpus(config, CodecModel.load(codec_path))
    corpus_dir = out / config.corpus_dir
    save_corpus(corpus, corpus_dir)
    lengths = [len(t) for t in corpus.texts]
    print(f"wrote {len(corpus)} utterances (text lengths {min(lengths)}..{max(lengths)}) "
          f"-> {corpus_dir}")
    return 0


def _cmd_train(args) -> int:
    config = _load(args)
    out = Path(args.out_dir)
    corpus = load_corpus(out / config.corpus_dir)
    result = train_stage(args.stage, corpus, config, out)
    print(f"stage {args.stage}: {len(result.losses)} steps, "
          f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss curve: {result.curve_path}")
    return 0


def _cmd_generate(args) -> int:
    config = _load(args)
    if args.mode:
        config = dataclasses.replace(config, mode=args.mode)
    if args.max_frames:
        config = dataclasses.replace(config, max_frames=args.max_frames)
    out = Path(args.out_dir)
    result = run_pipeline(config, base_dir=out, out_dir=out)
    report = result.report
    print(f"generated {result.frames.shape[0]} frames "
          f"({len(result.samples) / config.sample_rate:.2f} s audio), "
          f"{len(result.tokens)} text tokens")
    if result.underrun:
        print("underrun: text ended before the requested frames were covered")
    print(f"first chunk: thinker {report.mean('thinker'):.2f} ms, "
          f"talker {report.mean('talker'):.2f} ms, "
          f"vocoder {report.mean('vocoder'):.2f} ms, "
          f"total {report.mean('total'):.2f} ms "
          f"({report.backbone_calls_first_chunk} backbone calls)")
    for name, path in result.paths.items():
        print(f"  {name}: {path}")
    return 0


def _cmd_bench(args) -> int:
    config = _load(args)
    if args.mode:
        config = dataclasses.replace(config, mode=args.mode)
    if args.repeats:
        config = dataclasses.replace(config, repetitions=args.repeats)
    out = Path(args.out_dir)
    result = run_pipeline(config, base_dir=out)
    report = result.report
    csv_path = out / "bench.csv"
    json_path = out / "bench.json"
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(csv_path)
    report.write_json(json_path)
    print(f"mode={config.mode} n_mtp={config.n_mtp} repetitions={config.repetitions} "
          f"backbone_calls={report.backbone_calls_first_chunk}")
    for stage in ("thinker", "talker", "vocoder", "total"):
        print(f"  {stage:8s} {report.mean(stage):9.3f} ms +- {report.stderr(stage):.3f}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _cmd_simulate(args) -> int:
    config = _load(args)
    costs = CostModel(
        thinker_token_ms=config.cost_thinker_token_ms,
        talker_call_ms=config.cost_talker_call_ms,
        vocoder_direct_ms=config.cost_vocoder_direct_ms,
        vocoder_flow_ms=config.cost_vocoder_flow_ms,
    )
    if args.scenario == "single_codebook_flow":
        scenario = single_codebook_flow_scenario()
    elif args.scenario == "multi_codebook_mtp":
        scenario = multi_codebook_mtp_scenario()
    else:
        scenario = Scenario()
    updates = {}
    if args.n_mtp is not None:
        updates["n_mtp"] = args.n_mtp
    if args.mode is not None:
        updates["mode"] = args.mode
    if args.vocoder is not None:
        updates["vocoder"] = args.vocoder
    scenario = dataclasses.replace(scenario, **updates)
    report = simulate_cost(costs, scenario)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "simulate.csv")
    report.write_json(out / "simulate.json")
    print(f"scenario: mode={scenario.mode} n_mtp={scenario.n_mtp} vocoder={scenario.vocoder}")
    print(f"  thinker {report.mean('thinker'):.2f} ms + talker {report.mean('talker'):.2f} ms "
          f"+ vocoder {report.mean('vocoder'):.2f} ms = {report.mean('total'):.2f} ms")
    return 0


def _selftest_checks():
    from .codec import rvq_encode
    from .checkpoint import load_checkpoint, save_checkpoint
    from .fusion import upsample_schedule
    from .talker import TalkerConfig, TalkerParams, generate
    from .tensor import Tensor, grad_check, matmul, rng, softmax

    def schedule_oracle():
        for n in range(5):
            fused = rng(n).normal(size=(n, 2))
            for factor in (1, 2, 3):
                full = np.zeros((n * factor, 2))
                for i in range(n):
                    full[i * factor] = fused[i]
                for t in range(13):
                    want = full[:t] if len(full) >= t else np.concatenate(
                        [full, np.zeros((t - len(full), 2))])
                    got = upsample_schedule(fused, t, factor).data
                    assert np.array_equal(got, want)

    def gradient_suite():
        r = rng(1)
        w = Tensor(r.normal(size=(5, 4)), requires_grad=True)
        x = Tensor(r.normal(size=(3, 5)))
        err = grad_check(lambda t: (matmul(x, t).tanh() ** 2.0).sum(), w)
        assert err < 1e-4, err

    def softmax_stability():
        out = softmax(Tensor([1000.0, 0.0, -1000.0]))
        assert np.isfinite(out.data).all() and abs(out.data.sum() - 1.0) < 1e-12

    def step_count_law():
        cfg = TalkerConfig(codebooks=2, vocab=8, d=8, n_heads=2, n_layers=1,
                           n_mtp=4, max_len=64)
        params = TalkerParams(cfg, rng(2))
        fused = rng(3).normal(size=(4, cfg.d))
        for n_mtp in (0, 2, 4):
            cfg_n = dataclasses.replace(cfg, n_mtp=n_mtp)
            p = TalkerParams(cfg_n, rng(2))
            for m in (1, 7, 10):
                _, trace = generate(p, fused, m, mode="mtp", ignore_eos=True)
                assert trace.backbone_calls == -(-m // (n_mtp + 1))

    def rvq_monotonic():
        books = rng(4).normal(size=(4, 8, 5))
        books[:, 0, :] = 0.0
        from .codec import CodecModel

        model = CodecModel(books)
        frames = rng(5).normal(size=(200, 5)) * 2.0
        codes = rvq_encode(model, frames)
        residual = frames.copy()
        prev = np.linalg.norm(residual, axis=1)
        for j in range(4):
            residual = residual - books[j][codes[:, j]]
            norms = np.linalg.norm(residual, axis=1)
            assert np.all(norms <= prev + 1e-12)
            prev = norms

    def checkpoint_roundtrip():
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "w.ckpt"
            tensors = {"a": rng(6).normal(size=(3, 3)), "b": rng(7).normal(size=5)}
            save_checkpoint(path, tensors)
            back = load_checkpoint(path)
            assert all(back[k].tobytes() == v.tobytes() for k, v in tensors.items())

    def cost_calibration():
        base = simulate_cost(CostModel(), single_codebook_flow_scenario())
        ours = simulate_cost(CostModel(), multi_codebook_mtp_scenario())
        assert abs(base.mean("total") - 725.90) < 1e-6
        assert abs(ours.mean("total") - 348.86) < 1e-6

    return [
        ("schedule-oracle", schedule_oracle),
        ("gradient-suite", gradient_suite),
        ("softmax-stability", softmax_stability),
        ("step-count-law", step_count_law),
        ("rvq-monotonicity", rvq_monotonic),
        ("checkpoint-roundtrip", checkpoint_roundtrip),
        ("cost-calibration", cost_calibration),
    ]


def _cmd_selftest(args) -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            check()
        except Exception as exc:  # noqa: BLE001 - report and keep going
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"ok   {name}")
    if failures:
        print(f"selftest: {failures} check(s) failed", file=sys.stderr)
        return 1
    print("selftest: all checks passed")
    return 0


_COMMANDS = {
    "train-codec": _cmd_train_codec,
    "gen-corpus": _cmd_gen_corpus,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "bench": _cmd_bench,
    "simulate": _cmd_simulate,
    "selftest": _cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TalkForgeError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"{args.command}: missing file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
