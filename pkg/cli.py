#!/usr/bin/env python3
"""
gaze-diffusion command line.

    gen-corpus         synthetic multi-user corpus
    train-embedder     user embedder + within/cross similarity report
    train              conditional denoiser (with or without identity guidance)
    synthesize         inject a target user's identity into a base recording
    evaluate           identity-removal / recovery / manipulation / js / identify
    baseline-highpass  classical Butterworth high-pass injection

Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical failure.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import pandas as pd

from checkpoint_utils import dataclass_to_json
from corpus import CorpusConfig, generate_corpus, load_corpus, load_csv, save_corpus, save_csv, split
from denoiser import Denoiser, DenoiserConfig
from diffusion import ConditioningBundle, sample
from embedder import EmbedderConfig, Embedder, train_embedder
from errors import DataError, NumericalError
from evaluation import (
    DiffusionSynthesizer,
    EvalConfig,
    EvalReport,
    HighPassSynthesizer,
    RemovedInputSynthesizer,
    Stats,
    augment_with_synthesis,
    cross_user_baseline,
    identify_user,
    identity_removal_eval,
    js_eval,
    manipulation_eval,
    manipulation_pairs,
    plot_traces,
    recovery_eval,
    velocities_to_gaze,
    within_user_baseline,
)
from gaze_signal import (
    GazeSequence,
    VelocitySequence,
    VelocitySpace,
    count_invalid,
    denormalize,
    fill_gaps,
    gaze_to_model_input,
    highpass_inject,
    integrate,
    remove_identity,
    savgol_derivative,
    upsample_hold,
)
from training import TrainConfig, load_denoiser, load_embedder, save_embedder, train

SEED_ENV = "GAZE_DIFFUSION_SEED"
PROTOCOLS = ("identity-removal", "recovery", "manipulation", "js", "identify")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass
class AppConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    split_ratio: float = 0.5

    SECTIONS = {
        "corpus": CorpusConfig,
        "embedder": EmbedderConfig,
        "denoiser": DenoiserConfig,
        "train": TrainConfig,
        "eval": EvalConfig,
    }

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).to_dict() for name in self.SECTIONS}
        out.update(seed=self.seed, split_ratio=self.split_ratio)
        return out

    def to_json(self) -> str:
        return dataclass_to_json(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AppConfig":
        if not isinstance(data, dict):
            raise DataError("Config must be a JSON object")
        unknown = sorted(set(data) - set(cls.SECTIONS) - {"seed", "split_ratio"})
        if unknown:
            raise DataError(f"AppConfig: unknown keys {unknown}")
        sections = {name: kind.from_dict(data[name]) for name, kind in cls.SECTIONS.items() if name in data}
        config = cls(**sections)
        config.seed = int(data.get("seed", config.seed))
        config.split_ratio = float(data.get("split_ratio", config.split_ratio))
        return config

    @classmethod
    def from_json(cls, path: str) -> "AppConfig":
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: invalid JSON: {e}") from e


def resolve_seed(flag: Optional[int], config: AppConfig) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise DataError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return config.seed


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args, config: AppConfig) -> int:
    cc = config.corpus
    cc = replace(
        cc,
        n_users=args.users if args.users is not None else cc.n_users,
        sequences_per_user=args.seqs if args.seqs is not None else cc.sequences_per_user,
        sequence_length=args.len if args.len is not None else cc.sequence_length,
        sample_rate=args.rate if args.rate is not None else cc.sample_rate,
        seed=args.seed,
    )
    corpus = generate_corpus(cc, verbose=not args.quiet)
    count = save_corpus(corpus, args.out)
    print(f"[cli] ✅ Wrote {count} sequences to {args.out}")
    return EXIT_OK


def _load_split(corpus_dir: str, config: AppConfig, seed: int):
    corpus = load_corpus(corpus_dir)
    return split(corpus.sequences, config.split_ratio, seed)


def cmd_train_embedder(args, config: AppConfig) -> int:
    train_split, test_split = _load_split(args.corpus, config, args.seed)
    length = len(next(iter(train_split.values()))[0])
    ec = replace(config.embedder, sequence_length=length)
    if args.epochs is not None:
        ec = replace(ec, epochs=args.epochs)
    if args.dim is not None:
        ec = replace(ec, embedding_dim=args.dim)

    params, report = train_embedder(train_split, ec, args.seed, shuffle_labels=args.shuffle_labels,
                                    verbose=not args.quiet)
    save_embedder(args.out, params, ec)
    embedder = Embedder(params, ec)
    within = within_user_baseline(test_split, embedder, args.threads)
    cross = cross_user_baseline(test_split, embedder, args.threads)
    print(f"[cli] held-out within-user {within}, cross-user {cross}, gap {within.mean - cross.mean:.3f}")
    if args.report:
        frame = pd.DataFrame({
            "pair_type": ["within", "cross"],
            "mean": [within.mean, cross.mean],
            "std": [within.std, cross.std],
        })
        frame.to_csv(args.report, index=False, float_format="%.6f", lineterminator="\n")
    print(f"[cli] ✅ Saved embedder to {args.out}")
    return EXIT_OK


def cmd_train(args, config: AppConfig) -> int:
    embedder = load_embedder(args.embedder)
    train_split, _ = _load_split(args.corpus, config, args.seed)
    sequences = [g for user in sorted(train_split) for g in train_split[user]]

    length = embedder.config.sequence_length
    dc = replace(config.denoiser, sequence_length=length, embedding_dim=embedder.config.embedding_dim)
    if args.layers is not None:
        dc = replace(dc, n_layers=args.layers)
    if args.channels is not None:
        dc = replace(dc, residual_channels=args.channels)

    tc = replace(config.train, seed=args.seed, sequence_length=length)
    for flag, key in (("steps", "steps"), ("batch", "batch_size"), ("lr", "learning_rate"),
                      ("objective", "objective"), ("lambda_id", "lambda_id"), ("noise_norm", "noise_norm")):
        value = getattr(args, flag)
        if value is not None:
            tc = replace(tc, **{key: value})
    if args.no_id_guidance:
        tc = replace(tc, use_id_guidance=False)

    train(sequences, embedder, dc, tc, out_path=args.out, verbose=not args.quiet)
    print(f"[cli] ✅ Saved denoiser to {args.out}")
    return EXIT_OK


def _prepare_base(path: str, rate: float, length: int, low_rate: Optional[float],
                  file_rate: Optional[float] = None) -> GazeSequence:
    """Load a base recording; upsample a low-rate file with ZOH and hold over gaps."""
    base = load_csv(path, sample_rate=low_rate if low_rate is not None else file_rate)
    if base.sample_rate < rate:
        base = upsample_hold(base, rate)
    elif base.sample_rate != rate:
        raise DataError(f"Base recorded at {base.sample_rate:g} Hz, model expects {rate:g} Hz")
    if not np.all(base.valid):
        base = fill_gaps(base)
    if len(base) != length:
        raise DataError(f"Base has {len(base)} samples, model expects {length}")
    return base


def cmd_synthesize(args, config: AppConfig) -> int:
    params, dc, tc, sched = load_denoiser(args.model)
    embedder = load_embedder(args.embedder)
    target = load_csv(args.target, args.sample_rate)
    rate = target.sample_rate
    base = _prepare_base(args.base, rate, dc.sequence_length, args.low_rate, args.sample_rate)

    if args.keep_base_identity:
        observation = gaze_to_model_input(base).as_model_input()[None]
    else:
        observation = gaze_to_model_input(remove_identity(base, tc.low_rate)).as_model_input()[None]
    cond = ConditioningBundle(observation, embedder.embed_gaze([target]))
    velocities = sample(cond, Denoiser(params, dc), sched, args.seed)

    synthetic = velocities_to_gaze(velocities, [base], rate)[0]
    save_csv(synthetic, args.out)
    print(f"[cli] ✅ Wrote {len(synthetic)} samples to {args.out}")
    if args.svg:
        plot_traces(args.svg, base, remove_identity(base, tc.low_rate), velocities[0], title="synthesize")
    return EXIT_OK


def cmd_baseline_highpass(args, config: AppConfig) -> int:
    base = load_csv(args.base, args.sample_rate)
    target = load_csv(args.target, args.sample_rate)
    vel = highpass_inject(remove_identity(base, args.low_rate), target, args.cutoff)
    finite = np.all(np.isfinite(vel.channels), axis=1)
    bad = count_invalid(vel)
    if bad:
        print(f"[cli] ⚠️  {bad} non-finite samples written as invalid")
    steady = VelocitySequence(np.where(finite[:, None], vel.channels, 0.0), vel.sample_rate, VelocitySpace.RAW)
    gaze = integrate(steady, tuple(base.samples[0]))
    save_csv(GazeSequence(gaze.samples, finite, gaze.sample_rate), args.out)
    print(f"[cli] ✅ Wrote {len(gaze)} samples to {args.out}")
    return EXIT_OK


def _model_synthesizer(path: str, name: str, chunk: int):
    params, dc, tc, sched = load_denoiser(path)
    return DiffusionSynthesizer(Denoiser(params, dc), sched, tc.low_rate, chunk, name=name), tc


def cmd_evaluate(args, config: AppConfig) -> int:
    ec = config.eval
    embedder = load_embedder(args.embedder)
    train_split, test_split = _load_split(args.corpus, config, args.seed)
    report = EvalReport()
    verbose = not args.quiet
    threads = args.threads

    if args.protocol != "identity-removal" and not args.model:
        raise DataError(f"--model is required for protocol '{args.protocol}'")

    methods = []
    if args.model:
        model, tc = _model_synthesizer(args.model, "diffusion", ec.chunk)
        low_rate = tc.low_rate
        methods.append(model)
        if args.ablation_model:
            methods.append(_model_synthesizer(args.ablation_model, "diffusion_noid", ec.chunk)[0])
    else:
        low_rate = ec.low_rate
    methods += [HighPassSynthesizer(ec.highpass_cutoff, low_rate), RemovedInputSynthesizer(low_rate)]

    if args.protocol == "identity-removal":
        report.add("identity-removal", "removed", "cosine", identity_removal_eval(test_split, embedder, low_rate, threads))
        report.add("identity-removal", "human", "within_user", within_user_baseline(test_split, embedder, threads))

    elif args.protocol in ("recovery", "manipulation"):
        report.add(args.protocol, "human", "within_user", within_user_baseline(test_split, embedder, threads))
        report.add(args.protocol, "human", "cross_user", cross_user_baseline(test_split, embedder, threads))
        pairs = None
        if args.protocol == "manipulation":
            pairs = manipulation_pairs(test_split, embedder, ec.manipulation_max_similarity, args.seed, threads, verbose)
        for synth in methods:
            samples = ec.samples_per_seq if isinstance(synth, DiffusionSynthesizer) else 1
            if args.protocol == "recovery":
                result = recovery_eval(test_split, synth, embedder, samples, args.seed, threads)
            else:
                result = manipulation_eval(test_split, synth, embedder, samples, args.seed, threads=threads, pairs=pairs)
            report.add(args.protocol, synth.name, "cosine", result.stats, result.invalid)
            if verbose:
                print(f"[eval] {args.protocol} {synth.name}: {result.stats}")

    elif args.protocol == "js":
        flat = [g for user in sorted(test_split) for g in test_split[user]]
        reference = [savgol_derivative(g) for g in flat]
        candidates, invalid = {}, {}
        for synth in methods:
            if isinstance(synth, HighPassSynthesizer):
                raws = synth.raw(flat, flat)
                invalid[synth.name] = sum(count_invalid(v) for v in raws)
                candidates[synth.name] = raws
                continue
            result = synth(flat, flat, embedder.embed_gaze(flat), args.seed)
            candidates[synth.name] = [
                denormalize(VelocitySequence(v.T, flat[0].sample_rate, VelocitySpace.NORMALIZED)) for v in result.velocities
            ]
        report.extend(js_eval(reference, candidates, ec.js_samples, ec.js_repeats, args.seed, invalid))

    elif args.protocol == "identify":
        n = sum(len(s) for s in test_split.values())
        human = identify_user(train_split, test_split, embedder, threads)
        report.add("identify", "human", "accuracy", Stats(human, 0.0, n))
        for synth in methods:
            if not isinstance(synth, DiffusionSynthesizer):
                continue
            extra = augment_with_synthesis(train_split, synth, embedder, args.seed, threads)
            acc = identify_user(train_split, test_split, embedder, threads, extra_train=extra)
            report.add("identify", f"human+{synth.name}", "accuracy", Stats(acc, 0.0, n))

    if verbose:
        report.print_table()
    if args.report:
        report.to_csv(args.report)
        print(f"[cli] ✅ Wrote report to {args.report}")
    if args.svg and args.model:
        g = next(iter(test_split.values()))[0]
        result = methods[0]([g], [g], embedder.embed_gaze([g]), args.seed)
        plot_traces(args.svg, g, remove_identity(g, low_rate), result.velocities[0], title=args.protocol)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON AppConfig; explicit flags override it")
    common.add_argument("--seed", type=int, default=None, help=f"Global seed (fallback: ${SEED_ENV}, then config)")
    common.add_argument("--threads", type=int, default=1, help="Worker threads for embedding extraction")
    common.add_argument("--deterministic", action="store_true", help="Force a single worker thread")
    common.add_argument("--quiet", action="store_true", help="Only print outcome lines")

    parser = argparse.ArgumentParser(prog="gaze-diffusion", description="User-specific eye movement synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="Generate a synthetic multi-user corpus")
    p.add_argument("--users", type=int)
    p.add_argument("--seqs", type=int)
    p.add_argument("--len", type=int)
    p.add_argument("--rate", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-embedder", parents=[common], help="Train the user embedder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--shuffle-labels", action="store_true", help="Control run with permuted user labels")
    p.add_argument("--report", help="CSV with held-out within/cross similarity")
    p.set_defaults(func=cmd_train_embedder)

    p = sub.add_parser("train", parents=[common], help="Train the conditional denoiser")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embedder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--objective", choices=["normalized", "raw"])
    p.add_argument("--lambda-id", dest="lambda_id", type=float)
    p.add_argument("--noise-norm", dest="noise_norm", choices=["l1", "l2"])
    p.add_argument("--no-id-guidance", action="store_true", help="Ablation: train on the noise loss only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", parents=[common], help="Inject a target user's identity into a base recording")
    p.add_argument("--model", required=True)
    p.add_argument("--embedder", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--low-rate", dest="low_rate", type=float, help="Sample rate of a low-rate base file")
    p.add_argument("--keep-base-identity", action="store_true", help="Condition on the base without identity removal")
    p.add_argument("--sample-rate", dest="sample_rate", type=float,
                   help="Sample rate of the recordings (needed above 1000 Hz)")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", parents=[common], help="Run an evaluation protocol")
    p.add_argument("--model")
    p.add_argument("--ablation-model", dest="ablation_model")
    p.add_argument("--embedder", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p.add_argument("--report")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline-highpass", parents=[common], help="Butterworth high-pass identity injection")
    p.add_argument("--base", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cutoff", type=float, default=20.0)
    p.add_argument("--low-rate", dest="low_rate", type=float, default=20.0)
    p.add_argument("--sample-rate", dest="sample_rate", type=float,
                   help="Sample rate of the recordings (needed above 1000 Hz)")
    p.set_defaults(func=cmd_baseline_highpass)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        config = AppConfig.from_json(args.config) if args.config else AppConfig()
        args.seed = resolve_seed(args.seed, config)
        if args.deterministic or args.threads < 1:
            args.threads = 1
        return args.func(args, config)
    except NumericalError as e:
        print(f"[cli] ❌ {e}")
        return EXIT_NUMERIC
    except (DataError, ValueError, FileNotFoundError) as e:
        print(f"[cli] ❌ {e}")
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
