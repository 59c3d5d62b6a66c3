#!/usr/bin/env python3
"""
gaze-diffusion Demo
Runs the whole desk experiment in one process: corpus -> embedder ->
guided and unguided denoisers -> identity removal, recovery, manipulation,
velocity realism and identification.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import argparse
import time

from corpus import CorpusConfig, generate_corpus, split
from denoiser import Denoiser, DenoiserConfig
from embedder import Embedder, EmbedderConfig, train_embedder
from evaluation import (
    DiffusionSynthesizer,
    EvalReport,
    HighPassSynthesizer,
    RemovedInputSynthesizer,
    augment_with_synthesis,
    cross_user_baseline,
    identify_user,
    identity_removal_eval,
    js_eval,
    manipulation_eval,
    manipulation_pairs,
    recovery_eval,
    within_user_baseline,
    Stats,
)
from gaze_signal import VelocitySequence, VelocitySpace, denormalize, savgol_derivative
from training import TrainConfig, train


def main():
    parser = argparse.ArgumentParser(description="gaze-diffusion desk experiment")
    parser.add_argument("--steps", type=int, default=5000, help="Denoiser training steps per model")
    parser.add_argument("--budget-min", dest="budget_min", type=float, default=60.0,
                        help="Wall-clock budget for the whole run, in minutes")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--quick", action="store_true", help="Tiny run to check the plumbing")
    parser.add_argument("--report", default="demo_report.csv")
    args = parser.parse_args()

    corpus_config = CorpusConfig(seed=args.seed)
    embedder_config = EmbedderConfig()
    denoiser_config = DenoiserConfig()
    steps = args.steps
    js_samples = 100_000
    if args.quick:
        corpus_config = CorpusConfig(n_users=4, sequences_per_user=8, sequence_length=400, seed=args.seed)
        embedder_config = EmbedderConfig(sequence_length=400, epochs=5)
        denoiser_config = DenoiserConfig(n_layers=3, residual_channels=8, sequence_length=400)
        steps = min(steps, 20)
        js_samples = 5_000

    print("🚀 gaze-diffusion Demo")
    print("=" * 50)
    start = time.time()

    print("\n1. Generating corpus...")
    corpus = generate_corpus(corpus_config)
    train_split, test_split = split(corpus.sequences, 0.5, args.seed)

    print("\n2. Training user embedder...")
    params, emb_report = train_embedder(train_split, embedder_config, args.seed)
    embedder = Embedder(params, embedder_config)

    report = EvalReport()
    within = within_user_baseline(test_split, embedder)
    cross = cross_user_baseline(test_split, embedder)
    removal = identity_removal_eval(test_split, embedder)
    report.add("baseline", "human", "within_user", within)
    report.add("baseline", "human", "cross_user", cross)
    report.add("identity-removal", "removed", "cosine", removal)
    print(f"   within-user {within}, cross-user {cross}, identity removed {removal}")
    print(f"   embedder ready after {(time.time() - start) / 60:.1f} min")
    if removal.mean < 0.5 * within.mean:
        print("✅ Identity removal strips most of the user signal")
    else:
        print("⚠️  Identity removal leaves a strong user signal")

    flat = [g for user in sorted(train_split) for g in train_split[user]]
    synthesizers = {}
    for name, guided in (("diffusion", True), ("diffusion_noid", False)):
        print(f"\n3. Training denoiser '{name}' ({steps} steps)...")
        tc = TrainConfig(steps=steps, seed=args.seed, sequence_length=corpus_config.sequence_length,
                         use_id_guidance=guided)
        result = train(flat, embedder, denoiser_config, tc)
        synthesizers[name] = DiffusionSynthesizer(Denoiser(result.params, denoiser_config), tc.schedule(),
                                                  tc.low_rate, name=name)
    synthesizers["highpass"] = HighPassSynthesizer()
    synthesizers["removed"] = RemovedInputSynthesizer()

    print("\n4. Recovery and manipulation...")
    pairs = manipulation_pairs(test_split, embedder, seed=args.seed)
    for name, synth in synthesizers.items():
        draws = 5 if name.startswith("diffusion") else 1
        rec = recovery_eval(test_split, synth, embedder, draws, args.seed)
        man = manipulation_eval(test_split, synth, embedder, draws, args.seed, pairs=pairs)
        report.add("recovery", name, "cosine", rec.stats, rec.invalid)
        report.add("manipulation", name, "cosine", man.stats, man.invalid)
        print(f"   {name:<15} recovery {rec.stats}   manipulation {man.stats}")

    print("\n5. Velocity realism (JS divergence)...")
    test_flat = [g for user in sorted(test_split) for g in test_split[user]]
    reference = [savgol_derivative(g) for g in test_flat]
    target_emb = embedder.embed_gaze(test_flat)
    candidates = {"highpass": synthesizers["highpass"].raw(test_flat, test_flat)}
    for name in ("diffusion", "diffusion_noid"):
        out = synthesizers[name](test_flat, test_flat, target_emb, args.seed)
        candidates[name] = [denormalize(VelocitySequence(v.T, test_flat[0].sample_rate, VelocitySpace.NORMALIZED))
                            for v in out.velocities]
    report.extend(js_eval(reference, candidates, js_samples, 10, args.seed))

    print("\n6. Identification with synthetic augmentation...")
    n = len(test_flat)
    human = identify_user(train_split, test_split, embedder)
    extra = augment_with_synthesis(train_split, synthesizers["diffusion"], embedder, args.seed)
    augmented = identify_user(train_split, test_split, embedder, extra_train=extra)
    report.add("identify", "human", "accuracy", Stats(human, 0.0, n))
    report.add("identify", "human+diffusion", "accuracy", Stats(augmented, 0.0, n))

    print("\n" + "=" * 50)
    report.print_table()
    report.to_csv(args.report)

    guided = report.get("recovery", "diffusion", "cosine").mean
    unguided = report.get("recovery", "diffusion_noid", "cosine").mean
    manip = report.get("manipulation", "diffusion", "cosine").mean
    js_model = report.get("js", "diffusion", "js_all").mean
    js_hp = report.get("js", "highpass", "js_all").mean
    checks = [
        ("recovery beats cross-user by 0.15", guided >= cross.mean + 0.15),
        ("identity guidance helps recovery", guided > unguided),
        ("manipulation beats cross-user by 0.15", manip >= cross.mean + 0.15),
        ("model JS below high-pass JS", js_model < js_hp),
        ("augmentation within 2 points", augmented >= human - 0.02),
        ("held-out embedder gap at least 0.2", within.mean - cross.mean >= 0.2),
        ("identity removal below half of within-user", removal.mean < 0.5 * within.mean),
    ]
    minutes = (time.time() - start) / 60
    checks.append((f"finished in {minutes:.1f} of {args.budget_min:g} min", minutes <= args.budget_min))
    print()
    for label, ok in checks:
        print(f"{'✅' if ok else '❌'} {label}")

    print(f"\n🎉 Demo Complete! Report written to {args.report}")
    print(f"Total time: {minutes * 60:.1f}s")


if __name__ == "__main__":
    main()
