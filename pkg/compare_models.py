#!/usr/bin/env python3
"""
Compare a guided and an unguided denoiser checkpoint on recovery and manipulation.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import argparse
import time

from corpus import load_corpus, split
from denoiser import Denoiser, param_count, receptive_field
from evaluation import DiffusionSynthesizer, cross_user_baseline, manipulation_eval, manipulation_pairs, recovery_eval
from training import load_denoiser, load_embedder


def benchmark_model(path: str, test_split, embedder, pairs, samples: int, seed: int):
    """Recovery and manipulation similarity for one checkpoint."""
    print(f"\n{'='*60}")
    print(f"Testing: {path}")
    print(f"{'='*60}")

    start_load = time.time()
    params, config, train_config, sched = load_denoiser(path)
    load_time = time.time() - start_load
    synth = DiffusionSynthesizer(Denoiser(params, config), sched, train_config.low_rate)

    start_rec = time.time()
    recovery = recovery_eval(test_split, synth, embedder, samples, seed)
    recovery_time = time.time() - start_rec

    start_man = time.time()
    manipulation = manipulation_eval(test_split, synth, embedder, samples, seed, pairs=pairs)
    manipulation_time = time.time() - start_man

    return {
        "model": path,
        "guided": train_config.use_id_guidance,
        "params": param_count(params),
        "receptive_field": receptive_field(config),
        "steps": train_config.steps,
        "load_time": load_time,
        "recovery": recovery.stats,
        "manipulation": manipulation.stats,
        "recovery_time": recovery_time,
        "manipulation_time": manipulation_time,
    }


def main():
    parser = argparse.ArgumentParser(description="Compare two denoiser checkpoints")
    parser.add_argument("--guided", required=True, help="Checkpoint trained with identity guidance")
    parser.add_argument("--unguided", required=True, help="Checkpoint trained on the noise loss only")
    parser.add_argument("--embedder", required=True)
    parser.add_argument("--corpus", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--samples", type=int, default=5)
    args = parser.parse_args()

    print("🔬 gaze-diffusion Model Comparison")
    print("=" * 60)

    embedder = load_embedder(args.embedder)
    _, test_split = split(load_corpus(args.corpus).sequences, 0.5, args.seed)
    cross = cross_user_baseline(test_split, embedder)
    pairs = manipulation_pairs(test_split, embedder, seed=args.seed)

    results = []
    for path in (args.guided, args.unguided):
        try:
            results.append(benchmark_model(path, test_split, embedder, pairs, args.samples, args.seed))
        except Exception as e:
            print(f"\n❌ Error testing {path}: {e}")

    print("\n" + "=" * 60)
    print("📊 COMPARISON RESULTS")
    print("=" * 60)

    if len(results) != 2:
        print("Need both checkpoints to compare")
        return

    print(f"\n{'Metric':<25} {'guided':<20} {'unguided':<20}")
    print("-" * 65)
    rows = [
        ("Identity guidance", lambda r: "on" if r["guided"] else "off"),
        ("Parameters", lambda r: str(r["params"])),
        ("Receptive field", lambda r: str(r["receptive_field"])),
        ("Training steps", lambda r: str(r["steps"])),
        ("Recovery", lambda r: str(r["recovery"])),
        ("Manipulation", lambda r: str(r["manipulation"])),
        ("Recovery time (s)", lambda r: f"{r['recovery_time']:.1f}"),
        ("Manipulation time (s)", lambda r: f"{r['manipulation_time']:.1f}"),
    ]
    for label, fmt in rows:
        print(f"{label:<25} {fmt(results[0]):<20} {fmt(results[1]):<20}")
    print(f"{'Cross-user baseline':<25} {str(cross):<20}")

    print("\n" + "=" * 60)
    print("🏆 ANALYSIS")
    print("=" * 60)
    guided, unguided = results
    gain = guided["recovery"].mean - unguided["recovery"].mean
    print(f"\n{'✅' if gain > 0 else '❌'} Identity guidance recovery gain: {gain:+.3f}")
    margin = guided["manipulation"].mean - cross.mean
    print(f"{'✅' if margin >= 0.15 else '❌'} Manipulation over cross-user: {margin:+.3f}")


if __name__ == "__main__":
    main()
