#!/usr/bin/env python3
"""
Test: user embedder (conv stack + softmax head).
"""

import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import numpy as np

import embedder as em
from corpus import CorpusConfig, UserSignature, generate_corpus, generate_sequence, split
from errors import DataError
from test_denoiser import finite_difference_check

TINY = em.EmbedderConfig(embedding_dim=8, channels=[4, 4], sequence_length=32)


def _expect(exc, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc:
        return
    raise AssertionError(f"{fn.__name__} did not raise {exc.__name__}")


def _batch(n=3, length=32, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 2, length)).astype(dtype)


def _tiny_corpus(users=3, seqs=4, length=64, seed=3):
    return generate_corpus(CorpusConfig(n_users=users, sequences_per_user=seqs, sequence_length=length, seed=seed),
                           verbose=False).sequences


# tremor amplitude x colour grid over the documented ranges; scanpath parameters are shared
TREMOR_GRID = [(0.2, 0.25), (0.1, 0.25), (0.04, 0.25), (0.2, 2.0), (0.1, 2.0), (0.04, 2.0)]
DISTINCT_CONFIG = em.EmbedderConfig(embedding_dim=16, channels=[8, 16, 16], sequence_length=500, epochs=60,
                                    batch_size=8, learning_rate=5e-3, validation_fraction=0.0)
_trained = {}


def distinct_users_corpus(seqs=12, length=500):
    """Users that differ only in tremor amplitude and colour."""
    sequences = {}
    for user_id, (amplitude, color) in enumerate(TREMOR_GRID):
        sig = UserSignature(user_id, amplitude, color, microsaccade_rate=1.5, microsaccade_amplitude=0.2,
                            saccade_vmax=525.0, saccade_c=6.5, fixation_mu=float(np.log(250.0)),
                            fixation_sigma=0.3)
        sequences[f"u{user_id:03d}"] = [generate_sequence(sig, length, 1000.0, seq_seed=500 + s)
                                        for s in range(seqs)]
    return sequences


def trained_on_distinct_users():
    """(embedder, train split, held-out split), trained once per process."""
    if not _trained:
        train_split, test_split = split(distinct_users_corpus(), 0.5, seed=0)
        params, report = em.train_embedder(train_split, DISTINCT_CONFIG, seed=0, verbose=False)
        _trained.update(embedder=em.Embedder(params, DISTINCT_CONFIG), report=report,
                        train=train_split, test=test_split)
    return _trained["embedder"], _trained["train"], _trained["test"]


def test_unit_norm_and_determinism():
    params = em.init_params(TINY, n_users=3, seed=0)
    x = _batch(dtype=np.float32)
    u = em.embed(params, TINY, x)
    assert u.shape == (3, 8)
    assert np.allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(u, em.embed(params, TINY, x))
    assert np.array_equal(em.embed(params, TINY, x[0]), u[0])


def test_embedding_independent_of_batch():
    params = em.init_params(TINY, n_users=3, seed=6)
    x = _batch(n=5, seed=6, dtype=np.float32)
    whole = em.embed(params, TINY, x)
    assert np.array_equal(em.embed(params, TINY, x[:2]), whole[:2])
    assert np.array_equal(em.embed(params, TINY, x[3]), whole[3])
    assert np.array_equal(em.embed(params, TINY, x[::-1])[::-1], whole)


def test_augment_batch_preserves_magnitudes():
    x = _batch(n=64, length=16, seed=7, dtype=np.float32)
    out = em.augment_batch(x, np.random.default_rng(0))
    assert out.shape == x.shape and out.dtype == x.dtype
    for original, changed in zip(x, out):
        assert np.array_equal(np.sort(np.abs(original).ravel()), np.sort(np.abs(changed).ravel()))
    assert not np.array_equal(out, x)
    assert np.array_equal(out, em.augment_batch(x, np.random.default_rng(0)))
    # reversed time with negated velocity is among the symmetries
    items = {out[i].tobytes() for i in range(len(out))}
    candidates = [-x[i][:, ::-1] for i in range(len(x))] + [-x[i][::-1, ::-1] for i in range(len(x))]
    assert any(np.ascontiguousarray(c).tobytes() in items for c in candidates)


def test_length_mismatch():
    params = em.init_params(TINY, n_users=3, seed=0)
    _expect(DataError, em.embed, params, TINY, _batch(length=40))


def test_cosine_similarity():
    a = np.array([1.0, 2.0, -0.5])
    assert abs(em.cosine_similarity(a, a) - 1.0) < 1e-12
    assert abs(em.cosine_similarity(a, -a) + 1.0) < 1e-12
    assert abs(em.cosine_similarity([1.0, 0.0], [0.0, 3.0])) < 1e-12
    _expect(DataError, em.cosine_similarity, [1.0, 0.0], [1.0, 0.0, 0.0])
    _expect(DataError, em.cosine_similarity, [0.0, 0.0], [1.0, 0.0])


def test_pairwise_similarity_stats():
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    within_mean, within_std, cross_mean, cross_std = em.pairwise_similarity_stats(emb, ["a", "a", "b", "b"])
    assert within_mean == 1.0 and within_std == 0.0
    assert cross_mean == 0.0 and cross_std == 0.0
    _expect(DataError, em.pairwise_similarity_stats, emb[:2], ["a", "a"])


def test_inference_params_drop_head():
    params = em.init_params(TINY, n_users=5, seed=1)
    assert "head.w" in params
    frozen = em.Embedder(params, TINY)
    assert not any(k.startswith("head.") for k in frozen.params)


def test_gradients_match_finite_differences():
    params = em.init_params(TINY, n_users=3, seed=2, dtype=np.float64)
    path = em.inference_params(params)
    x = _batch(n=3, seed=2)
    weights = np.random.default_rng(20).standard_normal((3, TINY.embedding_dim))

    def loss(p):
        return float(np.sum(weights * em.embed_forward(p, TINY, x)[0]))

    def pattern(p):
        return em.relu_pattern(em.embed_forward(p, TINY, x)[1], TINY)

    _, cache = em.embed_forward(path, TINY, x)
    grads, _ = em.embed_backward(path, TINY, cache, weights)
    assert sorted(grads) == sorted(path)
    worst = finite_difference_check(loss, pattern, path, grads, n_checks=200, h=1e-3, seed=2)
    print(f"   embedder max relative error: {worst:.2e}")
    assert worst < 1e-5


def test_input_gradient_matches_finite_differences():
    params = em.inference_params(em.init_params(TINY, n_users=3, seed=4, dtype=np.float64))
    x = _batch(n=2, seed=4)
    weights = np.random.default_rng(40).standard_normal((2, TINY.embedding_dim))
    _, cache = em.embed_forward(params, TINY, x)
    none, dx = em.embed_backward(params, TINY, cache, weights, need_param_grads=False)
    assert none is None and dx.shape == x.shape

    box = {"x": x}

    def loss(p):
        return float(np.sum(weights * em.embed_forward(params, TINY, p["x"])[0]))

    def pattern(p):
        return em.relu_pattern(em.embed_forward(params, TINY, p["x"])[1], TINY)

    worst = finite_difference_check(loss, pattern, box, {"x": dx}, n_checks=50, h=1e-3, seed=4)
    assert worst < 1e-5


def test_train_embedder_reduces_loss():
    sequences = _tiny_corpus()
    config = em.EmbedderConfig(embedding_dim=8, channels=[4, 8], sequence_length=64, epochs=20,
                               batch_size=4, learning_rate=3e-3, augment=False)
    params, report = em.train_embedder(sequences, config, seed=0, verbose=False)
    assert len(report.epoch_losses) == 20
    assert report.epoch_losses[-1] < report.epoch_losses[0]
    assert 0.0 <= report.train_accuracy <= 1.0
    assert -1.0 <= report.cross_mean <= 1.0 and -1.0 <= report.within_mean <= 1.0
    assert not any(k.startswith("head.") for k in params)

    again, _ = em.train_embedder(sequences, config, seed=0, verbose=False)
    assert all(np.array_equal(params[k], again[k]) for k in params)


def test_shuffled_labels_gap_collapses():
    sequences = _tiny_corpus()
    config = em.EmbedderConfig(embedding_dim=8, channels=[4, 8], sequence_length=64, epochs=3, batch_size=4)
    _, report = em.train_embedder(sequences, config, seed=1, shuffle_labels=True, verbose=False)
    assert report.validation_gap is None and len(report.epoch_losses) == 3
    assert abs(report.gap) < 0.05, f"shuffled-label gap {report.gap:.3f}"


def test_validation_fold_keeps_best_epoch():
    sequences = _tiny_corpus(seqs=12)
    config = em.EmbedderConfig(embedding_dim=8, channels=[4, 8], sequence_length=64, epochs=12, batch_size=8,
                               learning_rate=3e-3, validation_fraction=0.25, patience=3)
    params, report = em.train_embedder(sequences, config, seed=2, verbose=False)
    assert report.validation_gap is not None
    assert 0 <= report.best_epoch < len(report.epoch_losses) <= 12
    if len(report.epoch_losses) < 12:
        assert len(report.epoch_losses) - 1 - report.best_epoch == config.patience

    # the kept params reproduce the recorded held-out gap
    _, held = split(sequences, 0.75, seed=2)
    x_val, y_val, _ = em.corpus_arrays(held)
    within, _, cross, _ = em.pairwise_similarity_stats(em.embed(params, config, x_val), y_val)
    assert abs((within - cross) - report.validation_gap) < 1e-9


def test_validation_fold_skipped_for_small_users():
    sequences = _tiny_corpus()
    config = em.EmbedderConfig(embedding_dim=8, channels=[4, 4], sequence_length=64, epochs=2, batch_size=4)
    _, report = em.train_embedder(sequences, config, seed=0, verbose=False)
    assert report.validation_gap is None and report.best_epoch is None
    assert len(report.epoch_losses) == 2


def test_held_out_users_separate():
    embedder, train_split, test_split = trained_on_distinct_users()
    assert _trained["report"].train_accuracy > 0.9
    flat = [g for user in sorted(test_split) for g in test_split[user]]
    labels = [user for user in sorted(test_split) for _ in test_split[user]]
    within, _, cross, _ = em.pairwise_similarity_stats(embedder.embed_gaze(flat), labels)
    print(f"   held-out within {within:.3f}, cross {cross:.3f}")
    assert within - cross >= 0.2


def test_train_embedder_preconditions():
    sequences = _tiny_corpus()
    config = em.EmbedderConfig(sequence_length=64, epochs=1)
    _expect(DataError, em.train_embedder, {"u000": sequences["u000"]}, config, 0, False, False)
    short = {k: v[:1] for k, v in sequences.items()}
    _expect(DataError, em.train_embedder, short, config, 0, False, False)


def test_embed_gaze_chunks():
    sequences = _tiny_corpus()
    config = em.EmbedderConfig(embedding_dim=8, channels=[4, 4], sequence_length=64)
    frozen = em.Embedder(em.init_params(config, 3, seed=5), config)
    flat = [g for user in sorted(sequences) for g in sequences[user]]
    whole = frozen.embed_gaze(flat, chunk=64)
    pieces = frozen.embed_gaze(flat, chunk=5)
    assert whole.shape == (len(flat), 8)
    assert np.allclose(whole, pieces, atol=1e-6)
    assert frozen.embed_gaze([]).shape == (0, 8)


TESTS = [
    test_unit_norm_and_determinism,
    test_embedding_independent_of_batch,
    test_augment_batch_preserves_magnitudes,
    test_length_mismatch,
    test_cosine_similarity,
    test_pairwise_similarity_stats,
    test_inference_params_drop_head,
    test_gradients_match_finite_differences,
    test_input_gradient_matches_finite_differences,
    test_train_embedder_reduces_loss,
    test_shuffled_labels_gap_collapses,
    test_validation_fold_keeps_best_epoch,
    test_validation_fold_skipped_for_small_users,
    test_held_out_users_separate,
    test_train_embedder_preconditions,
    test_embed_gaze_chunks,
]


def main():
    print("\n" + "=" * 60)
    print("🧬 EMBEDDER TESTS")
    print("=" * 60)
    results = {}
    for test in TESTS:
        try:
            test()
            results[test.__name__] = True
        except AssertionError as e:
            print(f"❌ {test.__name__}: {e}")
            results[test.__name__] = False
    for name, ok in results.items():
        print(f"{'✅' if ok else '❌'} {name:<45} {'PASSED' if ok else 'FAILED'}")
    print("=" * 60)
    print("🎉 ALL TESTS PASSED!" if all(results.values()) else "❌ SOME TESTS FAILED")
    return 0 if all(results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
