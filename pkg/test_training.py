#!/usr/bin/env python3
"""
Test: training objective, Adam and the training loop.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import tempfile

import numpy as np
import pandas as pd

import denoiser as dn
import embedder as em
import training as tr
from checkpoint_utils import params_checksum
from corpus import CorpusConfig, generate_corpus
from diffusion import ConditioningBundle, estimate_x0, linear_schedule, q_sample
from errors import DataError, NumericalError
from test_denoiser import finite_difference_check

LENGTH = 1000


def _expect(exc, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc:
        return
    raise AssertionError(f"{fn.__name__} did not raise {exc.__name__}")


class FirstSampleEmbedder:
    """Embedding = the first sample of each channel; enough to pin loss_id values."""

    def embed(self, v):
        v = np.asarray(v, dtype=np.float64)
        return v[..., 0]


def _sequences(users=2, seqs=4, length=LENGTH, seed=11):
    corpus = generate_corpus(CorpusConfig(n_users=users, sequences_per_user=seqs, sequence_length=length, seed=seed),
                             verbose=False)
    return [g for user in corpus.users for g in corpus.sequences[user]]


def _embedder(length=LENGTH, dim=8, dtype=np.float32):
    config = em.EmbedderConfig(embedding_dim=dim, channels=[4, 4], sequence_length=length)
    return em.Embedder(em.init_params(config, n_users=2, seed=0, dtype=dtype), config)


def _denoiser_config(length=LENGTH, dim=8):
    return dn.DenoiserConfig(n_layers=2, residual_channels=4, sequence_length=length, embedding_dim=dim)


def test_loss_noise_examples():
    eps = np.random.default_rng(0).standard_normal((2, 2, 50))
    assert tr.loss_noise(eps, eps) == 0.0
    assert tr.loss_noise(np.zeros((2, 100)), np.ones((2, 100))) == 1.0
    rng = np.random.default_rng(1)
    for _ in range(1000):
        assert tr.loss_noise(rng.standard_normal(10), rng.standard_normal(10)) >= 0.0
    assert tr.loss_noise(np.zeros(4), np.full(4, 2.0), norm="l2") == 4.0
    _expect(DataError, tr.loss_noise, np.zeros(3), np.zeros(4))


def test_loss_id_examples():
    e = FirstSampleEmbedder()
    x0 = np.array([[[1.0], [0.0]]])
    assert abs(tr.loss_id(e, x0, x0)) < 1e-12
    assert abs(tr.loss_id(e, x0, np.array([[[0.0], [1.0]]])) - 1.0) < 1e-12
    assert abs(tr.loss_id(e, x0, -x0) - 2.0) < 1e-12
    # positive rescaling of either embedding leaves the loss unchanged
    x_hat = np.array([[[0.3], [0.8]]])
    assert abs(tr.loss_id(e, x0, x_hat) - tr.loss_id(e, 5.0 * x0, 0.2 * x_hat)) < 1e-12


def test_combined_loss_normalized():
    combo = tr.combined_loss(0.37, 0.81)
    assert combo.value == 1.5
    assert combo.noise_weight == 1.0 / 0.37 and combo.id_weight == 0.5 / 0.81

    # the weight applied to a term's raw gradient is linear in that gradient
    g = np.array([0.2, -0.4])
    assert np.array_equal(combo.noise_weight * (2 * g), 2 * (combo.noise_weight * g))

    # a zero term is added un-normalized
    degenerate = tr.combined_loss(0.5, 0.0)
    assert degenerate.value == 1.0 and degenerate.id_weight == 0.5
    assert tr.combined_loss(0.5, None).id_weight == 0.0
    _expect(NumericalError, tr.combined_loss, float("nan"), 0.2)


def test_combined_loss_raw():
    combo = tr.combined_loss(0.4, 0.6, objective="raw", lambda_id=0.25)
    assert abs(combo.value - 0.55) < 1e-12
    assert combo.noise_weight == 1.0 and combo.id_weight == 0.25


def test_adam_zero_gradient():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = tr.AdamState()
    tr.adam_step(params, {"w": np.zeros(3)}, state, lr=0.1)
    assert np.array_equal(params["w"], [1.0, -2.0, 3.0])
    assert state.step == 1


def test_adam_weight_decay_is_decoupled():
    params = {"w": np.array([1.0, -2.0, 4.0])}
    tr.adam_step(params, {"w": np.zeros(3)}, tr.AdamState(), lr=0.1, weight_decay=0.5)
    assert np.allclose(params["w"], [0.95, -1.9, 3.8], atol=1e-12)


def test_adam_first_step_bound():
    rng = np.random.default_rng(2)
    start = rng.standard_normal(100)
    params = {"w": start.copy()}
    grad = rng.standard_normal(100)
    lr = 1e-3
    tr.adam_step(params, {"w": grad}, tr.AdamState(), lr)
    delta = params["w"] - start
    assert np.all(np.abs(delta) <= lr * (1 + 1e-7))
    assert np.all(np.sign(delta) == -np.sign(grad))

    again = {"w": start.copy()}
    tr.adam_step(again, {"w": grad}, tr.AdamState(), lr)
    assert np.array_equal(again["w"], params["w"])
    _expect(NumericalError, tr.adam_step, params, {"w": np.full(100, np.inf)}, tr.AdamState(), lr)


def test_zero_head_noise_loss():
    sequences = _sequences()
    embedder = _embedder()
    config = _denoiser_config()
    params = dn.init_params(config, seed=0)
    losses, grads = tr.train_step(sequences, params, config, embedder, linear_schedule(),
                                  np.random.default_rng(0))
    assert abs(losses.loss_noise - np.sqrt(2 / np.pi)) < 0.02
    assert losses.combined == 1.5
    assert sorted(grads) == sorted(params)


def test_train_step_reproducible():
    sequences = _sequences()
    embedder = _embedder()
    config = _denoiser_config()
    params = dn.init_params(config, seed=1)
    batch = tr.prepare_batch(sequences, embedder)
    sched = linear_schedule()
    a, ga = tr.train_step(batch, params, config, embedder, sched, np.random.default_rng(5))
    b, gb = tr.train_step(batch, params, config, embedder, sched, np.random.default_rng(5))
    assert a == b
    assert all(np.array_equal(ga[k], gb[k]) for k in ga)


def test_identity_guidance_reaches_user_projections():
    sequences = _sequences()
    embedder = _embedder()
    config = _denoiser_config()
    params = dn.init_params(config, seed=2)
    rng = np.random.default_rng(3)
    params["head2.w"] = rng.uniform(-0.5, 0.5, params["head2.w"].shape).astype(np.float32)
    batch = tr.prepare_batch(sequences, embedder)
    sched = linear_schedule()

    guided = tr.TrainConfig(sequence_length=LENGTH, objective="raw", lambda_id=1.0)
    plain = tr.TrainConfig(sequence_length=LENGTH, objective="raw", use_id_guidance=False)
    _, g_on = tr.train_step(batch, params, config, embedder, sched, np.random.default_rng(4), guided)
    losses, g_off = tr.train_step(batch, params, config, embedder, sched, np.random.default_rng(4), plain)
    for i in range(config.n_layers):
        assert np.any(g_on[f"layers.{i}.user_proj.w"] != 0.0)
    assert not np.array_equal(g_on["layers.0.user_proj.w"], g_off["layers.0.user_proj.w"])
    # loss_id is still reported without guidance
    assert 0.0 <= losses.loss_id <= 2.0


def test_train_step_gradient_matches_finite_differences():
    length = 64
    sequences = _sequences(length=length)
    embedder = _embedder(length=length, dtype=np.float64)
    config = _denoiser_config(length=length)
    params = dn.init_params(config, seed=3, dtype=np.float64)
    rng = np.random.default_rng(30)
    params["head2.w"] = rng.uniform(-0.5, 0.5, params["head2.w"].shape)
    params["head2.b"] = rng.uniform(-0.5, 0.5, params["head2.b"].shape)
    prepared = tr.prepare_batch(sequences[:3], embedder)
    batch = tr.TrainingBatch(prepared.x0.astype(np.float64), prepared.x0_co.astype(np.float64),
                             embedder.embed(prepared.x0.astype(np.float64)))
    sched = linear_schedule()
    tc = tr.TrainConfig(sequence_length=length, objective="raw", lambda_id=0.7, noise_norm="l2")

    def loss(p):
        return tr.train_step(batch, p, config, embedder, sched, np.random.default_rng(31), tc)[0].combined

    def pattern(p):
        # same draws train_step makes from a fresh rng
        rng = np.random.default_rng(31)
        t = rng.integers(1, sched.T + 1, size=len(batch))
        eps = rng.standard_normal(batch.x0.shape)
        x_t = q_sample(batch.x0, t, eps, sched)
        eps_hat, cache = dn.forward(p, config, x_t, t, ConditioningBundle(batch.x0_co, batch.embedding),
                                    return_cache=True)
        _, emb_cache = em.embed_forward(embedder.params, embedder.config, estimate_x0(x_t, t, eps_hat, sched))
        return np.concatenate([dn.relu_pattern(cache), em.relu_pattern(emb_cache, embedder.config)])

    _, grads = tr.train_step(batch, params, config, embedder, sched, np.random.default_rng(31), tc)
    worst = finite_difference_check(loss, pattern, params, grads, n_checks=40, h=1e-3, seed=32)
    print(f"   train_step max relative error: {worst:.2e}")
    assert worst < 1e-5


def test_train_writes_checkpoint_and_metrics():
    length = 64
    sequences = _sequences(length=length)
    embedder = _embedder(length=length)
    config = _denoiser_config(length=length)
    tc = tr.TrainConfig(steps=3, batch_size=2, sequence_length=length, log_every=1, seed=4)
    before = params_checksum(embedder.params)

    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "model")
        result = tr.train(sequences, embedder, config, tc, out_path=out, verbose=False)
        assert params_checksum(embedder.params) == before
        assert result.history_steps == [1, 2, 3]

        metrics = pd.read_csv(os.path.join(out, "metrics.csv"))
        assert list(metrics.columns) == ["step", "loss_noise", "loss_id", "combined"]
        assert metrics["step"].tolist() == [1, 2, 3]
        assert np.allclose(metrics["loss_noise"], [h.loss_noise for h in result.history], atol=5e-7)

        params, loaded_config, loaded_tc, sched = tr.load_denoiser(out)
        assert loaded_config == config and loaded_tc == tc and sched.T == 50
        rng = np.random.default_rng(0)
        x_t = rng.standard_normal((1, 2, length)).astype(np.float32)
        cond = ConditioningBundle(rng.uniform(-1, 1, (1, 2, length)), np.ones((1, 8)) / np.sqrt(8))
        assert np.array_equal(dn.forward(params, config, x_t, 9, cond), dn.forward(result.params, config, x_t, 9, cond))

        _expect(DataError, tr.load_embedder, out)

        again = tr.train(sequences, embedder, config, tc, verbose=False)
        assert all(np.array_equal(again.params[k], result.params[k]) for k in result.params)


def test_training_curve_halves_noise_loss():
    length = 64
    sequences = _sequences(length=length)
    embedder = _embedder(length=length)
    config = dn.DenoiserConfig(n_layers=2, residual_channels=8, sequence_length=length, embedding_dim=8)
    tc = tr.TrainConfig(steps=600, batch_size=8, learning_rate=2e-3, sequence_length=length, log_every=10,
                        seed=5, use_id_guidance=False)
    result = tr.train(sequences, embedder, config, tc, verbose=False)
    initial = result.history[0].loss_noise
    late = float(np.mean([h.loss_noise for h in result.history[-10:]]))
    print(f"   loss_noise {initial:.3f} -> {late:.3f}")
    assert late < 0.5 * initial


def test_embedder_checkpoint_round_trip():
    embedder = _embedder(length=64)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "embedder")
        tr.save_embedder(path, embedder.params, embedder.config)
        loaded = tr.load_embedder(path)
        assert loaded.config == embedder.config
        assert params_checksum(loaded.params) == params_checksum(embedder.params)
        _expect(DataError, tr.load_denoiser, path)


def test_train_rejects_mismatched_lengths():
    embedder = _embedder(length=64)
    config = _denoiser_config(length=64)
    tc = tr.TrainConfig(steps=1, sequence_length=64)
    _expect(DataError, tr.train, _sequences(length=80), embedder, config, tc, None, False)
    _expect(DataError, tr.TrainConfig, objective="other")


TESTS = [
    test_loss_noise_examples,
    test_loss_id_examples,
    test_combined_loss_normalized,
    test_combined_loss_raw,
    test_adam_zero_gradient,
    test_adam_weight_decay_is_decoupled,
    test_adam_first_step_bound,
    test_zero_head_noise_loss,
    test_train_step_reproducible,
    test_identity_guidance_reaches_user_projections,
    test_train_step_gradient_matches_finite_differences,
    test_train_writes_checkpoint_and_metrics,
    test_training_curve_halves_noise_loss,
    test_embedder_checkpoint_round_trip,
    test_train_rejects_mismatched_lengths,
]


def main():
    print("\n" + "=" * 60)
    print("🏋️  TRAINING TESTS")
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
