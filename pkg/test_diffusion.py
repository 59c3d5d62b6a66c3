#!/usr/bin/env python3
"""
Test: noise schedule, forward process and the reverse sampling chain.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

from fractions import Fraction

import numpy as np

from diffusion import (
    ConditioningBundle,
    NoiseSchedule,
    TIMESTEP_ENCODING_DIM,
    estimate_x0,
    linear_schedule,
    posterior_sigma,
    q_sample,
    reverse_step,
    sample,
    timestep_encoding,
)
import denoiser as dn
from errors import DataError, NumericalError


def _expect(exc, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc:
        return
    raise AssertionError(f"{fn.__name__} did not raise {exc.__name__}")


def test_linear_schedule_endpoints():
    sched = linear_schedule(50, 1e-4, 0.05)
    assert sched.T == 50
    assert sched.beta[0] == 1e-4 and sched.beta[-1] == 0.05
    assert abs(sched.alpha_bar[0] - 0.9999) < 1e-15
    assert np.all(np.diff(sched.beta) > 0)
    assert np.all(np.diff(sched.alpha_bar) < 0)

    exact = Fraction(1)
    for beta in sched.beta:
        exact *= 1 - Fraction(float(beta))
    assert abs(sched.alpha_bar[-1] - float(exact)) <= 1e-12 * float(exact)


def test_schedule_variance_preservation():
    sched = linear_schedule()
    total = np.sqrt(sched.alpha_bar) ** 2 + np.sqrt(1.0 - sched.alpha_bar) ** 2
    assert np.max(np.abs(total - 1.0)) < 1e-12


def test_invalid_schedules():
    _expect(ValueError, linear_schedule, 1)
    _expect(ValueError, linear_schedule, 50, 0.0, 0.05)
    _expect(ValueError, linear_schedule, 50, 0.1, 0.05)
    _expect(ValueError, linear_schedule, 50, 1e-4, 1.0)


def test_schedule_dict_round_trip():
    sched = linear_schedule(20, 1e-3, 0.02)
    again = NoiseSchedule.from_dict(sched.to_dict())
    assert np.array_equal(again.alpha_bar, sched.alpha_bar)


def test_q_sample_limits():
    sched = linear_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (2, 64))
    eps = rng.standard_normal((2, 64))
    t = 17
    ab = sched.alpha_bar[t - 1]
    assert np.allclose(q_sample(x0, t, np.zeros_like(x0), sched), np.sqrt(ab) * x0)
    assert np.allclose(q_sample(np.zeros_like(x0), t, eps, sched), np.sqrt(1 - ab) * eps)

    noiseless = NoiseSchedule(np.zeros(3), np.ones(3), np.ones(3), 0.0, 0.0)
    assert np.array_equal(q_sample(x0, 2, eps, noiseless), x0)

    _expect(DataError, q_sample, x0, 0, eps, sched)
    _expect(DataError, q_sample, x0, 51, eps, sched)


def test_estimate_x0_inverts_q_sample():
    sched = linear_schedule()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        x0 = rng.uniform(-1, 1, (2, 32))
        eps = rng.standard_normal((2, 32))
        t = int(rng.integers(1, sched.T + 1))
        back = estimate_x0(q_sample(x0, t, eps, sched), t, eps, sched)
        worst = max(worst, np.max(np.abs(back - x0)) / np.max(np.abs(x0)))
    assert worst < 1e-6

    # batched step indices
    x0 = rng.uniform(-1, 1, (4, 2, 16))
    eps = rng.standard_normal(x0.shape)
    t = np.array([1, 10, 30, 50])
    assert np.allclose(estimate_x0(q_sample(x0, t, eps, sched), t, eps, sched), x0, atol=1e-9)


def test_estimate_x0_constant():
    sched = linear_schedule()
    t = 25
    c = np.full((2, 10), 0.3)
    out = estimate_x0(np.sqrt(sched.alpha_bar[t - 1]) * c, t, np.zeros_like(c), sched)
    assert np.allclose(out, 0.3, atol=1e-12)


def test_reverse_step_rules():
    sched = linear_schedule()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 16))
    t = 20
    out = reverse_step(x, t, np.zeros_like(x), sched, np.zeros_like(x))
    assert np.allclose(out, x / np.sqrt(sched.alpha[t - 1]))

    eps_hat = rng.standard_normal((2, 16))
    a = reverse_step(x, 1, eps_hat, sched, rng.standard_normal((2, 16)))
    b = reverse_step(x, 1, eps_hat, sched, rng.standard_normal((2, 16)))
    assert np.array_equal(a, b)

    assert posterior_sigma(sched, 1) == np.sqrt(sched.beta[0])
    assert 0 < posterior_sigma(sched, 50) < np.sqrt(sched.beta[-1])


def test_closed_loop_oracle_denoise():
    sched = linear_schedule()
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-1, 1, (2, 64))
    x = q_sample(x0, sched.T, rng.standard_normal(x0.shape), sched)
    for t in range(sched.T, 0, -1):
        ab = sched.alpha_bar[t - 1]
        eps_true = (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
        x = reverse_step(x, t, eps_true, sched, rng.standard_normal(x0.shape))
    assert np.max(np.abs(x - x0)) < 1e-3


def _shrink(x_t, t, cond):
    return 0.1 * x_t + 0.01 * cond.observation


def test_sample_contract_and_determinism():
    sched = linear_schedule()
    rng = np.random.default_rng(4)
    cond = ConditioningBundle(rng.uniform(-1, 1, (3, 2, 40)), rng.standard_normal((3, 8)))
    out = sample(cond, _shrink, sched, rng_seed=11)
    assert out.shape == (3, 2, 40)
    assert np.all(np.isfinite(out))
    assert out.min() >= -1.0 and out.max() <= 1.0
    assert np.array_equal(out, sample(cond, _shrink, sched, rng_seed=11))
    assert not np.array_equal(out, sample(cond, _shrink, sched, rng_seed=12))


def test_sample_independent_of_chunking():
    sched = linear_schedule(10)
    rng = np.random.default_rng(5)
    obs = rng.uniform(-1, 1, (4, 2, 20))
    emb = rng.standard_normal((4, 8))
    full = sample(ConditioningBundle(obs, emb), _shrink, sched, 3)
    tail = sample(ConditioningBundle(obs[2:], emb[2:]), _shrink, sched, 3, offset=2)
    assert np.array_equal(full[2:], tail)


def test_sample_with_denoiser_independent_of_chunking():
    config = dn.DenoiserConfig(n_layers=2, residual_channels=4, sequence_length=24, embedding_dim=8)
    params = dn.init_params(config, seed=1)
    rng = np.random.default_rng(6)
    for name, value in params.items():
        if not np.any(value):
            params[name] = rng.uniform(-0.3, 0.3, value.shape).astype(value.dtype)
    denoiser = dn.Denoiser(params, config)
    obs = rng.uniform(-1, 1, (5, 2, 24))
    emb = rng.standard_normal((5, 8))
    sched = linear_schedule(8)
    full = sample(ConditioningBundle(obs, emb), denoiser, sched, 9)
    head = sample(ConditioningBundle(obs[:2], emb[:2]), denoiser, sched, 9)
    tail = sample(ConditioningBundle(obs[2:], emb[2:]), denoiser, sched, 9, offset=2)
    assert np.array_equal(full, np.concatenate([head, tail]))


def test_sample_flags_non_finite():
    sched = linear_schedule(5)
    cond = ConditioningBundle(np.zeros((2, 10)), np.ones(4))
    _expect(NumericalError, sample, cond, lambda x, t, c: np.full_like(x, np.inf), sched, 0)
    _expect(DataError, sample, cond, lambda x, t, c: x[:, :1], sched, 0)


def test_timestep_encoding():
    enc = timestep_encoding(0)
    assert enc.shape == (TIMESTEP_ENCODING_DIM,) == (128,)
    assert np.all(enc[:64] == 0.0) and np.all(enc[64:] == 1.0)
    assert abs(timestep_encoding(1)[63] - np.sin(1e4)) < 1e-9
    assert timestep_encoding(np.array([1, 2, 3])).shape == (3, 128)
    _expect(ValueError, timestep_encoding, -1)


TESTS = [
    test_linear_schedule_endpoints,
    test_schedule_variance_preservation,
    test_invalid_schedules,
    test_schedule_dict_round_trip,
    test_q_sample_limits,
    test_estimate_x0_inverts_q_sample,
    test_estimate_x0_constant,
    test_reverse_step_rules,
    test_closed_loop_oracle_denoise,
    test_sample_contract_and_determinism,
    test_sample_independent_of_chunking,
    test_sample_with_denoiser_independent_of_chunking,
    test_sample_flags_non_finite,
    test_timestep_encoding,
]


def main():
    print("\n" + "=" * 60)
    print("🌫️  DIFFUSION TESTS")
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
