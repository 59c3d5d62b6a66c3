"""
Noise schedule and the forward/reverse diffusion machinery.

Step indices are 1-based (t = 1..T) everywhere in the public API;
schedule arrays are 0-based and indexed with t - 1.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Union

import numpy as np

from errors import DataError, NumericalError


TIMESTEP_FREQUENCIES = 64
TIMESTEP_ENCODING_DIM = 2 * TIMESTEP_FREQUENCIES

StepIndex = Union[int, np.ndarray]


@dataclass
class NoiseSchedule:
    """Per-step beta, alpha = 1 - beta and alpha_bar = cumulative product of alpha."""
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def to_dict(self) -> Dict[str, float]:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "NoiseSchedule":
        return linear_schedule(int(data["T"]), float(data["beta_start"]), float(data["beta_end"]))


@dataclass
class ConditioningBundle:
    """Observation x0^co (normalized velocities) plus the target user embedding."""
    observation: np.ndarray  # (2, L) or (N, 2, L)
    user_embedding: np.ndarray  # (D,) or (N, D)

    def batched(self) -> "ConditioningBundle":
        obs = np.asarray(self.observation)
        emb = np.asarray(self.user_embedding)
        if obs.ndim == 2:
            obs = obs[None]
        if emb.ndim == 1:
            emb = emb[None]
        if obs.ndim != 3 or obs.shape[1] != 2:
            raise DataError(f"Observation must be (N, 2, L), got {obs.shape}")
        if emb.shape[0] != obs.shape[0]:
            raise DataError(f"{obs.shape[0]} observations but {emb.shape[0]} embeddings")
        return ConditioningBundle(obs, emb)

    def __len__(self) -> int:
        return self.batched().observation.shape[0]


# denoiser(x_t (N,2,L), t (N,), cond) -> eps_hat (N,2,L)
DenoiserFn = Callable[[np.ndarray, np.ndarray, ConditioningBundle], np.ndarray]


def linear_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.05) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"Need at least 2 diffusion steps, got T={T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"Invalid beta range [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta, alpha, alpha_bar, float(beta_start), float(beta_end))


def _check_steps(t: StepIndex, sched: NoiseSchedule) -> np.ndarray:
    steps = np.asarray(t, dtype=np.int64)
    if steps.size and (steps.min() < 1 or steps.max() > sched.T):
        raise DataError(f"Step index out of range [1, {sched.T}]: {t}")
    return steps


def _coef(table: np.ndarray, t: StepIndex, like: np.ndarray) -> np.ndarray:
    """Look up table[t - 1] and shape it to broadcast against `like` (leading batch axis)."""
    steps = np.asarray(t, dtype=np.int64)
    values = table[steps - 1]
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim)).astype(like.dtype, copy=False)


def q_sample(x0: np.ndarray, t: StepIndex, epsilon: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) epsilon."""
    _check_steps(t, sched)
    ab = _coef(sched.alpha_bar, t, x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * epsilon


def estimate_x0(x_t: np.ndarray, t: StepIndex, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Left inverse of q_sample: (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)."""
    _check_steps(t, sched)
    ab = _coef(sched.alpha_bar, t, x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_sigma(sched: NoiseSchedule, t: int) -> float:
    """sigma_t = sqrt(beta_tilde_t); beta_tilde_1 = beta_1."""
    _check_steps(t, sched)
    i = t - 1
    if i == 0:
        return float(np.sqrt(sched.beta[0]))
    beta_tilde = (1.0 - sched.alpha_bar[i - 1]) / (1.0 - sched.alpha_bar[i]) * sched.beta[i]
    return float(np.sqrt(beta_tilde))


def reverse_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule,
                 z: Optional[np.ndarray] = None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}. The final step (t = 1) adds no noise."""
    _check_steps(t, sched)
    i = t - 1
    alpha = sched.alpha[i]
    mean = (x_t - (1.0 - alpha) / np.sqrt(1.0 - sched.alpha_bar[i]) * eps_hat) / np.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    return mean + posterior_sigma(sched, t) * z


def timestep_encoding(t: StepIndex) -> np.ndarray:
    """[sin(10^(i*4/63) t) for i in 0..63] + [cos(...)], radians. Shape (128,) or (N, 128)."""
    steps = np.asarray(t, dtype=np.float64)
    if np.any(steps < 0):
        raise ValueError(f"Timestep must be non-negative, got {t}")
    freqs = 10.0 ** (np.arange(TIMESTEP_FREQUENCIES) * 4.0 / (TIMESTEP_FREQUENCIES - 1))
    table = steps[..., None] * freqs
    return np.concatenate([np.sin(table), np.cos(table)], axis=-1)


def sample(cond: ConditioningBundle, denoiser: DenoiserFn, sched: NoiseSchedule, rng_seed: int,
           dtype=np.float32, offset: int = 0) -> np.ndarray:
    """
    Run the learned reverse chain t = T..1 and return clipped x_0, shape (N, 2, L).

    Item i draws x_T and every z from its own stream default_rng([rng_seed, offset + i]),
    so the result for an item does not depend on batch composition or chunking.
    """
    batch = cond.batched()
    n, channels, length = batch.observation.shape
    rngs = [np.random.default_rng([rng_seed, offset + i]) for i in range(n)]

    x = np.stack([r.standard_normal((channels, length)) for r in rngs]).astype(dtype)
    for t in range(sched.T, 0, -1):
        eps_hat = denoiser(x, np.full(n, t, dtype=np.int64), batch)
        if eps_hat.shape != x.shape:
            raise DataError(f"Denoiser returned {eps_hat.shape}, expected {x.shape}")
        z = None
        if t > 1:
            z = np.stack([r.standard_normal((channels, length)) for r in rngs]).astype(dtype)
        x = reverse_step(x, t, eps_hat, sched, z).astype(dtype, copy=False)
        if not np.all(np.isfinite(x)):
            raise NumericalError("sample", f"step t={t}")
    return np.clip(x, -1.0, 1.0)
