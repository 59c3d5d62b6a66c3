"""
Self-supervised training of the conditional denoiser.

Each step: identity removal -> SG velocities -> NaN/clamp/sine -> draw t and
noise -> q_sample -> predict eps_hat -> estimate x0_hat -> noise loss and
user identity guidance through the frozen embedder -> Adam.
"""

import os
import time
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from checkpoint_utils import dataclass_from_dict, load_checkpoint, params_checksum, save_checkpoint
from diffusion import ConditioningBundle, NoiseSchedule, estimate_x0, linear_schedule, q_sample
from errors import DataError, NumericalError
from gaze_signal import GazeSequence, gaze_to_model_input, remove_identity
import denoiser as dn
import embedder as em

try:
    from tqdm import tqdm
except ImportError:  # progress bars are optional
    tqdm = None


Params = Dict[str, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 5e-4
    steps: int = 10000
    seed: int = 0
    sequence_length: int = 1000
    low_rate: float = 20.0
    use_id_guidance: bool = True
    objective: str = "normalized"  # "normalized" (self-normalised sum) or "raw" (loss_noise + lambda * loss_id)
    lambda_id: float = 0.5
    noise_norm: str = "l1"  # "l1" or "l2"
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.05
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.learning_rate <= 0:
            raise DataError(f"Invalid training config: {self}")
        if self.objective not in ("normalized", "raw"):
            raise DataError(f"Unknown objective '{self.objective}'")
        if self.noise_norm not in ("l1", "l2"):
            raise DataError(f"Unknown noise norm '{self.noise_norm}'")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return dataclass_from_dict(cls, data)


@dataclass
class AdamState:
    """First/second moments per parameter and the step counter."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class LossBreakdown:
    loss_noise: float
    loss_id: float
    combined: float


@dataclass
class CombinedLoss:
    """Forward value plus the weights applied to each term's raw gradient."""
    value: float
    noise_weight: float
    id_weight: float


@dataclass
class TrainingBatch:
    """Preprocessed training targets: x0 and x0_co (N, 2, L), E(x0) (N, D)."""
    x0: np.ndarray
    x0_co: np.ndarray
    embedding: np.ndarray

    def __len__(self) -> int:
        return len(self.x0)

    def take(self, idx: np.ndarray) -> "TrainingBatch":
        return TrainingBatch(self.x0[idx], self.x0_co[idx], self.embedding[idx])


def loss_noise(eps: np.ndarray, eps_hat: np.ndarray, norm: str = "l1") -> float:
    """Mean absolute (or squared) error between true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise DataError(f"Noise shapes differ: {eps.shape} vs {eps_hat.shape}")
    diff = np.asarray(eps_hat, dtype=np.float64) - eps
    if norm == "l2":
        return float(np.mean(diff * diff))
    return float(np.mean(np.abs(diff)))


def loss_noise_grad(eps: np.ndarray, eps_hat: np.ndarray, norm: str = "l1") -> np.ndarray:
    diff = eps_hat - eps
    if norm == "l2":
        return 2.0 * diff / diff.size
    return np.sign(diff) / diff.size


def loss_id(embedder: em.Embedder, x0: np.ndarray, x0_hat: np.ndarray) -> float:
    """1 - cos(E(x0), E(x0_hat)), averaged over the batch."""
    a = embedder.embed(x0)
    b = embedder.embed(x0_hat)
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    return float(np.mean([1.0 - em.cosine_similarity(ai, bi) for ai, bi in zip(a, b)]))


def combined_loss(loss_noise_value: float, loss_id_value: Optional[float], objective: str = "normalized",
                  lambda_id: float = 0.5) -> CombinedLoss:
    """
    normalized: L = Ln / sg(Ln) + 0.5 * Lid / sg(Lid)  (value 1.5 when both are positive)
    raw:        L = Ln + lambda_id * Lid
    A zero term in the normalized form is added un-normalized. loss_id None disables guidance.
    """
    if not np.isfinite(loss_noise_value) or (loss_id_value is not None and not np.isfinite(loss_id_value)):
        raise NumericalError("combined_loss", f"loss_noise={loss_noise_value}, loss_id={loss_id_value}")

    if objective == "raw":
        if loss_id_value is None:
            return CombinedLoss(loss_noise_value, 1.0, 0.0)
        return CombinedLoss(loss_noise_value + lambda_id * loss_id_value, 1.0, lambda_id)

    if loss_noise_value > 0:
        value, noise_weight = loss_noise_value / loss_noise_value, 1.0 / loss_noise_value
    else:
        value, noise_weight = loss_noise_value, 1.0
    if loss_id_value is None:
        return CombinedLoss(value, noise_weight, 0.0)
    if loss_id_value > 0:
        return CombinedLoss(value + 0.5 * (loss_id_value / loss_id_value), noise_weight, 0.5 / loss_id_value)
    return CombinedLoss(value + 0.5 * loss_id_value, noise_weight, 0.5)


def adam_step(params: Params, grads: Params, state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS,
              weight_decay: float = 0.0):
    """In-place Adam update with bias correction; returns (params, state).

    weight_decay > 0 shrinks every parameter by lr * weight_decay before the
    Adam step (decoupled, AdamW style).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError("adam_step", f"gradient of {name}")

    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step

    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        g = g.astype(p.dtype, copy=False)
        if weight_decay:
            p -= (lr * weight_decay * p).astype(p.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return params, state


def prepare_batch(sequences: Sequence[GazeSequence], embedder: em.Embedder, low_rate: float = 20.0) -> TrainingBatch:
    """Identity removal, SG velocities and normalisation for ground truth and observation; E(x0)."""
    x0 = np.stack([gaze_to_model_input(g).as_model_input() for g in sequences])
    x0_co = np.stack([gaze_to_model_input(remove_identity(g, low_rate)).as_model_input() for g in sequences])
    embedding = embedder.embed(x0)
    for stage, arr in (("x0", x0), ("x0_co", x0_co), ("embedding", embedding)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"prepare_batch.{stage}")
    return TrainingBatch(x0.astype(np.float32), x0_co.astype(np.float32), np.asarray(embedding, dtype=np.float32))


def train_step(batch: Union[Sequence[GazeSequence], TrainingBatch], params: Params, config: dn.DenoiserConfig,
               embedder: em.Embedder, sched: NoiseSchedule, rng: np.random.Generator,
               train_config: Optional[TrainConfig] = None):
    """One step of the training objective. Returns (LossBreakdown, gradients); params are not modified."""
    tc = train_config or TrainConfig()
    if not isinstance(batch, TrainingBatch):
        batch = prepare_batch(batch, embedder, tc.low_rate)
    dtype = params["input_proj.w"].dtype
    n = len(batch)
    x0 = batch.x0.astype(dtype, copy=False)

    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(dtype)
    x_t = q_sample(x0, t, eps, sched)

    cond = ConditioningBundle(batch.x0_co.astype(dtype, copy=False), batch.embedding.astype(dtype, copy=False))
    eps_hat, cache = dn.forward(params, config, x_t, t, cond, return_cache=True)
    if not np.all(np.isfinite(eps_hat)):
        raise NumericalError("train_step.forward")

    ln = loss_noise(eps, eps_hat, tc.noise_norm)
    d_eps = loss_noise_grad(eps, eps_hat, tc.noise_norm)

    x0_hat = estimate_x0(x_t, t, eps_hat, sched)
    if not np.all(np.isfinite(x0_hat)):
        raise NumericalError("train_step.estimate_x0")
    emb_params = embedder.params
    u_hat, emb_cache = em.embed_forward(emb_params, embedder.config, x0_hat)
    u0 = batch.embedding.astype(u_hat.dtype, copy=False)
    u0 = u0 / np.linalg.norm(u0, axis=1, keepdims=True)
    lid = float(np.mean(1.0 - np.sum(u0 * u_hat, axis=1)))

    combo = combined_loss(ln, lid if tc.use_id_guidance else None, tc.objective, tc.lambda_id)
    d_eps_hat = combo.noise_weight * d_eps
    if combo.id_weight:
        # dLid/du_hat = -u0 / n; chain through the frozen embedder and estimate_x0
        _, dx0_hat = em.embed_backward(emb_params, embedder.config, emb_cache, -u0 / n, need_param_grads=False)
        ab = sched.alpha_bar[t - 1].reshape(n, 1, 1)
        d_eps_hat = d_eps_hat + combo.id_weight * (-np.sqrt((1.0 - ab) / ab) * dx0_hat)

    grads = dn.backward(params, config, cache, d_eps_hat.astype(dtype, copy=False))
    return LossBreakdown(ln, lid, combo.value), grads


def _write_metrics(path: str, rows: List[LossBreakdown], steps: List[int]) -> None:
    frame = pd.DataFrame({
        "step": np.asarray(steps, dtype=np.int64),
        "loss_noise": [r.loss_noise for r in rows],
        "loss_id": [r.loss_id for r in rows],
        "combined": [r.combined for r in rows],
    })
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


@dataclass
class TrainResult:
    params: Params
    history: List[LossBreakdown]
    history_steps: List[int]
    seconds: float


def train(sequences: Sequence[GazeSequence], embedder: em.Embedder, denoiser_config: dn.DenoiserConfig,
          train_config: TrainConfig, out_path: Optional[str] = None, verbose: bool = True) -> TrainResult:
    """Run train_step for the configured number of steps; optionally save checkpoint + metrics CSV."""
    tc = train_config
    if denoiser_config.sequence_length != tc.sequence_length or embedder.config.sequence_length != tc.sequence_length:
        raise DataError("Sequence length must agree across training, denoiser and embedder configs")
    if denoiser_config.embedding_dim != embedder.config.embedding_dim:
        raise DataError("Denoiser embedding_dim must equal the embedder output dimension")
    for g in sequences:
        if len(g) != tc.sequence_length:
            raise DataError(f"Training sequence of length {len(g)}, expected {tc.sequence_length}")

    sched = tc.schedule()
    params = dn.init_params(denoiser_config, tc.seed)
    state = AdamState()
    rng = np.random.default_rng([tc.seed, 1])
    frozen = params_checksum(embedder.params)

    if verbose:
        print(f"[train] {dn.param_count(params)} parameters, receptive field {dn.receptive_field(denoiser_config)} "
              f"samples, {tc.steps} steps, id guidance {'on' if tc.use_id_guidance else 'off'}")
    start = time.time()
    data = prepare_batch(sequences, embedder, tc.low_rate)

    history: List[LossBreakdown] = []
    history_steps: List[int] = []
    steps = range(1, tc.steps + 1)
    bar = tqdm(steps, desc="train", disable=not verbose) if tqdm else steps
    for step in bar:
        idx = rng.choice(len(data), size=min(tc.batch_size, len(data)), replace=False)
        losses, grads = train_step(data.take(idx), params, denoiser_config, embedder, sched, rng, tc)
        adam_step(params, grads, state, tc.learning_rate)
        if step == 1 or step % tc.log_every == 0 or step == tc.steps:
            history.append(losses)
            history_steps.append(step)
            if tqdm and verbose:
                bar.set_postfix(noise=f"{losses.loss_noise:.4f}", id=f"{losses.loss_id:.4f}")

    if params_checksum(embedder.params) != frozen:
        raise NumericalError("train", "embedder parameters changed during diffusion training")

    seconds = time.time() - start
    if verbose and history:
        print(f"[train] ✅ loss_noise {history[0].loss_noise:.4f} -> {history[-1].loss_noise:.4f}, "
              f"loss_id {history[0].loss_id:.4f} -> {history[-1].loss_id:.4f} ({seconds:.1f}s)")

    if out_path:
        save_denoiser(out_path, params, denoiser_config, tc, embedder)
        _write_metrics(os.path.join(out_path, "metrics.csv"), history, history_steps)
        if verbose:
            print(f"[train] Saved checkpoint to {out_path}")
    return TrainResult(params, history, history_steps, seconds)


def save_denoiser(path: str, params: Params, config: dn.DenoiserConfig, train_config: TrainConfig,
                  embedder: Optional[em.Embedder] = None) -> str:
    meta = {
        "kind": "denoiser",
        "denoiser_config": config.to_dict(),
        "train_config": train_config.to_dict(),
        "schedule": train_config.schedule().to_dict(),
    }
    if embedder is not None:
        meta["embedder_checksum"] = params_checksum(embedder.params)
    return save_checkpoint(path, params, meta)


def save_embedder(path: str, params: Params, config: em.EmbedderConfig) -> str:
    return save_checkpoint(path, em.inference_params(params), {"kind": "embedder", "embedder_config": config.to_dict()})


def load_denoiser(path: str):
    """Returns (params, DenoiserConfig, TrainConfig, NoiseSchedule)."""
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise DataError(f"{path} is not a denoiser checkpoint (kind={meta.get('kind')!r})")
    config = dn.DenoiserConfig.from_dict(meta["denoiser_config"])
    train_config = TrainConfig.from_dict(meta["train_config"])
    return params, config, train_config, NoiseSchedule.from_dict(meta["schedule"])


def load_embedder(path: str) -> em.Embedder:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "embedder":
        raise DataError(f"{path} is not an embedder checkpoint (kind={meta.get('kind')!r})")
    return em.Embedder(params, em.EmbedderConfig.from_dict(meta["embedder_config"]))
