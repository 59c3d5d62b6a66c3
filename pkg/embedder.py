"""
User embedder: maps a (2, L) normalized velocity sequence to a unit-norm
user embedding.

A small strided 1-D conv stack (kernel 7, stride 4, ReLU) -> global average
pool -> dense -> L2 normalisation. Trained with a softmax head over the
training users, applied to the unit embedding with a fixed logit scale;
the head is dropped at inference.
"""

import time
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint_utils import dataclass_from_dict
from errors import DataError, NumericalError
from gaze_signal import GazeSequence, gaze_to_model_input
import nn_layers as nn

try:
    from tqdm import trange
except ImportError:  # progress bars are optional
    trange = None


Params = Dict[str, np.ndarray]


@dataclass
class EmbedderConfig:
    embedding_dim: int = 32
    channels: List[int] = field(default_factory=lambda: [16, 32, 32, 32])
    kernel_size: int = 7
    stride: int = 4
    sequence_length: int = 1000
    logit_scale: float = 16.0
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    augment: bool = True
    # per-user share held out to pick the best epoch; 0 trains on everything
    validation_fraction: float = 0.2
    patience: int = 10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EmbedderConfig":
        return dataclass_from_dict(cls, data)

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2


@dataclass
class EmbedderTrainReport:
    """Outcome of one embedder training run."""
    epoch_losses: List[float]
    train_accuracy: float
    within_mean: float
    within_std: float
    cross_mean: float
    cross_std: float
    seconds: float
    validation_gap: Optional[float] = None
    best_epoch: Optional[int] = None

    @property
    def gap(self) -> float:
        return self.within_mean - self.cross_mean


def init_params(config: EmbedderConfig, n_users: int, seed: int, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    c_in = 2
    for i, c_out in enumerate(config.channels):
        fan_in = c_in * config.kernel_size
        params[f"conv{i}.w"] = nn.init_uniform(rng, (c_out, c_in, config.kernel_size), fan_in, dtype)
        params[f"conv{i}.b"] = nn.init_uniform(rng, (c_out,), fan_in, dtype)
        c_in = c_out
    params["proj.w"] = nn.init_uniform(rng, (config.embedding_dim, c_in), c_in, dtype)
    params["proj.b"] = nn.init_uniform(rng, (config.embedding_dim,), c_in, dtype)
    params["head.w"] = nn.init_uniform(rng, (n_users, config.embedding_dim), config.embedding_dim, dtype)
    params["head.b"] = np.zeros(n_users, dtype=dtype)
    return params


def inference_params(params: Params) -> Params:
    """Embedding path only (classification head removed)."""
    return {k: v for k, v in params.items() if not k.startswith("head.")}


def embed_forward(params: Params, config: EmbedderConfig, v: np.ndarray):
    """v: (N, 2, L) normalized velocities -> (unit embeddings (N, D), cache)."""
    dtype = params["proj.w"].dtype
    v = np.asarray(v, dtype=dtype)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3 or v.shape[1] != 2 or v.shape[2] != config.sequence_length:
        raise DataError(f"Embedder expects (N, 2, {config.sequence_length}), got {v.shape}")

    cache = {}
    h = v
    for i in range(len(config.channels)):
        h, cache[f"conv{i}"] = nn.conv1d_forward(
            h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=config.stride, padding=config.padding
        )
        h, cache[f"relu{i}"] = nn.relu_forward(h)
    cache["pool_length"] = h.shape[2]
    pooled = h.mean(axis=2)
    e, cache["proj"] = nn.dense_forward(pooled, params["proj.w"], params["proj.b"])
    try:
        u, cache["norm"] = nn.l2_normalize_forward(e)
    except ZeroDivisionError as exc:
        raise NumericalError("embed", "zero-norm embedding") from exc
    return u, cache


def embed_backward(params: Params, config: EmbedderConfig, cache: dict, du: np.ndarray,
                   need_param_grads: bool = True) -> Tuple[Optional[Params], np.ndarray]:
    """Gradients of sum(du * u) wrt the embedding-path params and the input sequence."""
    grads: Params = {}
    de = nn.l2_normalize_backward(du, cache["norm"])
    dpooled, grads["proj.w"], grads["proj.b"] = nn.dense_backward(de, cache["proj"])
    length = cache["pool_length"]
    dh = np.repeat(dpooled[:, :, None] / length, length, axis=2)
    for i in reversed(range(len(config.channels))):
        dh = nn.relu_backward(dh, cache[f"relu{i}"])
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = nn.conv1d_backward(dh, cache[f"conv{i}"])
    if not np.all(np.isfinite(dh)):
        raise NumericalError("embed_backward", "input gradient")
    return (grads if need_param_grads else None), dh


def classifier_forward(params: Params, config: EmbedderConfig, u: np.ndarray) -> np.ndarray:
    return config.logit_scale * (u @ params["head.w"].T) + params["head.b"]


def relu_pattern(cache: dict, config: EmbedderConfig) -> np.ndarray:
    return np.concatenate([cache[f"relu{i}"].ravel() for i in range(len(config.channels))])


def embed(params: Params, config: EmbedderConfig, v) -> np.ndarray:
    """Unit-norm embedding(s). Accepts a normalized VelocitySequence, (2, L) or (N, 2, L)."""
    if hasattr(v, "as_model_input"):
        v = v.as_model_input()
    single = np.ndim(v) == 2
    u, _ = embed_forward(params, config, v)
    return u[0] if single else u


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"Embedding dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DataError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def pairwise_similarity_stats(embeddings: np.ndarray, labels: Sequence) -> Tuple[float, float, float, float]:
    """(within mean, within std, cross mean, cross std); within averages per-user means."""
    emb = np.asarray(embeddings, dtype=np.float64)
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    labels = np.asarray(labels)
    sims = emb @ emb.T
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)

    within_pairs = sims[same & upper]
    cross_pairs = sims[~same & upper]
    if within_pairs.size == 0 or cross_pairs.size == 0:
        raise DataError("Need at least two users with two sequences each")

    per_user = []
    for user in np.unique(labels):
        idx = np.flatnonzero(labels == user)
        if len(idx) >= 2:
            block = sims[np.ix_(idx, idx)]
            per_user.append(block[np.triu_indices(len(idx), k=1)].mean())
    return (float(np.mean(per_user)), float(within_pairs.std()),
            float(cross_pairs.mean()), float(cross_pairs.std()))


def corpus_arrays(sequences: Dict[str, List[GazeSequence]]) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Stack every sequence's model input; returns (X (N, 2, L), labels (N,), user ids)."""
    users = sorted(sequences)
    xs, ys = [], []
    for label, user in enumerate(users):
        for g in sequences[user]:
            xs.append(gaze_to_model_input(g).as_model_input())
            ys.append(label)
    return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64), users


def augment_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random per-item sign flips, axis swap and time reversal of (N, 2, L) velocities.

    Isotropic gaze keeps its identity under all three; reversing time negates velocity.
    """
    n = len(x)
    out = x * rng.choice(np.array([-1.0, 1.0], dtype=x.dtype), size=(n, 2, 1))
    swap = rng.random(n) < 0.5
    out[swap] = out[swap][:, ::-1]
    reverse = rng.random(n) < 0.5
    out[reverse] = -out[reverse][:, :, ::-1]
    return out


def _validation_split(sequences: Dict[str, List[GazeSequence]], config: EmbedderConfig, seed: int,
                      verbose: bool):
    """(fit, held-out) per-user split, or (sequences, None) when some user is too small to spare two."""
    from corpus import split

    if config.validation_fraction <= 0:
        return sequences, None
    fit, held = split(sequences, 1.0 - config.validation_fraction, seed)
    if min(len(s) for s in held.values()) < 2 or min(len(s) for s in fit.values()) < 2:
        if verbose:
            print("[embedder] ⚠️  Too few sequences per user for a validation fold; training on all")
        return sequences, None
    return fit, held


def train_embedder(sequences: Dict[str, List[GazeSequence]], config: EmbedderConfig, seed: int,
                   shuffle_labels: bool = False, verbose: bool = True) -> Tuple[Params, EmbedderTrainReport]:
    """Softmax cross-entropy training over user labels; returns inference params and a report.

    Regularised by label-preserving augmentation and decoupled weight decay. With a
    validation fold the epoch with the largest held-out within/cross gap is kept, and
    training stops after `patience` epochs without improvement. The shuffled-label
    control trains on everything and keeps the last epoch.
    """
    from training import AdamState, adam_step

    if len(sequences) < 2:
        raise DataError(f"Embedder training needs at least 2 users, got {len(sequences)}")
    for user, seqs in sequences.items():
        if len(seqs) < 2:
            raise DataError(f"User {user} has {len(seqs)} sequence(s); need at least 2")

    start = time.time()
    if shuffle_labels:
        fit, held = sequences, None
    else:
        fit, held = _validation_split(sequences, config, seed, verbose)
    x, y_true, users = corpus_arrays(fit)
    x_val, y_val = (corpus_arrays(held)[:2] if held is not None else (None, None))
    rng = np.random.default_rng(seed)
    y = rng.permutation(y_true) if shuffle_labels else y_true

    params = init_params(config, len(users), seed)
    state = AdamState()
    n = len(y)
    epoch_losses: List[float] = []
    best_gap, best_epoch, best_params = -np.inf, None, None

    if verbose:
        held_note = f", {len(y_val)} held out" if y_val is not None else ""
        print(f"[embedder] Training on {n} sequences from {len(users)} users{held_note} "
              f"(D={config.embedding_dim}, {config.epochs} epochs)")
    epochs = trange(config.epochs, desc="embedder", disable=not verbose) if trange else range(config.epochs)
    for epoch in epochs:
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo: lo + config.batch_size]
            batch = augment_batch(x[idx], rng) if config.augment else x[idx]
            u, cache = embed_forward(params, config, batch)
            logits = classifier_forward(params, config, u)
            loss, dlogits = nn.softmax_cross_entropy(logits, y[idx])
            grads: Params = {
                "head.w": config.logit_scale * (dlogits.T @ u),
                "head.b": dlogits.sum(axis=0),
            }
            du = config.logit_scale * (dlogits @ params["head.w"])
            path_grads, _ = embed_backward(params, config, cache, du)
            grads.update(path_grads)
            adam_step(params, grads, state, config.learning_rate, weight_decay=config.weight_decay)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))

        if x_val is None:
            continue
        w_mean, _, c_mean, _ = pairwise_similarity_stats(embed(params, config, x_val), y_val)
        if w_mean - c_mean > best_gap:
            best_gap, best_epoch = w_mean - c_mean, epoch
            best_params = {k: v.copy() for k, v in params.items()}
        elif epoch - best_epoch >= config.patience:
            if verbose:
                print(f"[embedder] Stopping after epoch {epoch + 1}; best held-out gap "
                      f"{best_gap:.3f} at epoch {best_epoch + 1}")
            break

    if best_params is not None:
        params = best_params
    u_all = embed(params, config, x)
    accuracy = float(np.mean(np.argmax(classifier_forward(params, config, u_all), axis=1) == y))
    # similarity stats always use the true identities
    within_mean, within_std, cross_mean, cross_std = pairwise_similarity_stats(u_all, y_true)
    report = EmbedderTrainReport(epoch_losses, accuracy, within_mean, within_std, cross_mean, cross_std,
                                 time.time() - start,
                                 validation_gap=float(best_gap) if best_params is not None else None,
                                 best_epoch=best_epoch)
    if verbose:
        held_note = f", held-out gap {report.validation_gap:.3f}" if report.validation_gap is not None else ""
        print(f"[embedder] ✅ accuracy {accuracy:.3f}, within {within_mean:.3f} ± {within_std:.3f}, "
              f"cross {cross_mean:.3f} ± {cross_std:.3f}{held_note} ({report.seconds:.1f}s)")
    return inference_params(params), report


class Embedder:
    """Frozen embedder: params + config with convenience methods."""

    def __init__(self, params: Params, config: EmbedderConfig):
        self.params = inference_params(params)
        self.config = config

    def embed(self, v) -> np.ndarray:
        return embed(self.params, self.config, v)

    def embed_gaze(self, sequences: Sequence[GazeSequence], chunk: int = 64) -> np.ndarray:
        """Embeddings (N, D) for gaze sequences."""
        if not sequences:
            return np.zeros((0, self.config.embedding_dim), dtype=np.float32)
        out = []
        for lo in range(0, len(sequences), chunk):
            batch = np.stack([gaze_to_model_input(g).as_model_input() for g in sequences[lo: lo + chunk]])
            out.append(embed(self.params, self.config, batch))
        return np.concatenate(out)
