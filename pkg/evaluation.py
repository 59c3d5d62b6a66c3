"""
Evaluation harness: identity removal, recovery and manipulation of user
identity, human within/cross-user baselines, velocity-distribution realism
(I-VT split + JS divergence) and nearest-centroid identification.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import entropy

from checkpoint_utils import dataclass_from_dict
from diffusion import ConditioningBundle, NoiseSchedule, sample
from embedder import cosine_similarity, pairwise_similarity_stats
from errors import DataError
from gaze_signal import (
    GazeSequence,
    VelocitySequence,
    VelocitySpace,
    count_invalid,
    denormalize,
    gaze_to_model_input,
    highpass_inject,
    integrate,
    preprocess,
    remove_identity,
    savgol_derivative,
    VELOCITY_LIMIT,
)


Split = Dict[str, List[GazeSequence]]

FIXATION_THRESHOLD = 100.0  # deg/s, strictly below -> fixation
SACCADE_THRESHOLD = 300.0  # deg/s, strictly above -> saccade
EVENT_CLASSES = ("all", "saccade", "fixation")
BIN_WIDTH = 2.0
EVENT_BINS = {"all": 500, "saccade": 350, "fixation": 50}


@dataclass
class EvalConfig:
    samples_per_seq: int = 5
    manipulation_max_similarity: float = 0.05
    js_samples: int = 100_000
    js_repeats: int = 10
    highpass_cutoff: float = 20.0
    low_rate: float = 20.0
    chunk: int = 32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        return dataclass_from_dict(cls, data)


@dataclass(frozen=True)
class HistogramSpec:
    bin_count: int = 500
    bin_width: float = BIN_WIDTH

    def __post_init__(self):
        if self.bin_count not in EVENT_BINS.values():
            raise ValueError(f"bin_count must be one of {sorted(EVENT_BINS.values())}, got {self.bin_count}")
        if self.bin_width != BIN_WIDTH:
            raise ValueError(f"bin_width must be {BIN_WIDTH}, got {self.bin_width}")

    @property
    def upper(self) -> float:
        return self.bin_count * self.bin_width

    @classmethod
    def for_event(cls, event: str) -> "HistogramSpec":
        if event not in EVENT_BINS:
            raise ValueError(f"Unknown event class '{event}'")
        return cls(EVENT_BINS[event])


@dataclass
class Stats:
    mean: float
    std: float
    n: int

    @classmethod
    def of(cls, values) -> "Stats":
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            raise DataError("No values to summarise")
        return cls(float(values.mean()), float(values.std()), int(values.size))

    def __str__(self) -> str:
        return f"{self.mean:.3f} ± {self.std:.3f}"


@dataclass
class ReportRow:
    protocol: str
    method: str
    metric: str
    mean: float
    std: float
    n: int
    invalid: int = 0


@dataclass
class EvalReport:
    """Rows of (protocol, method, metric) -> mean ± std, written as a deterministic CSV."""
    rows: List[ReportRow] = field(default_factory=list)

    HEADER = ("protocol", "method", "metric", "mean", "std", "n", "invalid")

    def add(self, protocol: str, method: str, metric: str, stats: Stats, invalid: int = 0) -> ReportRow:
        row = ReportRow(protocol, method, metric, stats.mean, stats.std, stats.n, int(invalid))
        self.rows.append(row)
        return row

    def get(self, protocol: str, method: str, metric: str) -> ReportRow:
        for row in self.rows:
            if (row.protocol, row.method, row.metric) == (protocol, method, metric):
                return row
        raise KeyError(f"No row for {protocol}/{method}/{metric}")

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(r) for r in self.rows], columns=list(self.HEADER))
        return frame.astype({"mean": np.float64, "std": np.float64, "n": np.int64, "invalid": np.int64})

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6f", lineterminator="\n")

    def print_table(self) -> None:
        print(f"{'protocol':<18} {'method':<14} {'metric':<22} {'value':>18} {'n':>6} {'invalid':>8}")
        print("-" * 90)
        for r in self.rows:
            value = f"{r.mean:.3f} ± {r.std:.3f}"
            print(f"{r.protocol:<18} {r.method:<14} {r.metric:<22} {value:>18} {r.n:>6} {r.invalid:>8}")


# ---------------------------------------------------------------------------
# Embedding helpers
# ---------------------------------------------------------------------------

def _map_chunks(fn: Callable, items: Sequence, chunk: int, threads: int) -> List:
    """Apply fn to consecutive chunks; results come back in submission order."""
    chunks = [items[lo: lo + chunk] for lo in range(0, len(items), chunk)]
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def embed_sequences(embedder, sequences: Sequence[GazeSequence], threads: int = 1, chunk: int = 64) -> np.ndarray:
    parts = _map_chunks(lambda c: embedder.embed_gaze(list(c)), list(sequences), chunk, threads)
    return np.concatenate(parts) if parts else np.zeros((0, embedder.config.embedding_dim))


def embed_velocities(embedder, velocities: np.ndarray, threads: int = 1, chunk: int = 64) -> np.ndarray:
    """Embeddings of normalized velocity arrays (N, 2, L)."""
    parts = _map_chunks(lambda c: np.atleast_2d(embedder.embed(np.asarray(c))), velocities, chunk, threads)
    return np.concatenate(parts)


def _flatten(sequences: Split) -> Tuple[List[GazeSequence], List[str]]:
    flat, labels = [], []
    for user in sorted(sequences):
        flat.extend(sequences[user])
        labels.extend([user] * len(sequences[user]))
    return flat, labels


def _rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([cosine_similarity(x, y) for x, y in zip(a, b)])


# ---------------------------------------------------------------------------
# Human baselines and identity removal
# ---------------------------------------------------------------------------

def _similarity_stats(sequences: Split, embedder, threads: int):
    flat, labels = _flatten(sequences)
    return pairwise_similarity_stats(embed_sequences(embedder, flat, threads), labels)


def within_user_baseline(sequences: Split, embedder, threads: int = 1) -> Stats:
    """Same-user pairwise cosine similarity, averaged per user then across users."""
    for user, seqs in sequences.items():
        if len(seqs) < 2:
            raise DataError(f"User {user} has {len(seqs)} sequence(s); need at least 2")
    if len(sequences) < 2:
        raise DataError("Need at least 2 users")
    within_mean, within_std, _, _ = _similarity_stats(sequences, embedder, threads)
    return Stats(within_mean, within_std, sum(len(s) for s in sequences.values()))


def cross_user_baseline(sequences: Split, embedder, threads: int = 1) -> Stats:
    if len(sequences) < 2:
        raise DataError("Cross-user similarity needs at least 2 users")
    _, _, cross_mean, cross_std = _similarity_stats(sequences, embedder, threads)
    return Stats(cross_mean, cross_std, sum(len(s) for s in sequences.values()))


def identity_removal_eval(sequences: Split, embedder, low_rate: float = 20.0, threads: int = 1) -> Stats:
    """Cosine similarity between each sequence and its identity-removed version."""
    flat, _ = _flatten(sequences)
    if not flat:
        raise DataError("No sequences to evaluate")
    original = embed_sequences(embedder, flat, threads)
    removed = embed_sequences(embedder, [remove_identity(g, low_rate) for g in flat], threads)
    return Stats.of(_rowwise_cosine(original, removed))


# ---------------------------------------------------------------------------
# Synthesizers: (bases, targets, target embeddings, seed) -> normalized velocities
# ---------------------------------------------------------------------------

@dataclass
class SynthesisResult:
    velocities: np.ndarray  # (N, 2, L), normalized
    invalid: int = 0


class DiffusionSynthesizer:
    """Reverse diffusion conditioned on the identity-removed base and the target embedding."""

    name = "diffusion"

    def __init__(self, denoiser, sched: NoiseSchedule, low_rate: float = 20.0, chunk: int = 32,
                 name: Optional[str] = None):
        self.denoiser = denoiser
        self.sched = sched
        self.low_rate = low_rate
        self.chunk = chunk
        if name:
            self.name = name

    def observation(self, bases: Sequence[GazeSequence]) -> np.ndarray:
        return np.stack([gaze_to_model_input(remove_identity(b, self.low_rate)).as_model_input() for b in bases])

    def __call__(self, bases, targets, target_embeddings, seed: int) -> SynthesisResult:
        obs = self.observation(bases)
        emb = np.asarray(target_embeddings)
        out = []
        for lo in range(0, len(obs), self.chunk):
            cond = ConditioningBundle(obs[lo: lo + self.chunk], emb[lo: lo + self.chunk])
            out.append(sample(cond, self.denoiser, self.sched, seed, offset=lo))
        return SynthesisResult(np.concatenate(out))


class HighPassSynthesizer:
    """Butterworth high-pass detail of the target added to the identity-removed base."""

    name = "highpass"

    def __init__(self, cutoff: float = 20.0, low_rate: float = 20.0):
        self.cutoff = cutoff
        self.low_rate = low_rate

    def raw(self, bases, targets) -> List[VelocitySequence]:
        return [highpass_inject(remove_identity(b, self.low_rate), t, self.cutoff) for b, t in zip(bases, targets)]

    def __call__(self, bases, targets, target_embeddings, seed: int) -> SynthesisResult:
        raws = self.raw(bases, targets)
        invalid = sum(count_invalid(v) for v in raws)
        return SynthesisResult(np.stack([preprocess(v).as_model_input() for v in raws]), invalid)


class RemovedInputSynthesizer:
    """The identity-removed base itself (lower reference)."""

    name = "removed"

    def __init__(self, low_rate: float = 20.0):
        self.low_rate = low_rate

    def __call__(self, bases, targets, target_embeddings, seed: int) -> SynthesisResult:
        return SynthesisResult(
            np.stack([gaze_to_model_input(remove_identity(b, self.low_rate)).as_model_input() for b in bases])
        )


# ---------------------------------------------------------------------------
# Recovery and manipulation
# ---------------------------------------------------------------------------

@dataclass
class InjectionResult:
    stats: Stats
    per_pair: np.ndarray
    invalid: int


def injection_eval(pairs: Sequence[Tuple[GazeSequence, GazeSequence]], synthesizer, embedder,
                   samples_per_pair: int = 5, seed: int = 0, threads: int = 1) -> InjectionResult:
    """Synthesize from each (base, target) pair and score cos(E(synthetic), E(target)), averaged over draws."""
    if not pairs:
        raise DataError("No (base, target) pairs to evaluate")
    if samples_per_pair < 1:
        raise ValueError(f"samples_per_pair must be >= 1, got {samples_per_pair}")
    bases = [b for b, _ in pairs for _ in range(samples_per_pair)]
    targets = [t for _, t in pairs for _ in range(samples_per_pair)]
    target_emb = embed_sequences(embedder, [t for _, t in pairs], threads)
    expanded = np.repeat(target_emb, samples_per_pair, axis=0)

    result = synthesizer(bases, targets, expanded, seed)
    synth_emb = embed_velocities(embedder, result.velocities, threads)
    sims = _rowwise_cosine(synth_emb, expanded).reshape(len(pairs), samples_per_pair)
    per_pair = sims.mean(axis=1)
    return InjectionResult(Stats.of(per_pair), per_pair, result.invalid)


def recovery_eval(test: Split, synthesizer, embedder, samples_per_seq: int = 5, seed: int = 0,
                  threads: int = 1) -> InjectionResult:
    """Each test sequence is both base and target."""
    flat, _ = _flatten(test)
    return injection_eval([(g, g) for g in flat], synthesizer, embedder, samples_per_seq, seed, threads)


@dataclass
class ManipulationPair:
    base: GazeSequence
    target: GazeSequence
    base_user: str
    target_user: str
    similarity: float
    fallback: bool


def manipulation_pairs(test: Split, embedder, max_similarity: float = 0.05, seed: int = 0,
                       threads: int = 1, verbose: bool = True) -> List[ManipulationPair]:
    """Pair each target with a base from another user whose similarity lies in [0, max_similarity]."""
    if len(test) < 2:
        raise DataError("Manipulation needs at least 2 users")
    flat, labels = _flatten(test)
    emb = embed_sequences(embedder, flat, threads)
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    sims = emb @ emb.T
    labels = np.asarray(labels)

    pairs = []
    fallbacks = 0
    for i, target in enumerate(flat):
        others = np.flatnonzero(labels != labels[i])
        candidate_sims = sims[i, others]
        ok = others[(candidate_sims >= 0.0) & (candidate_sims <= max_similarity)]
        if len(ok):
            j = int(np.random.default_rng([seed, i]).choice(ok))
            fallback = False
        else:
            j = int(others[np.argmin(candidate_sims)])
            fallback = True
            fallbacks += 1
            if verbose:
                print(f"[eval] ⚠️  target {labels[i]}#{i}: no base in [0, {max_similarity}], "
                      f"using minimum similarity {sims[i, j]:.3f} ({labels[j]})")
        pairs.append(ManipulationPair(flat[j], target, str(labels[j]), str(labels[i]), float(sims[i, j]), fallback))
    if verbose:
        print(f"[eval] Manipulation pairs: {len(pairs) - fallbacks} in range, {fallbacks} fallback")
    return pairs


def manipulation_eval(test: Split, synthesizer, embedder, samples_per_seq: int = 5, seed: int = 0,
                      max_similarity: float = 0.05, threads: int = 1, verbose: bool = True,
                      pairs: Optional[List[ManipulationPair]] = None) -> InjectionResult:
    if pairs is None:
        pairs = manipulation_pairs(test, embedder, max_similarity, seed, threads, verbose)
    return injection_eval([(p.base, p.target) for p in pairs], synthesizer, embedder, samples_per_seq, seed, threads)


# ---------------------------------------------------------------------------
# Velocity distributions
# ---------------------------------------------------------------------------

def ivt_classify(speed):
    """I-VT: < 100 deg/s fixation, > 300 deg/s saccade, otherwise 'other'. Works on scalars and arrays."""
    s = np.asarray(speed, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("Speed must be non-negative")
    labels = np.where(s < FIXATION_THRESHOLD, "fixation", np.where(s > SACCADE_THRESHOLD, "saccade", "other"))
    return str(labels) if labels.ndim == 0 else labels


def speeds(velocities: Sequence) -> Tuple[np.ndarray, int]:
    """Pooled finite velocity magnitudes clipped to [0, 1000] deg/s, plus the count of dropped non-finite samples."""
    pooled, invalid = [], 0
    for v in velocities:
        if isinstance(v, VelocitySequence):
            if v.space is not VelocitySpace.RAW:
                raise DataError("Histograms need raw deg/s velocities")
            v = v.channels
        mag = np.hypot(v[:, 0], v[:, 1])
        finite = np.isfinite(mag)
        invalid += int(np.sum(~finite))
        pooled.append(mag[finite])
    if not pooled:
        return np.zeros(0), invalid
    return np.clip(np.concatenate(pooled), 0.0, VELOCITY_LIMIT), invalid


def filter_event(speed: np.ndarray, event_filter: str) -> np.ndarray:
    if event_filter == "all":
        return speed
    if event_filter not in ("fixation", "saccade"):
        raise ValueError(f"Unknown event filter '{event_filter}'")
    return speed[ivt_classify(speed) == event_filter] if speed.size else speed


def speed_histogram(speed: np.ndarray, spec: HistogramSpec) -> np.ndarray:
    if speed.size == 0:
        raise DataError("Empty velocity selection")
    idx = np.minimum((speed // spec.bin_width).astype(np.int64), spec.bin_count - 1)
    counts = np.bincount(idx, minlength=spec.bin_count).astype(np.float64)
    return counts / counts.sum()


def velocity_histogram(velocities: Sequence, spec: Optional[HistogramSpec] = None,
                       event_filter: str = "all") -> np.ndarray:
    """Normalized histogram of velocity magnitudes (width 2 deg/s) after the I-VT event filter."""
    spec = spec or HistogramSpec.for_event(event_filter)
    speed, _ = speeds(velocities)
    return speed_histogram(filter_event(speed, event_filter), spec)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence with base-2 logs, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DataError(f"Distributions have different support sizes: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise DataError("Distributions must be non-negative")
    if p.sum() <= 0 or q.sum() <= 0:
        raise DataError("Distributions must have positive mass")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    js = 0.5 * entropy(p, m, base=2) + 0.5 * entropy(q, m, base=2)
    return float(np.clip(js, 0.0, 1.0))


def js_eval(reference: Sequence, candidates: Dict[str, Sequence], n_samples: int = 100_000, repeats: int = 10,
            seed: int = 0, invalid: Optional[Dict[str, int]] = None) -> EvalReport:
    """JS(reference, candidate) per event class, resampling n_samples speeds per repeat."""
    report = EvalReport()
    invalid = dict(invalid or {})
    ref_speed, _ = speeds(reference)
    cand_speeds = {}
    for method, vels in candidates.items():
        cand_speeds[method], dropped = speeds(vels)
        invalid[method] = invalid.get(method, 0) + dropped

    for e, event in enumerate(EVENT_CLASSES):
        spec = HistogramSpec.for_event(event)
        ref = filter_event(ref_speed, event)
        if ref.size == 0:
            raise DataError(f"Reference has no {event} samples")
        for m, method in enumerate(sorted(cand_speeds)):
            cand = filter_event(cand_speeds[method], event)
            if cand.size == 0:
                print(f"[eval] ⚠️  {method} has no {event} samples; JS set to 1")
                report.add("js", method, f"js_{event}", Stats(1.0, 0.0, 0), invalid.get(method, 0))
                continue
            rng = np.random.default_rng([seed, e, m])
            values = [
                js_divergence(speed_histogram(rng.choice(ref, n_samples), spec),
                              speed_histogram(rng.choice(cand, n_samples), spec))
                for _ in range(repeats)
            ]
            report.add("js", method, f"js_{event}", Stats.of(values), invalid.get(method, 0))
    return report


# ---------------------------------------------------------------------------
# Identification
# ---------------------------------------------------------------------------

def _centroids(embeddings: np.ndarray, labels: Sequence[str]) -> Tuple[np.ndarray, List[str]]:
    labels = np.asarray(labels)
    users = sorted(set(labels.tolist()))
    cents = np.stack([embeddings[labels == u].mean(axis=0) for u in users])
    norms = np.linalg.norm(cents, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("Zero-norm user centroid")
    return cents / norms, users


def identify_embeddings(train_emb: np.ndarray, train_labels: Sequence[str],
                        test_emb: np.ndarray, test_labels: Sequence[str]) -> float:
    cents, users = _centroids(np.asarray(train_emb, dtype=np.float64), train_labels)
    missing = sorted(set(test_labels) - set(users))
    if missing:
        raise DataError(f"Users missing from the training split: {missing}")
    test = np.asarray(test_emb, dtype=np.float64)
    test = test / np.linalg.norm(test, axis=1, keepdims=True)
    predicted = np.asarray(users)[np.argmax(test @ cents.T, axis=1)]
    return float(np.mean(predicted == np.asarray(test_labels)))


def identify_user(train: Split, test: Split, embedder, threads: int = 1,
                  extra_train: Optional[Split] = None) -> float:
    """Nearest-centroid identification accuracy; extra_train adds (e.g. synthetic) sequences to the centroids."""
    missing = sorted(set(test) - set(train))
    if missing:
        raise DataError(f"Users missing from the training split: {missing}")
    train_flat, train_labels = _flatten(train)
    if extra_train:
        extra_flat, extra_labels = _flatten(extra_train)
        train_flat += extra_flat
        train_labels += extra_labels
    test_flat, test_labels = _flatten(test)
    return identify_embeddings(embed_sequences(embedder, train_flat, threads), train_labels,
                               embed_sequences(embedder, test_flat, threads), test_labels)


def velocities_to_gaze(velocities: np.ndarray, starts: Sequence[GazeSequence], sample_rate: float) -> List[GazeSequence]:
    """Denormalize and integrate synthetic velocities from each start sequence's first sample."""
    out = []
    for v, start in zip(velocities, starts):
        raw = denormalize(VelocitySequence(np.asarray(v).T, sample_rate, VelocitySpace.NORMALIZED))
        out.append(integrate(raw, tuple(start.samples[0])))
    return out


def augment_with_synthesis(train: Split, synthesizer, embedder, seed: int = 0, threads: int = 1) -> Split:
    """
    One synthetic sequence per training sequence: the base comes from the next
    user (round robin), the target embedding from the training sequence itself.
    """
    users = sorted(train)
    if len(users) < 2:
        raise DataError("Augmentation needs at least 2 users")
    bases, targets, owners = [], [], []
    for k, user in enumerate(users):
        donor = train[users[(k + 1) % len(users)]]
        for j, g in enumerate(train[user]):
            bases.append(donor[j % len(donor)])
            targets.append(g)
            owners.append(user)
    emb = embed_sequences(embedder, targets, threads)
    result = synthesizer(bases, targets, emb, seed)
    rate = targets[0].sample_rate
    synthetic: Split = {u: [] for u in users}
    for owner, g in zip(owners, velocities_to_gaze(result.velocities, bases, rate)):
        synthetic[owner].append(g)
    return synthetic


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def plot_traces(path: str, ground_truth: GazeSequence, removed: GazeSequence, synthetic_velocity: np.ndarray,
                title: str = "") -> bool:
    """SVG with x-velocity and x-gaze of ground truth, identity-removed input and synthesis."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("[eval] ⚠️  matplotlib not installed; skipping SVG")
        return False

    rate = ground_truth.sample_rate
    synth_raw = denormalize(VelocitySequence(np.asarray(synthetic_velocity).T, rate, VelocitySpace.NORMALIZED))
    synth_gaze = integrate(synth_raw, tuple(ground_truth.samples[0]))
    t_ms = np.arange(len(ground_truth)) * 1000.0 / rate
    traces = [
        ("ground truth", savgol_derivative(ground_truth).channels[:, 0], ground_truth.samples[:, 0]),
        ("identity removed", savgol_derivative(removed).channels[:, 0], removed.samples[:, 0]),
        ("synthesized", synth_raw.channels[:, 0], synth_gaze.samples[:, 0]),
    ]

    fig, (ax_v, ax_g) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    for label, vel, gaze in traces:
        ax_v.plot(t_ms, vel, label=label, linewidth=0.8)
        ax_g.plot(t_ms, gaze, label=label, linewidth=0.8)
    ax_v.set_ylabel("velocity x (deg/s)")
    ax_g.set_ylabel("gaze x (deg)")
    ax_g.set_xlabel("time (ms)")
    ax_v.legend(loc="upper right", fontsize="small")
    if title:
        ax_v.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True
