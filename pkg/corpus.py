"""
Synthetic multi-user gaze corpus and dataset I/O.

Each user has a signature (fixational tremor amplitude and spectral colour,
microsaccade rate/amplitude, main-sequence saccade parameters, fixation
duration distribution). Sequences alternate fixations and minimum-jerk
saccades whose peak velocity follows Vp = vmax * (1 - exp(-A / c)).

Identity is carried by the fine structure: tremor and microsaccades vary
widely between users, while the scanpath statistics (fixation durations,
main sequence) vary only slightly. A 20 Hz hold keeps the scanpath and
drops the fine structure.
"""

import json
import os
import re
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from checkpoint_utils import dataclass_from_dict
from errors import DataError
from gaze_signal import GazeSequence, SG_WINDOW


Split = Dict[str, List[GazeSequence]]

MANIFEST_NAME = "manifest.json"
CSV_COLUMNS = ["n", "x", "y"]

# documented signature ranges
TREMOR_AMPLITUDE = (0.04, 0.2)  # deg
TREMOR_COLOR = (0.25, 2.0)  # spectral exponent of the 1/f^color power spectrum
MICROSACCADE_RATE = (0.5, 3.0)  # events / s
MICROSACCADE_AMPLITUDE = (0.05, 0.5)  # deg
SACCADE_VMAX = (500.0, 550.0)  # deg/s
SACCADE_C = (6.0, 7.0)  # deg
FIXATION_MEDIAN_MS = (240.0, 260.0)
FIXATION_SIGMA = (0.3, 0.35)
FIXATION_CLIP_MS = (50.0, 2000.0)
EDGE_MARGIN = 0.5  # deg kept free for tremor at the workspace border
TREMOR_SPEED_PER_DEG = 1000.0  # deg/s of SG speed allowed per deg of tremor amplitude


@dataclass
class UserSignature:
    user_id: int
    tremor_amplitude: float
    tremor_color: float
    microsaccade_rate: float
    microsaccade_amplitude: float
    saccade_vmax: float
    saccade_c: float
    fixation_mu: float  # log of the median fixation duration in ms
    fixation_sigma: float

    def peak_velocity(self, amplitude: float) -> float:
        """Main sequence: Vp = vmax * (1 - exp(-A / c))."""
        return self.saccade_vmax * (1.0 - np.exp(-amplitude / self.saccade_c))

    def speed_bound(self) -> float:
        """Upper bound on the SG speed of a generated sequence: vmax plus the tremor allowance."""
        return self.saccade_vmax + TREMOR_SPEED_PER_DEG * self.tremor_amplitude


@dataclass
class CorpusConfig:
    n_users: int = 8
    sequences_per_user: int = 40
    sequence_length: int = 1000
    sample_rate: float = 1000.0
    seed: int = 7
    bounds: float = 15.0  # workspace is [-bounds, bounds] deg on both axes

    def __post_init__(self):
        if self.n_users < 2:
            raise DataError(f"A corpus needs at least 2 users, got {self.n_users}")
        if self.bounds <= EDGE_MARGIN:
            raise DataError(f"Workspace bounds must exceed {EDGE_MARGIN} deg, got {self.bounds}")
        if self.sequence_length < SG_WINDOW:
            raise DataError(f"sequence_length must be at least {SG_WINDOW}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusConfig":
        return dataclass_from_dict(cls, data)


@dataclass
class Corpus:
    config: CorpusConfig
    signatures: Dict[str, UserSignature]
    sequences: Split

    @property
    def users(self) -> List[str]:
        return sorted(self.sequences)


def user_key(user_id: int) -> str:
    return f"u{user_id:03d}"


def sequence_key(seq_id: int) -> str:
    return f"s{seq_id:03d}"


def generate_user(seed: int, user_id: int) -> UserSignature:
    rng = np.random.default_rng([seed, user_id])
    u = lambda lo_hi: float(rng.uniform(*lo_hi))
    return UserSignature(
        user_id=user_id,
        tremor_amplitude=u(TREMOR_AMPLITUDE),
        tremor_color=u(TREMOR_COLOR),
        microsaccade_rate=u(MICROSACCADE_RATE),
        microsaccade_amplitude=u(MICROSACCADE_AMPLITUDE),
        saccade_vmax=u(SACCADE_VMAX),
        saccade_c=u(SACCADE_C),
        fixation_mu=float(np.log(rng.uniform(*FIXATION_MEDIAN_MS))),
        fixation_sigma=u(FIXATION_SIGMA),
    )


def colored_noise(rng: np.random.Generator, length: int, color: float) -> np.ndarray:
    """Unit-variance noise with power spectrum ~ 1/f^color (amplitude slope -color/2)."""
    spectrum = np.fft.rfft(rng.standard_normal(length))
    freqs = np.fft.rfftfreq(length)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-color / 2.0)
    noise = np.fft.irfft(spectrum * scale, n=length)
    std = noise.std()
    return noise / std if std > 0 else noise


def min_jerk(n: int) -> np.ndarray:
    """Normalised minimum-jerk position profile over n samples, 0 -> 1."""
    tau = np.arange(1, n + 1) / n
    return 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5


def _movement(start: np.ndarray, end: np.ndarray, peak_velocity: float, rate: float) -> np.ndarray:
    """Samples of a minimum-jerk movement whose peak speed is peak_velocity (deg/s)."""
    amplitude = float(np.linalg.norm(end - start))
    if amplitude == 0 or peak_velocity <= 0:
        return np.empty((0, 2))
    duration = 1.875 * amplitude / peak_velocity  # min-jerk peak speed = 1.875 A / D
    n = max(2, int(np.ceil(duration * rate)))
    return start + np.outer(min_jerk(n), end - start)


def generate_sequence(sig: UserSignature, length: int, rate: float, seq_seed: int,
                      bounds: float = 15.0) -> GazeSequence:
    if length < SG_WINDOW:
        raise DataError(f"Sequence length {length} is shorter than the SG window {SG_WINDOW}")
    rng = np.random.default_rng([seq_seed, sig.user_id])
    inner = bounds - EDGE_MARGIN
    pos = rng.uniform(-inner / 2, inner / 2, size=2)
    chunks: List[np.ndarray] = []
    total = 0

    while total < length:
        # fixation with Poisson microsaccades
        duration_ms = np.clip(rng.lognormal(sig.fixation_mu, sig.fixation_sigma), *FIXATION_CLIP_MS)
        n_fix = max(1, int(round(duration_ms * rate / 1000.0)))
        fixation = np.repeat(pos[None], n_fix, axis=0)
        n_micro = rng.poisson(sig.microsaccade_rate * n_fix / rate)
        for onset in np.sort(rng.integers(0, n_fix, size=n_micro)):
            angle = rng.uniform(0, 2 * np.pi)
            step = sig.microsaccade_amplitude * np.array([np.cos(angle), np.sin(angle)])
            target = np.clip(fixation[onset] + step, -inner, inner)
            move = _movement(fixation[onset], target, sig.peak_velocity(sig.microsaccade_amplitude), rate)
            stop = min(n_fix, onset + len(move))
            fixation[onset:stop] = move[: stop - onset]
            fixation[stop:] = target
        chunks.append(fixation)
        total += n_fix
        pos = fixation[-1]

        # saccade to a uniform workspace target
        target = rng.uniform(-inner, inner, size=2)
        amplitude = float(np.linalg.norm(target - pos))
        saccade = _movement(pos, target, sig.peak_velocity(amplitude), rate)
        chunks.append(saccade)
        total += len(saccade)
        pos = target

    base = np.concatenate(chunks)[:length]
    tremor = np.stack([colored_noise(rng, length, sig.tremor_color) for _ in range(2)], axis=1)
    samples = np.clip(base + sig.tremor_amplitude * tremor, -bounds, bounds)
    return GazeSequence(samples, np.ones(length, dtype=bool), rate)


def generate_corpus(config: CorpusConfig, verbose: bool = True) -> Corpus:
    signatures = {user_key(u): generate_user(config.seed, u) for u in range(config.n_users)}
    sequences: Split = {}
    for key, sig in signatures.items():
        sequences[key] = [
            generate_sequence(sig, config.sequence_length, config.sample_rate,
                              seq_seed=config.seed * 100_003 + s, bounds=config.bounds)
            for s in range(config.sequences_per_user)
        ]
    if verbose:
        print(f"[corpus] Generated {config.n_users} users x {config.sequences_per_user} sequences "
              f"({config.sequence_length} samples @ {config.sample_rate:g} Hz)")
    return Corpus(config, signatures, sequences)


def save_csv(g: GazeSequence, path: str) -> None:
    """Header n,x,y; n in integer ms; empty x/y for invalid samples; 6 decimals."""
    ok = g.valid & np.all(np.isfinite(g.samples), axis=1)
    xy = np.where(ok[:, None], g.samples, np.nan)
    frame = pd.DataFrame({
        "n": np.rint(np.arange(len(g)) * 1000.0 / g.sample_rate).astype(np.int64),
        "x": xy[:, 0],
        "y": xy[:, 1],
    })
    frame.to_csv(path, index=False, float_format="%.6f", na_rep="", lineterminator="\n")


_INTEGER = r"[+-]?\d+"


def _first_bad_line(mask: pd.Series) -> int:
    # row 0 of the frame is line 2 of the file
    return int(np.flatnonzero(mask.to_numpy())[0]) + 2


def _parse_angles(column: pd.Series, path: str) -> np.ndarray:
    text = column.fillna("").astype(str).str.strip()
    missing = (text == "") | (text.str.lower() == "nan")
    values = pd.to_numeric(text.where(~missing), errors="coerce")
    bad = values.isna() & ~missing
    if bad.any():
        line = _first_bad_line(bad)
        raise DataError(f"{path}:{line}: non-numeric gaze value {text[bad].iloc[0]!r}")
    return values.to_numpy(dtype=np.float64)


def load_csv(path: str, sample_rate: Optional[float] = None) -> GazeSequence:
    """Read an n,x,y CSV. The rate is inferred from timestamp spacing unless given."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}:1: expected header 'n,x,y', file is empty") from None
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        where = f"{path}:{match.group(1)}" if match else path
        raise DataError(f"{where}: expected 3 fields ({exc})") from None

    header = [str(c).strip() for c in frame.columns]
    if header != CSV_COLUMNS:
        raise DataError(f"{path}:1: expected header 'n,x,y', got {header}")
    frame.columns = CSV_COLUMNS

    stamps = frame["n"].fillna("").astype(str).str.strip()
    bad = ~stamps.str.fullmatch(_INTEGER)
    if bad.any():
        raise DataError(f"{path}:{_first_bad_line(bad)}: non-integer timestamp {stamps[bad].iloc[0]!r}")
    times = stamps.astype(np.int64).to_numpy()
    samples = np.stack([_parse_angles(frame["x"], path), _parse_angles(frame["y"], path)], axis=1)

    if len(samples) < 2:
        raise DataError(f"{path}: need at least 2 samples, got {len(samples)}")
    if sample_rate is None:
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise DataError(f"{path}:{int(np.argmax(steps <= 0)) + 3}: timestamps must increase in whole ms; "
                            f"pass the sample rate for recordings above 1000 Hz")
        sample_rate = 1000.0 / float(np.median(steps))
    valid = np.all(np.isfinite(samples), axis=1)
    return GazeSequence(samples, valid, sample_rate)


def save_corpus(corpus: Corpus, out_dir: str) -> int:
    """Write <out>/<user>/<seq>.csv plus manifest.json. Returns the number of CSV files."""
    os.makedirs(out_dir, exist_ok=True)
    count = 0
    for user in corpus.users:
        user_dir = os.path.join(out_dir, user)
        os.makedirs(user_dir, exist_ok=True)
        for s, g in enumerate(corpus.sequences[user]):
            save_csv(g, os.path.join(user_dir, f"{sequence_key(s)}.csv"))
            count += 1
    manifest = {
        "config": corpus.config.to_dict(),
        "signatures": {k: asdict(v) for k, v in sorted(corpus.signatures.items())},
        "sequence_seed_rule": "default_rng([seed * 100003 + sequence_index, user_id])",
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return count


def load_corpus(corpus_dir: str) -> Corpus:
    """Read a corpus directory (manifest optional for real recordings)."""
    if not os.path.isdir(corpus_dir):
        raise DataError(f"Corpus directory not found: {corpus_dir}")
    manifest_path = os.path.join(corpus_dir, MANIFEST_NAME)
    signatures: Dict[str, UserSignature] = {}
    config = None
    if os.path.isfile(manifest_path):
        with open(manifest_path) as f:
            manifest = json.load(f)
        config = CorpusConfig.from_dict(manifest["config"])
        signatures = {k: UserSignature(**v) for k, v in manifest.get("signatures", {}).items()}
    rate = config.sample_rate if config is not None else None

    sequences: Split = {}
    for user in sorted(os.listdir(corpus_dir)):
        user_dir = os.path.join(corpus_dir, user)
        if not os.path.isdir(user_dir):
            continue
        files = sorted(f for f in os.listdir(user_dir) if f.endswith(".csv"))
        if files:
            sequences[user] = [load_csv(os.path.join(user_dir, f), rate) for f in files]
    if not sequences:
        raise DataError(f"No user directories with CSV files under {corpus_dir}")

    if config is None:
        first = next(iter(sequences.values()))[0]
        config = CorpusConfig(n_users=max(2, len(sequences)),
                              sequences_per_user=min(len(v) for v in sequences.values()),
                              sequence_length=len(first), sample_rate=first.sample_rate, seed=0)
    return Corpus(config, signatures, sequences)


def split(sequences: Split, ratio: float, seed: int) -> Tuple[Split, Split]:
    """Per-user stratified, disjoint, deterministic split into (train, test)."""
    if not 0 < ratio < 1:
        raise ValueError(f"Split ratio must lie in (0, 1), got {ratio}")
    train: Split = {}
    test: Split = {}
    for index, user in enumerate(sorted(sequences)):
        seqs = sequences[user]
        if len(seqs) < 2:
            raise DataError(f"User {user} has {len(seqs)} sequence(s); cannot split")
        order = np.random.default_rng([seed, index]).permutation(len(seqs))
        n_train = int(np.clip(round(len(seqs) * ratio), 1, len(seqs) - 1))
        train[user] = [seqs[i] for i in sorted(order[:n_train])]
        test[user] = [seqs[i] for i in sorted(order[n_train:])]
    return train, test
