"""
Gaze signal processing.

Velocity estimation (Savitzky-Golay first derivative), sine normalisation
and its inverse, integration back to gaze, identity removal by
downsample + zero-order hold, and the Butterworth high-pass baseline.
All functions are pure.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

import numpy as np
from scipy import signal as sps

from errors import DataError


SG_WINDOW = 7
SG_ORDER = 2
VELOCITY_LIMIT = 1000.0  # deg/s
DENORM_TOLERANCE = 1e-6


class VelocitySpace(Enum):
    RAW = "raw_deg_per_s"
    NORMALIZED = "normalized"


@dataclass
class GazeSequence:
    """Timestamped 2-channel gaze angles in degrees of visual angle."""
    samples: np.ndarray  # (L, 2): x, y in degrees
    valid: np.ndarray = None  # (L,) bool, False = tracking loss / blink
    sample_rate: float = 1000.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[1] != 2:
            raise DataError(f"Gaze samples must have shape (L, 2), got {self.samples.shape}")
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.samples), axis=1)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != (len(self.samples),):
            raise DataError(f"Validity mask shape {self.valid.shape} does not match {len(self.samples)} samples")
        if not self.sample_rate > 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples[self.valid])):
            raise DataError("Gaze samples marked valid must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def masked(self) -> np.ndarray:
        """Samples with invalid rows set to NaN."""
        out = self.samples.copy()
        out[~self.valid] = np.nan
        return out


@dataclass
class VelocitySequence:
    """2-channel angular velocities, raw (deg/s) or sine-normalised."""
    channels: np.ndarray  # (L, 2)
    sample_rate: float = 1000.0
    space: VelocitySpace = VelocitySpace.RAW

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[1] != 2:
            raise DataError(f"Velocity channels must have shape (L, 2), got {self.channels.shape}")

    def __len__(self) -> int:
        return len(self.channels)

    def as_model_input(self) -> np.ndarray:
        """Channels-first (2, L) layout used by the networks."""
        return np.ascontiguousarray(self.channels.T)


@dataclass(frozen=True)
class SGKernel:
    """First-derivative Savitzky-Golay weights, applied as a dot product over the window."""
    coefficients: np.ndarray = field(
        default_factory=lambda: sps.savgol_coeffs(SG_WINDOW, SG_ORDER, deriv=1, use="dot")
    )

    @property
    def half(self) -> np.ndarray:
        """Weights for offsets 1..SG_WINDOW//2; the kernel is antisymmetric about the centre."""
        return self.coefficients[SG_WINDOW // 2 + 1:]


def savgol_derivative(g: GazeSequence) -> VelocitySequence:
    """Per-channel SG derivative (window 7, order 2) in deg/s, edge-replicated at the boundaries."""
    if len(g) < SG_WINDOW:
        raise DataError(f"Sequence of length {len(g)} is shorter than the SG window {SG_WINDOW}")
    radius = SG_WINDOW // 2
    padded = np.pad(g.masked, ((radius, radius), (0, 0)), mode="edge")
    length = len(g)
    vel = np.zeros((length, 2))
    # paired differences: a constant input gives exactly zero
    for k, weight in enumerate(SGKernel().half, start=1):
        vel += weight * (padded[radius + k: radius + k + length] - padded[radius - k: radius - k + length])
    return VelocitySequence(vel * g.sample_rate, g.sample_rate, VelocitySpace.RAW)


def preprocess(v: VelocitySequence) -> VelocitySequence:
    """NaN -> 0 (assumed fixation), clamp to +-1000 deg/s, then sin(v / 1000 * 90 deg)."""
    if v.space is not VelocitySpace.RAW:
        raise DataError("preprocess expects raw deg/s velocities")
    vel = np.where(np.isfinite(v.channels), v.channels, 0.0)
    vel = np.clip(vel, -VELOCITY_LIMIT, VELOCITY_LIMIT)
    normed = np.sin(np.deg2rad(vel / VELOCITY_LIMIT * 90.0))
    return VelocitySequence(normed, v.sample_rate, VelocitySpace.NORMALIZED)


def denormalize(s: VelocitySequence) -> VelocitySequence:
    """Inverse of preprocess on [-1, 1]."""
    if s.space is not VelocitySpace.NORMALIZED:
        raise DataError("denormalize expects normalized velocities")
    values = s.channels
    if not np.all(np.isfinite(values)):
        raise DataError("denormalize got non-finite values")
    worst = float(np.max(np.abs(values))) if values.size else 0.0
    if worst > 1.0 + DENORM_TOLERANCE:
        raise DataError(f"Normalized velocity {worst:.6f} outside [-1, 1]")
    vel = np.rad2deg(np.arcsin(np.clip(values, -1.0, 1.0))) * VELOCITY_LIMIT / 90.0
    return VelocitySequence(vel, s.sample_rate, VelocitySpace.RAW)


def integrate(v: VelocitySequence, start: Tuple[float, float]) -> GazeSequence:
    """g[0] = start, g[n] = g[n-1] + v[n] / sample_rate."""
    if v.space is not VelocitySpace.RAW:
        raise DataError("integrate expects raw deg/s velocities")
    steps = v.channels[1:] / v.sample_rate
    gaze = np.empty_like(v.channels)
    gaze[0] = start
    gaze[1:] = np.asarray(start, dtype=np.float64) + np.cumsum(steps, axis=0)
    return GazeSequence(gaze, np.ones(len(gaze), dtype=bool), v.sample_rate)


def _rate_factor(high: float, low: float) -> int:
    factor = high / low
    rounded = int(round(factor))
    if rounded < 1 or not np.isclose(factor, rounded, rtol=0, atol=1e-9):
        raise DataError(f"Sample rate {high} Hz is not divisible by {low} Hz")
    return rounded


def remove_identity(g: GazeSequence, low_rate: float = 20.0) -> GazeSequence:
    """Downsample to low_rate and hold each kept sample back up to the original rate."""
    factor = _rate_factor(g.sample_rate, low_rate)
    held = (np.arange(len(g)) // factor) * factor
    return GazeSequence(g.samples[held].copy(), g.valid[held].copy(), g.sample_rate)


def fill_gaps(g: GazeSequence) -> GazeSequence:
    """Hold the last valid sample over invalid ones; the first valid sample back-fills."""
    if not np.any(g.valid):
        raise DataError("Cannot fill gaps in a sequence with no valid samples")
    idx = np.where(g.valid, np.arange(len(g)), 0)
    np.maximum.accumulate(idx, out=idx)
    first = int(np.argmax(g.valid))
    idx[:first] = first
    return GazeSequence(g.samples[idx].copy(), np.ones(len(g), dtype=bool), g.sample_rate)


def upsample_hold(g: GazeSequence, target_rate: float) -> GazeSequence:
    """Zero-order-hold upsampling of a low-rate recording to target_rate."""
    factor = _rate_factor(target_rate, g.sample_rate)
    idx = np.repeat(np.arange(len(g)), factor)
    return GazeSequence(g.samples[idx].copy(), g.valid[idx].copy(), target_rate)


def butterworth_highpass(v: VelocitySequence, cutoff: float = 20.0) -> VelocitySequence:
    """Zero-phase (forward-backward) 2nd-order Butterworth high-pass. Non-finite output is kept."""
    nyquist = v.sample_rate / 2.0
    if not 0 < cutoff < nyquist:
        raise DataError(f"Cutoff {cutoff} Hz must lie in (0, {nyquist}) Hz")
    sos = sps.butter(2, cutoff, btype="highpass", fs=v.sample_rate, output="sos")
    filtered = sps.sosfiltfilt(sos, v.channels, axis=0)
    return VelocitySequence(filtered, v.sample_rate, VelocitySpace.RAW)


def count_invalid(v: VelocitySequence) -> int:
    """Number of samples with at least one non-finite channel."""
    return int(np.sum(~np.all(np.isfinite(v.channels), axis=1)))


def highpass_inject(base: GazeSequence, target: GazeSequence, cutoff: float = 20.0) -> VelocitySequence:
    """Classical baseline: base velocities plus the high-passed target velocities."""
    if len(base) != len(target) or base.sample_rate != target.sample_rate:
        raise DataError(
            f"Base ({len(base)} @ {base.sample_rate} Hz) and target "
            f"({len(target)} @ {target.sample_rate} Hz) must match"
        )
    base_vel = savgol_derivative(base)
    detail = butterworth_highpass(savgol_derivative(target), cutoff)
    out = VelocitySequence(base_vel.channels + detail.channels, base.sample_rate, VelocitySpace.RAW)
    bad = count_invalid(out)
    if bad:
        print(f"[signal] ⚠️  high-pass baseline produced {bad} non-finite samples")
    return out


def gaze_to_model_input(g: GazeSequence) -> VelocitySequence:
    """SG velocities followed by NaN/clamp/sine preprocessing."""
    return preprocess(savgol_derivative(g))
