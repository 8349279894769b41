"""Waveform/spectrogram transforms, loudness utilities, Wiener reconstruction, WAV I/O.

Conventions used throughout the package:

- audio is mono float64 in [-1, 1]; 8 kHz after ingestion
- framing uses no padding and no centering: frame t covers samples
  [t*hop, t*hop + window_size), so a signal of N samples yields
  T = (N - window_size) // hop + 1 frames
- the analysis/synthesis window is a periodic Hann at 50% overlap; the
  inverse transform is a weighted overlap-add normalized per sample by the
  accumulated squared window
- magnitude spectrograms are stored float32, transform math runs in float64
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

SAMPLE_RATE = 8000
WINDOW_SIZE = 512
HOP = 256

_PCM_SCALE = 32767.0

# The first/last hop of an uncentered frame grid is covered by a single
# window whose energy tends to zero at the ends; flooring the overlap-add
# normalization there caps the worst-case edge gain at 1/sqrt(floor) instead
# of exploding, while leaving every sample with real window coverage exact.
OLA_NORM_FLOOR = 1e-2


class SilentClipError(ValueError):
    """Raised when an operation requires a non-silent waveform."""


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio signal with finite float64 samples."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Non-negative magnitude grid, time x frequency, float32 storage."""

    mags: np.ndarray

    def __post_init__(self):
        mags = np.asarray(self.mags, dtype=np.float32)
        if mags.ndim != 2 or mags.shape[0] < 1 or mags.shape[1] < 1:
            raise ValueError(f"spectrogram must be a non-empty 2-D grid, got shape {mags.shape}")
        if not np.all(np.isfinite(mags)):
            raise ValueError("spectrogram contains non-finite entries")
        if np.any(mags < 0):
            raise ValueError("spectrogram contains negative entries")
        object.__setattr__(self, "mags", mags)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mags.shape


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """Complex STFT values, time x frequency, with the framing metadata."""

    values: np.ndarray
    window_size: int
    frame_hop: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 2:
            raise ValueError(f"complex spectrogram must be 2-D, got shape {values.shape}")
        if values.shape[1] != self.window_size // 2 + 1:
            raise ValueError(
                f"expected {self.window_size // 2 + 1} frequency bins for a "
                f"{self.window_size}-sample window, got {values.shape[1]}"
            )
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)

    def magnitude(self) -> Spectrogram:
        return Spectrogram(np.abs(self.values))


def _hann(window_size: int) -> np.ndarray:
    # periodic Hann; satisfies the 50%-overlap add condition used by istft
    n = np.arange(window_size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_size)


def stft(w: Waveform, window_size: int = WINDOW_SIZE, hop: int | None = None) -> ComplexSpectrogram:
    """Short-time Fourier transform with Hann window and 50% overlap.

    Frames never extend past the signal: trailing samples that do not fill a
    whole window are dropped.
    """
    if window_size % 2 != 0:
        raise ValueError(f"window_size must be even, got {window_size}")
    if hop is None:
        hop = window_size // 2
    if hop * 2 != window_size:
        raise ValueError(f"hop must be window_size/2 (50% overlap), got hop={hop}, window={window_size}")
    n = len(w)
    if n < window_size:
        raise ValueError(f"input too short: {n} samples is less than one {window_size}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, window_size)[::hop]
    values = np.fft.rfft(frames * _hann(window_size), axis=1)
    return ComplexSpectrogram(values, window_size=window_size, frame_hop=hop)


def istft(s: ComplexSpectrogram) -> Waveform:
    """Inverse STFT by weighted overlap-add with per-sample window-energy normalization.

    Output length is (T - 1) * hop + window_size. The normalization is
    floored (see OLA_NORM_FLOOR), so reconstruction is exact wherever the
    window coverage is real and merely attenuated in the outermost samples
    of the first and last frame.
    """
    window_size, hop = s.window_size, s.frame_hop
    if window_size % 2 != 0 or hop * 2 != window_size:
        raise ValueError(
            f"inconsistent framing metadata: window={window_size}, hop={hop} (expected 50% overlap)"
        )
    window = _hann(window_size)
    frames = np.fft.irfft(s.values, n=window_size, axis=1) * window
    n_frames = s.values.shape[0]
    out_len = (n_frames - 1) * hop + window_size
    out = np.zeros(out_len)
    wsum = np.zeros(out_len)
    for t in range(n_frames):
        start = t * hop
        out[start:start + window_size] += frames[t]
        wsum[start:start + window_size] += window ** 2
    out /= np.maximum(wsum, OLA_NORM_FLOOR)
    return Waveform(out)


def wiener_masks(estimates: list[Spectrogram]) -> np.ndarray:
    """Soft masks mask_c = est_c^2 / sum_k est_k^2, stacked (C, T, F).

    Bins where every estimate is zero get the uniform mask 1/C so the masks
    always sum to one.
    """
    if not estimates:
        raise ValueError("need at least one estimate")
    shape = estimates[0].shape
    for e in estimates:
        if e.shape != shape:
            raise ValueError(f"estimate shapes differ: {e.shape} vs {shape}")
    power = np.stack([e.mags.astype(np.float64) ** 2 for e in estimates])
    denom = power.sum(axis=0)
    safe = np.where(denom > 0.0, denom, 1.0)
    return np.where(denom > 0.0, power / safe, 1.0 / len(estimates))


def wiener_reconstruct(estimates: list[Spectrogram], mixture: ComplexSpectrogram) -> list[Waveform]:
    """Reconstruct one time-domain signal per estimate by soft-masking the mixture.

    Each mask scales the complex mixture bins (magnitude masked, mixture
    phase kept) before the inverse transform.
    """
    shape = mixture.shape
    for e in estimates:
        if e.shape != shape:
            raise ValueError(f"estimate shape {e.shape} does not match mixture shape {shape}")
    masks = wiener_masks(estimates)
    return [
        istft(ComplexSpectrogram(mask * mixture.values, mixture.window_size, mixture.frame_hop))
        for mask in masks
    ]


def rms(w: Waveform) -> float:
    """Root mean square of the samples."""
    return float(np.sqrt(np.mean(np.square(w.samples))))


def rms_normalize(w: Waveform, target: float) -> Waveform:
    """Scale the waveform so its RMS equals `target`."""
    if target <= 0:
        raise ValueError(f"target RMS must be positive, got {target}")
    level = rms(w)
    if level == 0.0:
        raise SilentClipError("silent recording")
    return Waveform(w.samples * (target / level), w.sample_rate)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase resampling to `target_rate`."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if w.sample_rate == target_rate:
        return w
    g = np.gcd(w.sample_rate, target_rate)
    out = resample_poly(w.samples, target_rate // g, w.sample_rate // g)
    return Waveform(out, target_rate)


def quantize_int16(samples: np.ndarray) -> np.ndarray:
    """Round float samples in [-1, 1] to the 16-bit PCM grid."""
    return np.clip(np.rint(np.asarray(samples) * _PCM_SCALE), -32768, 32767).astype("<i2")


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write a mono 16-bit PCM WAV file."""
    ints = quantize_int16(w.samples)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(ints.tobytes())


def read_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM WAV file; anything else is rejected."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getcomptype() != "NONE" or f.getsampwidth() != 2:
            raise ValueError(f"{path}: only uncompressed 16-bit PCM is supported")
        rate = f.getframerate()
        data = f.readframes(f.getnframes())
    ints = np.frombuffer(data, dtype="<i2")
    return Waveform(ints.astype(np.float64) / _PCM_SCALE, rate)
