"""Synthetic stand-in corpus for demos and tests.

Ten harmonic "utterance" classes, one second each at 16 kHz, shaped like the
real use case: every class has its own fundamental, spectral center and
syllable-rate amplitude modulation, with per-clip jitter in pitch, envelope,
phase and loudness. Classes overlap in frequency but are statistically
distinct, which is what the separation model needs to have something to
learn. Clips are written in the corpus layout that `datasets.load_corpus`
expects (one directory per label plus validation/testing list files).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import dsp
from .dsp import Waveform

TOY_SAMPLE_RATE = 16000
TOY_SECONDS = 1.0

# per-class fundamental (Hz), spectral center (Hz), and AM rate (Hz)
_F0 = [105.0, 147.0, 189.0, 231.0, 273.0, 315.0, 357.0, 399.0, 441.0, 483.0]
_CENTER = [400.0, 700.0, 1000.0, 1300.0, 1600.0, 1900.0, 2200.0, 2500.0, 2800.0, 3100.0]
_AM_RATE = [2.0, 3.0, 4.5, 2.5, 3.5, 5.0, 2.2, 4.0, 3.2, 5.5]


def toy_clip(label: int, rng: np.random.Generator, sample_rate: int = TOY_SAMPLE_RATE) -> Waveform:
    """One synthetic utterance of the given class."""
    n = int(TOY_SECONDS * sample_rate)
    t = np.arange(n) / sample_rate
    f0 = _F0[label] * (1.0 + rng.uniform(-0.04, 0.04))
    center = _CENTER[label] * (1.0 + rng.uniform(-0.08, 0.08))
    width = 500.0 + 150.0 * rng.uniform(-1, 1)
    signal = np.zeros(n)
    h = 1
    while h * f0 < sample_rate * 0.45:
        freq = h * f0
        weight = np.exp(-((freq - center) / width) ** 2) + 0.15 / h
        signal += weight * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        h += 1
    am = 1.0 + 0.6 * np.sin(2 * np.pi * _AM_RATE[label] * (1 + rng.uniform(-0.2, 0.2)) * t
                            + rng.uniform(0, 2 * np.pi))
    attack = np.minimum(1.0, t / 0.05)
    release = np.minimum(1.0, (t[-1] - t) / 0.05)
    signal = signal * am * attack * release
    signal += 0.002 * rng.standard_normal(n)
    level = 0.04 * rng.uniform(0.5, 2.0)  # loudness spread for RMS normalization to undo
    signal *= level / np.sqrt(np.mean(signal ** 2))
    return Waveform(signal, sample_rate)


def write_toy_corpus(
    root: str | Path,
    labels=range(10),
    clips_per_class: int = 60,
    seed: int = 0,
    val_fraction: float = 0.15,
    test_fraction: float = 0.15,
) -> Path:
    """Generate a corpus directory tree; returns its root path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    val_list, test_list = [], []
    for label in labels:
        class_dir = root / str(label)
        class_dir.mkdir(parents=True, exist_ok=True)
        n_val = int(round(clips_per_class * val_fraction))
        n_test = int(round(clips_per_class * test_fraction))
        for i in range(clips_per_class):
            name = f"clip{i:04d}.wav"
            dsp.write_wav(class_dir / name, toy_clip(label, rng))
            clip_id = f"{label}/{name}"
            if i < n_val:
                val_list.append(clip_id)
            elif i < n_val + n_test:
                test_list.append(clip_id)
    (root / "validation_list.txt").write_text("\n".join(val_list) + "\n")
    (root / "testing_list.txt").write_text("\n".join(test_list) + "\n")
    return root
