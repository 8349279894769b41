"""Corpus ingestion and mixture-dataset synthesis.

A source corpus is a directory with one subdirectory per integer class label
containing mono WAV clips, plus optional `validation_list.txt` and
`testing_list.txt` files listing `label/filename.wav` entries (everything not
listed is training data). Ingestion resamples to 8 kHz, pads or trims each
clip to one second (8000 samples), and normalizes every clip's RMS to the
mean RMS of the training partition.

Mixture synthesis cycles through all class-label combinations, draws clips
per class without replacement (reshuffling a class pool when it runs dry),
cycles each combination through the configured gain levels, and mixes on the
16-bit PCM grid so a stored mixture equals the gain-weighted sum of its
stored component clips sample-exactly.

Mixtures are described by a versioned JSON-lines manifest; one header line,
then one record per mixture with paths relative to the manifest.
"""

from __future__ import annotations

import json
import math
import random
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .dsp import SilentClipError, Spectrogram, Waveform

PARTITIONS = ("train", "val", "test")
CLIP_SAMPLES = 8000
MANIFEST_VERSION = 1

DEFAULT_COUNTS = (15000, 1875, 1875)
DEFAULT_GAINS_DB = (-6.0, 0.0, 6.0)


class ManifestError(ValueError):
    """Malformed, missing, or incompatible manifest content."""


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClipRecord:
    clip_id: str  # "label/filename.wav", unique within the corpus
    label: int
    waveform: Waveform
    partition: str


@dataclass(eq=False)
class Corpus:
    clips: list[ClipRecord]
    mean_train_rms: float

    def partition_pool(self, partition: str, label: int) -> list[ClipRecord]:
        return [c for c in self.clips if c.partition == partition and c.label == label]

    def labels(self) -> tuple[int, ...]:
        return tuple(sorted({c.label for c in self.clips}))


def _pad_or_trim(samples: np.ndarray, length: int) -> np.ndarray:
    if len(samples) >= length:
        return samples[:length]
    return np.pad(samples, (0, length - len(samples)))


def _read_partition_list(root: Path, name: str) -> set[str]:
    path = root / name
    if not path.exists():
        return set()
    return {line.strip() for line in path.read_text().splitlines() if line.strip()}


def load_corpus(root: str | Path, class_filter=None) -> Corpus:
    """Ingest a corpus directory into normalized one-second 8 kHz clips.

    Unreadable and silent clips are skipped with a warning; a class directory
    that ends up empty is an error. `class_filter` restricts ingestion to the
    given labels.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} is not a directory")
    val_list = _read_partition_list(root, "validation_list.txt")
    test_list = _read_partition_list(root, "testing_list.txt")
    wanted = None if class_filter is None else {int(k) for k in class_filter}

    labels = sorted(int(d.name) for d in root.iterdir() if d.is_dir() and d.name.isdigit())
    if wanted is not None:
        missing = wanted - set(labels)
        if missing:
            raise ValueError(f"corpus at {root} has no directories for classes {sorted(missing)}")
        labels = sorted(wanted)
    if not labels:
        raise ValueError(f"corpus at {root} contains no class directories")

    clips = []
    for label in labels:
        count = 0
        for wav_path in sorted((root / str(label)).glob("*.wav")):
            clip_id = f"{label}/{wav_path.name}"
            try:
                w = dsp.read_wav(wav_path)
            except (ValueError, OSError) as exc:
                warnings.warn(f"skipping unreadable clip {clip_id}: {exc}")
                continue
            w = dsp.resample(w, dsp.SAMPLE_RATE)
            w = Waveform(_pad_or_trim(w.samples, CLIP_SAMPLES), dsp.SAMPLE_RATE)
            if dsp.rms(w) == 0.0:
                warnings.warn(f"skipping silent clip {clip_id}")
                continue
            partition = "val" if clip_id in val_list else "test" if clip_id in test_list else "train"
            clips.append(ClipRecord(clip_id, label, w, partition))
            count += 1
        if count == 0:
            raise ValueError(f"class {label} has no usable clips under {root}")

    train_levels = [dsp.rms(c.waveform) for c in clips if c.partition == "train"]
    if not train_levels:
        raise ValueError(f"corpus at {root} has no training clips")
    mean_train_rms = float(np.mean(train_levels))
    normalized = [
        ClipRecord(c.clip_id, c.label, dsp.rms_normalize(c.waveform, mean_train_rms), c.partition)
        for c in clips
    ]
    return Corpus(normalized, mean_train_rms)


# ---------------------------------------------------------------------------
# Class sets and combinations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassSet:
    """Ordered set of integer class labels, between 3 and 10 of them."""

    labels: tuple[int, ...]

    def __post_init__(self):
        labels = tuple(sorted(int(k) for k in self.labels))
        if len(labels) != len(set(labels)):
            raise ValueError(f"duplicate labels in {labels}")
        if not 3 <= len(labels) <= 10:
            raise ValueError(f"a class set needs 3..10 labels, got {len(labels)}")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def parse(cls, text: str) -> "ClassSet":
        """Parse "a:b" (labels a..b-1) or a comma-separated label list."""
        text = text.strip()
        if ":" in text:
            a, b = text.split(":")
            return cls(tuple(range(int(a), int(b))))
        return cls(tuple(int(t) for t in text.split(",")))

    def spec_string(self) -> str:
        lo, hi = self.labels[0], self.labels[-1] + 1
        if self.labels == tuple(range(lo, hi)):
            return f"{lo}:{hi}"
        return ",".join(str(k) for k in self.labels)


def class_range(a: int, b: int) -> ClassSet:
    return ClassSet(tuple(range(a, b)))


def enumerate_combinations(classes: ClassSet, components: int) -> list[tuple[int, ...]]:
    """All size-`components` label subsets in lexicographic order."""
    if components > len(classes):
        raise ValueError(f"cannot draw {components} distinct classes from {len(classes)}")
    return list(combinations(classes.labels, components))


# ---------------------------------------------------------------------------
# Mixture synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureSpec:
    """Recipe for one mixture dataset."""

    classes: ClassSet
    components: int = 2
    counts: tuple[int, int, int] = DEFAULT_COUNTS  # train, val, test
    gains_db: tuple[float, ...] = DEFAULT_GAINS_DB
    seed: int = 0

    def __post_init__(self):
        if self.components < 2:
            raise ValueError(f"mixtures need at least 2 components, got {self.components}")
        if math.comb(len(self.classes), self.components) < 2:
            raise ValueError(
                "training requires at least two distinct class combinations; "
                f"{len(self.classes)} classes taken {self.components} at a time give only one"
            )
        if any(c < 0 for c in self.counts):
            raise ValueError(f"counts must be non-negative, got {self.counts}")
        if not self.gains_db:
            raise ValueError("need at least one gain level")


@dataclass(eq=False)
class MixtureExample:
    example_id: str
    partition: str
    combination: tuple[int, ...]
    gain_db: float
    h: np.ndarray  # over the dataset's ordered class labels
    mixture: Waveform | None = None
    source_refs: list[Waveform] | None = None  # pre-gain clips, combination order
    clip_ids: tuple[str, ...] = ()
    mixture_path: str | None = None
    source_paths: tuple[str, ...] = ()


def _gain_factors(gain_db: float, components: int) -> list[float]:
    # the first component is the level reference; the others are offset by gain_db
    return [1.0] + [10.0 ** (gain_db / 20.0)] * (components - 1)


def mix_on_pcm_grid(sources: list[Waveform], gain_db: float) -> Waveform:
    """Mix pre-gain components on the int16 grid.

    Each component is quantized, the non-reference ones are gain-scaled and
    re-rounded, and the integer sum (saturated at the int16 range) becomes
    the mixture. This keeps `mixture == sum of gains * stored sources` exact
    after everything goes through 16-bit WAV files.
    """
    factors = _gain_factors(gain_db, len(sources))
    total = np.zeros(len(sources[0]), dtype=np.int32)
    for w, g in zip(sources, factors):
        ints = dsp.quantize_int16(w.samples).astype(np.int32)
        total += np.rint(g * ints).astype(np.int32)
    clipped = np.clip(total, -32768, 32767)
    if (clipped != total).any():
        warnings.warn(f"mixture clipped at {(clipped != total).sum()} samples")
    return Waveform(clipped.astype(np.float64) / 32767.0, sources[0].sample_rate)


class _ClipPool:
    """Per-class draw-without-replacement pool that reshuffles when exhausted."""

    def __init__(self, clips: list[ClipRecord], rng: random.Random):
        self._clips = list(clips)
        self._rng = rng
        self._queue: list[ClipRecord] = []

    def draw(self) -> ClipRecord:
        if not self._queue:
            self._queue = list(self._clips)
            self._rng.shuffle(self._queue)
        return self._queue.pop()


def synthesize(spec: MixtureSpec, corpus: Corpus) -> dict[str, list[MixtureExample]]:
    """Build the partitioned mixture set described by `spec`.

    Deterministic in `spec.seed`. Per partition, combinations cycle in
    lexicographic order (so counts differ by at most one) and every
    combination steps through the gain levels round-robin.
    """
    combos = enumerate_combinations(spec.classes, spec.components)
    label_index = {k: i for i, k in enumerate(spec.classes.labels)}
    out: dict[str, list[MixtureExample]] = {}
    for p_idx, (partition, count) in enumerate(zip(PARTITIONS, spec.counts)):
        examples = []
        if count == 0:
            out[partition] = examples
            continue
        rng = random.Random(spec.seed * 7919 + p_idx)
        pools = {}
        for label in spec.classes.labels:
            clips = corpus.partition_pool(partition, label)
            if not clips:
                raise ValueError(f"class {label} has no clips in the {partition} partition")
            pools[label] = _ClipPool(clips, rng)
        gain_cursor = {combo: 0 for combo in combos}
        for i in range(count):
            combo = combos[i % len(combos)]
            gain = spec.gains_db[gain_cursor[combo] % len(spec.gains_db)]
            gain_cursor[combo] += 1
            picks = [pools[label].draw() for label in combo]
            h = np.zeros(len(spec.classes), dtype=np.int8)
            for label in combo:
                h[label_index[label]] = 1
            examples.append(
                MixtureExample(
                    example_id=f"{partition}-{i:06d}",
                    partition=partition,
                    combination=combo,
                    gain_db=float(gain),
                    h=h,
                    mixture=mix_on_pcm_grid([c.waveform for c in picks], gain),
                    source_refs=[c.waveform for c in picks],
                    clip_ids=tuple(c.clip_id for c in picks),
                )
            )
        out[partition] = examples
    return out


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def write_manifest(
    examples: list[MixtureExample],
    path: str | Path,
    *,
    classes: ClassSet,
    components: int,
    gains_db=DEFAULT_GAINS_DB,
    seed: int = 0,
    write_audio: bool = True,
) -> Path:
    """Write the manifest (and, by default, the referenced WAV files).

    Audio lands in an `audio/` directory beside the manifest; paths in the
    manifest are relative to the manifest's directory.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    audio_dir = path.parent / "audio"
    header = {
        "manifest_version": MANIFEST_VERSION,
        "classes": list(classes.labels),
        "components": components,
        "gains_db": [float(g) for g in gains_db],
        "seed": seed,
        "sample_rate": dsp.SAMPLE_RATE,
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    for ex in examples:
        if ex.mixture_path is None:
            mixture_rel = f"audio/{ex.example_id}.mix.wav"
            source_rels = tuple(f"audio/{ex.example_id}.src{k}.wav" for k in ex.combination)
        else:
            mixture_rel, source_rels = ex.mixture_path, ex.source_paths
        if write_audio:
            audio_dir.mkdir(exist_ok=True)
            if ex.mixture is None or ex.source_refs is None:
                raise ValueError(f"example {ex.example_id} has no audio to write")
            dsp.write_wav(path.parent / mixture_rel, ex.mixture)
            for rel, src in zip(source_rels, ex.source_refs):
                dsp.write_wav(path.parent / rel, src)
        record = {
            "id": ex.example_id,
            "partition": ex.partition,
            "combination": list(ex.combination),
            "gain_db": ex.gain_db,
            "mixture_path": mixture_rel,
            "source_paths": list(source_rels),
            "h": [int(v) for v in ex.h],
            "clip_ids": list(ex.clip_ids),
        }
        lines.append(json.dumps(record, separators=(",", ":")))
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass(eq=False)
class Manifest:
    path: Path
    classes: ClassSet
    components: int
    gains_db: tuple[float, ...]
    seed: int
    examples: list[MixtureExample]

    @property
    def base_dir(self) -> Path:
        return self.path.parent

    def partition(self, name: str) -> list[MixtureExample]:
        return [e for e in self.examples if e.partition == name]


def read_manifest(path: str | Path) -> Manifest:
    """Parse a manifest and verify every referenced audio file exists."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest file")
    header = json.loads(lines[0])
    version = header.get("manifest_version")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"{path}: manifest version {version!r} is not supported (expected {MANIFEST_VERSION})")
    classes = ClassSet(tuple(header["classes"]))
    examples = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        for rel in [rec["mixture_path"], *rec["source_paths"]]:
            if not (path.parent / rel).exists():
                raise ManifestError(f"{path}: referenced audio file {rel} is missing")
        examples.append(
            MixtureExample(
                example_id=rec["id"],
                partition=rec["partition"],
                combination=tuple(rec["combination"]),
                gain_db=float(rec["gain_db"]),
                h=np.asarray(rec["h"], dtype=np.int8),
                clip_ids=tuple(rec.get("clip_ids", ())),
                mixture_path=rec["mixture_path"],
                source_paths=tuple(rec["source_paths"]),
            )
        )
    return Manifest(
        path=path,
        classes=classes,
        components=int(header["components"]),
        gains_db=tuple(header["gains_db"]),
        seed=int(header["seed"]),
        examples=examples,
    )


def synthesize_to_dir(spec: MixtureSpec, corpus: Corpus, out_dir: str | Path) -> Path:
    """synthesize() + write_manifest() into `out_dir/manifest.jsonl`."""
    by_partition = synthesize(spec, corpus)
    flat = [ex for partition in PARTITIONS for ex in by_partition[partition]]
    return write_manifest(
        flat,
        Path(out_dir) / "manifest.jsonl",
        classes=spec.classes,
        components=spec.components,
        gains_db=spec.gains_db,
        seed=spec.seed,
    )


# ---------------------------------------------------------------------------
# Training/evaluation view over a manifest
# ---------------------------------------------------------------------------


class MixtureDataset:
    """In-memory view over one partition of a manifest.

    Mixture spectrograms are cached eagerly; ground-truth sources are only
    touched on demand, and every access is counted so weakly supervised
    training can prove it never looked.
    """

    def __init__(self, manifest: Manifest, partition: str, window_size: int = dsp.WINDOW_SIZE):
        self.examples = manifest.partition(partition)
        if not self.examples:
            raise ValueError(f"manifest {manifest.path} has no {partition!r} examples")
        self.partition = partition
        self.class_labels = manifest.classes.labels
        self.base_dir = manifest.base_dir
        self.window_size = window_size
        self.hop = window_size // 2
        self.source_read_count = 0
        self._mixture_mags: torch.Tensor | None = None
        self._labels: torch.Tensor | None = None
        self._source_cache: dict[int, list[np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    def _mixture_waveform(self, i: int) -> Waveform:
        return dsp.read_wav(self.base_dir / self.examples[i].mixture_path)

    def mixture_complex(self, i: int) -> dsp.ComplexSpectrogram:
        return dsp.stft(self._mixture_waveform(i), self.window_size, self.hop)

    def _ensure_mixtures(self) -> None:
        if self._mixture_mags is None:
            mags = [self.mixture_complex(i).magnitude().mags for i in range(len(self))]
            self._mixture_mags = torch.from_numpy(np.stack(mags))
            self._labels = torch.from_numpy(
                np.stack([ex.h for ex in self.examples]).astype(np.float32)
            )

    def spectrogram_shape(self) -> tuple[int, int]:
        self._ensure_mixtures()
        return tuple(self._mixture_mags.shape[1:])

    def mixture_batch(self, indices) -> torch.Tensor:
        self._ensure_mixtures()
        return self._mixture_mags[torch.as_tensor(indices, dtype=torch.long)]

    def label_batch(self, indices) -> torch.Tensor:
        self._ensure_mixtures()
        return self._labels[torch.as_tensor(indices, dtype=torch.long)]

    def source_waveforms(self, i: int) -> list[tuple[int, Waveform]]:
        """Ground-truth components as they appear in the mixture (gain applied)."""
        ex = self.examples[i]
        self.source_read_count += len(ex.source_paths)
        factors = _gain_factors(ex.gain_db, len(ex.source_paths))
        out = []
        for label, rel, g in zip(ex.combination, ex.source_paths, factors):
            w = dsp.read_wav(self.base_dir / rel)
            out.append((label, Waveform(w.samples * g, w.sample_rate)))
        return out

    def _source_mags(self, i: int) -> list[np.ndarray]:
        if i not in self._source_cache:
            ex = self.examples[i]
            if not ex.source_paths:
                raise ValueError(
                    f"example {ex.example_id} has no ground-truth sources; "
                    "signal supervision needs a manifest with source audio"
                )
            self._source_cache[i] = [
                dsp.stft(w, self.window_size, self.hop).magnitude().mags
                for _, w in self.source_waveforms(i)
            ]
        else:
            self.source_read_count += len(self.examples[i].source_paths)
        return self._source_cache[i]

    def source_batch(self, indices) -> torch.Tensor:
        """Dense (batch, K, T, F) target magnitudes; inactive class slots are zero."""
        self._ensure_mixtures()
        t, f = self.spectrogram_shape()
        indices = list(indices)
        out = torch.zeros(len(indices), self.n_classes, t, f)
        label_index = {k: j for j, k in enumerate(self.class_labels)}
        for row, i in enumerate(indices):
            ex = self.examples[int(i)]
            for label, mags in zip(ex.combination, self._source_mags(int(i))):
                out[row, label_index[label]] = torch.from_numpy(mags)
        return out
