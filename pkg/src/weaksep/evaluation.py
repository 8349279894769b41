"""Separation quality metrics, oracle baseline, and distribution summaries.

An estimate is decomposed against the reference sources with instantaneous
(filter length 1) orthogonal projections: the target part is the projection
onto the true source, the interference part is the remainder of the
projection onto the span of all references, and the artifact part is
whatever is left. SDR/SIR/SAR are energy ratios of those parts in dB.

Using length-1 projections instead of the multi-tap allowed-distortion
filters of the classic toolboxes makes the metrics cheap and fully
specified; absolute dB values read lower than toolbox numbers, but
comparisons across methods on the same data remain valid. Every serialized
output states this convention in its header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import dsp, sepmodel
from .datasets import MixtureDataset
from .dsp import ComplexSpectrogram, Spectrogram, Waveform
from .sepmodel import ModelBundle

CAP_DB = 300.0  # serialized stand-in for +-infinity

CONVENTION_NOTE = (
    "instantaneous (filter length 1) projections; dB values are not comparable "
    "to multi-tap BSS toolboxes. percentiles use linear interpolation; "
    f"+-inf capped at +-{CAP_DB:g} dB with capped_flag set"
)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """estimate = s_target + e_interf + e_artif, mutually orthogonal parts."""

    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray


def decompose(estimate: Waveform, references: list[Waveform], target_index: int) -> Decomposition:
    """Project an estimate against the references.

    s_target is the projection onto the target reference alone; e_interf is
    the rest of the projection onto the span of all references; e_artif is
    the residual outside that span.
    """
    est = estimate.samples
    refs = np.stack([r.samples for r in references])
    if refs.shape[1] != est.shape[0]:
        raise ValueError(f"length mismatch: estimate {est.shape[0]}, references {refs.shape[1]}")
    if not 0 <= target_index < len(references):
        raise ValueError(f"target_index {target_index} out of range for {len(references)} references")
    energies = np.sum(refs ** 2, axis=1)
    if np.any(energies == 0.0):
        raise ValueError("zero-energy reference")
    gram = refs @ refs.T
    if np.linalg.cond(gram) > 1e12:
        raise ValueError("references are (numerically) linearly dependent")
    target = refs[target_index]
    s_target = (est @ target / energies[target_index]) * target
    coeffs = np.linalg.solve(gram, refs @ est)
    projection = coeffs @ refs
    e_interf = projection - s_target
    e_artif = est - projection
    return Decomposition(s_target, e_interf, e_artif)


@dataclass(frozen=True)
class MetricValues:
    sdr: float
    sir: float
    sar: float


def _ratio_db(num: float, den: float) -> float:
    if num == 0.0:
        return float("-inf")
    if den == 0.0:
        return float("inf")
    return 10.0 * math.log10(num / den)


def metrics(d: Decomposition) -> MetricValues:
    """SDR, SIR, SAR in dB; zero numerators map to -inf, zero denominators to +inf."""
    e_target = float(np.sum(d.s_target ** 2))
    e_interf = float(np.sum(d.e_interf ** 2))
    e_artif = float(np.sum(d.e_artif ** 2))
    return MetricValues(
        sdr=_ratio_db(e_target, float(np.sum((d.e_interf + d.e_artif) ** 2))),
        sir=_ratio_db(e_target, e_interf),
        sar=_ratio_db(float(np.sum((d.s_target + d.e_interf) ** 2)), e_artif),
    )


def oracle_separate(mixture: ComplexSpectrogram, true_mags: list[Spectrogram]) -> list[Waveform]:
    """Wiener reconstruction driven by the true source magnitudes; the upper
    bound any estimate-driven mask can aim for."""
    return dsp.wiener_reconstruct(true_mags, mixture)


@dataclass(frozen=True)
class EvalRecord:
    mixture_id: str
    target_class: int
    method: str
    gain_db: float
    sdr: float
    sir: float
    sar: float


# ---------------------------------------------------------------------------
# Dataset-level drivers
# ---------------------------------------------------------------------------


def _evaluate_estimates(
    example, estimates: list[Waveform], references, method: str, edge_trim: int
) -> list[EvalRecord]:
    """Score each estimate against the reference stack.

    The first and last `edge_trim` samples are dropped from both sides: an
    uncentered inverse transform only has partial window coverage there, so
    those samples measure framing, not mask quality.
    """
    records = []
    n = len(estimates[0])
    sl = slice(edge_trim, n - edge_trim)
    refs = [Waveform(w.samples[sl], w.sample_rate) for _, w in references]
    for slot, (label, _) in enumerate(references):
        est = Waveform(estimates[slot].samples[sl], estimates[slot].sample_rate)
        m = metrics(decompose(est, refs, slot))
        records.append(
            EvalRecord(example.example_id, label, method, example.gain_db, m.sdr, m.sir, m.sar)
        )
    return records


def evaluate_bundle(bundle: ModelBundle, data: MixtureDataset, method: str | None = None) -> list[EvalRecord]:
    """Separate every mixture in `data` with `bundle` and score each source."""
    method = method or f"{bundle.variant}-class"
    records = []
    with torch.no_grad():
        for i in range(len(data)):
            ex = data.examples[i]
            mixture = data.mixture_complex(i)
            references = data.source_waveforms(i)
            estimates = sepmodel.separate(bundle, mixture, ex.combination)
            records.extend(_evaluate_estimates(ex, estimates, references, method, data.hop))
    return records


def evaluate_oracle(data: MixtureDataset, method: str = "oracle") -> list[EvalRecord]:
    """Score Wiener masking computed from the true source magnitudes."""
    records = []
    for i in range(len(data)):
        ex = data.examples[i]
        mixture = data.mixture_complex(i)
        references = data.source_waveforms(i)
        true_mags = [
            dsp.stft(w, data.window_size, data.hop).magnitude() for _, w in references
        ]
        estimates = oracle_separate(mixture, true_mags)
        records.extend(_evaluate_estimates(ex, estimates, references, method, data.hop))
    return records


# ---------------------------------------------------------------------------
# Summaries and serialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupSummary:
    key: tuple
    count: int  # finite records
    excluded: int  # non-finite records dropped from the statistics
    median: float | None
    q25: float | None
    q75: float | None
    min: float | None
    max: float | None

    @property
    def degenerate(self) -> bool:
        return self.count == 0


def summarize(records: list[EvalRecord], group_keys=("method",), metric: str = "sdr") -> list[GroupSummary]:
    """Per-group order statistics of one metric; +-inf records are excluded
    and counted. Groups with no finite values are flagged via count == 0."""
    if not records:
        raise ValueError("no records to summarize")
    valid_keys = {f.name for f in fields(EvalRecord)}
    for key in group_keys:
        if key not in valid_keys:
            raise ValueError(f"unknown group key {key!r}")
    groups: dict[tuple, list[float]] = {}
    excluded: dict[tuple, int] = {}
    for rec in records:
        key = tuple(getattr(rec, k) for k in group_keys)
        value = getattr(rec, metric)
        groups.setdefault(key, [])
        excluded.setdefault(key, 0)
        if math.isfinite(value):
            groups[key].append(value)
        else:
            excluded[key] += 1
    out = []
    for key in sorted(groups):
        values = groups[key]
        if values:
            arr = np.asarray(values)
            q25, q50, q75 = np.percentile(arr, [25, 50, 75])  # linear interpolation
            out.append(GroupSummary(key, len(values), excluded[key], float(q50), float(q25),
                                    float(q75), float(arr.min()), float(arr.max())))
        else:
            out.append(GroupSummary(key, 0, excluded[key], None, None, None, None, None))
    return out


def _cap(value: float) -> tuple[float, int]:
    if math.isfinite(value):
        return value, 0
    return math.copysign(CAP_DB, value), 1


def write_records_csv(path: str | Path, records: list[EvalRecord], run_id: str) -> None:
    with open(path, "w") as f:
        f.write(f"# {CONVENTION_NOTE}\n")
        f.write("run_id,mixture_id,target_class,method,gain_db,sdr,sir,sar,capped_flag\n")
        for r in records:
            vals, flags = zip(*(_cap(v) for v in (r.sdr, r.sir, r.sar)))
            f.write(
                f"{run_id},{r.mixture_id},{r.target_class},{r.method},{r.gain_db:g},"
                f"{vals[0]:.6f},{vals[1]:.6f},{vals[2]:.6f},{max(flags)}\n"
            )


def read_records_csv(path: str | Path) -> list[EvalRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line.startswith("run_id") or not line.strip():
            continue
        (_, mixture_id, target_class, method, gain_db, sdr, sir, sar, capped) = line.split(",")
        vals = [float(v) for v in (sdr, sir, sar)]
        if int(capped):
            vals = [math.copysign(math.inf, v) if abs(v) >= CAP_DB else v for v in vals]
        records.append(EvalRecord(mixture_id, int(target_class), method, float(gain_db), *vals))
    return records


def write_summary_csv(path: str | Path, records: list[EvalRecord], group_keys=("method",)) -> None:
    with open(path, "w") as f:
        f.write(f"# {CONVENTION_NOTE}\n")
        f.write("metric," + ",".join(group_keys) + ",count,excluded,median,q25,q75,min,max\n")
        for metric in ("sdr", "sir", "sar"):
            for s in summarize(records, group_keys, metric):
                stats = [s.median, s.q25, s.q75, s.min, s.max]
                rendered = ",".join("" if v is None else f"{v:.4f}" for v in stats)
                f.write(f"{metric}," + ",".join(str(k) for k in s.key)
                        + f",{s.count},{s.excluded},{rendered}\n")


def write_plot_data(path: str | Path, records: list[EvalRecord], group_keys=("method",)) -> None:
    """Raw per-group values plus summary stats, for external violin plotting."""
    payload = {"convention": CONVENTION_NOTE, "group_keys": list(group_keys), "metrics": {}}
    for metric in ("sdr", "sir", "sar"):
        groups = {}
        for s in summarize(records, group_keys, metric):
            name = "/".join(str(k) for k in s.key)
            values = [
                getattr(r, metric)
                for r in records
                if tuple(getattr(r, k) for k in group_keys) == s.key and math.isfinite(getattr(r, metric))
            ]
            groups[name] = {
                "values": values,
                "count": s.count,
                "excluded": s.excluded,
                "median": s.median,
                "q25": s.q25,
                "q75": s.q75,
            }
        payload["metrics"][metric] = groups
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
