"""Experiment drivers: the four-way supervision comparison and the
class-count sweep.

Both drivers synthesize their mixture datasets from a corpus, train with the
shared defaults (beta 10, batch 100, validation every 200 iterations,
patience 10), evaluate the test partition, and write records, summaries,
violin-plot data and a provenance file into the output directory.

Desk-scale defaults (1500/200/200 mixtures, sweep over 3..5 classes, a
3000-iteration cap) keep a full study within a couple of CPU-hours;
`paper_scale=True` restores 15000/1875/1875, the 3..10 sweep and a
50000-iteration cap.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from . import __version__, datasets, evaluation, sepmodel, training
from .datasets import ClassSet, Corpus, MixtureDataset, MixtureSpec
from .sepmodel import ArchConfig, ModelBundle
from .training import TrainConfig

logger = logging.getLogger(__name__)

DESK_COUNTS = (1500, 200, 200)
DESK_MAX_ITERATIONS = 3000
DESK_SWEEP = (3, 4, 5)
PAPER_SWEEP = (3, 4, 5, 6, 7, 8, 9, 10)

METHOD_GRID = (("ae", "signal"), ("ae", "class"), ("vae", "signal"), ("vae", "class"))


@dataclass(frozen=True)
class StudyConfig:
    corpus_root: Path
    out_dir: Path
    classes: str = "0:10"  # comparison study; the sweep derives its own sets
    components: int = 2
    counts: tuple[int, int, int] = DESK_COUNTS
    gains_db: tuple[float, ...] = datasets.DEFAULT_GAINS_DB
    seed: int = 0
    beta: float = 10.0
    batch_size: int = 100
    eval_every: int = 200
    patience: int = 10
    max_iterations: int = DESK_MAX_ITERATIONS
    sweep_sizes: tuple[int, ...] = DESK_SWEEP
    paper_scale: bool = False
    threads: int = 1
    arch: ArchConfig = field(default_factory=ArchConfig)

    def resolved(self) -> "StudyConfig":
        if not self.paper_scale:
            return self
        return replace(
            self,
            counts=datasets.DEFAULT_COUNTS,
            max_iterations=50000,
            sweep_sizes=PAPER_SWEEP,
        )

    def provenance(self) -> dict:
        d = {
            "package_version": __version__,
            "torch_version": torch.__version__,
            "corpus_root": str(self.corpus_root),
            "out_dir": str(self.out_dir),
            "classes": self.classes,
            "components": self.components,
            "counts": list(self.counts),
            "gains_db": list(self.gains_db),
            "seed": self.seed,
            "beta": self.beta,
            "batch_size": self.batch_size,
            "eval_every": self.eval_every,
            "patience": self.patience,
            "max_iterations": self.max_iterations,
            "sweep_sizes": list(self.sweep_sizes),
            "paper_scale": self.paper_scale,
            "threads": self.threads,
            "arch": self.arch.as_dict(),
        }
        return d


def _train_config(cfg: StudyConfig, variant: str, supervision: str) -> TrainConfig:
    return TrainConfig(
        variant=variant,
        supervision=supervision,
        beta=cfg.beta,
        batch_size=cfg.batch_size,
        eval_every=cfg.eval_every,
        patience=cfg.patience,
        seed=cfg.seed,
        max_iterations=cfg.max_iterations,
    )


def _dataset_dir(cfg: StudyConfig, classes: ClassSet) -> Path:
    return Path(cfg.out_dir) / f"data_c{classes.spec_string().replace(':', '-').replace(',', '_')}"


def build_dataset(cfg: StudyConfig, corpus: Corpus, classes: ClassSet) -> datasets.Manifest:
    """Synthesize (or reuse, if already on disk) the mixture dataset for `classes`."""
    out = _dataset_dir(cfg, classes)
    manifest_path = out / "manifest.jsonl"
    if manifest_path.exists():
        logger.info("reusing existing dataset %s", manifest_path)
        return datasets.read_manifest(manifest_path)
    spec = MixtureSpec(
        classes=classes,
        components=cfg.components,
        counts=cfg.counts,
        gains_db=cfg.gains_db,
        seed=cfg.seed,
    )
    logger.info("synthesizing dataset %s (%s mixtures)", out.name, sum(cfg.counts))
    datasets.synthesize_to_dir(spec, corpus, out)
    return datasets.read_manifest(manifest_path)


def train_one(
    cfg: StudyConfig,
    manifest: datasets.Manifest,
    variant: str,
    supervision: str,
    corpus: Corpus,
    run_dir: Path,
) -> tuple[ModelBundle, training.TrainHistory, dict]:
    """Train one variant/supervision cell and return the bundle, history, and
    the dataset source-read counters (the firewall evidence)."""
    train_data = MixtureDataset(manifest, "train")
    val_data = MixtureDataset(manifest, "val")
    t, f = train_data.spectrogram_shape()
    bundle = ModelBundle(
        manifest.classes.labels,
        input_t=t,
        input_f=f,
        variant=variant,
        beta=cfg.beta,
        arch=cfg.arch,
        seed=cfg.seed,
        norm_stats={"mean_train_rms": corpus.mean_train_rms},
    )
    tc = _train_config(cfg, variant, supervision)
    started = time.monotonic()
    history = training.train(bundle, train_data, val_data, tc, out_dir=run_dir)
    counters = {
        "train_source_reads": train_data.source_read_count,
        "val_source_reads": val_data.source_read_count,
    }
    logger.info(
        "%s finished: stop=%s best_val=%.4f@%d (%.1f min)",
        tc.run_id, history.stop_reason, history.best_val_loss,
        history.best_iteration, (time.monotonic() - started) / 60,
    )
    return bundle, history, counters


def run_method_comparison(cfg: StudyConfig, corpus: Corpus | None = None) -> dict:
    """Train all four variant/supervision cells on one class set, evaluate the
    test partition against the oracle mask, and summarize."""
    cfg = cfg.resolved()
    torch.set_num_threads(cfg.threads)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = ClassSet.parse(cfg.classes)
    if corpus is None:
        corpus = datasets.load_corpus(cfg.corpus_root, class_filter=classes.labels)
    manifest = build_dataset(cfg, corpus, classes)
    test_data = MixtureDataset(manifest, "test")

    records = []
    result: dict = {"methods": {}, "config": cfg.provenance()}
    for variant, supervision in METHOD_GRID:
        method = f"{variant}-{supervision}"
        bundle, history, counters = train_one(
            cfg, manifest, variant, supervision, corpus, out / "runs"
        )
        records.extend(evaluation.evaluate_bundle(bundle, test_data, method=method))
        result["methods"][method] = {
            "stop_reason": history.stop_reason,
            "best_iteration": history.best_iteration,
            "best_val_loss": history.best_val_loss,
            "evaluations": len(history.points),
            **counters,
        }
    records.extend(evaluation.evaluate_oracle(test_data))

    run_id = f"methods-{classes.spec_string()}-seed{cfg.seed}"
    evaluation.write_records_csv(out / "records.csv", records, run_id)
    evaluation.write_summary_csv(out / "summary.csv", records, group_keys=("method",))
    evaluation.write_plot_data(out / "plot_data.json", records, group_keys=("method",))
    (out / "provenance.json").write_text(json.dumps(cfg.provenance(), indent=2, sort_keys=True))

    result["records"] = records
    result["medians_0db"] = median_sdr_by_method([r for r in records if r.gain_db == 0.0])
    result["paths"] = {
        "records": str(out / "records.csv"),
        "summary": str(out / "summary.csv"),
        "plot_data": str(out / "plot_data.json"),
        "provenance": str(out / "provenance.json"),
    }
    return result


def sweep_class_sets(sizes) -> dict[int, list[ClassSet]]:
    """Class sets per sweep size. Size 3 uses the three disjoint sets (0:3,
    3:6, 6:9) to average out inter-class differences; other sizes use 0:K."""
    out: dict[int, list[ClassSet]] = {}
    for k in sizes:
        if k == 3:
            out[k] = [datasets.class_range(0, 3), datasets.class_range(3, 6), datasets.class_range(6, 9)]
        else:
            out[k] = [datasets.class_range(0, k)]
    return out


def run_class_sweep(cfg: StudyConfig, corpus: Corpus | None = None) -> dict:
    """Train the class-supervised vae on datasets of varying class counts and
    report how the separation medians move."""
    cfg = cfg.resolved()
    torch.set_num_threads(cfg.threads)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sets = sweep_class_sets(cfg.sweep_sizes)
    needed = sorted({k for group in sets.values() for cs in group for k in cs.labels})
    if corpus is None:
        corpus = datasets.load_corpus(cfg.corpus_root, class_filter=needed)

    records = []
    per_size: dict[int, dict] = {}
    for size, class_sets in sets.items():
        size_records = []
        for classes in class_sets:
            manifest = build_dataset(cfg, corpus, classes)
            test_data = MixtureDataset(manifest, "test")
            bundle, history, _ = train_one(cfg, manifest, "vae", "class", corpus, out / "runs")
            tag = f"vae-class-k{size}-{classes.spec_string()}"
            size_records.extend(evaluation.evaluate_bundle(bundle, test_data, method=tag))
        records.extend(size_records)
        zero_db = [r for r in size_records if r.gain_db == 0.0]
        summaries = evaluation.summarize(zero_db, group_keys=(), metric="sdr") if zero_db else []
        per_size[size] = {
            "median_sdr_0db": summaries[0].median if summaries else None,
            "n_records": len(size_records),
        }

    run_id = f"sweep-seed{cfg.seed}"
    evaluation.write_records_csv(out / "records.csv", records, run_id)
    evaluation.write_summary_csv(out / "summary.csv", records, group_keys=("method",))
    evaluation.write_plot_data(out / "plot_data.json", records, group_keys=("method",))
    (out / "provenance.json").write_text(json.dumps(cfg.provenance(), indent=2, sort_keys=True))
    return {
        "per_size": per_size,
        "records": records,
        "config": cfg.provenance(),
        "paths": {"records": str(out / "records.csv"), "plot_data": str(out / "plot_data.json")},
    }


def median_sdr_by_method(records) -> dict[str, float]:
    """Median SDR per method tag over finite records."""
    out = {}
    for summary in evaluation.summarize(records, group_keys=("method",), metric="sdr"):
        out[summary.key[0]] = summary.median
    return out
