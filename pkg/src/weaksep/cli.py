"""Command-line interface.

Subcommands: prepare, synth, train, separate, sample, evaluate, experiment.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
Logs go to stderr; data products only ever go to files.

The corpus root can be given with --corpus or the WEAKSEP_CORPUS environment
variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import datasets, dsp, evaluation, experiments, nnet, sepmodel, training
from .datasets import ClassSet, ManifestError, MixtureDataset, MixtureSpec
from .nnet import CheckpointError, DivergenceError
from .sepmodel import ArchConfig
from .training import TrainConfig, TrainingDiverged

logger = logging.getLogger("weaksep")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is exit 1
        raise UsageError(message)


def _corpus_root(args) -> Path:
    root = args.corpus or os.environ.get("WEAKSEP_CORPUS")
    if not root:
        raise UsageError("no corpus given (use --corpus or set WEAKSEP_CORPUS)")
    return Path(root)


def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--conv-channels", default="128,128,256",
                   help="encoder conv channel sizes, comma separated")
    p.add_argument("--fc-units", type=int, default=512)
    p.add_argument("--latent-dim", type=int, default=128)


def _arch_from(args) -> ArchConfig:
    return ArchConfig(
        conv_channels=tuple(int(c) for c in args.conv_channels.split(",")),
        fc_units=args.fc_units,
        latent_dim=args.latent_dim,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    """Ingest a raw corpus and write the normalized 8 kHz version."""
    corpus = datasets.load_corpus(_corpus_root(args), class_filter=None)
    out = Path(args.out)
    val_list, test_list = [], []
    for clip in corpus.clips:
        path = out / clip.clip_id
        path.parent.mkdir(parents=True, exist_ok=True)
        dsp.write_wav(path, clip.waveform)
        if clip.partition == "val":
            val_list.append(clip.clip_id)
        elif clip.partition == "test":
            test_list.append(clip.clip_id)
    (out / "validation_list.txt").write_text("\n".join(val_list) + "\n")
    (out / "testing_list.txt").write_text("\n".join(test_list) + "\n")
    (out / "corpus_stats.json").write_text(json.dumps({
        "mean_train_rms": corpus.mean_train_rms,
        "n_clips": len(corpus.clips),
        "classes": list(corpus.labels()),
        "sample_rate": dsp.SAMPLE_RATE,
    }, indent=2))
    logger.info("prepared %d clips into %s", len(corpus.clips), out)
    return EXIT_OK


def cmd_synth(args) -> int:
    classes = ClassSet.parse(args.classes)
    corpus = datasets.load_corpus(_corpus_root(args), class_filter=classes.labels)
    spec = MixtureSpec(
        classes=classes,
        components=args.components,
        counts=(args.train, args.val, args.test),
        gains_db=tuple(float(g) for g in args.gains.split(",")),
        seed=args.seed,
    )
    manifest = datasets.synthesize_to_dir(spec, corpus, args.out)
    logger.info("wrote %s", manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = datasets.read_manifest(args.manifest)
    cfg = TrainConfig(
        variant=args.variant,
        supervision=args.supervision,
        beta=args.beta,
        batch_size=args.batch_size,
        eval_every=args.eval_every,
        patience=args.patience,
        lr=args.lr,
        seed=args.seed,
        max_iterations=args.max_iterations,
    )
    if cfg.supervision == "signal" and not all(ex.source_paths for ex in manifest.examples):
        raise ManifestError(
            f"{args.manifest}: signal supervision needs ground-truth sources, "
            "but the manifest has records without source audio"
        )
    torch.set_num_threads(args.threads)
    train_data = MixtureDataset(manifest, "train")
    val_data = MixtureDataset(manifest, "val")
    t, f = train_data.spectrogram_shape()
    bundle = sepmodel.ModelBundle(
        manifest.classes.labels, input_t=t, input_f=f,
        variant=cfg.variant, beta=cfg.beta, arch=_arch_from(args), seed=cfg.seed,
    )
    history = training.train(bundle, train_data, val_data, cfg, out_dir=args.out)
    logger.info(
        "done: stop=%s best_val=%.4f at iteration %d",
        history.stop_reason, history.best_val_loss, history.best_iteration,
    )
    return EXIT_OK


def cmd_separate(args) -> int:
    bundle, _ = sepmodel.load_bundle(args.model)
    labels = [int(k) for k in args.labels.split(",")]
    for k in labels:
        bundle.index_of(k)  # fail fast with a clear message
    mixture_path = Path(args.mixture)
    w = dsp.read_wav(mixture_path)
    if w.sample_rate != dsp.SAMPLE_RATE:
        w = dsp.resample(w, dsp.SAMPLE_RATE)
    spectrogram = dsp.stft(w)
    waveforms = sepmodel.separate(bundle, spectrogram, labels)
    out_dir = Path(args.out) if args.out else mixture_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, est in zip(labels, waveforms):
        path = out_dir / f"{mixture_path.stem}.source{k}.wav"
        dsp.write_wav(path, est)
        logger.info("wrote %s", path)
    return EXIT_OK


def cmd_sample(args) -> int:
    bundle, _ = sepmodel.load_bundle(args.model)
    ae = bundle.autoencoder_for(args.class_label)
    rng = torch.Generator().manual_seed(args.seed)
    samples = []
    for _ in range(args.count):
        noise = torch.randn(bundle.arch.latent_dim, generator=rng)
        samples.append(sepmodel.sample_source(ae, noise).mags)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, samples=np.stack(samples), class_label=args.class_label, seed=args.seed)
    logger.info("wrote %d prior samples for class %d to %s", args.count, args.class_label, out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = datasets.read_manifest(args.manifest)
    test_data = MixtureDataset(manifest, args.partition)
    torch.set_num_threads(args.threads)
    records = []
    for model_path in args.model:
        bundle, _ = sepmodel.load_bundle(model_path)
        meta = nnet.load_checkpoint(model_path).meta
        method = meta.get("method") or f"{bundle.variant}-{Path(model_path).stem}"
        records.extend(evaluation.evaluate_bundle(bundle, test_data, method=method))
    if not args.no_oracle:
        records.extend(evaluation.evaluate_oracle(test_data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_records_csv(out / "records.csv", records, run_id=args.run_id)
    evaluation.write_summary_csv(out / "summary.csv", records)
    evaluation.write_plot_data(out / "plot_data.json", records)
    logger.info("wrote evaluation of %d records to %s", len(records), out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = experiments.StudyConfig(
        corpus_root=_corpus_root(args),
        out_dir=Path(args.out),
        classes=args.classes,
        counts=(args.train, args.val, args.test),
        seed=args.seed,
        max_iterations=args.max_iterations,
        sweep_sizes=tuple(int(k) for k in args.sweep_sizes.split(",")),
        paper_scale=args.paper_scale,
        threads=args.threads,
        arch=_arch_from(args),
    )
    if args.study in ("methods", "all"):
        result = experiments.run_method_comparison(cfg)
        logger.info("method comparison medians (0 dB): %s", result["medians_0db"])
    if args.study in ("classes", "all"):
        sweep_dir = Path(args.out) / "sweep" if args.study == "all" else Path(args.out)
        result = experiments.run_class_sweep(
            experiments.StudyConfig(**{**cfg.__dict__, "out_dir": sweep_dir})
        )
        logger.info("class sweep: %s", result["per_size"])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="weaksep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest a raw corpus into normalized 8 kHz clips")
    p.add_argument("--corpus", help="raw corpus root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="synthesize a mixture dataset")
    p.add_argument("--corpus")
    p.add_argument("--classes", default="0:10", help='class set, "a:b" or comma list')
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--train", type=int, default=datasets.DEFAULT_COUNTS[0])
    p.add_argument("--val", type=int, default=datasets.DEFAULT_COUNTS[1])
    p.add_argument("--test", type=int, default=datasets.DEFAULT_COUNTS[2])
    p.add_argument("--gains", default="-6,0,6", help="gain offsets in dB, comma separated")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model bundle on a mixture manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=("ae", "vae"), default="vae")
    p.add_argument("--supervision", choices=("signal", "class"), default="class")
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--eval-every", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iterations", type=int, default=50000)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_arch_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate one mixture WAV into class sources")
    p.add_argument("--model", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--labels", required=True, help="comma-separated class labels present")
    p.add_argument("--out", help="output directory (default: beside the mixture)")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("sample", help="draw generative prior samples from one class decoder")
    p.add_argument("--model", required=True)
    p.add_argument("--class-label", type=int, required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score separation quality on a test partition")
    p.add_argument("--model", action="append", required=True, help="checkpoint (repeatable)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--partition", default="test")
    p.add_argument("--no-oracle", action="store_true")
    p.add_argument("--run-id", default="eval")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the comparison and/or class-count studies")
    p.add_argument("--corpus")
    p.add_argument("--study", choices=("methods", "classes", "all"), default="all")
    p.add_argument("--classes", default="0:10")
    p.add_argument("--train", type=int, default=experiments.DESK_COUNTS[0])
    p.add_argument("--val", type=int, default=experiments.DESK_COUNTS[1])
    p.add_argument("--test", type=int, default=experiments.DESK_COUNTS[2])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iterations", type=int, default=experiments.DESK_MAX_ITERATIONS)
    p.add_argument("--sweep-sizes", default="3,4,5")
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_arch_flags(p)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ManifestError, CheckpointError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
