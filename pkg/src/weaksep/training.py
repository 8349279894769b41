"""Mini-batch training with validation-driven early stopping.

The trainer shuffles the training set each epoch (batches may straddle epoch
boundaries), takes one Adam step per batch, and every `eval_every` iterations
scores the validation set with the mixture-reconstruction divergence only (no
KL term). Training stops after `patience` consecutive evaluations without a
strictly lower validation loss, or at the iteration cap; the parameters from
the best evaluation are restored and written out.

In class-supervised mode the trainer is firewalled from ground-truth sources:
it never calls the dataset's source accessors, and asserts the dataset's
source-read counter did not move.
"""

from __future__ import annotations

import copy
import csv
import logging
import random
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import nnet, sepmodel
from .datasets import MixtureDataset
from .nnet import AdamState
from .sepmodel import ModelBundle

logger = logging.getLogger(__name__)

SUPERVISIONS = ("signal", "class")


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "vae"
    supervision: str = "class"
    beta: float = 10.0
    batch_size: int = 100
    eval_every: int = 200
    patience: int = 10
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_iterations: int = 50000

    def __post_init__(self):
        if self.variant not in sepmodel.VARIANTS:
            raise ValueError(f"variant must be one of {sepmodel.VARIANTS}, got {self.variant!r}")
        if self.supervision not in SUPERVISIONS:
            raise ValueError(f"supervision must be one of {SUPERVISIONS}, got {self.supervision!r}")
        if min(self.batch_size, self.eval_every, self.patience, self.max_iterations) < 1:
            raise ValueError("batch_size, eval_every, patience and max_iterations must be >= 1")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    @property
    def run_id(self) -> str:
        return f"{self.variant}-{self.supervision}-seed{self.seed}"


@dataclass(frozen=True)
class HistoryPoint:
    iteration: int
    train_loss: float
    val_loss: float
    wall_clock: float  # seconds since training started
    timestamp: str = ""  # ISO 8601, captured at evaluation time


@dataclass
class TrainHistory:
    points: list[HistoryPoint] = field(default_factory=list)
    best_iteration: int = 0
    best_val_loss: float = float("inf")
    stop_reason: str = ""

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "train_loss", "val_loss", "timestamp"])
            for p in self.points:
                writer.writerow([p.iteration, repr(p.train_loss), repr(p.val_loss), p.timestamp])


class _BatchStream:
    """Deterministic stream of batch index tensors; reshuffles per epoch and
    lets batches span epoch boundaries."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self._n = n
        self._batch_size = batch_size
        self._rng = random.Random(seed)
        self._queue: list[int] = []

    def next_batch(self) -> torch.Tensor:
        while len(self._queue) < self._batch_size:
            order = list(range(self._n))
            self._rng.shuffle(order)
            self._queue.extend(order)
        batch, self._queue = self._queue[: self._batch_size], self._queue[self._batch_size:]
        return torch.tensor(batch, dtype=torch.long)


def validate(bundle: ModelBundle, data: MixtureDataset, batch_size: int = 100) -> float:
    """Mean mixture-reconstruction divergence over the validation examples
    (eval mode, posterior mean, no KL term)."""
    if len(data) == 0:
        raise ValueError("validation set is empty")
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(data)))
            x = data.mixture_batch(idx)
            h = data.label_batch(idx)
            x_hat, _ = sepmodel._gated_forward(bundle, x, h, noise=None, mode="eval")
            total += float(sepmodel._gkl_per_example(x, x_hat).sum().item())
    return total / len(data)


def _compute_loss(bundle, data, idx, cfg, noise):
    x = data.mixture_batch(idx)
    h = data.label_batch(idx)
    if cfg.supervision == "signal":
        sources = data.source_batch(idx)
        return sepmodel.loss_signal_supervised(bundle, x, sources, h, noise=noise, mode="train")
    return sepmodel.loss_class_supervised(bundle, x, h, noise=noise, mode="train")


def train(
    bundle: ModelBundle,
    train_data: MixtureDataset,
    val_data: MixtureDataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainHistory:
    """Train `bundle` in place; returns the history. The bundle ends up with
    the best-validation parameters. If `out_dir` is given, writes
    `{run_id}.best.ckpt`, `{run_id}.last.ckpt` and `{run_id}.history.csv`.
    """
    if cfg.supervision == "signal" and not all(ex.source_paths for ex in train_data.examples):
        raise ValueError("signal supervision needs ground-truth sources in the training manifest")
    firewalled = cfg.supervision == "class"
    read_mark = train_data.source_read_count + val_data.source_read_count

    stream = _BatchStream(len(train_data), cfg.batch_size, cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    adam = AdamState(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    params = dict(bundle.named_parameters())
    latent = bundle.arch.latent_dim
    k = len(bundle.autoencoders)

    history = TrainHistory()
    best_state = None
    bad_evals = 0
    started = time.monotonic()
    recent_train = 0.0

    meta = {"supervision": cfg.supervision, "method": f"{cfg.variant}-{cfg.supervision}"}

    def _save(history: TrainHistory) -> None:
        if out_dir is None:
            return
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sepmodel.save_bundle(out / f"{cfg.run_id}.last.ckpt", bundle, adam=adam, extra_meta=meta)
        if best_state is not None:
            bundle.load_state_dict(best_state)
        sepmodel.save_bundle(out / f"{cfg.run_id}.best.ckpt", bundle, extra_meta=meta)
        history.to_csv(out / f"{cfg.run_id}.history.csv")

    iteration = 0
    while iteration < cfg.max_iterations:
        iteration += 1
        idx = stream.next_batch()
        noise = None
        if cfg.variant == "vae":
            noise = torch.randn(len(idx), k, latent, generator=noise_gen)
        loss = _compute_loss(bundle, train_data, idx, cfg, noise)
        if not torch.isfinite(loss):
            _save(history)
            raise TrainingDiverged(f"diverged: non-finite loss at iteration {iteration}")
        for p in params.values():
            p.grad = None
        nnet.backward(loss)
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        nnet.adam_update(params, grads, adam)
        recent_train = float(loss.item())

        if iteration % cfg.eval_every == 0:
            val_loss = validate(bundle, val_data)
            history.points.append(
                HistoryPoint(
                    iteration,
                    recent_train,
                    val_loss,
                    time.monotonic() - started,
                    datetime.now(timezone.utc).isoformat(),
                )
            )
            if val_loss < history.best_val_loss:
                history.best_val_loss = val_loss
                history.best_iteration = iteration
                best_state = copy.deepcopy(bundle.state_dict())
                bad_evals = 0
            else:
                bad_evals += 1
            logger.info(
                "%s it=%d train=%.4f val=%.4f best=%.4f@%d",
                cfg.run_id, iteration, recent_train, val_loss,
                history.best_val_loss, history.best_iteration,
            )
            if bad_evals >= cfg.patience:
                history.stop_reason = "early_stop"
                break
    if not history.stop_reason:
        history.stop_reason = "max_iterations"

    if firewalled:
        assert train_data.source_read_count + val_data.source_read_count == read_mark, (
            "class-supervised training must never read ground-truth sources"
        )
    _save(history)
    if out_dir is None and best_state is not None:
        bundle.load_state_dict(best_state)
    return history
