"""Per-class encoder/decoder bank and the divergence losses that train it.

Each source class gets its own autoencoder that maps a mixture magnitude
spectrogram to an estimate of that class's contribution. The decoder ends in
a softplus, so estimates are non-negative and a mixture estimate is the
class-gated sum of the per-class outputs. Training minimizes the generalized
KL divergence of the reconstruction, plus (for the variational variant) a
beta-weighted Gaussian KL pulling each latent posterior toward the standard
normal prior.

Two supervision regimes share the machinery: signal supervision compares each
active class estimate against that source's true spectrogram; class
supervision only compares the gated sum against the mixture itself, so it
needs nothing but the set of classes present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import nnet
from .dsp import ComplexSpectrogram, Spectrogram, Waveform, wiener_reconstruct
from .nnet import AdamState, LayerSpec, Network

GKL_EPS = 1e-8

VARIANTS = ("ae", "vae")


@dataclass(frozen=True)
class ArchConfig:
    """Encoder sizing; the decoder mirrors it with transposed convolutions.

    The first convolution spans the whole frequency axis (filters act like
    spectral templates); the remaining ones slide along time. The default
    sizes assume 30x257 inputs, where the time axis contracts 30 -> 14 -> 6.
    """

    conv_channels: tuple[int, ...] = (128, 128, 256)
    fc_units: int = 512
    latent_dim: int = 128
    time_kernel: int = 4
    time_stride: int = 2

    def as_dict(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels),
            "fc_units": self.fc_units,
            "latent_dim": self.latent_dim,
            "time_kernel": self.time_kernel,
            "time_stride": self.time_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            conv_channels=tuple(d["conv_channels"]),
            fc_units=int(d["fc_units"]),
            latent_dim=int(d["latent_dim"]),
            time_kernel=int(d["time_kernel"]),
            time_stride=int(d["time_stride"]),
        )


@dataclass
class LatentState:
    """Latent activations from one encode: z always, (mu, log_var) for vae."""

    z: torch.Tensor
    mu: torch.Tensor | None = None
    log_var: torch.Tensor | None = None


def _time_trace(arch: ArchConfig, input_t: int) -> list[int]:
    """Time extents after each time convolution; requires exact stride tiling
    so the transposed chain inverts it."""
    trace = [input_t]
    t = input_t
    for _ in arch.conv_channels[1:]:
        if t < arch.time_kernel or (t - arch.time_kernel) % arch.time_stride != 0:
            raise ValueError(
                f"time axis {input_t} does not tile with kernel {arch.time_kernel}, "
                f"stride {arch.time_stride} (stuck at {t})"
            )
        t = (t - arch.time_kernel) // arch.time_stride + 1
        trace.append(t)
    return trace


def encoder_specs(arch: ArchConfig, input_t: int, input_f: int, variant: str) -> list[LayerSpec]:
    """Conv stack -> FC -> latent head. Batch norm and ReLU follow every layer
    except the latent head."""
    _time_trace(arch, input_t)
    tk, ts = arch.time_kernel, arch.time_stride
    specs = [
        LayerSpec("conv", units=arch.conv_channels[0], filter_size=(1, input_f), stride=(1, 1)),
        LayerSpec("batch_norm"),
        LayerSpec("relu"),
    ]
    for ch in arch.conv_channels[1:]:
        specs += [
            LayerSpec("conv", units=ch, filter_size=(tk, 1), stride=(ts, 1)),
            LayerSpec("batch_norm"),
            LayerSpec("relu"),
        ]
    specs += [
        LayerSpec("fully_connected", units=arch.fc_units),
        LayerSpec("batch_norm"),
        LayerSpec("relu"),
    ]
    head = "gaussian_latent" if variant == "vae" else "fully_connected"
    specs.append(LayerSpec(head, units=arch.latent_dim))
    return specs


def decoder_specs(arch: ArchConfig, input_t: int, input_f: int) -> list[LayerSpec]:
    """Mirror of the encoder: FC trunk, reshape, transposed convolutions,
    softplus output so estimates are non-negative."""
    trace = _time_trace(arch, input_t)
    tk, ts = arch.time_kernel, arch.time_stride
    bottleneck = (arch.conv_channels[-1], trace[-1], 1)
    specs = [
        LayerSpec("fully_connected", units=arch.fc_units),
        LayerSpec("batch_norm"),
        LayerSpec("relu"),
        LayerSpec("fully_connected", units=math.prod(bottleneck)),
        LayerSpec("batch_norm"),
        LayerSpec("relu"),
    ]
    channels = list(arch.conv_channels[:-1])[::-1]  # e.g. (128, 128, 256) -> [128, 128]
    first = True
    for ch in channels:
        specs += [
            LayerSpec(
                "transposed_conv",
                units=ch,
                filter_size=(tk, 1),
                stride=(ts, 1),
                unflatten=bottleneck if first else None,
            ),
            LayerSpec("batch_norm"),
            LayerSpec("relu"),
        ]
        first = False
    specs += [
        LayerSpec(
            "transposed_conv",
            units=1,
            filter_size=(1, input_f),
            stride=(1, 1),
            unflatten=bottleneck if first else None,
        ),
        LayerSpec("softplus"),
    ]
    return specs


class ClassAutoencoder(torch.nn.Module):
    """Encoder/decoder pair owned by one source class."""

    def __init__(
        self,
        label: int,
        input_t: int,
        input_f: int,
        variant: str = "vae",
        arch: ArchConfig = ArchConfig(),
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.label = int(label)
        self.variant = variant
        self.arch = arch
        self.input_t = int(input_t)
        self.input_f = int(input_f)
        self.encoder = Network(encoder_specs(arch, input_t, input_f, variant), (1, input_t, input_f), generator)
        self.decoder = Network(decoder_specs(arch, input_t, input_f), (arch.latent_dim,), generator)
        if self.decoder.out_shape != (1, input_t, input_f):
            raise ValueError(
                f"decoder output {self.decoder.out_shape} does not invert encoder input "
                f"(1, {input_t}, {input_f})"
            )

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """(N, latent) -> non-negative (N, T, F)."""
        return self.decoder(z).squeeze(1)

    def estimate(
        self, x: torch.Tensor, mode: str = "eval", noise: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, LatentState]:
        """Estimate this class's magnitude contribution to mixtures x (N, T, F).

        vae: encode to (mu, log_var); z is the reparameterized sample in train
        mode (caller supplies standard-normal noise) and the posterior mean in
        eval mode. ae: plain deterministic code.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.train(mode == "train")
        code = self.encoder(x.unsqueeze(1))
        if self.variant == "vae":
            mu, log_var = code.chunk(2, dim=1)
            if mode == "train":
                if noise is None:
                    raise ValueError("train-mode vae estimation requires a noise tensor")
                z = nnet.reparameterize(mu, log_var, noise)
            else:
                z = mu
            state = LatentState(z=z, mu=mu, log_var=log_var)
        else:
            state = LatentState(z=code)
        return self.decode(state.z), state


class ModelBundle(torch.nn.Module):
    """One autoencoder per class plus the shared loss configuration."""

    def __init__(
        self,
        class_labels,
        input_t: int = 30,
        input_f: int = 257,
        variant: str = "vae",
        beta: float = 10.0,
        arch: ArchConfig = ArchConfig(),
        seed: int | None = None,
        norm_stats: dict | None = None,
    ):
        super().__init__()
        labels = sorted(int(k) for k in class_labels)
        if len(labels) != len(set(labels)):
            raise ValueError(f"duplicate class labels in {labels}")
        if not labels:
            raise ValueError("need at least one class")
        if beta < 0:
            raise ValueError(f"beta must be >= 0, got {beta}")
        generator = None
        if seed is not None:
            generator = torch.Generator().manual_seed(int(seed))
        self.autoencoders = torch.nn.ModuleList(
            [ClassAutoencoder(k, input_t, input_f, variant, arch, generator) for k in labels]
        )
        self.beta = float(beta)
        self.variant = variant
        self.arch = arch
        self.input_t = int(input_t)
        self.input_f = int(input_f)
        self.norm_stats = dict(norm_stats or {})

    @property
    def class_labels(self) -> tuple[int, ...]:
        return tuple(ae.label for ae in self.autoencoders)

    def index_of(self, label: int) -> int:
        for i, ae in enumerate(self.autoencoders):
            if ae.label == int(label):
                return i
        raise KeyError(f"class {label} not in bundle (have {self.class_labels})")

    def autoencoder_for(self, label: int) -> ClassAutoencoder:
        return self.autoencoders[self.index_of(label)]


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, Spectrogram):
        return torch.from_numpy(x.mags)
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x))
    return torch.as_tensor(x)


def _gkl_elements(s: torch.Tensor, s_hat: torch.Tensor, eps: float) -> torch.Tensor:
    if s.shape != s_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    if (s < 0).any() or (s_hat < 0).any():
        raise ValueError("generalized KL divergence requires non-negative inputs")
    # xlogy(0, .) = 0 gives the 0*log(0/b) = 0 convention; the floor only
    # enters the logarithm, the linear term keeps the raw estimate
    return torch.xlogy(s, s) - torch.xlogy(s, s_hat.clamp(min=eps)) - s + s_hat


def gkl(s, s_hat, eps: float = GKL_EPS) -> torch.Tensor:
    """Generalized KL divergence sum(s*log(s/s_hat) - s + s_hat), a scalar tensor.

    s_hat is floored at `eps` inside the log so zeros from an underflowed
    softplus stay finite; the total is clamped at zero, where it provably
    lives for unfloored inputs.
    """
    total = _gkl_elements(_to_tensor(s), _to_tensor(s_hat), eps).sum()
    return total.clamp(min=0.0)


def _gkl_per_example(s: torch.Tensor, s_hat: torch.Tensor, eps: float = GKL_EPS) -> torch.Tensor:
    elems = _gkl_elements(s, s_hat, eps)
    return elems.sum(dim=tuple(range(1, elems.dim()))).clamp(min=0.0)


def gaussian_kl(mu, log_var) -> torch.Tensor:
    """KL of a diagonal Gaussian posterior to the standard normal prior:
    -0.5 * sum(1 + log_var - mu^2 - exp(log_var)), a scalar tensor >= 0."""
    mu, log_var = _to_tensor(mu), _to_tensor(log_var)
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
        raise ValueError("gaussian_kl requires finite inputs")
    total = -0.5 * (1.0 + log_var - mu * mu - torch.exp(log_var)).sum()
    return total.clamp(min=0.0)


def _gaussian_kl_per_example(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    per = -0.5 * (1.0 + log_var - mu * mu - torch.exp(log_var)).sum(dim=1)
    return per.clamp(min=0.0)


# ---------------------------------------------------------------------------
# Estimation, gating, losses
# ---------------------------------------------------------------------------


def estimate_source(
    ae: ClassAutoencoder, mixture: Spectrogram, mode: str = "eval", noise=None
) -> tuple[Spectrogram, LatentState]:
    """Single-example wrapper around ClassAutoencoder.estimate."""
    x = _to_tensor(mixture).unsqueeze(0)
    n = None
    if noise is not None:
        n = _to_tensor(noise).to(x.dtype).reshape(1, -1)
    with torch.no_grad():
        s_hat, state = ae.estimate(x, mode=mode, noise=n)
    squeeze = lambda t: None if t is None else t.squeeze(0)
    return (
        Spectrogram(s_hat.squeeze(0).numpy()),
        LatentState(z=squeeze(state.z), mu=squeeze(state.mu), log_var=squeeze(state.log_var)),
    )


def mix_estimate(estimates: list[Spectrogram], h) -> Spectrogram:
    """Class-gated sum of the per-class estimates: sum_k estimates[k] * h[k]."""
    h = np.asarray(h)
    if len(estimates) != h.shape[0]:
        raise ValueError(f"got {len(estimates)} estimates but {h.shape[0]} gate entries")
    shape = estimates[0].shape
    total = np.zeros(shape, dtype=np.float64)
    for e, gate in zip(estimates, h):
        if e.shape != shape:
            raise ValueError(f"estimate shapes differ: {e.shape} vs {shape}")
        if gate:
            total += e.mags
    return Spectrogram(total)


def _check_batch(x: torch.Tensor, h: torch.Tensor, bundle) -> None:
    k = len(bundle.autoencoders)
    if h.dim() != 2 or h.shape[1] != k:
        raise ValueError(f"h must be (batch, {k}), got {tuple(h.shape)}")
    if x.dim() != 3 or x.shape[0] != h.shape[0]:
        raise ValueError(f"x must be (batch, T, F) aligned with h, got {tuple(x.shape)}")
    if (h.sum(dim=1) == 0).any():
        raise ValueError("every example must have at least one active class")


def _gated_forward(bundle, x, h, noise, mode):
    """Run each class autoencoder on its active examples.

    Returns the gated mixture estimate (batch, T, F) and the per-example
    Gaussian KL summed over active classes and latent units (zeros for the
    plain autoencoder variant). Inactive classes never see an example, so
    their parameters get no gradient from any loss built on this.
    """
    x_hat = torch.zeros_like(x)
    kl = torch.zeros(x.shape[0], dtype=x.dtype)
    for k, ae in enumerate(bundle.autoencoders):
        idx = torch.nonzero(h[:, k] > 0).flatten()
        if idx.numel() == 0:
            continue
        nk = noise[idx, k] if noise is not None else None
        s_hat, state = ae.estimate(x[idx], mode=mode, noise=nk)
        x_hat = x_hat.index_add(0, idx, s_hat)
        if state.mu is not None:
            kl = kl.index_add(0, idx, _gaussian_kl_per_example(state.mu, state.log_var))
    return x_hat, kl


def loss_class_supervised(bundle, x, h, noise=None, mode: str = "train") -> torch.Tensor:
    """Mixture-reconstruction loss needing only class-presence labels:
    mean over the batch of beta * KL(active posteriors) + GKL(x || gated sum)."""
    x, h = _to_tensor(x), _to_tensor(h)
    _check_batch(x, h, bundle)
    x_hat, kl = _gated_forward(bundle, x, h, noise, mode)
    recon = _gkl_per_example(x, x_hat)
    return (bundle.beta * kl + recon).mean()


def loss_signal_supervised(bundle, x, sources, h, noise=None, mode: str = "train") -> torch.Tensor:
    """Per-source reconstruction loss: mean over the batch of
    beta * KL(active posteriors) + sum over active classes of
    GKL(source_k || estimate_k). `sources` is (batch, K, T, F); only active
    slots are read."""
    x, h = _to_tensor(x), _to_tensor(h)
    _check_batch(x, h, bundle)
    if sources is None:
        raise ValueError("signal supervision requires ground-truth source spectrograms")
    sources = _to_tensor(sources)
    if sources.shape != (x.shape[0], len(bundle.autoencoders), x.shape[1], x.shape[2]):
        raise ValueError(
            f"sources must be (batch, K, T, F) = "
            f"({x.shape[0]}, {len(bundle.autoencoders)}, {x.shape[1]}, {x.shape[2]}), "
            f"got {tuple(sources.shape)}"
        )
    per_example = torch.zeros(x.shape[0], dtype=x.dtype)
    for k, ae in enumerate(bundle.autoencoders):
        idx = torch.nonzero(h[:, k] > 0).flatten()
        if idx.numel() == 0:
            continue
        nk = noise[idx, k] if noise is not None else None
        s_hat, state = ae.estimate(x[idx], mode=mode, noise=nk)
        term = _gkl_per_example(sources[idx, k], s_hat)
        if state.mu is not None:
            term = term + bundle.beta * _gaussian_kl_per_example(state.mu, state.log_var)
        per_example = per_example.index_add(0, idx, term)
    return per_example.mean()


def sample_source(ae: ClassAutoencoder, noise) -> Spectrogram:
    """Decode a latent prior sample into a generative class spectrogram."""
    if ae.variant != "vae":
        raise ValueError("generative sampling requires the vae variant")
    z = _to_tensor(noise).to(torch.float32).reshape(1, -1)
    ae.eval()
    with torch.no_grad():
        out = ae.decode(z)
    return Spectrogram(out.squeeze(0).numpy())


def separate(bundle: ModelBundle, mixture: ComplexSpectrogram, labels) -> list[Waveform]:
    """Separate a mixture into one waveform per requested class label.

    Runs each class autoencoder on the mixture magnitudes (eval mode,
    posterior mean) and Wiener-masks the complex mixture with the estimates.
    """
    mags = mixture.magnitude()
    estimates = [estimate_source(bundle.autoencoder_for(k), mags, mode="eval")[0] for k in labels]
    return wiener_reconstruct(estimates, mixture)


# ---------------------------------------------------------------------------
# Persistence: one checkpoint namespace per class label
# ---------------------------------------------------------------------------


def _namespace(label: int) -> str:
    return f"class{label}"


def _param_to_stored(bundle: ModelBundle) -> dict[str, str]:
    """Map bundle.named_parameters() names to class-namespaced tensor names."""
    mapping = {}
    for i, ae in enumerate(bundle.autoencoders):
        prefix = f"autoencoders.{i}."
        for name, _ in ae.named_parameters():
            mapping[prefix + name] = f"{_namespace(ae.label)}/{name}"
    return mapping


def save_bundle(path, bundle: ModelBundle, adam: AdamState | None = None, extra_meta: dict | None = None) -> None:
    """Serialize the bundle (parameters, batch-norm statistics, config) and
    optionally the optimizer state."""
    tensors = {}
    for ae in bundle.autoencoders:
        for name, t in ae.state_dict().items():
            tensors[f"{_namespace(ae.label)}/{name}"] = t.detach().cpu().numpy()
    meta = {
        "beta": bundle.beta,
        "variant": bundle.variant,
        "input_t": bundle.input_t,
        "input_f": bundle.input_f,
        "norm_stats": bundle.norm_stats,
    }
    meta.update(extra_meta or {})
    stored_adam = None
    if adam is not None:
        rename = _param_to_stored(bundle)
        stored_adam = AdamState(lr=adam.lr, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps, step=adam.step)
        stored_adam.m = {rename[n]: t for n, t in adam.m.items()}
        stored_adam.v = {rename[n]: t for n, t in adam.v.items()}
    nnet.save_checkpoint(
        path,
        tensors,
        arch=bundle.arch.as_dict(),
        class_labels=list(bundle.class_labels),
        meta=meta,
        adam=stored_adam,
    )


def load_bundle(path) -> tuple[ModelBundle, AdamState | None]:
    """Rebuild a ModelBundle (and optimizer state, if stored) from a checkpoint."""
    ckpt = nnet.load_checkpoint(path)
    meta = ckpt.meta
    bundle = ModelBundle(
        ckpt.class_labels,
        input_t=meta["input_t"],
        input_f=meta["input_f"],
        variant=meta["variant"],
        beta=meta["beta"],
        arch=ArchConfig.from_dict(ckpt.arch),
        norm_stats=meta.get("norm_stats", {}),
    )
    for ae in bundle.autoencoders:
        prefix = f"{_namespace(ae.label)}/"
        state = {
            name[len(prefix):]: torch.from_numpy(arr)
            for name, arr in ckpt.tensors.items()
            if name.startswith(prefix)
        }
        ae.load_state_dict(state, strict=True)
    adam = ckpt.adam
    if adam is not None:
        rename = {stored: live for live, stored in _param_to_stored(bundle).items()}
        adam.m = {rename[n]: t for n, t in adam.m.items()}
        adam.v = {rename[n]: t for n, t in adam.v.items()}
    return bundle, adam
