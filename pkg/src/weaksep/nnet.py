"""Neural building blocks: layer specs with exact shape algebra, network assembly,
Adam, and a versioned binary checkpoint format.

torch supplies the raw tensor ops and reverse-mode differentiation. The parts
that matter for reproducibility are pinned down here instead: weight
initialization (uniform with fan-in scaling), batch-norm statistics (biased
batch variance in both modes, running stats decay 0.9), the optimizer step,
and serialization. Shapes exclude the batch dimension everywhere: feature
maps are (channels, t, f), flat activations are (dim,).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

LAYER_KINDS = (
    "conv",
    "transposed_conv",
    "fully_connected",
    "batch_norm",
    "relu",
    "softplus",
    "gaussian_latent",
)

BN_MOMENTUM = 0.1  # weight of the new batch; running statistics decay by 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Input shape incompatible with a layer."""


class DivergenceError(RuntimeError):
    """Optimization produced non-finite values."""


def conv_output(size: int, kernel: int, stride: int) -> int:
    """Valid (unpadded) convolution output size along one axis."""
    if size < kernel:
        raise ShapeError(f"kernel {kernel} exceeds input extent {size}")
    return (size - kernel) // stride + 1


def transposed_conv_output(size: int, kernel: int, stride: int) -> int:
    """Transposed (fractionally strided) convolution output size along one axis."""
    return (size - 1) * stride + kernel


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    `units` is the number of filters (conv/transposed_conv) or output units
    (fully_connected/gaussian_latent). `unflatten` reinterprets a flat input
    as a (channels, t, f) map before the op; it is how a decoder re-enters
    convolutional territory after its fully connected trunk.
    """

    kind: str
    units: int = 0
    filter_size: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    unflatten: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if any(k < 1 for k in self.filter_size) or any(s < 1 for s in self.stride):
            raise ValueError("filter dims and strides must be >= 1")
        if self.kind in ("conv", "transposed_conv", "fully_connected", "gaussian_latent"):
            if self.units < 1:
                raise ValueError(f"{self.kind} layer needs units >= 1, got {self.units}")


class _BatchNorm(torch.nn.Module):
    """Batch normalization over the batch (and spatial dims for maps).

    Train mode normalizes with the biased batch statistics and folds them
    into the running statistics; eval mode uses the running statistics. The
    running variance stores the same biased estimator that train mode uses,
    so freezing the statistics makes the two modes agree exactly.
    """

    def __init__(self, num_features: int, spatial: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.spatial = spatial
        self.momentum = momentum
        self.eps = eps
        self.weight = torch.nn.Parameter(torch.ones(num_features))
        self.bias = torch.nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x):
        dims = (0, 2, 3) if self.spatial else (0,)
        if self.training:
            mean = x.mean(dim=dims)
            # single-pass biased variance; clamp absorbs tiny negatives from cancellation
            var = ((x * x).mean(dim=dims) - mean * mean).clamp(min=0.0)
            with torch.no_grad():
                self.running_mean.mul_(1.0 - self.momentum).add_(mean, alpha=self.momentum)
                self.running_var.mul_(1.0 - self.momentum).add_(var, alpha=self.momentum)
        else:
            mean, var = self.running_mean, self.running_var
        view = (1, -1, 1, 1) if self.spatial else (1, -1)
        scale = self.weight / torch.sqrt(var + self.eps)
        shift = self.bias - mean * scale
        return torch.addcmul(shift.view(view), x, scale.view(view))


def _init_uniform(weight: torch.Tensor, bias: torch.Tensor | None, fan_in: int, generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
        if bias is not None:
            bias.uniform_(-bound, bound, generator=generator)


class Layer(torch.nn.Module):
    """One materialized LayerSpec with resolved input/output shapes."""

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...], generator: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        self.in_shape = tuple(int(d) for d in in_shape)
        self._flatten_input = False
        self.op = None

        shape = self.in_shape
        if spec.unflatten is not None:
            if len(shape) != 1 or math.prod(spec.unflatten) != shape[0]:
                raise ShapeError(f"cannot view flat input {shape} as map {spec.unflatten}")
            shape = tuple(spec.unflatten)

        kind = spec.kind
        self._freq_matmul = False
        if kind in ("conv", "transposed_conv"):
            if len(shape) != 3:
                raise ShapeError(f"{kind} needs a (channels, t, f) input, got {shape}")
            c, t, f = shape
            (kt, kf), (st, sf) = spec.filter_size, spec.stride
            if kind == "conv":
                out_t, out_f = conv_output(t, kt, st), conv_output(f, kf, sf)
                self.op = torch.nn.Conv2d(c, spec.units, (kt, kf), (st, sf))
                # a kernel spanning the whole frequency axis is a per-frame
                # linear map; route it through a matmul instead of im2col
                self._freq_matmul = kt == 1 and st == 1 and kf == f
            else:
                out_t, out_f = transposed_conv_output(t, kt, st), transposed_conv_output(f, kf, sf)
                self.op = torch.nn.ConvTranspose2d(c, spec.units, (kt, kf), (st, sf))
                self._freq_matmul = kt == 1 and st == 1 and sf == 1 and f == 1
            _init_uniform(self.op.weight, self.op.bias, c * kt * kf, generator)
            self.out_shape = (spec.units, out_t, out_f)
        elif kind in ("fully_connected", "gaussian_latent"):
            fan_in = math.prod(shape)
            self._flatten_input = len(shape) > 1
            out_units = spec.units if kind == "fully_connected" else 2 * spec.units
            self.op = torch.nn.Linear(fan_in, out_units)
            _init_uniform(self.op.weight, self.op.bias, fan_in, generator)
            self.out_shape = (out_units,)
        elif kind == "batch_norm":
            self.op = _BatchNorm(shape[0], spatial=len(shape) == 3)
            self.out_shape = shape
        else:  # relu, softplus
            self.out_shape = shape
        self._op_in_shape = shape

    def forward(self, x):
        if x.dim() < 2 or tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(
                f"{self.spec.kind}: expected input (batch, {', '.join(map(str, self.in_shape))}), "
                f"got {tuple(x.shape)}"
            )
        if self.spec.unflatten is not None:
            x = x.reshape(x.shape[0], *self.spec.unflatten)
        if self._flatten_input:
            x = x.flatten(start_dim=1)
        if self.spec.kind == "relu":
            return torch.relu(x)
        if self.spec.kind == "softplus":
            return torch.nn.functional.softplus(x)
        if self._freq_matmul:
            n = x.shape[0]
            if self.spec.kind == "conv":
                # (N, C, T, F) x weight (U, C, 1, F) -> (N, U, T, 1)
                u, c, _, f = self.op.weight.shape
                flat = x.permute(0, 2, 1, 3).reshape(n, -1, c * f)
                out = flat @ self.op.weight.reshape(u, c * f).T + self.op.bias
                return out.permute(0, 2, 1).unsqueeze(-1)
            # (N, C, T, 1) x weight (C, U, 1, F) -> (N, U, T, F)
            c, u, _, f = self.op.weight.shape
            out = x.squeeze(-1).permute(0, 2, 1) @ self.op.weight.reshape(c, u * f)
            out = out.reshape(n, -1, u, f) + self.op.bias.view(1, 1, u, 1)
            return out.permute(0, 2, 1, 3)
        return self.op(x)


class Network(torch.nn.Module):
    """A chain of Layers with the shape trace resolved at construction time."""

    def __init__(self, specs, in_shape: tuple[int, ...], generator: torch.Generator | None = None):
        super().__init__()
        layers = []
        shape = tuple(int(d) for d in in_shape)
        trace = [shape]
        for spec in specs:
            layer = Layer(spec, shape, generator)
            layers.append(layer)
            shape = layer.out_shape
            trace.append(shape)
        self.layers = torch.nn.ModuleList(layers)
        self.in_shape = trace[0]
        self.out_shape = shape
        self.shape_trace = trace

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def forward(module: torch.nn.Module, x: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """Run a layer or network in the given mode.

    "train" uses batch statistics in batch-norm layers (and updates the
    running statistics); "eval" uses the stored running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")
    return module(x)


def backward(loss: torch.Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable parameter."""
    if not (torch.is_tensor(loss) and loss.dim() == 0):
        raise ValueError("loss must be a scalar tensor")
    if loss.grad_fn is None:
        raise RuntimeError("backward called before a differentiable forward pass")
    loss.backward()


def reparameterize(mu: torch.Tensor, log_var: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(log_var / 2) * noise, differentiable in mu and log_var."""
    if mu.shape != log_var.shape or mu.shape != noise.shape:
        raise ShapeError(
            f"mismatched shapes: mu {tuple(mu.shape)}, log_var {tuple(log_var.shape)}, "
            f"noise {tuple(noise.shape)}"
        )
    return mu + torch.exp(0.5 * log_var) * noise


def softplus(x: torch.Tensor) -> torch.Tensor:
    """log(1 + e^x), overflow-safe (linear for large x)."""
    return torch.nn.functional.softplus(x)


@dataclass
class AdamState:
    """Adam hyperparameters plus the per-parameter moment accumulators."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState) -> None:
    """One bias-corrected Adam step, in place, over the parameters named in `grads`.

    The update is p -= lr * m_hat / (sqrt(v_hat) + eps) with the usual
    bias-corrected moments; multi-tensor ops keep the per-parameter dispatch
    overhead off the training loop.
    """
    names = sorted(grads)
    gs = [grads[n] for n in names]
    # cheap screen first (sums are non-finite whenever any entry is), exact
    # per-tensor verdict only if it trips, so a finite-but-huge sum overflow
    # cannot abort a healthy run
    if not torch.isfinite(torch.stack([g.sum() for g in gs])).all():
        for name, g in grads.items():
            if not torch.isfinite(g).all():
                raise DivergenceError(f"diverged: non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    with torch.no_grad():
        for n in names:
            if n not in state.m:
                state.m[n] = torch.zeros_like(params[n])
                state.v[n] = torch.zeros_like(params[n])
        ps = [params[n] for n in names]
        ms = [state.m[n] for n in names]
        vs = [state.v[n] for n in names]
        torch._foreach_mul_(ms, state.beta1)
        torch._foreach_add_(ms, gs, alpha=1.0 - state.beta1)
        torch._foreach_mul_(vs, state.beta2)
        torch._foreach_addcmul_(vs, gs, gs, value=1.0 - state.beta2)
        denom = torch._foreach_sqrt(vs)
        torch._foreach_div_(denom, math.sqrt(bc2))
        torch._foreach_add_(denom, state.eps)
        torch._foreach_addcdiv_(ps, ms, denom, value=-state.lr / bc1)


# ---------------------------------------------------------------------------
# Checkpoint format
#
#   magic   8 bytes  b"WSEPCKPT"
#   version u32 LE
#   hdrlen  u64 LE
#   header  JSON: arch, class_labels, meta, tensors: [{name, dtype, shape}],
#           adam: null | {lr, beta1, beta2, eps, step, slots: [{name, dtype, shape}]}
#   blobs   raw little-endian arrays, tensor entries first then adam slots,
#           in header order
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"WSEPCKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint file."""


@dataclass
class Checkpoint:
    arch: dict
    class_labels: list
    meta: dict
    tensors: dict[str, np.ndarray]
    adam: AdamState | None = None


def _dtype_tag(arr: np.ndarray) -> str:
    tag = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}.get(arr.dtype.name)
    if tag is None:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return tag


def _entry_list(tensors: dict[str, np.ndarray]) -> list[dict]:
    return [
        {"name": name, "dtype": _dtype_tag(tensors[name]), "shape": list(tensors[name].shape)}
        for name in sorted(tensors)
    ]


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    *,
    arch: dict,
    class_labels,
    meta: dict | None = None,
    adam: AdamState | None = None,
) -> None:
    """Write named arrays plus metadata (and optionally Adam state) to `path`."""
    tensors = {name: np.ascontiguousarray(t) for name, t in tensors.items()}
    header = {
        "arch": arch,
        "class_labels": list(class_labels),
        "meta": meta or {},
        "tensors": _entry_list(tensors),
        "adam": None,
    }
    slot_arrays: dict[str, np.ndarray] = {}
    if adam is not None:
        for kind, slots in (("m", adam.m), ("v", adam.v)):
            for name, t in slots.items():
                slot_arrays[f"{kind}/{name}"] = np.ascontiguousarray(
                    t.detach().cpu().numpy() if torch.is_tensor(t) else t
                )
        header["adam"] = {
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "step": adam.step,
            "slots": _entry_list(slot_arrays),
        }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for entry in header["tensors"]:
            f.write(tensors[entry["name"]].astype(_DTYPES[entry["dtype"]]).tobytes())
        if adam is not None:
            for entry in header["adam"]["slots"]:
                f.write(slot_arrays[entry["name"]].astype(_DTYPES[entry["dtype"]]).tobytes())


def _read_entries(f, entries: list[dict], path) -> dict[str, np.ndarray]:
    out = {}
    for entry in entries:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        raw = f.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise CheckpointError(f"{path}: truncated data for tensor {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hdrlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hdrlen).decode("utf-8"))
        tensors = _read_entries(f, header["tensors"], path)
        adam = None
        if header.get("adam") is not None:
            a = header["adam"]
            slots = _read_entries(f, a["slots"], path)
            adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
            for key, arr in slots.items():
                kind, name = key.split("/", 1)
                getattr(adam, kind)[name] = torch.from_numpy(arr)
    return Checkpoint(
        arch=header["arch"],
        class_labels=header["class_labels"],
        meta=header["meta"],
        tensors=tensors,
        adam=adam,
    )
