import math

import numpy as np
import pytest
import torch

from fdcheck import check_gradients, fd_gradient, sample_coords, assert_grads_close
from weaksep import nnet
from weaksep.nnet import (
    AdamState,
    Checkpoint,
    CheckpointError,
    DivergenceError,
    Layer,
    LayerSpec,
    Network,
    ShapeError,
    adam_update,
    backward,
    conv_output,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
    softplus,
    transposed_conv_output,
)


# ---------------------------------------------------------------------------
# shape algebra
# ---------------------------------------------------------------------------


def test_conv_shape_chain_matches_decoder_inverse():
    # encoder time axis 30 -> 14 -> 6; transposed chain inverts it exactly
    assert conv_output(30, 4, 2) == 14
    assert conv_output(14, 4, 2) == 6
    assert transposed_conv_output(6, 4, 2) == 14
    assert transposed_conv_output(14, 4, 2) == 30


def test_conv_output_rejects_oversized_kernel():
    with pytest.raises(ShapeError):
        conv_output(3, 4, 1)


def test_layer_spec_validation():
    with pytest.raises(ValueError, match="unknown layer kind"):
        LayerSpec("pool")
    with pytest.raises(ValueError, match="units"):
        LayerSpec("conv", units=0)
    with pytest.raises(ValueError, match=">= 1"):
        LayerSpec("conv", units=2, stride=(0, 1))


def test_network_shape_trace():
    net = Network(
        [
            LayerSpec("conv", units=5, filter_size=(1, 9), stride=(1, 1)),
            LayerSpec("batch_norm"),
            LayerSpec("relu"),
            LayerSpec("fully_connected", units=4),
        ],
        in_shape=(1, 6, 9),
    )
    assert net.shape_trace == [(1, 6, 9), (5, 6, 1), (5, 6, 1), (5, 6, 1), (4,)]
    out = net(torch.randn(2, 1, 6, 9))
    assert out.shape == (2, 4)


def test_forward_shape_error_names_expected_and_actual():
    layer = Layer(LayerSpec("conv", units=2, filter_size=(1, 3)), (1, 4, 3))
    with pytest.raises(ShapeError, match=r"expected input \(batch, 1, 4, 3\), got \(2, 1, 4, 4\)"):
        layer(torch.randn(2, 1, 4, 4))


def test_forward_mode_validation():
    layer = Layer(LayerSpec("relu"), (3,))
    with pytest.raises(ValueError, match="mode"):
        nnet.forward(layer, torch.zeros(1, 3), mode="predict")


def test_unflatten_restores_map_shape():
    layer = Layer(
        LayerSpec("transposed_conv", units=2, filter_size=(4, 1), stride=(2, 1), unflatten=(3, 2, 1)),
        (6,),
    )
    assert layer.out_shape == (2, 6, 1)
    assert layer(torch.randn(5, 6)).shape == (5, 2, 6, 1)
    with pytest.raises(ShapeError, match="cannot view"):
        Layer(LayerSpec("transposed_conv", units=2, filter_size=(4, 1), unflatten=(3, 2, 1)), (7,))


# ---------------------------------------------------------------------------
# activations and reparameterization
# ---------------------------------------------------------------------------


def test_softplus_values_and_stability():
    assert float(softplus(torch.tensor(0.0))) == pytest.approx(math.log(2.0), rel=1e-6)
    big = softplus(torch.tensor([1e4, -1e4, 0.0]))
    assert torch.isfinite(big).all()  # no overflow or NaN up to |x| = 1e4
    assert float(big[0]) == pytest.approx(1e4)
    assert (big >= 0).all()
    # strictly positive wherever the true value is representable at all;
    # below roughly exp(-90) it underflows to 0, which the divergence floor absorbs
    moderate = softplus(torch.linspace(-80, 80, 321))
    assert (moderate > 0).all()


def test_relu_definition():
    layer = Layer(LayerSpec("relu"), (2,))
    out = layer(torch.tensor([[-1.0, 2.0]]))
    assert out.tolist() == [[0.0, 2.0]]


def test_reparameterize_examples():
    mu = torch.tensor([1.5, -2.0])
    log_var = torch.tensor([0.0, 0.0])
    assert torch.equal(reparameterize(mu, log_var, torch.zeros(2)), mu)
    z = reparameterize(torch.zeros(3), torch.zeros(3), torch.tensor([0.3, -0.7, 2.0]))
    assert torch.allclose(z, torch.tensor([0.3, -0.7, 2.0]))
    # sigma = 2 (log_var = 2 ln 2), mu = 1, eps = 0.5 -> z = 2
    z = reparameterize(torch.tensor([1.0]), torch.tensor([2 * math.log(2.0)]), torch.tensor([0.5]))
    assert float(z) == pytest.approx(2.0, rel=1e-6)
    with pytest.raises(ShapeError):
        reparameterize(torch.zeros(2), torch.zeros(3), torch.zeros(2))


# ---------------------------------------------------------------------------
# batch norm semantics
# ---------------------------------------------------------------------------


def test_batch_norm_running_stats_decay():
    layer = Layer(LayerSpec("batch_norm"), (3,))
    x = torch.tensor([[1.0, 2.0, 3.0], [3.0, 6.0, 9.0]])
    nnet.forward(layer, x, "train")
    mean, var = x.mean(0), x.var(0, unbiased=False)
    assert torch.allclose(layer.op.running_mean, 0.1 * mean)
    assert torch.allclose(layer.op.running_var, 0.9 * torch.ones(3) + 0.1 * var)


def test_batch_norm_eval_is_deterministic_pure_function():
    layer = Layer(LayerSpec("batch_norm"), (4, 5, 1))
    x = torch.randn(3, 4, 5, 1)
    nnet.forward(layer, x, "train")
    y1 = nnet.forward(layer, x, "eval")
    y2 = nnet.forward(layer, x, "eval")
    assert torch.equal(y1, y2)
    # eval mode must not touch the running statistics
    before = layer.op.running_mean.clone()
    nnet.forward(layer, torch.randn(3, 4, 5, 1), "eval")
    assert torch.equal(layer.op.running_mean, before)


def test_batch_norm_train_eval_agree_with_frozen_stats():
    layer = Layer(LayerSpec("batch_norm"), (4,))
    x = torch.randn(8, 4)
    layer.op.momentum = 1.0  # running stats become exactly the batch stats
    y_train = nnet.forward(layer, x, "train")
    y_eval = nnet.forward(layer, x, "eval")
    assert torch.allclose(y_train, y_eval, atol=0, rtol=0)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_softplus_at_zero_gives_half():
    x = torch.zeros(4, requires_grad=True)
    backward(softplus(x).sum())
    assert torch.allclose(x.grad, torch.full((4,), 0.5))


def test_backward_requires_scalar_from_forward():
    with pytest.raises(ValueError, match="scalar"):
        backward(torch.zeros(3, requires_grad=True))
    with pytest.raises(RuntimeError, match="before"):
        backward(torch.tensor(1.0))


def test_unused_parameter_gets_no_gradient():
    a = torch.ones(2, requires_grad=True)
    b = torch.ones(2, requires_grad=True)
    backward((a * 3).sum())
    assert b.grad is None  # exactly zero contribution


@pytest.mark.parametrize(
    "spec,in_shape",
    [
        (LayerSpec("conv", units=3, filter_size=(1, 5), stride=(1, 1)), (2, 4, 5)),
        (LayerSpec("conv", units=3, filter_size=(2, 2), stride=(2, 1)), (2, 4, 5)),
        (LayerSpec("transposed_conv", units=2, filter_size=(4, 1), stride=(2, 1)), (3, 2, 1)),
        (LayerSpec("transposed_conv", units=1, filter_size=(1, 5), stride=(1, 1)), (3, 4, 1)),
        (LayerSpec("fully_connected", units=4), (6,)),
        (LayerSpec("fully_connected", units=4), (2, 3, 2)),
        (LayerSpec("gaussian_latent", units=3), (5,)),
        (LayerSpec("batch_norm"), (3, 4, 1)),
        (LayerSpec("batch_norm"), (6,)),
        (LayerSpec("relu"), (7,)),
        (LayerSpec("softplus"), (7,)),
    ],
    ids=lambda v: getattr(v, "kind", str(v)),
)
def test_gradient_check_every_layer_kind(spec, in_shape):
    torch.manual_seed(0)
    layer = Layer(spec, in_shape, generator=torch.Generator().manual_seed(7)).double()
    layer.train(True)
    x = (torch.randn(3, *in_shape, dtype=torch.float64) + 0.3).requires_grad_(True)
    weights = torch.randn(3, *layer.out_shape, dtype=torch.float64)

    def loss_fn():
        return (layer(x) * weights).sum()

    params = {"input": x}
    params.update({name: p for name, p in layer.named_parameters()})
    checked = check_gradients(loss_fn, params, n_coords=6)
    assert checked > 0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_hand_computed():
    p = {"w": torch.zeros(1)}
    state = AdamState()
    adam_update(p, {"w": torch.ones(1)}, state)
    assert state.step == 1
    assert float(state.m["w"]) == pytest.approx(0.1, rel=1e-6)
    assert float(state.v["w"]) == pytest.approx(0.001, rel=1e-6)
    # update = -lr * mhat / (sqrt(vhat) + eps) with mhat = vhat = 1
    assert float(p["w"]) == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-6)


def test_adam_zero_gradient_leaves_parameter_unchanged():
    p = {"w": torch.full((3,), 1.5)}
    state = AdamState()
    for _ in range(5):
        adam_update(p, {"w": torch.zeros(3)}, state)
    assert torch.equal(p["w"], torch.full((3,), 1.5))


def test_adam_deterministic_across_runs():
    def run():
        torch.manual_seed(42)
        p = {"w": torch.randn(8)}
        state = AdamState()
        for i in range(10):
            g = torch.sin(p["w"] * (i + 1))
            adam_update(p, {"w": g}, state)
        return p["w"]

    assert torch.equal(run(), run())


def test_adam_rejects_non_finite_gradient():
    p = {"w": torch.zeros(2)}
    with pytest.raises(DivergenceError, match="diverged"):
        adam_update(p, {"w": torch.tensor([1.0, float("nan")])}, AdamState())
    with pytest.raises(DivergenceError, match="diverged"):
        adam_update(p, {"w": torch.tensor([float("inf"), 0.0])}, AdamState())


def test_adam_tolerates_finite_sum_overflow():
    # individually finite but huge: must update, not abort
    p = {"w": torch.zeros(3, dtype=torch.float32)}
    g = torch.full((3,), 3e38, dtype=torch.float32)
    assert not torch.isfinite(g.sum())
    adam_update(p, {"w": g}, AdamState())
    assert torch.isfinite(p["w"]).all()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _demo_tensors():
    r = np.random.default_rng(0)
    return {
        "enc/w": r.normal(size=(3, 4)).astype(np.float32),
        "enc/b": r.normal(size=(4,)).astype(np.float64),
        "steps": np.array([7], dtype=np.int64),
    }


def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "m.ckpt"
    tensors = _demo_tensors()
    adam = AdamState(lr=2e-3, step=11)
    adam.m["enc/w"] = torch.ones(3, 4)
    adam.v["enc/w"] = torch.full((3, 4), 0.5)
    save_checkpoint(path, tensors, arch={"layers": [1, 2]}, class_labels=[3, 7],
                    meta={"beta": 10.0}, adam=adam)
    ckpt = load_checkpoint(path)
    assert ckpt.class_labels == [3, 7]
    assert ckpt.arch == {"layers": [1, 2]}
    assert ckpt.meta == {"beta": 10.0}
    for name, arr in tensors.items():
        np.testing.assert_array_equal(ckpt.tensors[name], arr)
        assert ckpt.tensors[name].dtype == arr.dtype
    assert ckpt.adam.step == 11 and ckpt.adam.lr == 2e-3
    assert torch.equal(ckpt.adam.m["enc/w"], torch.ones(3, 4))


def test_checkpoint_bytes_deterministic(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    for path in (a, b):
        save_checkpoint(path, _demo_tensors(), arch={}, class_labels=[0])
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)
    save_checkpoint(path, {}, arch={}, class_labels=[])
    raw = bytearray(path.read_bytes())
    raw[8] = 99  # bump the version field
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, _demo_tensors(), arch={}, class_labels=[])
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
