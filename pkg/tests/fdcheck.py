"""Central finite-difference gradient oracle used across the gradient tests.

Everything here runs in double precision and stays independent of autograd:
gradients are probed by perturbing raw parameter storage and re-running the
forward function.
"""

import torch


def fd_gradient(f, tensor: torch.Tensor, h: float = 1e-5, coords=None) -> dict:
    """Central differences of scalar f() w.r.t. selected flat coords of `tensor`.

    Mutates tensor storage in place during probing and restores it. Returns
    {flat_index: derivative}. `coords=None` probes every coordinate.
    """
    flat = tensor.data.reshape(-1)
    if coords is None:
        coords = range(flat.numel())
    out = {}
    with torch.no_grad():
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out


def sample_coords(tensor: torch.Tensor, n: int, seed: int = 0) -> list:
    """Deterministic subset of flat coordinates (all of them if the tensor is small)."""
    total = tensor.numel()
    if total <= n:
        return list(range(total))
    g = torch.Generator().manual_seed(seed)
    return sorted(torch.randperm(total, generator=g)[:n].tolist())


def assert_grads_close(analytic: float, numeric: float, rel: float = 1e-4, floor: float = 1e-6):
    err = abs(analytic - numeric)
    assert err <= floor + rel * abs(numeric), (
        f"gradient mismatch: analytic {analytic!r} vs finite-difference {numeric!r} "
        f"(err {err:.3e}, allowed {floor + rel * abs(numeric):.3e})"
    )


def check_gradients(loss_fn, params: dict, n_coords: int = 6, h: float = 1e-5,
                    rel: float = 1e-4, floor: float = 1e-6, seed: int = 0) -> int:
    """Compare autograd gradients of loss_fn() against central differences.

    `params` maps names to double-precision leaf tensors. Returns the number
    of coordinates checked.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    checked = 0
    for name, p in params.items():
        grad = p.grad
        coords = sample_coords(p, n_coords, seed=seed + checked)
        numeric = fd_gradient(loss_fn, p, h=h, coords=coords)
        for i, num in numeric.items():
            ana = 0.0 if grad is None else grad.reshape(-1)[i].item()
            assert_grads_close(ana, num, rel=rel, floor=floor)
            checked += 1
    return checked
