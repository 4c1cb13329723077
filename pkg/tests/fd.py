"""Central finite-difference gradient checker, independent of autograd."""
import numpy as np
import torch


def _floor(loss, h, atol):
    """Absolute tolerance: the caller's ``atol`` or the round-off of a central difference,
    whichever is larger. Gradients that are exactly zero (a bias feeding batch norm) otherwise
    fail on noise alone."""
    return max(atol, 8 * abs(loss.item()) * np.finfo(np.float64).eps / h)


def check_params(loss_fn, params, n_samples=40, h=1e-6, seed=0, rtol=1e-3, atol=1e-8):
    """Compare autograd gradients of ``loss_fn()`` against central differences on sampled
    parameter entries. Returns the fraction of sampled entries that agree."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    atol = _floor(loss, h, atol)
    analytic = [p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    ok = total = 0
    for _ in range(n_samples):
        k = int(rng.integers(len(params)))
        p = params[k]
        flat = p.data.view(-1)
        i = int(rng.integers(flat.numel()))
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[k].view(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
        ok += err <= rtol or abs(a - numeric) <= atol
        total += 1
    return ok / total


def check_input(loss_fn, x, n_samples=40, h=1e-6, seed=0, rtol=1e-3, atol=1e-8, skip=None):
    """Same as ``check_params`` for the entries of a leaf tensor ``x``. ``skip(i)`` excludes
    flat indices (e.g. non-differentiable points)."""
    x.grad = None
    loss = loss_fn(x)
    loss.backward()
    atol = _floor(loss, h, atol)
    analytic = x.grad.detach().clone().view(-1)
    rng = np.random.default_rng(seed)
    ok = total = 0
    flat = x.data.view(-1)
    for i in rng.permutation(flat.numel())[:n_samples]:
        i = int(i)
        if skip is not None and skip(i):
            continue
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + h
            up = float(loss_fn(x))
            flat[i] = orig - h
            down = float(loss_fn(x))
            flat[i] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
        ok += err <= rtol or abs(a - numeric) <= atol
        total += 1
    return ok / max(total, 1)
