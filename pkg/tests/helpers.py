"""Shared test oracles: central finite differences against autograd."""

import numpy as np
import torch


def rel_err(a: float, b: float, floor: float = 1e-5) -> float:
    """Relative error with a denominator floor.

    Central differences at 64-bit carry ~1e-15/eps of absolute noise, so for
    near-zero gradients a pure ratio is dominated by the oracle's own error;
    the floor turns the comparison into |a - b| < tol * floor there.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def tensor_grad_max_rel_err(fn, tensors, eps: float = 1e-5) -> float:
    """Worst relative error between autograd and central differences.

    ``fn(*tensors)`` must return a scalar tensor; ``tensors`` are float64
    leaves. Every entry of every tensor is perturbed.
    """
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    fn(*leaves).backward()
    worst = 0.0
    with torch.no_grad():
        for leaf in leaves:
            grad = leaf.grad
            flat = leaf.view(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn(*leaves).item()
                flat[i] = orig - eps
                down = fn(*leaves).item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                worst = max(worst, rel_err(gflat[i].item(), fd))
    return worst


def module_grad_max_rel_err(make_loss, module, eps: float = 1e-5,
                            max_entries_per_param: int | None = None,
                            seed: int = 0) -> float:
    """Finite-difference check of d(loss)/d(theta) for module parameters.

    ``make_loss()`` recomputes the scalar loss from the module's current
    parameters. When ``max_entries_per_param`` is set, a random subset of each
    parameter's entries is checked; otherwise all of them.
    """
    module.zero_grad()
    make_loss().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for param in module.parameters():
            grad = param.grad if param.grad is not None else torch.zeros_like(param)
            flat = param.data.view(-1)
            gflat = grad.reshape(-1)
            n = flat.numel()
            if max_entries_per_param is not None and n > max_entries_per_param:
                idxs = rng.choice(n, size=max_entries_per_param, replace=False)
            else:
                idxs = range(n)
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = make_loss().item()
                flat[i] = orig - eps
                down = make_loss().item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                worst = max(worst, rel_err(gflat[i].item(), fd))
    return worst
