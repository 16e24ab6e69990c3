"""Shared numeric helpers for the test suite."""

import torch


def flat_params(module: torch.nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters() if p.requires_grad])


def set_flat_params(module: torch.nn.Module, vec: torch.Tensor) -> None:
    i = 0
    with torch.no_grad():
        for p in module.parameters():
            if not p.requires_grad:
                continue
            n = p.numel()
            p.copy_(vec[i : i + n].reshape(p.shape))
            i += n
    assert i == vec.numel(), "flat vector length does not match parameter count"


def analytic_grad(loss_fn, module: torch.nn.Module) -> torch.Tensor:
    params = [p for p in module.parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = []
    for p, g in zip(params, grads):
        flat.append(torch.zeros_like(p).reshape(-1) if g is None else g.reshape(-1).detach())
    return torch.cat(flat)


def finite_difference_grad(loss_fn, module: torch.nn.Module, h: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of loss_fn w.r.t. the module's parameters."""
    theta = flat_params(module).clone()
    fd = torch.zeros_like(theta)
    with torch.no_grad():
        for i in range(theta.numel()):
            bumped = theta.clone()
            bumped[i] += h
            set_flat_params(module, bumped)
            f_plus = float(loss_fn())
            bumped[i] -= 2.0 * h
            set_flat_params(module, bumped)
            f_minus = float(loss_fn())
            fd[i] = (f_plus - f_minus) / (2.0 * h)
    set_flat_params(module, theta)
    return fd


def max_rel_grad_error(fd: torch.Tensor, an: torch.Tensor, floor: float = 1e-8) -> float:
    """Worst elementwise |fd - an| / max(|fd|, |an|, floor)."""
    denom = torch.maximum(torch.maximum(fd.abs(), an.abs()), torch.full_like(fd, floor))
    return float(((fd - an).abs() / denom).max())
