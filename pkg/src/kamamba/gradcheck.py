"""Central finite-difference gradient checks (float64)."""
from __future__ import annotations

from dataclasses import dataclass

import torch

FD_STEP = 1e-4
FD_TOL = 1e-4
# gradients below this norm are roundoff-limited at FD_STEP
GRAD_FLOOR = 1e-6


@dataclass
class FdResult:
    name: str
    rel_error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.rel_error <= FD_TOL


def _rel(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(float(a.norm()), float(b.norm()), GRAD_FLOOR)
    return float((a - b).norm()) / scale


@torch.no_grad()
def _fd(fn, t: torch.Tensor, positions, step: float) -> torch.Tensor:
    flat = t.view(-1)
    out = torch.empty(len(positions), dtype=torch.float64)
    for n, i in enumerate(positions):
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(fn())
        flat[i] = orig - step
        down = float(fn())
        flat[i] = orig
        out[n] = (up - down) / (2 * step)
    return out


def fd_check(fn, tensors: dict, step: float = FD_STEP, max_entries: int | None = 64, seed: int = 0):
    """Compare autograd against central differences for each named tensor.

    ``fn()`` must return a scalar computed from the (float64, leaf) tensors.
    Tensors larger than ``max_entries`` are checked on a seeded random subset
    of entries. The error is ``‖g - g_fd‖ / max(‖g‖, ‖g_fd‖, GRAD_FLOOR)``
    per tensor.
    """
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise TypeError("finite-difference checks need float64 tensors")
        t.grad = None
    fn().backward()
    gen = torch.Generator().manual_seed(seed)
    results = []
    for name, t in tensors.items():
        grad = t.grad if t.grad is not None else torch.zeros_like(t)
        n = t.numel()
        if max_entries is None or n <= max_entries:
            positions = list(range(n))
        else:
            positions = torch.randperm(n, generator=gen)[:max_entries].tolist()
        numeric = _fd(fn, t.data, positions, step)
        analytic = grad.reshape(-1)[positions].double()
        results.append(FdResult(name, _rel(analytic, numeric), len(positions)))
    return results


def module_fd_check(module: torch.nn.Module, fn, extra: dict | None = None, **kw):
    """``fd_check`` over every parameter of ``module`` plus ``extra`` input tensors."""
    tensors = {name: p for name, p in module.named_parameters()}
    tensors.update(extra or {})
    return fd_check(fn, tensors, **kw)
