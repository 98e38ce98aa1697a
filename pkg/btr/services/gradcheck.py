"""Central finite-difference gradient checks, shared by the tests and ``btr selftest``."""

from typing import Callable, Iterable, Optional, Tuple

import numpy as np
import torch

DEFAULT_STEP = 1e-6


def numeric_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = DEFAULT_STEP) -> torch.Tensor:
    """Central differences of a scalar function, one coordinate at a time (float64)."""
    x = x.detach().to(torch.float64).clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = fn(x).item()
            flat[i] = orig - step
            minus = fn(x).item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * step)
    return grad


def analytic_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    return grad


def relative_error(analytic, numeric) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = DEFAULT_STEP) -> float:
    return relative_error(analytic_gradient(fn, x).numpy(), numeric_gradient(fn, x, step).numpy())


def check_parameter_gradients(
    model: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    entries_per_tensor: int = 4,
    step: float = DEFAULT_STEP,
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
) -> Tuple[float, int]:
    """Compare autograd against central differences on sampled parameter entries.

    The model must already be in float64. Returns (relative error, entries checked).
    """
    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    chosen = sorted(params) if names is None else list(names)
    model.zero_grad()
    loss_fn().backward()
    analytic, numeric = [], []
    with torch.no_grad():
        for name in chosen:
            p = params[name]
            flat = p.view(-1)
            picks = rng.choice(flat.numel(), size=min(entries_per_tensor, flat.numel()), replace=False)
            for i in picks.tolist():
                analytic.append(p.grad.view(-1)[i].item())
                orig = flat[i].item()
                flat[i] = orig + step
                plus = loss_fn().item()
                flat[i] = orig - step
                minus = loss_fn().item()
                flat[i] = orig
                numeric.append((plus - minus) / (2 * step))
    model.zero_grad()
    return relative_error(analytic, numeric), len(analytic)
