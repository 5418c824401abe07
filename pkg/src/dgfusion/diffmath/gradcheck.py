"""Central finite-difference checks against reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numerical_grad(
    f: Callable[[], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """d f / d x at the flat ``indices`` (all entries by default).

    ``x.data`` is perturbed in place and restored.
    """
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx))
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            out[j] = (fp - fm) / (2.0 * eps)
    return out


@dataclass
class GradCheckResult:
    name: str
    rel_err: float
    n_checked: int


def check_grads(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradCheckResult]:
    """Compare backward of ``f()`` with finite differences for every tensor.

    With ``max_entries`` each tensor is checked on a random subset of that
    many flat coordinates.
    """
    for p in params.values():
        p.grad = None
    backward(f())
    rng = rng or np.random.default_rng(0)
    results = []
    for name, p in params.items():
        analytic = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        else:
            idx = np.arange(p.size)
        numeric = numerical_grad(f, p, eps, idx)
        results.append(GradCheckResult(name, rel_error(analytic[idx], numeric), len(idx)))
    return results
