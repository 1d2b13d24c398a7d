from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from egofusion.tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tolerance: float
    worst: tuple[str, tuple[int, ...]] | None = None
    exceedances: list[tuple[str, tuple[int, ...], float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    tolerance: float = 1e-4,
    samples_per_tensor: int = 12,
    eps: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``loss_fn`` recomputes a scalar loss from the current tensor values; the
    tensors should be float64. Up to ``samples_per_tensor`` entries of each
    tensor are perturbed. Exceedances are reported, never raised.
    """
    rng = np.random.default_rng(seed)
    for _, t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values)) for name, t in tensors}

    worst_err, worst, checked, bad = 0.0, None, 0, []
    for name, t in tensors:
        flat = t.values.reshape(-1)
        k = min(samples_per_tensor, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().values)
            flat[i] = orig - eps
            down = float(loss_fn().values)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            idx = tuple(int(v) for v in np.unravel_index(i, t.shape))
            err = relative_error(float(analytic[name].reshape(-1)[i]), numeric)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (name, idx)
            if err >= tolerance:
                bad.append((name, idx, err))
    for _, t in tensors:
        t.grad = None
    return GradCheckReport(worst_err, checked, tolerance, worst, bad)


def grad_check_network(net, x: np.ndarray, label: int, tolerance: float = 1e-4,
                       samples_per_tensor: int = 12, eps: float = 1e-5, seed: int = 0,
                       include_input: bool = True) -> GradCheckReport:
    """Gradient check of ``net.loss`` w.r.t. parameters (and input) in float64."""
    net.astype(np.float64)
    inp = Tensor(np.asarray(x, dtype=np.float64), requires_grad=include_input)
    labels = np.array([label] * inp.shape[0])
    tensors = list(net.named_parameters())
    if include_input:
        tensors.append(("input", inp))
    return grad_check(lambda: net.loss(inp, labels), tensors, tolerance, samples_per_tensor, eps, seed)
