"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    def lines(self) -> list[str]:
        return [f"{'ok  ' if v < self.tolerance else 'FAIL'} {k}: {v:.3e}" for k, v in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """max |a - n| normalized by the larger of the two gradients' max magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], tolerance: float = 1e-3,
               eps: float = 1e-5, max_entries: int | None = 64,
               rng: np.random.Generator | None = None, floor: float = 1e-7,
               max_params: int | None = None) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` rebuilds the graph on every call.  At most ``max_entries``
    coordinates per parameter are probed (chosen at random) to bound cost.
    ``floor`` keeps gradients that are exactly zero (e.g. a key bias under
    softmax) from turning round-off into a large relative error; it is raised
    to the differencing noise of the loss itself when that is larger.
    ``max_params`` probes a random subset of the parameter tensors.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    floor = max(floor, 1e5 * np.finfo(float).eps * max(1.0, abs(loss.item())) / eps)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    report = GradCheckReport(tolerance=tolerance)
    names = list(params)
    if max_params is not None and len(names) > max_params:
        names = [names[i] for i in sorted(rng.choice(len(names), size=max_params, replace=False))]
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * eps)
        report.errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric, floor)
        p.grad = None
    return report
