"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    tol: float
    worst: str = ""
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    names: Sequence[str] | None = None,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckResult:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``inputs`` must be leaves with ``requires_grad``; their ``.data`` is
    perturbed in place and restored. With ``max_per_input`` only that many
    randomly chosen entries of each input are probed. Entries that miss the
    tolerance are re-probed once at ``eps / 10``: a probe straddling a ReLU or
    max-pool kink gives a wrong difference quotient that a smaller step avoids.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor * max(1, |L|))``
    with ``L`` the loss value, so entries whose true gradient sits at the
    difference quotient's round-off level are compared absolutely.
    """
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        t.grad = None
    loss = loss_fn()
    floor = floor * max(1.0, abs(loss.item()))
    backward(loss, inputs)
    analytic = [t.grad.copy() for t in inputs]

    def numeric(t: Tensor, idx, h: float) -> float:
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = loss_fn().item()
        t.data[idx] = orig - h
        fm = loss_fn().item()
        t.data[idx] = orig
        return (fp - fm) / (2.0 * h)

    worst, worst_at, checked = 0.0, "", 0
    failures: list[str] = []
    for t, g, name in zip(inputs, analytic, names):
        flat = np.arange(t.size)
        if max_per_input is not None and t.size > max_per_input:
            flat = (rng or np.random.default_rng(0)).choice(t.size, size=max_per_input, replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), t.shape)
            a = float(g[idx])
            err = relative_error(a, numeric(t, idx, eps), floor)
            if err >= tol:
                err = min(err, relative_error(a, numeric(t, idx, eps / 10), floor))
            if err >= tol:
                failures.append(f"{name}{list(idx)}: rel err {err:.3e}")
            checked += 1
            if err > worst:
                worst, worst_at = err, f"{name}{list(idx)}"
    for t in inputs:
        t.grad = None
    return GradcheckResult(worst, checked, tol, worst_at, failures)
