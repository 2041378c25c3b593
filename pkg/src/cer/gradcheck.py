"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from cer.tensor import Tape, Tensor


class NondeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def relative_error(analytic, numeric, floor: float = 1e-8):
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


def resolution_floor(value: float, step: float, tol: float) -> float:
    """Denominator floor below which relative error measures roundoff, not gradients.

    A central difference of a float64 loss near ``value`` is uncertain by about
    ``eps * |value| / step``; gradients smaller than that over ``tol`` cannot be
    resolved to ``tol`` relative accuracy.
    """
    return float(np.finfo(np.float64).eps * max(abs(value), 1.0) / (step * tol))


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    samples_per_block: int = 64,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backprop gradients of ``f(params)`` with central differences.

    Blocks with more than ``samples_per_block`` entries are checked on a
    seeded random sample of that many coordinates; smaller blocks are checked
    exhaustively. Perturbations are applied in place and always undone.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def value() -> float:
        return float(f(params).data)

    base = value()
    if value() != base:
        raise NondeterministicError("f returned different values at the same point")

    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = f(params)
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        if p.size <= samples_per_block:
            coords = np.arange(p.size)
        else:
            coords = rng.choice(p.size, size=samples_per_block, replace=False)
        numeric = np.empty(len(coords))
        for k, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            up = value()
            flat[c] = orig - step
            down = value()
            flat[c] = orig
            numeric[k] = (up - down) / (2.0 * step)
        err = relative_error(grad[coords], numeric, floor)
        report.max_rel_error[name] = float(err.max())
        report.n_checked[name] = len(coords)
    return report
