from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .params import Parameter

# Denominator floor for the relative error. Central-difference round-off
# scales like |loss| * machine_eps / eps, so check_params multiplies this
# floor by max(1, |loss|) to keep near-zero gradients from failing on noise.
REL_FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = REL_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, idx, eps: float = 1e-5) -> float:
    """Central difference of f() wrt arr[idx]; restores arr afterwards."""
    old = arr[idx]
    arr[idx] = old + eps
    fp = f()
    arr[idx] = old - eps
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2.0 * eps)


def numeric_grad_array(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    g = np.zeros(arr.shape, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        g[idx] = numeric_grad(f, arr, idx, eps)
    return g


@dataclass
class GradCheckReport:
    tol: float
    max_rel: dict[str, float] = field(default_factory=dict)
    n_coords: dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel.items() if not v < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> tuple[str, float]:
        if not self.max_rel:
            return "", 0.0
        k = max(self.max_rel, key=self.max_rel.get)
        return k, self.max_rel[k]

    def as_record(self) -> dict:
        name, val = self.worst()
        return {
            "passed": self.passed,
            "tol": self.tol,
            "worst_tensor": name,
            "worst_rel_err": val,
            "failures": self.failures,
            "max_rel": self.max_rel,
        }


def check_params(
    loss_fn: Callable[[], float],
    grads: dict[str, np.ndarray],
    params: Iterable[Parameter],
    *,
    n_coords: int = 20,
    eps: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    ``loss_fn`` must read the live parameter values. Up to ``n_coords``
    random coordinates per tensor are probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    report = GradCheckReport(tol=tol)
    floor = REL_FLOOR * max(1.0, abs(float(loss_fn())))
    for p in params:
        if p.value.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 parameters, {p.name} is {p.value.dtype}")
        flat = p.value.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        g = grads[p.name].reshape(-1)
        for c in coords:
            num = numeric_grad(loss_fn, flat, int(c), eps)
            worst = max(worst, float(rel_error(g[c], num, floor)))
        report.max_rel[p.name] = worst
        report.n_coords[p.name] = k
    return report
