"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, precision


class GradCheckFailure(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def __str__(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in sorted(self.max_rel_error.items())]
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status} (worst {self.worst:.3e}, tol {self.tol:g})\n" + "\n".join(lines)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward() against central differences for every parameter.

    ``f`` rebuilds the graph from ``params`` and returns a scalar loss; it
    must be deterministic.  The check runs in float64: parameters are cast
    in place for the duration and restored afterwards.  ``floor`` keeps the
    relative error meaningful where both gradients are ~0.  With
    ``max_entries`` only a random subset of entries per tensor is probed.
    """
    originals = {name: p.data for name, p in params.items()}
    report = GradCheckReport(tol=tol)
    rng = rng or np.random.default_rng(0)
    try:
        with precision(np.float64):
            for p in params.values():
                p.data = p.data.astype(np.float64)
                p.grad = None
            loss = f(params)
            value = float(loss.data)
            if not np.isfinite(value):
                raise GradCheckFailure(f"loss is not finite: {value}")
            loss.backward()
            for name, p in params.items():
                analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
                flat = p.data.reshape(-1)
                indices = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
                errs = []
                for i in indices:
                    saved = flat[i]
                    flat[i] = saved + step
                    up = float(f(params).data)
                    flat[i] = saved - step
                    down = float(f(params).data)
                    flat[i] = saved
                    if not (np.isfinite(up) and np.isfinite(down)):
                        raise GradCheckFailure(f"non-finite loss while perturbing {name}[{i}]")
                    numeric = (up - down) / (2.0 * step)
                    errs.append(_relative_error(analytic.reshape(-1)[i], numeric, floor))
                report.max_rel_error[name] = float(np.max(errs)) if errs else 0.0
    finally:
        for name, p in params.items():
            p.data = originals[name]
            p.grad = None
    return report
