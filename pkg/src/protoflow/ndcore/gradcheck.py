"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..exceptions import NonDeterminismError
from .tensor import Parameter, Tensor, backward, no_grad


@dataclass
class GradcheckReport:
    tol: float
    h: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"gradcheck {status}: max rel err {self.max_error:.3e} (tol {self.tol:.1e}, h {self.h:.1e})"]
        for name, err in self.errors.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``max|a - n|`` scaled by the larger of the two gradients' max-norms."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a plain numpy function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(x)
        flat[j] = orig - h
        fm = f(x)
        flat[j] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-6,
              tol: float = 1e-6, floor: float = 1e-12) -> GradcheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and must read the current values of
    ``params``; it is re-evaluated with each coordinate nudged by ``±h``.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss, params)
    analytic = {p.name: p.grad.copy() for p in params}

    with no_grad():
        a = f().item()
        b = f().item()
    if a != b:
        raise NonDeterminismError(f"f() is not deterministic: {a!r} != {b!r}")

    report = GradcheckReport(tol=tol, h=h)
    with no_grad():
        for p in params:
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            out = numeric.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = f().item()
                flat[j] = orig - h
                fm = f().item()
                flat[j] = orig
                out[j] = (fp - fm) / (2.0 * h)
            report.errors[p.name] = relative_error(analytic[p.name], numeric, floor)
    return report
