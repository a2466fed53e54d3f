"""Fixed-step integrators for prototype ODEs, including a learned-correction Euler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ndcore as nd
from .exceptions import ConfigError, DomainError, IntegrationError, ShapeError
from .ndcore import MLP, Module, Tensor
from .protoclass import PrototypeState

EULER = "euler"
RK4 = "rk4"
E2 = "e2"
SOLVER_KINDS = (EULER, RK4, E2)

FlowFn = Callable[[Tensor, float], Tensor]


@dataclass(frozen=True)
class SolverConfig:
    kind: str = RK4
    integral_time: float = 40.0
    steps: int = 40

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise ConfigError(f"solver kind must be one of {SOLVER_KINDS}, got {self.kind!r}")
        if not self.integral_time > 0:
            raise ConfigError("integral_time must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError("steps must be a positive integer")

    @property
    def step_size(self) -> float:
        return self.integral_time / self.steps


class E2Correction(Module):
    """Per-step truncation-error estimate ``eta(p_k)``, applied to each prototype row.

    The output layer starts at zero, so a fresh correction reproduces Euler bit for bit.
    """

    def __init__(self, dim: int, hidden: Optional[int] = None, seed: int = 0):
        self.dim = dim
        self.hidden_width = dim if hidden is None else hidden
        rng = np.random.default_rng(seed)
        self.eta = MLP(dim, self.hidden_width, dim, "e2solver.eta", rng, zero_output=True)

    def __call__(self, p: Tensor) -> Tensor:
        if p.shape[-1] != self.dim:
            raise ShapeError(f"E2 correction built for dim {self.dim}, got {p.shape}")
        return self.eta(p)


def _check_finite(p: Tensor, step: int) -> None:
    if not np.all(np.isfinite(p.data)):
        raise IntegrationError(f"non-finite prototype state after step {step}", step=step)


def integrate_steps(flow: FlowFn, p0: Tensor, h: float, n_steps: int, kind: str = EULER,
                    correction: Optional[E2Correction] = None, t0: float = 0.0,
                    trajectory: Optional[list] = None) -> Tensor:
    """Take ``n_steps`` steps of size ``h`` from ``p0`` and return the final state."""
    if kind == E2 and correction is None:
        raise ConfigError("the e2 solver needs a correction network")
    p = p0
    for step in range(n_steps):
        t = t0 + step * h
        if kind == EULER:
            p = nd.add(p, nd.scale(flow(p, t), h))
        elif kind == E2:
            p = nd.add(nd.add(p, nd.scale(flow(p, t), h)), correction(p))
        elif kind == RK4:
            half = 0.5 * h
            k1 = flow(p, t)
            k2 = flow(nd.add(p, nd.scale(k1, half)), t + half)
            k3 = flow(nd.add(p, nd.scale(k2, half)), t + half)
            k4 = flow(nd.add(p, nd.scale(k3, h)), t + h)
            incr = nd.add(nd.add(k1, nd.scale(nd.add(k2, k3), 2.0)), k4)
            p = nd.add(p, nd.scale(incr, h / 6.0))
        else:
            raise ConfigError(f"unknown solver kind {kind!r}")
        _check_finite(p, step)
        if trajectory is not None:
            trajectory.append(p.data.copy())
    return p


def integrate(flow: FlowFn, p0, config: SolverConfig, correction: Optional[E2Correction] = None,
              trajectory: Optional[list] = None) -> PrototypeState:
    """Solve ``dp/dt = flow(p, t)`` from ``t = 0`` to ``config.integral_time``.

    When the flow or correction holds trainable parameters the whole
    unrolled trajectory stays on the autodiff graph.
    """
    if isinstance(p0, PrototypeState):
        if p0.time != 0:
            raise ConfigError("integration must start at t = 0")
        start = p0.prototypes
    else:
        start = p0 if isinstance(p0, Tensor) else Tensor(p0)
    _check_finite(start, -1)
    p = integrate_steps(flow, start, config.step_size, config.steps, config.kind, correction,
                        trajectory=trajectory)
    return PrototypeState(p, config.integral_time)


# -- verification helpers ----------------------------------------------------

@dataclass(frozen=True)
class LinearDecay:
    """``dp/dt = -rate * p`` with solution ``p0 * exp(-rate * t)``."""

    rate: float = 1.0

    def flow(self, p: Tensor, t: float) -> Tensor:
        return nd.scale(p, -self.rate)

    def exact(self, p0: np.ndarray, t: float) -> np.ndarray:
        return np.asarray(p0) * np.exp(-self.rate * t)


@dataclass(frozen=True)
class ConstantFlow:
    """``dp/dt = c``; every solver here is exact for it."""

    c: float = 1.0

    def flow(self, p: Tensor, t: float) -> Tensor:
        return Tensor(np.full(p.shape, self.c))

    def exact(self, p0: np.ndarray, t: float) -> np.ndarray:
        return np.asarray(p0) + self.c * t


def global_error(kind: str, test_ode, p0: np.ndarray, integral_time: float, steps: int,
                 correction: Optional[E2Correction] = None) -> float:
    with nd.no_grad():
        final = integrate(test_ode.flow, Tensor(p0), SolverConfig(kind, integral_time, steps), correction)
    return float(np.max(np.abs(final.prototypes.data - test_ode.exact(p0, integral_time))))


def empirical_order(kind: str, test_ode=LinearDecay(), step_counts: Sequence[int] = (8, 16, 32, 64),
                    integral_time: float = 1.0, p0: Optional[np.ndarray] = None,
                    correction: Optional[E2Correction] = None, underflow: float = 1e-13) -> dict:
    """Least-squares slope of log(global error) against log(step size)."""
    if len(step_counts) < 3:
        raise ConfigError("need at least three step counts")
    ratios = np.diff(np.log(step_counts))
    if not np.allclose(ratios, ratios[0]):
        raise ConfigError("step counts must form a geometric sequence")
    if p0 is None:
        p0 = np.array([[1.0, -0.5, 2.0]])
    errors = [global_error(kind, test_ode, p0, integral_time, s, correction) for s in step_counts]
    if min(errors) < underflow:
        raise DomainError(f"global error {min(errors):.2e} below {underflow:.0e}; reduce the step-count range")
    hs = [integral_time / s for s in step_counts]
    slope = float(np.polyfit(np.log(hs), np.log(errors), 1)[0])
    return {"kind": kind, "order": slope, "steps": list(step_counts), "errors": errors}


def euler_vs_gradient_descent(grad_fn: Callable[[Tensor], Tensor], p0, lr: float, n_steps: int):
    """Run Euler on ``-grad`` with step ``lr`` and plain gradient descent side by side."""
    if lr <= 0:
        raise ConfigError("lr must be positive")
    start = p0 if isinstance(p0, Tensor) else Tensor(p0)
    with nd.no_grad():
        euler = integrate_steps(lambda p, t: nd.neg(grad_fn(p)), start, lr, n_steps, EULER).data
        p = start.data.copy()
        for _ in range(n_steps):
            p = p - lr * grad_fn(Tensor(p)).data
    return euler, p


def gda_equivalence(grad_fn: Callable[[Tensor], Tensor], p0, lr: float, n_steps: int, tol: float = 0.0) -> bool:
    euler, gd = euler_vs_gradient_descent(grad_fn, p0, lr, n_steps)
    return bool(np.max(np.abs(euler - gd), initial=0.0) <= tol)
