"""Adam and step-decay learning-rate schedules."""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ParamVector, gradient


@dataclass(frozen=True)
class AdamState:
    t: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # per-element decay coefficients (zero where no decay applies)
    weight_decay: np.ndarray | None = None


def adam_init(
    theta: ParamVector,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: Mapping[str, float] | None = None,
) -> AdamState:
    wd = None
    if weight_decay:
        wd = np.zeros(theta.size)
        for name, lam in weight_decay.items():
            wd[theta.slice_of(name)] = lam
    n = theta.size
    return AdamState(0, np.zeros(n), np.zeros(n), lr, beta1, beta2, eps, wd)


def adam_step(state: AdamState, theta: ParamVector, grad: ParamVector) -> tuple[AdamState, ParamVector]:
    """One bias-corrected Adam step on a minimization gradient."""
    g = grad.data if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    x = theta.data
    if g.shape != x.shape or state.m.shape != x.shape:
        raise ValueError(f"dimension mismatch: theta {x.shape}, grad {g.shape}, state {state.m.shape}")
    if state.weight_decay is not None:
        g = g + state.weight_decay * x
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_x = x - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, t=t, m=m, v=v), theta.with_data(new_x)


@dataclass(frozen=True)
class OptSchedule:
    """Step counts and a piecewise-constant learning rate.

    ``decay_points`` are step indices; ``decay_fractions`` are fractions of
    ``steps``. At each point the rate is multiplied by ``decay_factor``.
    """

    steps: int = 10_000
    lr: float = 1e-3
    decay_points: tuple[int, ...] = ()
    decay_fractions: tuple[float, ...] = ()
    decay_factor: float = 0.1

    def boundaries(self) -> list[int]:
        pts = list(self.decay_points) + [int(round(f * self.steps)) for f in self.decay_fractions]
        return sorted(pts)

    def lr_at(self, step: int) -> float:
        n = len([b for b in self.boundaries() if step >= b])
        return self.lr * self.decay_factor**n


def adam_minimize(
    fun: Callable[[dict], object],
    theta: ParamVector,
    schedule: OptSchedule,
    *,
    trainable: Iterable[str] | None = None,
    weight_decay: Mapping[str, float] | None = None,
    callback: Callable[[int, float, ParamVector], None] | None = None,
) -> ParamVector:
    """Minimize ``fun`` with Adam; blocks outside ``trainable`` stay fixed."""
    state = adam_init(theta, schedule.lr, weight_decay=weight_decay)
    frozen = None if trainable is None else ~theta.mask(trainable)
    for step in range(schedule.steps):
        val, g = gradient(fun, theta)
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite objective at step {step}")
        if callback is not None:
            callback(step, val, theta)
        state = replace(state, lr=schedule.lr_at(step))
        state, new_theta = adam_step(state, theta, g)
        if frozen is not None:
            flat = new_theta.data.copy()
            flat[frozen] = theta.data[frozen]
            new_theta = theta.with_data(flat)
        theta = new_theta
    return theta
