"""Lorenz-96 dynamics: tendency, RK4 resolvent, exact tangent map, truth runs.

All operations accept states of shape ``(m,)`` or batched ``(..., m)`` and
are vectorized over the leading axes, so ensembles and tangent frames can be
propagated in a single call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, IntegrationError

DEFAULT_SPINUP = 1000


@dataclass(frozen=True)
class ModelParams:
    """Lorenz-96 parameters; defaults reproduce the reference setup."""

    m: int = 40
    F: float = 8.0
    h: float = 0.05

    def __post_init__(self) -> None:
        if self.m < 4:
            raise ContractViolation(f"state dimension must be >= 4, got {self.m}")
        if self.h <= 0:
            raise ContractViolation(f"time step must be positive, got {self.h}")


@dataclass
class Trajectory:
    """Time-ordered states at uniform spacing ``step``; shape (K+1, m)."""

    states: np.ndarray
    step: float

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2:
            raise ContractViolation("trajectory states must be a 2-D array")
        if not np.isfinite(self.states).all():
            raise ContractViolation("trajectory contains non-finite states")

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def m(self) -> int:
        return self.states.shape[1]


def _check_state(x: np.ndarray, m: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m:
        raise ContractViolation(f"state has length {x.shape[-1]}, expected {m}")
    if not np.isfinite(x).all():
        raise ContractViolation("state contains non-finite values")
    return x


def l96_tendency(x: np.ndarray, p: ModelParams) -> np.ndarray:
    """dx/dt of L96 with periodic indexing: (x_{n+1} - x_{n-2}) x_{n-1} - x_n + F."""
    x = _check_state(x, p.m)
    return _tendency_unchecked(x, p)


def _tendency_unchecked(x: np.ndarray, p: ModelParams) -> np.ndarray:
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return (xp1 - xm2) * xm1 - x + p.F


def _tendency_jvp(x: np.ndarray, dx: np.ndarray, p: ModelParams) -> np.ndarray:
    """Jacobian of the tendency at x applied to dx (shapes broadcast)."""
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    dp1 = np.roll(dx, -1, axis=-1)
    dm1 = np.roll(dx, 1, axis=-1)
    dm2 = np.roll(dx, 2, axis=-1)
    return (dp1 - dm2) * xm1 + (xp1 - xm2) * dm1 - dx


def rk4_step(x: np.ndarray, p: ModelParams) -> np.ndarray:
    """One classical RK4 step of length h; the true resolvent of the flow."""
    x = _check_state(x, p.m)
    y = _rk4_unchecked(x, p)
    if not np.isfinite(y).all():
        raise IntegrationError("RK4 step produced a non-finite state")
    return y


def _rk4_unchecked(x: np.ndarray, p: ModelParams) -> np.ndarray:
    h = p.h
    k1 = _tendency_unchecked(x, p)
    k2 = _tendency_unchecked(x + 0.5 * h * k1, p)
    k3 = _tendency_unchecked(x + 0.5 * h * k2, p)
    k4 = _tendency_unchecked(x + h * k3, p)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def tangent_step(x: np.ndarray, dx: np.ndarray, p: ModelParams) -> np.ndarray:
    """Exact Jacobian of the RK4 map at x applied to dx.

    Differentiates through the integrator itself, so it is consistent with
    the discrete map actually iterated by :func:`rk4_step`.  ``dx`` may be
    batched ``(..., m)`` against a single base state.
    """
    x = _check_state(x, p.m)
    dx = np.asarray(dx, dtype=np.float64)
    if dx.shape[-1] != p.m:
        raise ContractViolation(
            f"tangent vector has length {dx.shape[-1]}, expected {p.m}"
        )
    h = p.h
    k1 = _tendency_unchecked(x, p)
    x2 = x + 0.5 * h * k1
    k2 = _tendency_unchecked(x2, p)
    x3 = x + 0.5 * h * k2
    k3 = _tendency_unchecked(x3, p)
    x4 = x + h * k3
    d1 = _tendency_jvp(x, dx, p)
    d2 = _tendency_jvp(x2, dx + 0.5 * h * d1, p)
    d3 = _tendency_jvp(x3, dx + 0.5 * h * d2, p)
    d4 = _tendency_jvp(x4, dx + h * d3, p)
    return dx + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)


def generate_truth(
    x0: np.ndarray,
    K: int,
    p: ModelParams,
    spinup: int = DEFAULT_SPINUP,
) -> Trajectory:
    """Integrate K steps after discarding ``spinup`` steps; returns K+1 states."""
    if K < 0:
        raise ContractViolation(f"K must be >= 0, got {K}")
    if spinup < 0:
        raise ContractViolation(f"spinup must be >= 0, got {spinup}")
    x = _check_state(x0, p.m)
    for _ in range(spinup):
        x = _rk4_unchecked(x, p)
    if not np.isfinite(x).all():
        raise IntegrationError("integration blew up during spin-up")
    states = np.empty((K + 1, p.m), dtype=np.float64)
    states[0] = x
    for k in range(1, K + 1):
        x = _rk4_unchecked(x, p)
        states[k] = x
    if not np.isfinite(states).all():
        raise IntegrationError("integration blew up while recording the trajectory")
    return Trajectory(states=states, step=p.h)


def default_initial_state(p: ModelParams, seed: int = 0) -> np.ndarray:
    """Forcing fixed point plus a small seeded perturbation (off-attractor)."""
    rng = np.random.default_rng(seed)
    return p.F + 0.01 * rng.standard_normal(p.m)


def resolvent(p: ModelParams):
    """The true model as a plain state-to-state map (batched)."""

    def step(x: np.ndarray) -> np.ndarray:
        return rk4_step(x, p)

    return step
