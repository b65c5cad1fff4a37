"""Synthetic sparse observations: random sub-sampling plus Gaussian noise.

The index draws and the noise draws come from two independent seeded
streams, so changing the observation count p leaves the noise sequence
untouched under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .model import Trajectory


@dataclass
class ObservationRecord:
    """Observations at one time step: sorted distinct indices and noisy values."""

    k: int
    indices: np.ndarray
    values: np.ndarray


@dataclass
class ObservationSeries:
    """One record per step k = 1..K with constant p and noise level.

    ``indices`` has shape (K, p) (sorted ascending per row), ``values``
    shape (K, p); row j corresponds to time index k = j + 1.
    """

    indices: np.ndarray
    values: np.ndarray
    sigma_obs: float
    seed: int

    def __post_init__(self) -> None:
        if self.indices.shape != self.values.shape:
            raise ContractViolation("observation indices/values shape mismatch")
        if self.sigma_obs < 0:
            raise ContractViolation("sigma_obs must be >= 0")
        if not np.isfinite(self.values).all():
            raise ContractViolation("observation values contain non-finite entries")

    @property
    def K(self) -> int:
        return self.indices.shape[0]

    @property
    def p(self) -> int:
        return self.indices.shape[1]

    def record(self, k: int) -> ObservationRecord:
        if not 1 <= k <= self.K:
            raise ContractViolation(f"time index {k} outside 1..{self.K}")
        return ObservationRecord(
            k=k, indices=self.indices[k - 1], values=self.values[k - 1]
        )


def _check_indices(indices: np.ndarray, m: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ContractViolation("observation indices must be a 1-D sequence")
    if indices.size and (indices.min() < 0 or indices.max() >= m):
        raise ContractViolation(f"observation index outside [0, {m})")
    if np.unique(indices).size != indices.size:
        raise ContractViolation("observation indices must be distinct")
    return indices


def apply_H(x: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Noise-free projection: the sub-vector of x at the given indices."""
    x = np.asarray(x, dtype=np.float64)
    indices = _check_indices(indices, x.shape[-1])
    return x[..., indices]


def sample_observations(
    traj: Trajectory, p: int, sigma_obs: float, seed: int
) -> ObservationSeries:
    """Observe p random locations of each truth state k = 1..K with noise.

    Locations are drawn uniformly without replacement, fresh at every step.
    """
    m = traj.m
    K = traj.n_steps
    if not 1 <= p <= m:
        raise ContractViolation(f"observation count p={p} outside 1..{m}")
    if sigma_obs < 0:
        raise ContractViolation("sigma_obs must be >= 0")
    idx_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    rng_idx = np.random.default_rng(idx_ss)
    rng_noise = np.random.default_rng(noise_ss)

    indices = np.empty((K, p), dtype=np.int64)
    for j in range(K):
        indices[j] = np.sort(rng_idx.choice(m, size=p, replace=False))
    # Noise is drawn for the full field and sub-sampled, so the realization at
    # a given (k, n) does not depend on p.
    noise = rng_noise.standard_normal((K, m))
    rows = np.arange(K)[:, None]
    values = traj.states[1:][rows, indices] + sigma_obs * noise[rows, indices]
    return ObservationSeries(
        indices=indices, values=values, sigma_obs=sigma_obs, seed=seed
    )
