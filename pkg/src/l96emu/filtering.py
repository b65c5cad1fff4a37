"""Finite-size ensemble Kalman filter (inflation-free analysis).

The analysis minimizes, over ensemble-space coordinates, a cost whose prior
term is the non-Gaussian finite-ensemble marginal; the effective inflation
scalar is found by a bounded 1-D minimization of the dual cost, and the
ensemble is transformed with the symmetric square root of the cost Hessian
at the optimum.  No localization and no explicit multiplicative inflation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import (
    AnalysisError,
    ContractViolation,
    DegenerateEnsembleError,
    IntegrationError,
)
from .observations import ObservationRecord, ObservationSeries

ZETA_REL_TOL = 1e-8
# The analysis needs a positive observation-error scale; perfect observations
# (sigma_obs = 0) are assimilated with this nominal error instead.  Smaller
# floors overfit the unlocalized ensemble covariance and destabilize the
# filter at N around 20-30.
SIGMA_OBS_FLOOR = 0.3


@dataclass
class Ensemble:
    """m-by-N member matrix at time index k; columns are exchangeable."""

    members: np.ndarray
    k: int = 0

    def __post_init__(self) -> None:
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 2 or self.members.shape[1] < 2:
            raise ContractViolation("ensemble must be m x N with N >= 2")
        if not np.isfinite(self.members).all():
            raise ContractViolation("ensemble contains non-finite members")

    @property
    def m(self) -> int:
        return self.members.shape[0]

    @property
    def N(self) -> int:
        return self.members.shape[1]


@dataclass
class AnalysisSeries:
    """Per-step analysis mean and diagonal analysis variance (loss weights)."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        if self.means.shape != self.variances.shape:
            raise ContractViolation("means/variances shape mismatch")
        if (self.variances < 0).any():
            raise ContractViolation("analysis variances must be >= 0")

    @property
    def K(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class FilterConfig:
    N: int = 30
    sigma_m: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.N < 2:
            raise ContractViolation("ensemble size must be >= 2")
        if self.sigma_m < 0:
            raise ContractViolation("sigma_m must be >= 0")


def ensemble_moments(ens: Ensemble) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased per-component variance."""
    mean = ens.members.mean(axis=1)
    var = ens.members.var(axis=1, ddof=1)
    return mean, var


def initial_ensemble(
    x0: np.ndarray, N: int, rng: np.random.Generator, spread: float = 1.0
) -> Ensemble:
    """Initial members: a base state plus i.i.d. Gaussian perturbations."""
    x0 = np.asarray(x0, dtype=np.float64)
    members = x0[:, None] + spread * rng.standard_normal((x0.size, N))
    return Ensemble(members=members, k=0)


def forecast_ensemble(
    ens: Ensemble, model, sigma_m: float, rng: np.random.Generator
) -> Ensemble:
    """Propagate every member through the model and add model noise."""
    try:
        propagated = model(ens.members.T)
    except Exception as exc:  # noqa: BLE001 - annotate with the member set
        raise IntegrationError(f"model failed at time index {ens.k}: {exc}") from exc
    propagated = np.asarray(propagated, dtype=np.float64).T
    bad = ~np.isfinite(propagated).all(axis=0)
    if bad.any():
        raise IntegrationError(
            f"model blow-up for member {int(np.flatnonzero(bad)[0])} "
            f"at time index {ens.k}"
        )
    if sigma_m > 0:
        propagated = propagated + sigma_m * rng.standard_normal(propagated.shape)
    return Ensemble(members=propagated, k=ens.k + 1)


def analysis_enkfn(
    ens: Ensemble, obs: ObservationRecord, sigma_obs: float
) -> Ensemble:
    """Deterministic finite-size ensemble-subspace analysis.

    Solves the dual problem for the effective inflation scalar zeta on
    (0, N/eps_N], then updates the mean in the anomaly subspace and applies
    the symmetric square-root transform built from the cost Hessian.
    """
    if sigma_obs <= 0:
        raise ContractViolation("sigma_obs must be > 0 in the analysis")
    if obs.k != ens.k:
        raise ContractViolation(
            f"observation time {obs.k} does not match ensemble time {ens.k}"
        )
    X = ens.members
    N = ens.N
    mean = X.mean(axis=1)
    A = X - mean[:, None]
    Y = A[obs.indices, :]
    spread = np.abs(Y).max(axis=1)
    if (spread == 0).any():
        n = int(obs.indices[int(np.flatnonzero(spread == 0)[0])])
        raise DegenerateEnsembleError(
            f"zero ensemble spread at observed component {n} (time {ens.k})"
        )
    delta = obs.values - mean[obs.indices]

    S = Y / sigma_obs
    d = delta / sigma_obs
    # Ensemble-space normal matrix S^T S = V diag(lam) V^T.
    lam, V = np.linalg.eigh(S.T @ S)
    lam = np.clip(lam, 0.0, None)
    beta = V.T @ (S.T @ d)

    eps_n = 1.0 + 1.0 / N
    zeta_hi = N / eps_n
    zeta_lo = ZETA_REL_TOL * zeta_hi

    def dual(zeta: float) -> float:
        return float(
            -0.5 * (beta ** 2 / (lam + zeta)).sum()
            + 0.5 * eps_n * zeta
            + 0.5 * N * np.log(N / zeta)
        )

    res = minimize_scalar(
        dual,
        bounds=(zeta_lo, zeta_hi),
        method="bounded",
        options={"xatol": ZETA_REL_TOL * zeta_hi},
    )
    if not res.success or not np.isfinite(res.x):
        raise AnalysisError(
            f"dual minimization failed on [{zeta_lo:.3e}, {zeta_hi:.3e}] "
            f"at time {ens.k}: {res.message}"
        )
    zeta = float(res.x)

    w = V @ (beta / (lam + zeta))
    # Hessian of the primal cost at the optimum (includes the radial term).
    hess = (V * lam) @ V.T + zeta * np.eye(N) - (2.0 * zeta ** 2 / N) * np.outer(w, w)
    evals, U = np.linalg.eigh(hess)
    evals = np.clip(evals, 1e-12, None)
    T = (U * (np.sqrt(N - 1.0) / np.sqrt(evals))) @ U.T

    new_mean = mean + A @ w
    members = new_mean[:, None] + A @ T
    return Ensemble(members=members, k=ens.k)


def run_filter(
    model,
    obs: ObservationSeries,
    cfg: FilterConfig,
    init: Ensemble,
) -> AnalysisSeries:
    """Alternate forecast and analysis over the whole observation series."""
    if init.N != cfg.N:
        raise ContractViolation(
            f"initial ensemble has N={init.N}, config says {cfg.N}"
        )
    rng = np.random.default_rng(cfg.seed)
    sigma_obs = max(obs.sigma_obs, SIGMA_OBS_FLOOR)
    K = obs.K
    m = init.m
    means = np.empty((K, m), dtype=np.float64)
    variances = np.empty((K, m), dtype=np.float64)
    ens = init
    for k in range(1, K + 1):
        try:
            ens = forecast_ensemble(ens, model, cfg.sigma_m, rng)
            ens = analysis_enkfn(ens, obs.record(k), sigma_obs)
        except (IntegrationError, DegenerateEnsembleError, AnalysisError) as exc:
            raise type(exc)(f"filter failed at step {k}: {exc}") from exc
        means[k - 1], variances[k - 1] = ensemble_moments(ens)
    return AnalysisSeries(means=means, variances=variances)
