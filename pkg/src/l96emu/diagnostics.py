"""Evaluation metrics: analysis/forecast RMSE, climate statistics, Lyapunov
spectra (Benettin/QR on an exact tangent map) and Welch power spectral
densities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import welch

from .errors import ContractViolation, IntegrationError
from .filtering import AnalysisSeries
from .model import ModelParams, Trajectory, rk4_step, tangent_step
from .network import NetworkParameters, forward, forward_tangent

LYAPUNOV_TRANSIENT = 1000


@dataclass
class LyapunovSpectrum:
    """Exponents per model-time unit, sorted descending."""

    exponents: np.ndarray
    n_steps: int

    def __post_init__(self) -> None:
        self.exponents = np.asarray(self.exponents, dtype=np.float64)
        if (np.diff(self.exponents) > 1e-12).any():
            raise ContractViolation("exponents must be sorted descending")


@dataclass
class PowerSpectrum:
    frequencies: np.ndarray
    densities: np.ndarray

    def __post_init__(self) -> None:
        if (self.densities < 0).any():
            raise ContractViolation("spectral densities must be >= 0")


@dataclass
class TangentMap:
    """A discrete map bundled with its exact tangent propagation.

    ``step(x)`` advances a state; ``tangent(x, V)`` applies the Jacobian of
    the map at x to the rows of V.  ``h`` converts per-step growth rates to
    model-time units.
    """

    step: object
    tangent: object
    h: float


def true_tangent_map(p: ModelParams) -> TangentMap:
    return TangentMap(
        step=lambda x: rk4_step(x, p),
        tangent=lambda x, v: tangent_step(x, v, p),
        h=p.h,
    )


def surrogate_tangent_map(params: NetworkParameters, h: float) -> TangentMap:
    return TangentMap(
        step=lambda x: forward(params, x, mode="infer"),
        tangent=lambda x, v: forward_tangent(params, x, v),
        h=h,
    )


def rmse_a(analysis: AnalysisSeries, truth: Trajectory, k0: int = 100) -> float:
    """Spatiotemporal RMSE of the analysis mean over k = k0..K."""
    K = analysis.K
    if truth.n_steps != K:
        raise ContractViolation(
            f"truth covers {truth.n_steps} steps, analysis covers {K}"
        )
    if not 0 < k0 < K:
        raise ContractViolation(f"k0={k0} outside (0, {K})")
    # analysis row j corresponds to time index j + 1
    diff = analysis.means[k0 - 1 :] - truth.states[k0:]
    return float(np.sqrt(np.mean(diff ** 2)))


def mean_state(states: np.ndarray) -> float:
    """Grand spatiotemporal mean of a (T, m) field or Trajectory."""
    if isinstance(states, Trajectory):
        states = states.states
    states = np.asarray(states, dtype=np.float64)
    if states.size == 0:
        raise ContractViolation("empty trajectory")
    return float(states.mean())


def free_run(step, x0: np.ndarray, n_steps: int) -> np.ndarray:
    """Iterate a state map; returns (n_steps + 1, m) including the start."""
    x = np.asarray(x0, dtype=np.float64)
    out = np.empty((n_steps + 1, x.size), dtype=np.float64)
    out[0] = x
    for i in range(1, n_steps + 1):
        x = step(x)
        if not np.isfinite(x).all():
            raise IntegrationError(f"free run blew up at step {i}")
        out[i] = x
    return out


def forecast_initial_conditions(
    p: ModelParams, count: int = 500, stride: int = 20, seed: int = 777
) -> np.ndarray:
    """Non-consecutive attractor states from an independent truth run."""
    from .model import default_initial_state, generate_truth

    traj = generate_truth(
        default_initial_state(p, seed=seed), K=count * stride, p=p
    )
    return traj.states[stride::stride][:count]


def rmse_f(
    surrogate_step,
    truth_step,
    ics: np.ndarray,
    max_lead: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Forecast RMSE of the surrogate against the true resolvent.

    Both maps are iterated from every initial condition; returns the
    (max_lead,) RMSE curve over all conditions and components plus the
    per-condition standard deviation at each lead.
    """
    ics = np.asarray(ics, dtype=np.float64)
    if ics.ndim != 2:
        raise ContractViolation("initial conditions must be (P, m)")
    if max_lead < 1:
        raise ContractViolation("max_lead must be >= 1")
    xs = ics.copy()
    xt = ics.copy()
    curve = np.empty(max_lead, dtype=np.float64)
    spread = np.empty(max_lead, dtype=np.float64)
    for i in range(max_lead):
        xs = np.asarray(surrogate_step(xs), dtype=np.float64)
        xt = np.asarray(truth_step(xt), dtype=np.float64)
        for name, arr in (("surrogate", xs), ("true model", xt)):
            if not np.isfinite(arr).all():
                bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
                raise IntegrationError(
                    f"{name} blew up at lead {i + 1} for initial condition {bad}"
                )
        sq = (xs - xt) ** 2
        curve[i] = np.sqrt(sq.mean())
        spread[i] = np.sqrt(sq.mean(axis=1)).std()
    return curve, spread


def lyapunov_spectrum(
    tmap: TangentMap,
    x0: np.ndarray,
    n_steps: int = 100_000,
    n_exponents: int | None = None,
    reorth_every: int = 1,
    transient: int = LYAPUNOV_TRANSIENT,
    seed: int = 0,
) -> LyapunovSpectrum:
    """Benettin/QR: propagate an orthonormal frame and average log growth.

    The first ``transient`` steps of log-growth accumulation are discarded so
    the frame can align with the backward Lyapunov vectors.  Exponents are
    per model-time unit.
    """
    x = np.asarray(x0, dtype=np.float64)
    m = x.size
    if n_exponents is None:
        n_exponents = m
    if not 1 <= n_exponents <= m:
        raise ContractViolation(f"n_exponents must be in 1..{m}")
    if n_steps <= transient:
        raise ContractViolation("n_steps must exceed the transient")
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.standard_normal((m, n_exponents)))[0]
    sums = np.zeros(n_exponents)
    counted = 0
    for step_idx in range(n_steps):
        Q = np.asarray(tmap.tangent(x, Q.T), dtype=np.float64).T
        if step_idx % reorth_every == reorth_every - 1:
            Q, R = np.linalg.qr(Q)
            diag = np.abs(np.diag(R))
            if (diag < 1e-300).any():
                raise IntegrationError(
                    f"tangent frame rank collapse at step {step_idx}"
                )
            if step_idx >= transient:
                sums += np.log(diag)
                counted += reorth_every
        x = tmap.step(x)
        if not np.isfinite(x).all():
            raise IntegrationError(f"base trajectory blew up at step {step_idx}")
    exponents = np.sort(sums / (counted * tmap.h))[::-1]
    return LyapunovSpectrum(exponents=exponents, n_steps=n_steps)


def leading_lyapunov(
    tmap: TangentMap, x0: np.ndarray, n_steps: int = 20_000, seed: int = 0
) -> float:
    """Largest exponent only (single-vector power iteration with renorm)."""
    spec = lyapunov_spectrum(
        tmap, x0, n_steps=n_steps, n_exponents=1,
        transient=min(LYAPUNOV_TRANSIENT, n_steps // 10), seed=seed,
    )
    return float(spec.exponents[0])


def welch_psd(
    series: np.ndarray,
    fs: float,
    seg_len: int = 512,
    overlap: float = 0.5,
) -> PowerSpectrum:
    """Hanning-windowed overlapped averaged periodogram (density scaling).

    The integral of the density over frequency matches the series variance.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 1:
        raise ContractViolation("welch_psd expects a scalar time series")
    if series.size < seg_len:
        raise ContractViolation(
            f"series of length {series.size} shorter than segment {seg_len}"
        )
    freqs, dens = welch(
        series,
        fs=fs,
        window="hann",
        nperseg=seg_len,
        noverlap=int(overlap * seg_len),
        detrend="constant",
        scaling="density",
    )
    return PowerSpectrum(frequencies=freqs[1:], densities=dens[1:])


def rmse_lyapunov(
    true_spec: LyapunovSpectrum, surr_spec: LyapunovSpectrum, n_lead: int = 12
) -> float:
    """Root of summed squared differences over the leading exponents.

    Deliberately unnormalized (no 1/n_lead factor).
    """
    for spec in (true_spec, surr_spec):
        if spec.exponents.size < n_lead:
            raise ContractViolation("spectrum shorter than n_lead")
    diff = true_spec.exponents[:n_lead] - surr_spec.exponents[:n_lead]
    return float(np.sqrt((diff ** 2).sum()))
