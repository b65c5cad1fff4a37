"""Cubic interpolation of sparse observations onto the full space-time grid.

The default scheme treats the observations as scattered points in the
(time, space) plane and fits a piecewise-cubic Clough-Tocher interpolant,
with the spatial axis padded periodically so the domain boundary is seamless.
A cheaper per-grid-point temporal spline variant is available; it ignores
spatial structure and yields a noticeably smaller error because every grid
point is densely sampled in time at 50% coverage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline, griddata

from .errors import InterpolationError
from .observations import ObservationSeries

MIN_NODES = 4
METHODS = ("spacetime", "temporal")
# Ghost columns replicated on each side of the periodic spatial axis; wider
# than the network receptive-field half-width so boundary triangles are
# supported on both sides.
SPATIAL_PAD = 5


@dataclass
class InterpolatedField:
    """Full m-by-K field plus the mask of directly observed entries.

    Row j corresponds to time index k = j + 1 (matching the observation
    series); observed entries carry the observation values exactly.
    """

    states: np.ndarray
    mask: np.ndarray


def observation_mask(obs: ObservationSeries, m: int) -> np.ndarray:
    """Boolean (K, m) array: True where (k, n) was directly observed."""
    mask = np.zeros((obs.K, m), dtype=bool)
    rows = np.arange(obs.K)[:, None]
    mask[rows, obs.indices] = True
    return mask


def cubic_interpolate(
    obs: ObservationSeries, m: int, K: int, method: str = "spacetime"
) -> InterpolatedField:
    """Fill the (K, m) grid from sparse observations by cubic interpolation."""
    if K != obs.K:
        raise InterpolationError(f"series covers K={obs.K} steps, requested {K}")
    if method not in METHODS:
        raise InterpolationError(
            f"unknown interpolation method {method!r}; expected one of {METHODS}"
        )
    mask = observation_mask(obs, m)
    grid = np.full((K, m), np.nan, dtype=np.float64)
    rows = np.arange(K)[:, None]
    grid[rows, obs.indices] = obs.values

    if method == "spacetime":
        out = _spacetime(obs, grid, mask)
    else:
        out = _temporal(grid, mask)

    # Pass observed entries through unchanged.
    out[mask] = grid[mask]
    return InterpolatedField(states=out, mask=mask)


def _spacetime(
    obs: ObservationSeries, grid: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Scattered piecewise-cubic interpolation over the (time, space) plane."""
    K, m = grid.shape
    if mask.sum() < 3:
        raise InterpolationError("need at least 3 observations for triangulation")
    times = np.repeat(np.arange(K, dtype=np.float64), obs.p)
    space = obs.indices.reshape(-1).astype(np.float64)
    values = obs.values.reshape(-1)

    pad = min(SPATIAL_PAD, m)
    lo = space >= m - pad
    hi = space < pad
    pts = (
        np.concatenate([times, times[lo], times[hi]]),
        np.concatenate([space, space[lo] - m, space[hi] + m]),
    )
    vals = np.concatenate([values, values[lo], values[hi]])

    tg, sg = np.meshgrid(
        np.arange(K, dtype=np.float64), np.arange(m, dtype=np.float64), indexing="ij"
    )
    out = griddata(pts, vals, (tg, sg), method="cubic")
    missing = np.isnan(out)
    if missing.any():
        # Corner nodes outside the convex hull fall back to nearest neighbor.
        out[missing] = griddata(pts, vals, (tg[missing], sg[missing]), method="nearest")
    return out


def _temporal(grid: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Independent natural cubic spline in time for each grid point."""
    K, m = grid.shape
    times = np.arange(K, dtype=np.float64)
    out = np.empty((K, m), dtype=np.float64)
    for n in range(m):
        observed = mask[:, n]
        t_obs = times[observed]
        if t_obs.size < MIN_NODES:
            raise InterpolationError(
                f"grid point {n} observed only {t_obs.size} times "
                f"(need >= {MIN_NODES})"
            )
        spline = CubicSpline(t_obs, grid[observed, n], bc_type="natural")
        # Clamp outside the node range to avoid cubic blow-up at the ends.
        out[:, n] = spline(np.clip(times, t_obs[0], t_obs[-1]))
    return out
