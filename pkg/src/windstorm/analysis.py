"""Eulerian risk diagnostics: tail dependence chi, extremal index, return
levels, QQ comparisons and spatial event densities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import Grid
from .margins import GpdFit


@dataclass
class ChiEstimate:
    """chi(q) with 95% binomial intervals on effective sample sizes.

    Undefined entries (no conditioning exceedances) carry NaN chi and
    valid=False.
    """

    q: np.ndarray
    chi: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_eff: np.ndarray
    valid: np.ndarray


def extremal_index(series, x, run=6):
    """Runs estimator of the extremal index at threshold x.

    Exceedance clusters are separated by at least `run` consecutive
    non-exceedances; theta is clusters/exceedances, clipped to (0, 1].
    """
    series = np.asarray(series, dtype=float)
    exceed = np.nonzero(series > x)[0]
    if len(exceed) == 0:
        raise ValueError("no exceedances above the threshold")
    gaps = np.diff(exceed)
    n_clusters = 1 + int(np.sum(gaps > run))
    return min(n_clusters / len(exceed), 1.0)


def chi_estimate(series1, series2, q_grid, run=6, min_exceed_theta=10) -> ChiEstimate:
    """Conditional-proportion estimate of chi(q) on Exp(1) margins.

    chi(q) = #{both series above x_q} / #{series1 above x_q} with
    x_q = -log(1 - q). The binomial interval uses an effective count
    scaled by the runs extremal index of the conditioning series.
    """
    s1 = np.asarray(series1, dtype=float)
    s2 = np.asarray(series2, dtype=float)
    if s1.shape != s2.shape or s1.ndim != 1:
        raise ValueError("series must be equal-length 1-D arrays")
    if len(s1) < 100:
        raise ValueError("need at least 100 paired observations")
    q_grid = np.asarray(q_grid, dtype=float)
    if np.any((q_grid <= 0) | (q_grid >= 1)):
        raise ValueError("quantile levels must lie in (0, 1)")

    chi = np.full(len(q_grid), np.nan)
    lo = np.full(len(q_grid), np.nan)
    hi = np.full(len(q_grid), np.nan)
    n_eff = np.zeros(len(q_grid))
    valid = np.zeros(len(q_grid), dtype=bool)
    for i, q in enumerate(q_grid):
        x_q = -np.log1p(-q)
        cond = s1 > x_q
        m = int(cond.sum())
        if m == 0:
            continue
        joint = int(np.sum(cond & (s2 > x_q)))
        c = joint / m
        theta = extremal_index(s1, x_q, run=run) if m >= min_exceed_theta else 1.0
        eff = max(m * theta, 1.0)
        half = 1.96 * np.sqrt(c * (1.0 - c) / eff)
        chi[i], lo[i], hi[i] = c, max(c - half, 0.0), min(c + half, 1.0)
        n_eff[i] = eff
        valid[i] = True
    return ChiEstimate(q_grid, chi, lo, hi, n_eff, valid)


def return_level(fit: GpdFit, t_periods, events_per_period):
    """Level exceeded once per t_periods on average under the fitted tail."""
    scale = t_periods * events_per_period * fit.lambda_u
    if scale <= 1:
        raise ValueError(
            f"return level below threshold (T*rate*lambda = {scale:.3g} <= 1)")
    if abs(fit.xi) < 1e-8:
        return fit.threshold + fit.sigma * np.log(scale)
    return fit.threshold + fit.sigma / fit.xi * (scale ** fit.xi - 1.0)


def qq_data(sample_a, sample_b, n_quantiles=19, n_boot=500, level=0.95,
            simultaneous=False, rng=None):
    """Matched empirical quantiles of two samples with a bootstrap band.

    The band is calibrated for the same-distribution null: each bootstrap
    iteration draws two independent resamples of sample_a (sizes n_a and
    n_b) and records their quantile differences; the band is sample_a's
    quantiles plus the percentiles of those differences. With
    simultaneous=True the band instead uses the bootstrap distribution of
    the maximum standardized deviation, so "all points inside" holds at
    the stated level.

    Returns (q_a, q_b, lo, hi).
    """
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.asarray(sample_b, dtype=float)
    if len(a) < n_quantiles or len(b) < n_quantiles:
        raise ValueError("samples must have at least n_quantiles points")
    rng = rng or np.random.default_rng(0)
    probs = np.arange(1, n_quantiles + 1) / (n_quantiles + 1.0)
    q_a = np.quantile(a, probs)
    q_b = np.quantile(b, probs)

    diffs = np.empty((n_boot, n_quantiles))
    for i in range(n_boot):
        r1 = rng.choice(a, size=len(a), replace=True)
        r2 = rng.choice(a, size=len(b), replace=True)
        diffs[i] = np.quantile(r2, probs) - np.quantile(r1, probs)
    alpha = 1.0 - level
    if simultaneous:
        spread = np.maximum(diffs.std(axis=0), 1e-12)
        max_dev = np.abs(diffs / spread).max(axis=1)
        c = np.quantile(max_dev, level)
        lo, hi = q_a - c * spread, q_a + c * spread
    else:
        lo = q_a + np.quantile(diffs, alpha / 2, axis=0)
        hi = q_a + np.quantile(diffs, 1.0 - alpha / 2, axis=0)
    return q_a, q_b, lo, hi


def spatial_density(lons, lats, grid: Grid, smooth_sigma=0.0):
    """Per-cell event counts, optionally Gaussian-smoothed (mass-conserving)."""
    lons = np.atleast_1d(np.asarray(lons, dtype=float))
    lats = np.atleast_1d(np.asarray(lats, dtype=float))
    if len(lons) == 0:
        raise ValueError("no events supplied")
    x, y = grid.lonlat_to_xy(lons, lats)
    ix = np.clip(np.round(x).astype(int), 0, grid.n_x - 1)
    iy = np.clip(np.round(y).astype(int), 0, grid.n_y - 1)
    counts = np.zeros(grid.shape)
    np.add.at(counts, (iy, ix), 1.0)
    if smooth_sigma > 0:
        counts = gaussian_filter(counts, smooth_sigma, mode="reflect")
    return counts


def isotonic_decreasing(values):
    """Pool-adjacent-violators fit of a non-increasing sequence.

    Returns (fitted, residual) where residual is the max absolute
    adjustment made.
    """
    values = np.asarray(values, dtype=float)
    fitted = -_pava(-values)
    return fitted, float(np.abs(fitted - values).max(initial=0.0))


def _pava(y):
    """Non-decreasing least-squares fit by pool-adjacent-violators."""
    blocks = [[v, 1.0] for v in y]
    i = 0
    while i < len(blocks) - 1:
        if blocks[i][0] > blocks[i + 1][0] + 1e-15:
            v1, w1 = blocks[i]
            v2, w2 = blocks[i + 1]
            blocks[i] = [(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2]
            del blocks[i + 1]
            i = max(i - 1, 0)
        else:
            i += 1
    out = []
    for v, w in blocks:
        out.extend([v] * int(w))
    return np.array(out)
