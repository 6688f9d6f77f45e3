"""Per-cell marginal extremes: GPD tail above an empirical threshold, plus
transforms between observed wind speeds and the common Exp(1) scale.

The per-cell model is empirical below the threshold u (rank/(n+1) plotting
positions, linearly interpolated, pinned to 1 - lambda at u) and a
generalized Pareto tail above it. The probability integral transform to
Exp(1) margins and its inverse are exposed as whole-stack operations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import CellMask, FieldStack

XI_LO, XI_HI = -0.95, 1.0
_GOLDEN = (np.sqrt(5) - 1) / 2


class FitError(RuntimeError):
    pass


class MaskedCellError(KeyError):
    pass


@dataclass(frozen=True)
class GpdFit:
    """Fitted tail: survival above threshold is lambda_u * (1 + xi*x/sigma)^(-1/xi)."""

    sigma: float
    xi: float
    threshold: float
    lambda_u: float
    n_exceed: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.lambda_u < 1:
            raise ValueError("lambda_u must be in (0, 1)")

    @property
    def upper_endpoint(self):
        """Finite support endpoint u - sigma/xi for xi < 0, else inf."""
        if self.xi < 0:
            return self.threshold - self.sigma / self.xi
        return np.inf


def gpd_survival(fit: GpdFit, x):
    """Pr(excess > x | exceedance) = (1 + xi*x/sigma)^(-1/xi), positive part."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("excess must be >= 0")
    if abs(fit.xi) < 1e-8:
        out = np.exp(-x / fit.sigma)
    else:
        base = np.maximum(1.0 + fit.xi * x / fit.sigma, 0.0)
        with np.errstate(divide="ignore"):
            out = np.where(base > 0, base ** (-1.0 / fit.xi), 0.0)
    return float(out) if out.ndim == 0 else out


def gpd_quantile(fit: GpdFit, p):
    """Excess quantile: inverse of 1 - gpd_survival at probability p in [0, 1)."""
    p = np.asarray(p, dtype=float)
    if abs(fit.xi) < 1e-8:
        out = -fit.sigma * np.log1p(-p)
    else:
        out = fit.sigma / fit.xi * ((1.0 - p) ** (-fit.xi) - 1.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Vectorized profile-likelihood fit
# ---------------------------------------------------------------------------

def _nll(xi, log_sigma, ex, valid, counts):
    """GPD negative log-likelihood per cell; xi, log_sigma are (C,) arrays."""
    sigma = np.exp(log_sigma)
    exp_case = np.abs(xi) < 1e-8
    with np.errstate(divide="ignore", invalid="ignore"):
        a = xi[:, None] * ex / sigma[:, None]
        terms = np.where(valid, np.log1p(np.where(valid, a, 0.0)), 0.0)
        nll = counts * log_sigma + (1.0 + 1.0 / np.where(exp_case, 1.0, xi)) * terms.sum(axis=1)
    nll_exp = counts * log_sigma + np.where(valid, ex, 0.0).sum(axis=1) / sigma
    return np.where(exp_case, nll_exp, nll)


def _golden_min(f, lo, hi, iters):
    """Vectorized golden-section minimum of a unimodal f on per-cell brackets.

    One f evaluation per iteration; each cell tracks its own bracket.
    """
    a, b = lo.copy(), hi.copy()
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        left = f1 < f2  # minimum lies in [a, x2]
        b = np.where(left, x2, b)
        a = np.where(left, a, x1)
        x1_new = np.where(left, b - _GOLDEN * (b - a), x2)
        x2_new = np.where(left, x1, a + _GOLDEN * (b - a))
        probe = np.where(left, x1_new, x2_new)
        f_probe = f(probe)
        f1, f2 = (np.where(left, f_probe, f2), np.where(left, f1, f_probe))
        x1, x2 = x1_new, x2_new
    xm = (a + b) / 2
    return xm, f(xm)


def _sigma_hat(xi, ex, valid, counts, iters=30):
    """Per-cell MLE of log sigma at fixed xi (safeguarded Newton on the score).

    The score in eta = log sigma runs from negative near the support
    boundary to positive for large sigma, so a bisection-guarded Newton
    converges for every cell simultaneously.
    """
    sums = np.where(valid, ex, 0.0).sum(axis=1)
    mean = sums / counts
    maxx = np.where(valid, ex, 0.0).max(axis=1)
    exp_case = np.abs(xi) < 1e-8
    xin = np.where(exp_case, 1.0, xi)
    floor = np.where(xin < 0, -xin * maxx, 1e-300)
    lo = np.log(np.maximum(floor * (1 + 1e-9), mean * 1e-6))
    hi = np.log(mean * 1e6 + floor * 4)
    eta = np.log(np.maximum(mean, floor * 1.5))
    c = 1.0 + 1.0 / xin
    for _ in range(iters):
        a = np.where(valid, xin[:, None] * ex * np.exp(-eta)[:, None], 0.0)
        r = a / (1.0 + a)
        g = counts - c * r.sum(axis=1)
        gp = c * (a / (1.0 + a) ** 2).sum(axis=1)
        if np.all(np.abs(g) < 1e-9 * counts):
            break
        hi = np.where(g > 0, np.minimum(eta, hi), hi)
        lo = np.where(g <= 0, np.maximum(eta, lo), lo)
        newton = eta - g / np.where(gp > 0, gp, 1.0)
        inside = (newton > lo) & (newton < hi) & (gp > 0)
        eta = np.where(inside, newton, 0.5 * (lo + hi))
    return np.where(exp_case, np.log(mean), eta)


def _profile_nll(xi, ex, valid, counts):
    log_sigma = _sigma_hat(xi, ex, valid, counts)
    return _nll(xi, log_sigma, ex, valid, counts), log_sigma


def _fit_gpd_cells(ex, valid, counts, n_grid=24, refine_iters=26):
    """MLE (sigma, xi) per cell; ex is (C, N) padded, valid the pad mask."""
    grid = np.linspace(XI_LO, XI_HI, n_grid)
    nlls = np.empty((n_grid, len(counts)))
    for i, xi in enumerate(grid):
        xi_vec = np.full(len(counts), xi)
        nlls[i], _ = _profile_nll(xi_vec, ex, valid, counts)
    best = np.argmin(nlls, axis=0)
    lo = grid[np.maximum(best - 1, 0)]
    hi = grid[np.minimum(best + 1, n_grid - 1)]
    xi_hat, _ = _golden_min(lambda x: _profile_nll(x, ex, valid, counts)[0],
                            lo, hi, refine_iters)
    nll, log_sigma = _profile_nll(xi_hat, ex, valid, counts)
    if not np.all(np.isfinite(nll)):
        raise FitError("GPD likelihood did not converge")
    return np.exp(log_sigma), xi_hat


def fit_gpd(excesses, min_excesses=30):
    """Maximum-likelihood (sigma, xi) for threshold excesses.

    The shape is profiled over [-0.95, 1.0]: a coarse grid supplies
    multiple starts, the bracket around the best point is refined by
    golden section, and sigma is optimized numerically at every shape.
    """
    ex = np.asarray(excesses, dtype=float)
    if ex.ndim != 1:
        raise ValueError("excesses must be a 1-D sequence")
    if len(ex) < min_excesses:
        raise FitError(f"need at least {min_excesses} excesses, got {len(ex)}")
    if np.any(ex <= 0) or not np.all(np.isfinite(ex)):
        raise ValueError("excesses must be positive and finite")
    if ex.max() - ex.min() < 1e-12 * max(ex.max(), 1.0):
        raise FitError("degenerate excess sample (zero variance)")
    sigma, xi = _fit_gpd_cells(ex[None, :], np.ones((1, len(ex)), bool),
                               np.array([float(len(ex))]))
    return float(sigma[0]), float(xi[0])


def gpd_loglik(sigma, xi, excesses):
    ex = np.asarray(excesses, dtype=float)
    return -float(_nll(np.array([xi]), np.array([np.log(sigma)]),
                       ex[None, :], np.ones((1, len(ex)), bool),
                       np.array([float(len(ex))]))[0])


# ---------------------------------------------------------------------------
# Marginal model over a grid
# ---------------------------------------------------------------------------

@dataclass
class MarginalModel:
    """Per-cell threshold/GPD parameters plus the sorted empirical sample.

    sorted_samples has shape (n, n_y, n_x): raster j holds the j-th order
    statistic of every cell. Masked cells carry NaN parameters.
    """

    grid: object
    u: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray
    lambda_u: np.ndarray
    n_exceed: np.ndarray
    sorted_samples: np.ndarray
    fitted: np.ndarray
    quantile: float = 0.98

    @property
    def n_samples(self):
        return self.sorted_samples.shape[0]

    def cell_fit(self, iy, ix) -> GpdFit:
        if not self.fitted[iy, ix]:
            raise MaskedCellError(f"cell ({iy}, {ix}) is masked; no marginal fit")
        return GpdFit(float(self.sigma[iy, ix]), float(self.xi[iy, ix]),
                      float(self.u[iy, ix]), float(self.lambda_u[iy, ix]),
                      int(self.n_exceed[iy, ix]))

    def _empirical_knots(self, iy, ix):
        """Forward-CDF knots (x, p) for the below-threshold part of a cell."""
        sample = self.sorted_samples[:, iy, ix]
        u = self.u[iy, ix]
        lam = self.lambda_u[iy, ix]
        below = sample[sample <= u]
        n = len(sample)
        probs = (np.arange(1, len(below) + 1)) / (n + 1.0)
        x, idx = np.unique(below, return_index=True)
        # keep the highest plotting position of each tied block
        last = np.append(idx[1:] - 1, len(below) - 1)
        p = probs[last]
        if x[-1] < u:
            x = np.append(x, u)
            p = np.append(p, 1.0 - lam)
        else:
            p[-1] = 1.0 - lam
        return x, p

    def transform_value(self, x, iy, ix, cap=20.0):
        """Observed -> Exp(1) for a single cell (errors on masked cells)."""
        fit = self.cell_fit(iy, ix)
        kx, kp = self._empirical_knots(iy, ix)
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        below = x <= fit.threshold
        ramp_x0 = 0.0 if kx[0] > 0 else kx[0] - max(1e-9, 0.01 * (kx[-1] - kx[0]))
        f_below = np.interp(x[below], np.concatenate([[ramp_x0], kx]),
                            np.concatenate([[0.0], kp]))
        out[below] = -np.log1p(-f_below)
        excess = x[~below] - fit.threshold
        surv = fit.lambda_u * gpd_survival(fit, excess)
        out[~below] = -np.log(np.maximum(surv, np.exp(-cap)))
        return np.minimum(out, cap)

    def inverse_value(self, x_exp, iy, ix):
        """Exp(1) -> observed for a single cell (errors on masked cells)."""
        fit = self.cell_fit(iy, ix)
        kx, kp = self._empirical_knots(iy, ix)
        x_exp = np.asarray(x_exp, dtype=float)
        p = -np.expm1(-x_exp)
        out = np.empty(p.shape)
        tail = p > 1.0 - fit.lambda_u
        out[~tail] = np.interp(p[~tail], kp, kx)  # saturates at sample min
        pe = 1.0 - (1.0 - p[tail]) / fit.lambda_u
        out[tail] = fit.threshold + gpd_quantile(fit, np.minimum(pe, 1.0 - 1e-15))
        if fit.xi < 0:
            out[tail] = np.minimum(out[tail], fit.upper_endpoint)
        return out


def fit_marginal_model(stack: FieldStack, mask: CellMask | None = None,
                       quantile: float = 0.98, min_excesses: int = 30) -> MarginalModel:
    """Fit the per-cell marginal model on an observed-scale stack.

    Threshold is the per-cell empirical `quantile`; the GPD is fitted to
    strict excesses by vectorized profile likelihood across all unmasked
    cells at once.
    """
    if stack.scale_tag != "observed":
        raise ValueError("marginal model is fitted on the observed scale")
    values = np.asarray(stack.values, dtype=float)
    n_t, n_y, n_x = values.shape
    included = mask.included if mask is not None else np.ones((n_y, n_x), bool)

    sorted_vals = np.sort(values, axis=0)
    u = np.quantile(values, quantile, axis=0)
    counts = (values > u[None]).sum(axis=0)
    lam = counts / n_t

    flat_idx = np.flatnonzero(included.ravel())
    cnt_flat = counts.ravel()[flat_idx]
    if np.any(cnt_flat < min_excesses):
        bad = flat_idx[np.argmin(cnt_flat)]
        raise FitError(
            f"cell ({bad // n_x}, {bad % n_x}) has {cnt_flat.min()} excesses; "
            f"need at least {min_excesses}"
        )
    max_cnt = int(cnt_flat.max())
    tail = sorted_vals[n_t - max_cnt:].reshape(max_cnt, -1)[:, flat_idx].T
    ex = tail - u.ravel()[flat_idx][:, None]
    valid = ex > 0
    spread = np.where(valid, ex, np.nan)
    if np.any(np.nanmax(spread, axis=1) - np.nanmin(spread, axis=1) < 1e-12):
        bad = flat_idx[int(np.argmin(np.nanmax(spread, axis=1) - np.nanmin(spread, axis=1)))]
        raise FitError(f"cell ({bad // n_x}, {bad % n_x}): degenerate excess sample")
    ex = np.where(valid, ex, 0.0)

    sigma_flat, xi_flat = _fit_gpd_cells(ex, valid, cnt_flat.astype(float))

    sigma = np.full((n_y, n_x), np.nan)
    xi = np.full((n_y, n_x), np.nan)
    sigma.ravel()[flat_idx] = sigma_flat
    xi.ravel()[flat_idx] = xi_flat
    return MarginalModel(stack.grid, u, sigma, xi, lam, counts, sorted_vals,
                         included.copy(), quantile)


def to_exp_margins(model: MarginalModel, stack: FieldStack, cap: float = 20.0) -> FieldStack:
    """Observed -> Exp(1) margins per cell; masked cells become NaN.

    Values above a finite fitted endpoint clamp to `cap` (a warning reports
    the count). Use MarginalModel.transform_value for single masked-cell
    error semantics.
    """
    if stack.scale_tag != "observed":
        raise ValueError("expected an observed-scale stack")
    values = np.asarray(stack.values, dtype=float)
    n_t, n_y, n_x = values.shape
    out = np.full(values.shape, np.nan)
    n_clamped = 0
    for iy in range(n_y):
        for ix in range(n_x):
            if not model.fitted[iy, ix]:
                continue
            cell = model.transform_value(values[:, iy, ix], iy, ix, cap=cap)
            n_clamped += int(np.sum(cell >= cap))
            out[:, iy, ix] = cell
    if n_clamped:
        warnings.warn(f"{n_clamped} values exceeded the fitted support; "
                      f"clamped to Exp(1) cap {cap}")
    return stack.with_values(out, "exp1")


def from_exp_margins(model: MarginalModel, stack: FieldStack) -> FieldStack:
    """Exp(1) -> observed margins per cell; masked cells become NaN."""
    if stack.scale_tag != "exp1":
        raise ValueError("expected an exp1-scale stack")
    values = np.asarray(stack.values, dtype=float)
    n_t, n_y, n_x = values.shape
    out = np.full(values.shape, np.nan)
    for iy in range(n_y):
        for ix in range(n_x):
            if not model.fitted[iy, ix]:
                continue
            out[:, iy, ix] = model.inverse_value(values[:, iy, ix], iy, ix)
    return stack.with_values(out, "observed")
