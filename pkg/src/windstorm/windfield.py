"""Wind speeds within a footprint: anisotropic Matérn Gaussian process,
variogram range estimation, the weighted footprint value distribution, and
conditional simulation pinned to the footprint maximum and perimeter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize_scalar
from scipy.spatial.distance import cdist, pdist, squareform
from scipy.special import gamma as gamma_fn
from scipy.special import kv, ndtr, ndtri

from .core import FieldStack, StormTrack
from .extract import Ellipse, FootprintFeatures, WindstormRecord, bearing_to_vec
from .kde import KdeModel, conditional_sample, wrap_angles


@dataclass(frozen=True)
class GpParams:
    """Matérn correlation parameters with geometric anisotropy."""

    alpha: float          # range, grid cells
    kappa: float = 0.6    # shape
    psi: float = 0.0      # anisotropy rotation, radians
    zeta: float = 1.0     # anisotropy ratio

    def __post_init__(self):
        if self.alpha <= 0 or self.kappa <= 0:
            raise ValueError("alpha and kappa must be positive")
        if self.zeta < 1:
            raise ValueError("zeta must be >= 1")


def matern(u, alpha, kappa=0.6):
    """Matérn correlation rho(u) = (2^(k-1) Gamma(k))^-1 (u/a)^k K_k(u/a)."""
    if alpha <= 0 or kappa <= 0:
        raise ValueError("alpha and kappa must be positive")
    u = np.asarray(u, dtype=float)
    scaled = np.abs(u) / alpha
    out = np.ones_like(scaled)
    nz = scaled > 1e-12
    x = scaled[nz]
    with np.errstate(invalid="ignore", over="ignore"):
        vals = (x ** kappa) * kv(kappa, x) / (2 ** (kappa - 1) * gamma_fn(kappa))
    out[nz] = np.where(np.isfinite(vals), vals, 0.0)
    return float(out) if out.ndim == 0 else out


def _anisotropy_matrix(psi, zeta, order="rotate_first"):
    c, s = np.cos(psi), np.sin(psi)
    rot = np.array([[c, -s], [s, c]])
    stretch = np.diag([1.0, zeta])
    if order == "rotate_first":
        return stretch @ rot
    if order == "scale_first":
        return rot @ stretch
    raise ValueError(f"unknown anisotropy order {order!r}")


def anisotropic_distance(s_i, s_j, psi, zeta, order="rotate_first"):
    """||J Psi (s_i - s_j)||: rotate by psi, stretch the second axis by zeta."""
    if zeta < 1:
        raise ValueError("zeta must be >= 1")
    v = np.asarray(s_i, dtype=float) - np.asarray(s_j, dtype=float)
    t = _anisotropy_matrix(psi, zeta, order) @ v
    return float(np.hypot(*t))


def anisotropy_from_features(features: FootprintFeatures):
    """(psi, zeta) for a footprint: correlation decays most slowly along the
    axis perpendicular to the storm-centre bearing; zeta = A/B."""
    # bearing theta_E -> math angle of the offset direction, then its normal
    perp = np.arctan2(-np.cos(features.theta_e), np.sin(features.theta_e)) + np.pi / 2
    psi = float(wrap_angles(-perp, np.pi))
    return psi, features.a / features.b


def empirical_semivariogram(coords, values, psi=0.0, zeta=1.0, n_bins=15,
                            max_pairs=200_000, order="rotate_first"):
    """Binned semivariogram on anisotropy-corrected distances.

    Bins span (0, max_distance/2]. Returns (bin_centres, gamma, counts)
    with empty bins dropped. Cell pairs are subsampled deterministically
    when the pair count would exceed max_pairs.
    """
    coords = np.asarray(coords, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(coords)
    if n * (n - 1) // 2 > max_pairs:
        keep = int(np.sqrt(2 * max_pairs))
        idx = np.random.default_rng(0).choice(n, size=keep, replace=False)
        coords, values = coords[idx], values[idx]
    tc = coords @ _anisotropy_matrix(psi, zeta, order).T
    d = pdist(tc)
    sv = 0.5 * pdist(values[:, None], metric="sqeuclidean")
    d_max = d.max() / 2
    edges = np.linspace(0, d_max, n_bins + 1)
    which = np.digitize(d, edges) - 1
    keep = (which >= 0) & (which < n_bins)
    counts = np.bincount(which[keep], minlength=n_bins)
    sums = np.bincount(which[keep], weights=sv[keep], minlength=n_bins)
    centres = 0.5 * (edges[:-1] + edges[1:])
    nonzero = counts > 0
    return centres[nonzero], sums[nonzero] / counts[nonzero], counts[nonzero]


def estimate_alpha(coords, values, kappa=0.6, psi=0.0, zeta=1.0, n_bins=15,
                   min_cells=200, order="rotate_first"):
    """Matérn range from a weighted least-squares variogram fit.

    values must be on the Gaussian scale (unit variance); the model
    semivariogram is 1 - rho(u; alpha, kappa). Raises on fields with no
    usable spatial structure.
    """
    coords = np.asarray(coords, dtype=float)
    if len(coords) < min_cells:
        raise ValueError(f"need at least {min_cells} cells, got {len(coords)}")
    centres, gamma_hat, counts = empirical_semivariogram(
        coords, values, psi, zeta, n_bins, order=order)
    if len(centres) < 4 or gamma_hat.max() - gamma_hat.min() < 0.05:
        raise ValueError("no spatial structure: flat empirical variogram")
    u_max = centres.max()

    def loss(log_alpha):
        model = 1.0 - matern(centres, np.exp(log_alpha), kappa)
        return float(np.sum(counts * (gamma_hat - model) ** 2))

    res = minimize_scalar(loss, bounds=(np.log(0.05 * u_max), np.log(10 * u_max)),
                          method="bounded")
    alpha = float(np.exp(res.x))
    if alpha > 9.5 * u_max:
        raise ValueError("no spatial structure: variogram range unbounded")
    return alpha


def gaussianize_footprint(values):
    """Map a footprint's values to Gaussian scale via its own empirical CDF
    (midpoint plotting positions keep the transform finite)."""
    values = np.asarray(values, dtype=float)
    ranks = np.argsort(np.argsort(values))
    probs = (ranks + 0.5) / len(values)
    return ndtri(probs)


@dataclass
class AlphaModel:
    """Conditional KDE of the Matérn range given the footprint area proxy."""

    kde: KdeModel

    def sample(self, delta, rng, max_redraws=50):
        for _ in range(max_redraws):
            a = float(conditional_sample(self.kde, [1], [delta], rng)[0])
            if a > 0:
                return a
        return max(abs(a), 1e-2)


def fit_alpha_model(alphas, deltas, factor=1.0) -> AlphaModel:
    data = np.column_stack([alphas, deltas])
    return AlphaModel(KdeModel.from_data(data, factor=factor))


# ---------------------------------------------------------------------------
# Footprint value distribution
# ---------------------------------------------------------------------------

@dataclass
class FootprintDistribution:
    """Weighted piecewise-linear CDF of in-footprint Exp(1) values.

    Strictly increasing from 0 at the ramp origin to 1 at the largest
    support value, hence exactly invertible on (0, 1).
    """

    knots_x: np.ndarray
    knots_p: np.ndarray
    lower_tail: float = 1e-3

    def cdf(self, v):
        return np.interp(np.asarray(v, dtype=float), self.knots_x, self.knots_p)

    def inverse(self, p):
        return np.interp(np.asarray(p, dtype=float), self.knots_p, self.knots_x)

    @property
    def d_min(self):
        """The distribution's lower limit (the configured tail quantile)."""
        return float(self.inverse(self.lower_tail))

    @property
    def support_max(self):
        return float(self.knots_x[-1])


def _weighted_cdf(values, weights, lower_tail):
    order = np.argsort(values)
    v = values[order]
    w = weights[order]
    xs, start = np.unique(v, return_index=True)
    cum = np.cumsum(w)
    totals = cum[np.append(start[1:] - 1, len(v) - 1)]
    p = totals / cum[-1]
    delta = max(1e-6, 0.01 * (xs[-1] - xs[0])) if len(xs) > 1 else 1e-3
    knots_x = np.concatenate([[xs[0] - delta], xs])
    knots_p = np.concatenate([[0.0], p])
    return FootprintDistribution(knots_x, knots_p, lower_tail)


@dataclass
class FootprintDistributionModel:
    """Training footprints with kernel weights on standardized (W, Delta, Omega).

    condition() reweights the pooled in-footprint values by each training
    footprint's Gaussian kernel weight and clips the support at the
    conditioning maximum.
    """

    samples: list[np.ndarray]
    conditioners: np.ndarray     # (n_footprints, 3): W, Delta, Omega
    bandwidths: np.ndarray
    lower_tail: float = 1e-3

    def footprint_weights(self, w, delta, omega):
        z = (self.conditioners - np.array([w, delta, omega])) / self.bandwidths
        logw = -0.5 * np.sum(z * z, axis=1)
        if logw.max() < -700:
            weights = np.zeros(len(logw))
            weights[int(np.argmax(logw))] = 1.0  # nearest-footprint fallback
            return weights
        weights = np.exp(logw - logw.max())
        return weights / weights.sum()

    def condition(self, w, delta, omega) -> FootprintDistribution:
        fw = self.footprint_weights(w, delta, omega)
        values = np.concatenate(self.samples)
        weights = np.concatenate([np.full(len(s), fw[i])
                                  for i, s in enumerate(self.samples)])
        keep = (values <= w) & (weights > 0)
        if not np.any(keep):
            keep = weights > 0
        return _weighted_cdf(values[keep], weights[keep], self.lower_tail)


def fit_footprint_distribution(samples, conditioners, bandwidth_factor=1.0,
                               lower_tail=1e-3) -> FootprintDistributionModel:
    """Build the weighted footprint distribution model.

    samples: per-footprint arrays of in-ellipse Exp(1) values;
    conditioners: matching rows of (W, Delta, Omega). Bandwidths follow
    the per-dimension rule-of-thumb std * n^(-1/7), scaled by
    bandwidth_factor.
    """
    if len(samples) == 0 or len(samples) != len(conditioners):
        raise ValueError("need one conditioning row per footprint sample")
    cond = np.atleast_2d(np.asarray(conditioners, dtype=float))
    n = len(cond)
    stds = cond.std(axis=0)
    stds[stds < 1e-12] = 1.0
    bandwidths = bandwidth_factor * stds * max(n, 2) ** (-1.0 / 7.0)
    return FootprintDistributionModel([np.asarray(s, dtype=float) for s in samples],
                                      cond, bandwidths, lower_tail)


# ---------------------------------------------------------------------------
# Conditional Gaussian-process simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindfieldConfig:
    lower_tail: float = 1e-3      # D-tilde level pinned on the perimeter
    pin_tail: float = 1e-3        # Gaussian pin level for the maximum
    n_perimeter: int = 720
    max_exact_cells: int = 20_000
    min_region_axes: tuple[float, float] = (40.0, 35.0)
    min_region_rate: float = 0.05
    jitter: float = 1e-8
    anisotropy_order: str = "rotate_first"


@dataclass
class FieldFragment:
    """Simulated in-footprint values at integer cells (x, y)."""

    t: int
    cells: np.ndarray      # (n, 2) int
    gauss: np.ndarray      # conditional Gaussian field
    exp1: np.ndarray       # back-transformed relative wind speeds
    n_clamped: int = 0
    max_cell: np.ndarray | None = None
    observed: np.ndarray | None = None


_MATERN_TABLE_CACHE: dict[tuple, tuple] = {}


def _matern_table(alpha, kappa, n=4096):
    """Interpolation table for matrix builds; tabulated in s = u^min(kappa, 1)
    so the near-origin behaviour (1 - c*u^2kappa) is smooth in s."""
    key = (round(float(alpha), 12), round(float(kappa), 12))
    if key not in _MATERN_TABLE_CACHE:
        u_cut = 40.0 * alpha
        p = min(kappa, 1.0)
        s = np.linspace(0.0, u_cut ** p, n)
        rho = matern(s ** (1.0 / p), alpha, kappa)
        _MATERN_TABLE_CACHE[key] = (p, s, rho)
    return _MATERN_TABLE_CACHE[key]


def _correlation(pts_a, pts_b, gp: GpParams, order):
    t = _anisotropy_matrix(gp.psi, gp.zeta, order)
    a = pts_a @ t.T
    b = pts_b @ t.T
    p, s_grid, rho = _matern_table(gp.alpha, gp.kappa)
    return np.interp(cdist(a, b) ** p, s_grid, rho, right=0.0)


def _chol_with_jitter(mat, jitter):
    try:
        return cholesky(mat, lower=True)
    except np.linalg.LinAlgError:
        return cholesky(mat + jitter * np.eye(len(mat)), lower=True)


def _min_region_cells(ellipse, storm_centre, gamma, rng, config):
    """Cells of the secondary low-wind ellipse near the storm centre."""
    if not ellipse.contains(np.asarray(storm_centre, float)[None])[0]:
        return np.empty((0, 2), dtype=int)
    a_max, b_max = config.min_region_axes
    a = max(a_max - rng.exponential(1.0 / config.min_region_rate), 1.0)
    b = max(b_max - rng.exponential(1.0 / config.min_region_rate), 1.0)
    a, b = max(a, b), min(a, b)
    region = Ellipse.from_axes(storm_centre, a, b, gamma)
    cells = region.cells_inside()
    if len(cells) == 0:
        return cells
    return cells[ellipse.contains(cells)]


def simulate_conditional_field(ellipse: Ellipse, features: FootprintFeatures,
                               gp: GpParams, dist: FootprintDistribution,
                               storm_centre, rng,
                               config: WindfieldConfig = WindfieldConfig(),
                               grid_shape=None, target_cells=None) -> FieldFragment:
    """Simulate the in-ellipse relative wind field for one footprint step.

    A zero-mean unit-variance Gaussian field with anisotropic Matérn
    correlation is conditioned by kriging on three constraints: the
    Gaussian image of the footprint maximum at the cell implied by
    (R_W, Theta_W); the distribution's lower limit on the discretized
    perimeter; and the same lower limit over a secondary ellipse near the
    storm centre when the centre lies inside the footprint. The field is
    back-transformed through dist and pinned so its maximum equals the
    footprint maximum exactly at the designated cell.

    target_cells restricts simulation to those cells (same conditional
    law, marginalized); the pinned maximum is honoured when targeted.
    """
    n_y, n_x = grid_shape if grid_shape is not None else (None, None)
    cells = ellipse.cells_inside(n_x, n_y)
    if len(cells) == 0:
        raise ValueError("footprint contains no grid cells")

    max_loc = ellipse.centre + features.r_w * bearing_to_vec(features.theta_w)
    max_cell = np.round(max_loc).astype(int)
    if not ellipse.contains(max_cell[None].astype(float))[0]:
        max_cell = cells[int(np.argmin(np.hypot(*(cells - max_loc).T)))]

    perim = np.unique(np.round(ellipse.boundary_points(config.n_perimeter)).astype(int),
                      axis=0)
    low_cells = [perim]
    storm_centre = np.asarray(storm_centre, dtype=float)
    region = _min_region_cells(ellipse, storm_centre, features.gamma, rng, config)
    if len(region):
        low_cells.append(region)
    low = np.unique(np.concatenate(low_cells, axis=0), axis=0)
    low = low[~np.all(low == max_cell, axis=1)]

    g_max = float(ndtri(min(dist.cdf(features.w), 1.0 - config.pin_tail)))
    g_min = float(ndtri(config.lower_tail))
    cond_pts = np.vstack([max_cell[None], low]).astype(float)
    cond_vals = np.concatenate([[g_max], np.full(len(low), g_min)])

    if target_cells is not None:
        sim_cells = np.atleast_2d(np.asarray(target_cells, dtype=int))
        inside = ellipse.contains(sim_cells.astype(float))
        sim_cells = sim_cells[inside]
        if len(sim_cells) == 0:
            return FieldFragment(features.t, sim_cells, np.empty(0), np.empty(0),
                                 0, max_cell)
    else:
        sim_cells = cells

    gauss = _conditional_gaussian(sim_cells.astype(float), cond_pts, cond_vals,
                                  gp, config, rng)

    is_max = np.all(sim_cells == max_cell, axis=1)
    n_clamped = int(np.sum(((gauss > g_max) | (gauss < g_min)) & ~is_max))
    gauss = np.clip(gauss, g_min, g_max)
    gauss[is_max] = g_max

    exp1 = np.maximum(dist.inverse(ndtr(gauss)), 0.0)
    exp1[is_max] = features.w  # exact pin of the footprint maximum
    return FieldFragment(features.t, sim_cells, gauss, exp1, n_clamped, max_cell)


def _conditional_gaussian(targets, cond_pts, cond_vals, gp, config, rng):
    """Exact conditional GRF from the block Cholesky of the joint covariance
    (conditioning rows first); coarsens very large systems."""
    order = config.anisotropy_order
    n_c = len(cond_pts)
    if len(targets) + n_c > config.max_exact_cells:
        return _conditional_gaussian_coarse(targets, cond_pts, cond_vals, gp,
                                            config, rng)
    points = np.vstack([cond_pts, targets])
    cov = _correlation(points, points, gp, order)
    cov[np.diag_indices_from(cov)] += config.jitter
    chol = _chol_with_jitter(cov, config.jitter)
    u = solve_triangular(chol[:n_c, :n_c], cond_vals, lower=True)
    mean = chol[n_c:, :n_c] @ u
    return mean + chol[n_c:, n_c:] @ rng.standard_normal(len(targets))


def _conditional_gaussian_coarse(targets, cond_pts, cond_vals, gp, config, rng):
    """Simulate on a coarsened lattice and refine bilinearly (documented
    approximation for footprints beyond max_exact_cells)."""
    from scipy.interpolate import RegularGridInterpolator

    lo = targets.min(axis=0)
    hi = targets.max(axis=0)
    span = np.maximum(hi - lo, 1.0)
    budget = max(config.max_exact_cells - len(cond_pts), 16)
    step = float(np.ceil(np.sqrt(span[0] * span[1] / budget)))
    xs = np.arange(lo[0], hi[0] + step, step)
    ys = np.arange(lo[1], hi[1] + step, step)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    lattice = np.column_stack([gx.ravel(), gy.ravel()])
    field = _conditional_gaussian(lattice, cond_pts, cond_vals, gp, config, rng)
    interp = RegularGridInterpolator((xs, ys), field.reshape(len(xs), len(ys)),
                                     bounds_error=False, fill_value=None)
    return interp(targets)


# ---------------------------------------------------------------------------
# End-to-end synthesis for a simulated record
# ---------------------------------------------------------------------------

def synthesize_windstorm_fields(record: WindstormRecord, track: StormTrack,
                                grid, alpha_model: AlphaModel,
                                dist_model: FootprintDistributionModel,
                                marginal=None, rng=None,
                                config: WindfieldConfig = WindfieldConfig(),
                                target_cells=None):
    """Simulate per-step wind fields for every active step of a record.

    Per step: a Matérn range is drawn conditional on the footprint's area
    proxy, the weighted value distribution is conditioned on (W, Delta,
    Omega), and the conditional Gaussian field is simulated and
    back-transformed. Returns a list of FieldFragment (exp1 scale); when
    `marginal` is given each fragment also carries observed-scale values
    in fragment.observed (NaN at unfitted cells).
    """
    rng = rng or np.random.default_rng(0)
    fragments = []
    for t in record.active_steps:
        step = record.steps[t]
        if len(step.ellipse.cells_inside(grid.n_x, grid.n_y)) == 0:
            continue  # footprint entirely off-grid
        f = step.features
        point = track.point(t)
        sx, sy = grid.lonlat_to_xy(point.lon, point.lat)
        storm_xy = np.array([float(sx), float(sy)])
        psi, zeta = anisotropy_from_features(f)
        alpha = alpha_model.sample(f.delta, rng)
        gp = GpParams(alpha=alpha, psi=psi, zeta=zeta)
        dist = dist_model.condition(f.w, f.delta, point.vorticity)
        frag = simulate_conditional_field(step.ellipse, f, gp, dist, storm_xy,
                                          rng, config,
                                          grid_shape=(grid.n_y, grid.n_x),
                                          target_cells=target_cells)
        if marginal is not None:
            observed = np.full(len(frag.cells), np.nan)
            for i, (cx, cy) in enumerate(frag.cells):
                if (0 <= cy < grid.n_y and 0 <= cx < grid.n_x
                        and marginal.fitted[cy, cx]):
                    observed[i] = marginal.inverse_value(
                        np.array([frag.exp1[i]]), cy, cx)[0]
            frag.observed = observed
        fragments.append(frag)
    return fragments


def fragments_to_stack(fragments, grid, scale="exp1") -> FieldStack:
    """Assemble fragments into a stack; cells outside footprints are NaN."""
    if not fragments:
        raise ValueError("no fragments to assemble")
    times = sorted({f.t for f in fragments})
    values = np.full((len(times), grid.n_y, grid.n_x), np.nan, dtype=np.float32)
    t_index = {t: i for i, t in enumerate(times)}
    for frag in fragments:
        vals = frag.exp1 if scale == "exp1" else frag.observed
        for (cx, cy), v in zip(frag.cells, vals):
            if 0 <= cy < grid.n_y and 0 <= cx < grid.n_x:
                values[t_index[frag.t], cy, cx] = v
    return FieldStack(grid, np.asarray(times), values,
                      "exp1" if scale == "exp1" else "observed")
