"""Footprint extraction: spatio-temporal filtering, clustering of high
relative winds, minimum-area enclosing ellipses, and the per-step feature
vector (axes, orientation, offsets and maximum wind).

Conventions: cell coordinates are (x, y) with x the column (east) and y the
row (north). Bearings are measured from due south, counterclockwise
positive, in [-pi, pi]; ellipse orientation is relative to due north in
[-pi/2, pi/2].
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import ConvexHull, QhullError

from .core import FieldStack, StormTrack


def bearing_from_south(vec):
    """Signed angle from due south to vec, counterclockwise positive."""
    return float(np.arctan2(vec[0], -vec[1]))


def bearing_to_vec(theta):
    """Unit vector at bearing theta (from due south, CCW positive)."""
    return np.array([np.sin(theta), -np.cos(theta)])


def axis_angle_from_north(direction):
    """Orientation of an (undirected) axis relative to due north in [-pi/2, pi/2]."""
    gamma = np.arctan2(direction[0], direction[1])
    if gamma > np.pi / 2:
        gamma -= np.pi
    elif gamma <= -np.pi / 2:
        gamma += np.pi
    return float(gamma)


@dataclass
class Ellipse:
    """Region {s : (s - centre)^T shape (s - centre) <= 1} in cell coordinates."""

    centre: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        self.centre = np.asarray(self.centre, dtype=float)
        self.shape = np.asarray(self.shape, dtype=float)
        if self.centre.shape != (2,) or self.shape.shape != (2, 2):
            raise ValueError("centre must be a 2-vector, shape a 2x2 matrix")
        if not np.allclose(self.shape, self.shape.T, atol=1e-10):
            raise ValueError("shape matrix must be symmetric")
        if np.any(np.linalg.eigvalsh(self.shape) <= 0):
            raise ValueError("shape matrix must be positive-definite")

    def quad_form(self, points):
        d = np.atleast_2d(points) - self.centre
        return np.einsum("ij,jk,ik->i", d, self.shape, d)

    def contains(self, points, tol=1e-9):
        return self.quad_form(points) <= 1.0 + tol

    def semi_axes(self):
        """(A, B, major_direction): A >= B, unit major-axis direction."""
        evals, evecs = np.linalg.eigh(self.shape)
        a = 1.0 / np.sqrt(evals[0])  # smaller eigenvalue -> longer axis
        b = 1.0 / np.sqrt(evals[1])
        return a, b, evecs[:, 0]

    @property
    def area(self):
        return float(np.pi / np.sqrt(np.linalg.det(self.shape)))

    def cells_inside(self, n_x=None, n_y=None):
        """Integer (x, y) cells inside the ellipse, clipped to grid bounds."""
        a, _, _ = self.semi_axes()
        x0 = int(np.floor(self.centre[0] - a))
        x1 = int(np.ceil(self.centre[0] + a))
        y0 = int(np.floor(self.centre[1] - a))
        y1 = int(np.ceil(self.centre[1] + a))
        if n_x is not None:
            x0, x1 = max(x0, 0), min(x1, n_x - 1)
        if n_y is not None:
            y0, y1 = max(y0, 0), min(y1, n_y - 1)
        if x1 < x0 or y1 < y0:
            return np.empty((0, 2), dtype=int)
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        pts = np.column_stack([xs.ravel(), ys.ravel()])
        return pts[self.contains(pts)]

    def boundary_points(self, n=720):
        a, b, major = self.semi_axes()
        minor = np.array([-major[1], major[0]])
        angles = np.linspace(0, 2 * np.pi, n, endpoint=False)
        return (self.centre[None, :]
                + a * np.cos(angles)[:, None] * major[None, :]
                + b * np.sin(angles)[:, None] * minor[None, :])

    @classmethod
    def from_axes(cls, centre, a, b, gamma):
        """Build from semi-axes (a >= b) and orientation gamma from north."""
        major = np.array([np.sin(gamma), np.cos(gamma)])
        minor = np.array([-major[1], major[0]])
        q = np.column_stack([major, minor])
        shape = q @ np.diag([1.0 / a ** 2, 1.0 / b ** 2]) @ q.T
        return cls(np.asarray(centre, dtype=float), (shape + shape.T) / 2)


@dataclass
class FootprintFeatures:
    """Per-step footprint descriptors (distances in cells, angles in radians)."""

    t: int
    a: float        # semi-major axis
    b: float        # semi-minor axis
    w: float        # maximum relative wind (Exp(1) scale)
    r_e: float      # storm centre -> ellipse centre distance
    theta_e: float  # bearing of that offset, from due south
    r_w: float      # ellipse centre -> wind maximum distance
    theta_w: float  # bearing of that offset, from due south
    gamma: float    # ellipse orientation from due north

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError(f"need A >= B > 0, got ({self.a}, {self.b})")
        if not self.w > 0:
            raise ValueError("maximum wind must be positive")
        if self.r_e < 0 or self.r_w < 0:
            raise ValueError("radii must be nonnegative")
        if not (-np.pi <= self.theta_e <= np.pi and -np.pi <= self.theta_w <= np.pi):
            raise ValueError("bearings must lie in [-pi, pi]")
        if not -np.pi / 2 <= self.gamma <= np.pi / 2:
            raise ValueError("orientation must lie in [-pi/2, pi/2]")

    @property
    def delta(self):
        return self.a * self.b

    def ellipse(self, storm_centre):
        centre = np.asarray(storm_centre, float) + self.r_e * bearing_to_vec(self.theta_e)
        return Ellipse.from_axes(centre, self.a, self.b, self.gamma)

    def max_location(self, storm_centre):
        e = self.ellipse(storm_centre)
        return e.centre + self.r_w * bearing_to_vec(self.theta_w)


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def gaussian_filter_st(stack: FieldStack, sigma_space: float, sigma_time: float) -> FieldStack:
    """Separable Gaussian smoothing in (t, y, x) with reflected boundaries."""
    if sigma_space < 0 or sigma_time < 0:
        raise ValueError("filter widths must be nonnegative")
    smoothed = gaussian_filter(np.asarray(stack.values, dtype=float),
                               sigma=(sigma_time, sigma_space, sigma_space),
                               mode="reflect")
    return stack.with_values(smoothed)


def dbscan_exceedances(raster, v, eps=1.5, min_pts=5, bounds=None):
    """Cluster cells with value > v; returns a list of (n, 2) arrays of (x, y).

    Classic DBSCAN on the integer cell lattice with Euclidean eps. The
    eps-neighbourhood includes the cell itself. Clusters are emitted, and
    border cells attached, in raster scan order, so labeling is
    deterministic. Noise cells are dropped. `bounds` optionally restricts
    the search to (x0, x1, y0, y1) inclusive.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    raster = np.asarray(raster)
    mask = raster > v
    if bounds is not None:
        x0, x1, y0, y1 = bounds
        window = np.zeros_like(mask)
        window[max(y0, 0):y1 + 1, max(x0, 0):x1 + 1] = True
        mask &= window
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return []
    cells = {(int(x), int(y)): i for i, (x, y) in enumerate(zip(xs, ys))}

    r = int(np.floor(eps))
    offsets = [(dx, dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)
               if 0 < dx * dx + dy * dy <= eps * eps]

    def neighbours(i):
        x, y = int(xs[i]), int(ys[i])
        return [cells[(x + dx, y + dy)] for dx, dy in offsets
                if (x + dx, y + dy) in cells]

    n = len(xs)
    neigh = [neighbours(i) for i in range(n)]
    core = np.array([len(neigh[i]) + 1 >= min_pts for i in range(n)])
    label = np.full(n, -1)
    current = 0
    for i in range(n):
        if label[i] != -1 or not core[i]:
            continue
        label[i] = current
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for q in neigh[j]:
                if label[q] == -1:
                    label[q] = current
                    if core[q]:
                        queue.append(q)
        current += 1
    clusters = []
    for c in range(current):
        idx = np.nonzero(label == c)[0]
        clusters.append(np.column_stack([xs[idx], ys[idx]]).astype(float))
    return clusters


def khachiyan_mvee(points, tol=1e-4, max_iter=200_000) -> Ellipse:
    """Minimum-area enclosing ellipse by Khachiyan's dual ascent.

    Iterates the barycentric-coordinate update until the lifted optimality
    criterion max_j M_j <= (1 + tol)(d + 1) holds, then rescales so every
    point satisfies the membership inequality. Collinear (or too small)
    inputs are inflated by a half-cell isotropic pad first.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 2:
        raise ValueError("points must be 2-D")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if len(pts) < 3 or np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 2:
        pad = 0.5 * np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
        pts = (pts[:, None, :] + pad[None, :, :]).reshape(-1, 2)
    if len(pts) > 16:
        try:
            pts = pts[ConvexHull(pts).vertices]  # MVEE depends only on the hull
        except QhullError:
            pass

    n, d = pts.shape
    q = np.column_stack([pts, np.ones(n)])  # (n, d+1)
    u = np.full(n, 1.0 / n)
    dp1 = d + 1.0

    def refresh():
        v_inv = np.linalg.inv(q.T @ (u[:, None] * q))
        return v_inv, np.einsum("ij,jk,ik->i", q, v_inv, q)

    v_inv, m = refresh()
    converged = False
    for iteration in range(max_iter):
        j_plus = int(np.argmax(m))
        kappa_plus = m[j_plus]
        support = u > 1e-12
        m_support = np.where(support, m, np.inf)
        j_minus = int(np.argmin(m_support))
        kappa_minus = m_support[j_minus]
        if kappa_plus <= (1 + tol) * dp1 and kappa_minus >= (1 - tol) * dp1:
            converged = True
            break
        if kappa_plus - dp1 >= dp1 - kappa_minus:
            j, kappa = j_plus, kappa_plus
            beta = (kappa - dp1) / (dp1 * (kappa - 1.0))
        else:
            # away step: shrink the weight of the most interior support point
            j, kappa = j_minus, kappa_minus
            beta = (kappa - dp1) / (dp1 * (kappa - 1.0)) if kappa > 1.0 else -np.inf
            beta = max(beta, -u[j] / (1.0 - u[j]))
        u *= 1.0 - beta
        u[j] += beta
        if iteration % 50 == 49:
            v_inv, m = refresh()  # control rank-one drift
            continue
        # Sherman-Morrison update of V^-1 and the diagnostics M
        z = q @ (v_inv @ q[j])
        denom = (1.0 - beta) + beta * kappa
        m = (m - beta * z ** 2 / denom) / (1.0 - beta)
        v_inv = (v_inv - (beta / denom) * np.outer(v_inv @ q[j], v_inv @ q[j])) / (1.0 - beta)
    if not converged:
        raise RuntimeError(f"Khachiyan iteration did not converge within {max_iter} steps")

    centre = pts.T @ u
    cov = pts.T @ (u[:, None] * pts) - np.outer(centre, centre)
    shape = np.linalg.inv(cov) / d
    shape = (shape + shape.T) / 2
    ellipse = Ellipse(centre, shape)
    max_q = ellipse.quad_form(pts).max()
    if max_q > 1.0:
        ellipse = Ellipse(centre, shape / max_q)
    return ellipse


def ellipse_to_features(ellipse: Ellipse, storm_centre, max_loc, max_val,
                        t) -> FootprintFeatures:
    """Derive the footprint feature vector from ellipse geometry.

    max_loc must lie inside the ellipse (small tolerance); bearings follow
    the module conventions.
    """
    storm_centre = np.asarray(storm_centre, dtype=float)
    max_loc = np.asarray(max_loc, dtype=float)
    if not ellipse.contains(max_loc[None], tol=1e-6)[0]:
        raise ValueError("maximum location lies outside the ellipse")
    a, b, major = ellipse.semi_axes()
    gamma = 0.0 if np.isclose(a, b) else axis_angle_from_north(major)
    off_e = ellipse.centre - storm_centre
    r_e = float(np.hypot(*off_e))
    theta_e = bearing_from_south(off_e) if r_e > 0 else 0.0
    off_w = max_loc - ellipse.centre
    r_w = float(np.hypot(*off_w))
    theta_w = bearing_from_south(off_w) if r_w > 0 else 0.0
    return FootprintFeatures(int(t), a, b, float(max_val), r_e, theta_e,
                             r_w, theta_w, gamma)


# ---------------------------------------------------------------------------
# Windstorm records and the end-to-end extraction
# ---------------------------------------------------------------------------

@dataclass
class FootprintStep:
    ellipse: Ellipse
    features: FootprintFeatures


@dataclass
class WindstormRecord:
    """Per-track footprint set (extracted or simulated), active steps only."""

    track_id: str
    duration: int
    steps: dict[int, FootprintStep] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def active_steps(self):
        return sorted(self.steps)

    @property
    def phases(self):
        """Disjoint [t_start, t_end] intervals of consecutive active steps."""
        phases = []
        for t in self.active_steps:
            if phases and t == phases[-1][1] + 1:
                phases[-1][1] = t
            else:
                phases.append([t, t])
        return [tuple(p) for p in phases]


@dataclass(frozen=True)
class ExtractConfig:
    threshold: float = 2.0        # v, on the Exp(1) scale
    sigma_space: float = 4.0      # cells
    sigma_time: float = 1.0       # steps
    eps: float = 1.5              # DBSCAN radius, cells
    min_pts: int = 5
    r_max: float = 100.0          # reject footprints further than this (cells)
    min_sqrt_area: float = 10.0   # reject footprints with sqrt(A*B) below this
    window_km: float = 1600.0
    mvee_tol: float = 1e-4


def _largest_cluster(clusters, storm_xy):
    sizes = np.array([len(c) for c in clusters])
    best = np.nonzero(sizes == sizes.max())[0]
    if len(best) == 1:
        return clusters[best[0]]
    dists = [np.hypot(*(clusters[i].mean(axis=0) - storm_xy)) for i in best]
    return clusters[best[int(np.argmin(dists))]]


def extract_windstorm(stack: FieldStack, track: StormTrack,
                      config: ExtractConfig = ExtractConfig()) -> WindstormRecord:
    """Run the five-stage footprint pipeline for one track.

    The stack must be on the Exp(1) scale and cover the track's steps. Per
    step the filtered field is thresholded inside a window_km square around
    the storm centre, the largest cluster is enclosed in its minimum-area
    ellipse, and implausible footprints (too distant, too small) are
    discarded. The maximum and its location come from the unfiltered field
    inside the ellipse.
    """
    if stack.scale_tag != "exp1":
        raise ValueError("extraction expects an exp1-scale stack")
    # masked (NaN) cells contribute nothing to the filter or to clusters
    clean = stack.with_values(np.nan_to_num(np.asarray(stack.values, float), nan=0.0))
    filtered = gaussian_filter_st(clean, config.sigma_space, config.sigma_time)
    grid = stack.grid
    half_window = 0.5 * config.window_km / grid.cell_size
    record = WindstormRecord(track.id, track.duration)

    for point in track.points:
        t = point.t
        try:
            raster = filtered.raster(t)
        except KeyError:
            continue
        sx, sy = grid.lonlat_to_xy(point.lon, point.lat)
        storm_xy = np.array([float(sx), float(sy)])
        bounds = (int(np.floor(sx - half_window)), int(np.ceil(sx + half_window)),
                  int(np.floor(sy - half_window)), int(np.ceil(sy + half_window)))
        clusters = dbscan_exceedances(raster, config.threshold, config.eps,
                                      config.min_pts, bounds=bounds)
        if not clusters:
            continue
        cluster = _largest_cluster(clusters, storm_xy)
        ellipse = khachiyan_mvee(cluster, tol=config.mvee_tol)

        r_e = np.hypot(*(ellipse.centre - storm_xy))
        a, b, _ = ellipse.semi_axes()
        if r_e > config.r_max or np.sqrt(a * b) < config.min_sqrt_area:
            continue

        cells = ellipse.cells_inside(grid.n_x, grid.n_y)
        if len(cells) == 0:
            continue
        raw = stack.raster(t)
        vals = raw[cells[:, 1], cells[:, 0]]
        if not np.any(np.isfinite(vals)):
            continue
        arg = int(np.nanargmax(vals))
        max_loc = cells[arg].astype(float)
        max_val = float(vals[arg])
        if max_val <= 0:
            continue
        try:
            features = ellipse_to_features(ellipse, storm_xy, max_loc, max_val, t)
        except ValueError:
            warnings.warn(f"track {track.id} step {t}: degenerate footprint skipped")
            continue
        record.steps[t] = FootprintStep(ellipse, features)
    return record
