"""Windstorm activity and footprint evolution.

Two layers: Bernoulli logistic generalized additive models decide where a
storm's active phases start and stop along a track, and an order-k Markov
chain of footprint features (one conditional kernel density per component)
evolves the footprint through each active phase.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .core import StormTrack
from .extract import (Ellipse, FootprintFeatures, FootprintStep,
                      WindstormRecord, bearing_from_south, bearing_to_vec,
                      ellipse_to_features)
from .kde import KdeModel, conditional_sample
from .margins import FitError

TWO_PI = 2 * np.pi

Z_COMPONENTS = ("A", "B", "W", "R_E", "Theta_E", "R_W", "Theta_W", "Gamma")
PROPAGATION_ORDER = ("R_E", "Theta_E", "A", "B", "W", "Gamma", "R_W", "Theta_W")
CONCURRENT = {
    "R_E": ("omega",),
    "Theta_E": ("R_E",),
    "A": ("omega", "R_E", "Theta_E"),
    "B": ("omega", "R_E", "Theta_E"),
    "W": ("R_E", "Theta_E", "A", "B"),
    "Gamma": ("Theta_E",),
    "R_W": ("A",),
    "Theta_W": (),
}
CIRCULAR_PERIOD = {"Theta_E": TWO_PI, "Theta_W": TWO_PI, "Gamma": np.pi}
POSITIVE_COMPONENTS = {"A", "B", "W", "R_E", "R_W"}

ACTIVATION_COVARIATES = ("omega", "lon", "lat")
TERMINATION_COVARIATES = ("sqrt_delta", "W")


def _feature_value(features: FootprintFeatures, name: str) -> float:
    return {"A": features.a, "B": features.b, "W": features.w,
            "R_E": features.r_e, "Theta_E": features.theta_e,
            "R_W": features.r_w, "Theta_W": features.theta_w,
            "Gamma": features.gamma}[name]


# ---------------------------------------------------------------------------
# Penalized logistic GAM
# ---------------------------------------------------------------------------

@dataclass
class SplineBasis:
    """Cubic B-spline basis on [x_min, x_max], centred for identifiability."""

    knots: np.ndarray
    x_min: float
    x_max: float
    centre: np.ndarray
    constant: bool = False

    @classmethod
    def from_data(cls, x, n_interior=10):
        x = np.asarray(x, dtype=float)
        x_min, x_max = float(x.min()), float(x.max())
        if x_max - x_min < 1e-12:
            return cls(np.array([]), x_min, x_max, np.array([]), constant=True)
        interior = np.unique(np.quantile(x, np.linspace(0, 1, n_interior + 2)[1:-1]))
        interior = interior[(interior > x_min) & (interior < x_max)]
        knots = np.concatenate([[x_min] * 4, interior, [x_max] * 4])
        basis = cls(knots, x_min, x_max, np.zeros(len(interior) + 4))
        raw = basis._raw(x)
        basis.centre = raw.mean(axis=0)
        return basis

    @property
    def n_coefs(self):
        return 0 if self.constant else len(self.knots) - 4

    def _raw(self, x):
        xc = np.clip(np.asarray(x, dtype=float), self.x_min, self.x_max)
        return BSpline.design_matrix(xc, self.knots, 3).toarray()

    def design(self, x):
        if self.constant:
            return np.zeros((len(np.atleast_1d(x)), 0))
        return self._raw(x) - self.centre

    def penalty(self):
        n = self.n_coefs
        if n < 3:
            return np.zeros((n, n))
        d2 = np.diff(np.eye(n), n=2, axis=0)
        return d2.T @ d2


@dataclass
class ActivityModel:
    """Logistic GAM P(event) = expit(intercept + sum of covariate smooths)."""

    kind: str
    covariates: tuple[str, ...]
    bases: list[SplineBasis]
    intercept: float
    coefs: list[np.ndarray]
    lambdas: np.ndarray
    cov_means: np.ndarray

    def linear_predictor(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eta = np.full(len(x), self.intercept)
        clamped = np.zeros(len(x), dtype=bool)
        for i, basis in enumerate(self.bases):
            if basis.n_coefs:
                clamped |= (x[:, i] < basis.x_min) | (x[:, i] > basis.x_max)
                eta += basis.design(x[:, i]) @ self.coefs[i]
        return eta, clamped

    def predict(self, x, return_clamped=False):
        """Event probability for covariate rows x; inputs outside the
        training range are clamped to the boundary and flagged."""
        single = np.asarray(x).ndim == 1
        eta, clamped = self.linear_predictor(x)
        p = expit(eta)
        if single:
            p, clamped = float(p[0]), bool(clamped[0])
        return (p, clamped) if return_clamped else p


def predict_activity(model: ActivityModel, covariates, return_clamped=False):
    return model.predict(covariates, return_clamped=return_clamped)


def _deviance(design, y, beta):
    eta = np.clip(design @ beta, -30, 30)
    mu = np.clip(expit(eta), 1e-12, 1 - 1e-12)
    return -2.0 * float(np.sum(y * np.log(mu) + (1 - y) * np.log(1 - mu)))


def _pirls(design, y, penalty, beta0=None, max_iter=60, tol=1e-7):
    """Penalized IRLS for logistic regression; returns (beta, edf, gcv, ok)."""
    n, p = design.shape
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    ridge = 1e-10 * np.eye(p)
    ok = False
    dev = _deviance(design, y, beta)
    for _ in range(max_iter):
        eta = np.clip(design @ beta, -30, 30)
        mu = expit(eta)
        w = np.maximum(mu * (1 - mu), 1e-10)
        z = eta + (y - mu) / w
        xtw = design.T * w
        a = xtw @ design + penalty + ridge
        b = xtw @ z
        try:
            factor = cho_factor(a)
        except np.linalg.LinAlgError:
            return beta, np.nan, np.inf, False
        beta_new = cho_solve(factor, b)
        dev_new = _deviance(design, y, beta_new)
        step = np.max(np.abs(beta_new - beta))
        beta = beta_new
        if (abs(dev - dev_new) < tol * (abs(dev_new) + 1.0)
                or step < tol * (1 + np.max(np.abs(beta)))):
            ok = True
            dev = dev_new
            break
        dev = dev_new
    eta = np.clip(design @ beta, -30, 30)
    mu = expit(eta)
    w = np.maximum(mu * (1 - mu), 1e-10)
    z = eta + (y - mu) / w
    xtw = design.T * w
    a = xtw @ design + penalty + ridge
    factor = cho_factor(a)
    edf = float(np.trace(cho_solve(factor, xtw @ design)))
    rss = float(np.sum(w * (z - design @ beta) ** 2))
    gcv = n * rss / max(n - edf, 1e-6) ** 2
    return beta, edf, gcv, ok


def fit_activity_model(x, y, covariates, kind="activation", n_interior=10,
                       lambda_grid=None, min_obs=200) -> ActivityModel:
    """Fit the Bernoulli logistic GAM with per-smooth GCV penalty search.

    x is (n, q) covariate rows matching `covariates`; y is 0/1. Smoothing
    parameters are chosen per smooth on a log-spaced grid by coordinate
    descent (two sweeps).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("covariates and responses disagree in length")
    if len(y) < min_obs:
        raise FitError(f"need at least {min_obs} observations, got {len(y)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("covariates must be finite")
    q = x.shape[1]
    if q != len(covariates):
        raise ValueError("covariate names do not match matrix width")
    if lambda_grid is None:
        lambda_grid = np.logspace(-4, 4, 15)

    bases = [SplineBasis.from_data(x[:, i], n_interior) for i in range(q)]
    blocks = [b.design(x[:, i]) for i, b in enumerate(bases)]
    design = np.column_stack([np.ones(len(y))] + blocks)
    penalties = [b.penalty() for b in bases]
    sizes = [b.n_coefs for b in bases]
    offsets = np.cumsum([1] + sizes)

    def assemble(lams):
        s = np.zeros((design.shape[1], design.shape[1]))
        for i in range(q):
            sl = slice(offsets[i], offsets[i] + sizes[i])
            s[sl, sl] = lams[i] * penalties[i]
        return s

    lams = np.ones(q)
    beta = None
    for _ in range(2):
        for i in range(q):
            if sizes[i] == 0:
                continue
            best = (np.inf, lams[i], beta)
            for lam in lambda_grid:
                trial = lams.copy()
                trial[i] = lam
                b, _, gcv, ok = _pirls(design, y, assemble(trial), beta0=beta)
                if ok and gcv < best[0]:
                    best = (gcv, lam, b)
            lams[i] = best[1]
            beta = best[2]

    beta, edf, gcv, ok = _pirls(design, y, assemble(lams), beta0=beta)
    if not ok or np.any(np.abs(beta) > 1e4):
        warnings.warn(f"{kind} model: unstable fit (possible separation); "
                      "refitting at maximum penalty")
        lams = np.full(q, lambda_grid[-1])
        beta, _, _, _ = _pirls(design, y, assemble(lams))

    coefs = [beta[offsets[i]:offsets[i] + sizes[i]] for i in range(q)]
    return ActivityModel(kind, tuple(covariates), bases, float(beta[0]),
                         coefs, lams, x.mean(axis=0))


# ---------------------------------------------------------------------------
# Active-phase planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Phase:
    start: int
    end: int
    anchor: int

    def __post_init__(self):
        if not self.start <= self.anchor <= self.end:
            raise ValueError("anchor must lie inside the phase")


@dataclass
class ActivePhasePlan:
    t_omega: int
    t_anchor: int | None
    phases: list[Phase] = field(default_factory=list)

    def __post_init__(self):
        spans = sorted((p.start, p.end) for p in self.phases)
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            if s2 <= e1:
                raise ValueError("phases must be disjoint")

    @property
    def active_steps(self):
        return sorted(t for p in self.phases for t in range(p.start, p.end + 1))


def _activation_covariates(track: StormTrack, t: int):
    p = track.point(t)
    return np.array([p.vorticity, p.lon, p.lat])


def plan_activity(track: StormTrack, activation: ActivityModel,
                  termination: ActivityModel, rng,
                  termination_covariates=None) -> ActivePhasePlan:
    """Plan active phases along a track.

    Search order: a Bernoulli activation draw at the maximum-vorticity step,
    then successively forwards to the track end, then backwards, until the
    first success fixes the initialization step. The phase extends from
    there with a termination draw per step (forward only if initialization
    was found on the forward procession, backward only if on the backward
    one, both if at the anchor itself), then reactivation sweeps run
    toward t=1 and t=duration.

    termination_covariates(t) must return the termination model's covariate
    vector describing step t (previous-step footprint values); when None,
    training-mean covariates are used, which reduces termination to a
    constant hazard. Each Bernoulli uses one rng.random() draw.
    """
    ell = track.duration
    t_omega = track.t_max_vorticity

    def act_draw(t):
        return rng.random() < activation.predict(_activation_covariates(track, t))

    def term_draw(t_prev):
        if termination_covariates is not None:
            cov = np.asarray(termination_covariates(t_prev), dtype=float)
        else:
            cov = termination.cov_means
        return rng.random() < termination.predict(cov)

    t_anchor = None
    for t in [t_omega] + list(range(t_omega + 1, ell + 1)) + list(range(t_omega - 1, 0, -1)):
        if act_draw(t):
            t_anchor = t
            break
    if t_anchor is None:
        return ActivePhasePlan(t_omega, None, [])

    def extend_forward(anchor):
        end = anchor
        while end < ell and not term_draw(end):
            end += 1
        return end

    def extend_backward(anchor):
        start = anchor
        while start > 1 and not term_draw(start):
            start -= 1
        return start

    if t_anchor > t_omega:
        phase = Phase(t_anchor, extend_forward(t_anchor), t_anchor)
    elif t_anchor < t_omega:
        phase = Phase(extend_backward(t_anchor), t_anchor, t_anchor)
    else:
        end = extend_forward(t_anchor)
        start = extend_backward(t_anchor)
        phase = Phase(start, end, t_anchor)
    phases = [phase]

    # reactivation sweeps: backward toward t=1, then forward toward t=duration
    cur = phases[0].start - 1
    while cur >= 1:
        if act_draw(cur):
            start = extend_backward(cur)
            phases.insert(0, Phase(start, cur, cur))
            cur = start - 1
        else:
            cur -= 1
    cur = phases[-1].end + 1
    while cur <= ell:
        if act_draw(cur):
            end = extend_forward(cur)
            phases.append(Phase(cur, end, cur))
            cur = end + 1
        else:
            cur += 1
    return ActivePhasePlan(t_omega, t_anchor, phases)


# ---------------------------------------------------------------------------
# Transition and initial KDE models
# ---------------------------------------------------------------------------

@dataclass
class TransitionModel:
    """One conditional KDE per footprint component and available-lag count.

    Dimension layout of the (component, m) KDE: [target, lag 1..m (most
    recent first), concurrent conditioners, lon, lat]. Drawing restricts
    the training tuples to a lon/lat window centred at the current
    location, doubling it until `min_window_rows` qualify.
    """

    order: int
    models: dict[tuple[str, int], KdeModel]
    window: tuple[float, float] = (20.0, 14.0)
    min_window_rows: int = 30
    backward_models: dict[tuple[str, int], KdeModel] | None = None

    def component_dims(self, comp, m):
        names = [comp] + [f"{comp}_lag{i}" for i in range(1, m + 1)]
        names += list(CONCURRENT[comp]) + ["lon", "lat"]
        return names


@dataclass
class InitialModel:
    """Joint KDE of all eight footprint components given (lon, lat, omega)."""

    model: KdeModel
    window: tuple[float, float] = (20.0, 14.0)
    min_window_rows: int = 30


def _window_rows(lons, lats, lon, lat, window, min_rows):
    w_lon, w_lat = window
    n = len(lons)
    for _ in range(12):
        rows = np.nonzero((np.abs(lons - lon) <= w_lon / 2)
                          & (np.abs(lats - lat) <= w_lat / 2))[0]
        if len(rows) >= min(min_rows, n):
            return rows
        w_lon, w_lat = 2 * w_lon, 2 * w_lat
    return np.arange(n)


def _circular_marks(names):
    marks = {}
    for i, name in enumerate(names):
        root = name.split("_lag")[0]
        if root in CIRCULAR_PERIOD:
            marks[i] = CIRCULAR_PERIOD[root]
    return marks


def _collect_phase_series(record: WindstormRecord, track: StormTrack):
    """Per phase: dict of component series plus track covariates."""
    series = []
    for start, end in record.phases:
        steps = list(range(start, end + 1))
        vals = {c: np.array([_feature_value(record.steps[t].features, c)
                             for t in steps]) for c in Z_COMPONENTS}
        vals["omega"] = np.array([track.point(t).vorticity for t in steps])
        vals["lon"] = np.array([track.point(t).lon for t in steps])
        vals["lat"] = np.array([track.point(t).lat for t in steps])
        series.append(vals)
    return series


def fit_transition_model(records, tracks, k=2, bandwidth_factor=1.0,
                         window=(20.0, 14.0), min_window_rows=30,
                         refit_backward=False):
    """Fit the order-k Markov transition KDEs and the initialization KDE.

    Training tuples never span phase boundaries: the m-lag model for a
    component pools every in-phase window with at least m preceding
    in-phase steps, which realizes the truncated-lag rule for the first k
    steps of each phase. Returns (TransitionModel, InitialModel).
    """
    track_by_id = {t.id: t for t in tracks}
    phase_series = []
    for record in records:
        track = track_by_id[record.track_id]
        phase_series.extend(_collect_phase_series(record, track))
    if not any(len(s["A"]) >= k + 1 for s in phase_series):
        raise FitError(f"no active phase with at least {k + 1} consecutive steps")

    models = {}
    backward = {} if refit_backward else None
    for comp in Z_COMPONENTS:
        for m in range(1, k + 1):
            rows, rows_rev = [], []
            for s in phase_series:
                n = len(s[comp])
                for j in range(m, n):
                    lags = [s[comp][j - i] for i in range(1, m + 1)]
                    conc = [s[c][j] for c in CONCURRENT[comp]]
                    rows.append([s[comp][j]] + lags + conc
                                + [s["lon"][j], s["lat"][j]])
                for j in range(n - m - 1, -1, -1):
                    lags = [s[comp][j + i] for i in range(1, m + 1)]
                    conc = [s[c][j] for c in CONCURRENT[comp]]
                    rows_rev.append([s[comp][j]] + lags + conc
                                    + [s["lon"][j], s["lat"][j]])
            if len(rows) < 2:
                raise FitError(f"insufficient data for component {comp} "
                               f"with {m} lags ({len(rows)} tuples)")
            names = [comp] + [f"{comp}_lag{i}" for i in range(1, m + 1)] \
                + list(CONCURRENT[comp]) + ["lon", "lat"]
            marks = _circular_marks(names)
            models[(comp, m)] = KdeModel.from_data(
                np.asarray(rows, dtype=float), factor=bandwidth_factor,
                circular=marks)
            if refit_backward:
                backward[(comp, m)] = KdeModel.from_data(
                    np.asarray(rows_rev, dtype=float), factor=bandwidth_factor,
                    circular=marks)

    init_rows = []
    for s in phase_series:
        for j in range(len(s["A"])):
            init_rows.append([s[c][j] for c in Z_COMPONENTS]
                             + [s["lon"][j], s["lat"][j], s["omega"][j]])
    init_marks = _circular_marks(list(Z_COMPONENTS) + ["lon", "lat", "omega"])
    initial = InitialModel(
        KdeModel.from_data(np.asarray(init_rows, dtype=float),
                           factor=bandwidth_factor, circular=init_marks),
        window, min_window_rows)
    transition = TransitionModel(k, models, window, min_window_rows, backward)
    return transition, initial


# ---------------------------------------------------------------------------
# Footprint simulation
# ---------------------------------------------------------------------------

_MAX_POSITIVE_REDRAWS = 20
_MAX_MAXLOC_REDRAWS = 100
_POSITIVE_FLOOR = 1e-3


def _uniform_in_ellipse(ellipse: Ellipse, rng):
    a, b, major = ellipse.semi_axes()
    minor = np.array([-major[1], major[0]])
    r = np.sqrt(rng.random())
    phi = rng.random() * TWO_PI
    return ellipse.centre + r * (a * np.cos(phi) * major + b * np.sin(phi) * minor)


def _draw_component(kde: KdeModel, cond_values, lon, lat, window, min_rows,
                    positive, rng):
    lon_col = kde.data[:, -2]
    lat_col = kde.data[:, -1]
    rows = _window_rows(lon_col, lat_col, lon, lat, window, min_rows)
    cond_dims = list(range(1, kde.dim))
    cond = np.concatenate([np.asarray(cond_values, float), [lon, lat]])
    value = float(conditional_sample(kde, cond_dims, cond, rng, rows=rows)[0])
    if positive:
        redraws = 0
        while value <= 0 and redraws < _MAX_POSITIVE_REDRAWS:
            value = float(conditional_sample(kde, cond_dims, cond, rng, rows=rows)[0])
            redraws += 1
        if value <= 0:
            value = _POSITIVE_FLOOR
    return value


def _draw_initial(initial: InitialModel, lon, lat, omega, rng):
    kde = initial.model
    nz = len(Z_COMPONENTS)
    rows = _window_rows(kde.data[:, nz], kde.data[:, nz + 1], lon, lat,
                        initial.window, initial.min_window_rows)
    cond_dims = [nz, nz + 1, nz + 2]
    cond = np.array([lon, lat, omega])
    for _ in range(_MAX_POSITIVE_REDRAWS):
        draw = conditional_sample(kde, cond_dims, cond, rng, rows=rows)
        z = dict(zip(Z_COMPONENTS, draw))
        if all(z[c] > 0 for c in POSITIVE_COMPONENTS) and z["B"] <= z["A"]:
            return z
    # clamp an implausible draw into the valid region
    for c in POSITIVE_COMPONENTS:
        z[c] = max(abs(z[c]), _POSITIVE_FLOOR)
    z["B"] = min(z["B"], z["A"])
    return z


class _PhaseSimulator:
    """Grows a simulated phase outward from its anchor, one step at a time."""

    def __init__(self, anchor, track, transition, initial, grid, rng, record):
        self.anchor = anchor
        self.start = anchor
        self.end = anchor
        self.track = track
        self.transition = transition
        self.initial = initial
        self.grid = grid
        self.rng = rng
        self.record = record
        self.history: dict[str, dict[int, float]] = {c: {} for c in Z_COMPONENTS}

        p, storm_xy = self._step_values(anchor)
        z = _draw_initial(initial, p.lon, p.lat, p.vorticity, rng)
        self._commit(anchor, z, storm_xy)

    def _step_values(self, t):
        p = self.track.point(t)
        sx, sy = self.grid.lonlat_to_xy(p.lon, p.lat)
        return p, np.array([float(sx), float(sy)])

    def _commit(self, t, z, storm_xy):
        z = _enforce_maxloc(z, storm_xy, self.rng, self.record)
        for comp in Z_COMPONENTS:
            self.history[comp][t] = z[comp]
        ellipse = Ellipse.from_axes(
            storm_xy + z["R_E"] * bearing_to_vec(z["Theta_E"]),
            z["A"], z["B"], z["Gamma"])
        feats = FootprintFeatures(t, z["A"], z["B"], z["W"], z["R_E"],
                                  z["Theta_E"], z["R_W"], z["Theta_W"],
                                  z["Gamma"])
        self.record.steps[t] = FootprintStep(ellipse, feats)

    def _propagate(self, t, offsets, models):
        p, storm_xy = self._step_values(t)
        m = len(offsets)
        current = {"omega": p.vorticity}
        z = {}
        for comp in PROPAGATION_ORDER:
            kde = models[(comp, m)]
            lags = [self.history[comp][t + off] for off in offsets]
            conc = [current[c] for c in CONCURRENT[comp]]
            value = _draw_component(kde, lags + conc, p.lon, p.lat,
                                    self.transition.window,
                                    self.transition.min_window_rows,
                                    comp in POSITIVE_COMPONENTS, self.rng)
            if comp == "B":
                redraws = 0
                while value > z["A"] and redraws < _MAX_POSITIVE_REDRAWS:
                    value = _draw_component(kde, lags + conc, p.lon, p.lat,
                                            self.transition.window,
                                            self.transition.min_window_rows,
                                            True, self.rng)
                    redraws += 1
                value = min(value, z["A"])
            z[comp] = value
            current[comp] = value
        self._commit(t, z, storm_xy)

    def features(self, t) -> FootprintFeatures:
        return self.record.steps[t].features

    def step_forward(self):
        t = self.end + 1
        m = min(self.transition.order, t - self.anchor)
        self._propagate(t, [-(i + 1) for i in range(m)], self.transition.models)
        self.end = t

    def step_backward(self):
        t = self.start - 1
        m = min(self.transition.order, self.anchor - t)
        models = self.transition.backward_models or self.transition.models
        self._propagate(t, [i + 1 for i in range(m)], models)
        self.start = t


def _simulate_phase(phase: Phase, track, transition: TransitionModel,
                    initial: InitialModel, grid, rng, record):
    sim = _PhaseSimulator(phase.anchor, track, transition, initial, grid,
                          rng, record)
    for _ in range(phase.anchor, phase.end):
        sim.step_forward()
    for _ in range(phase.start, phase.anchor):
        sim.step_backward()


def _enforce_maxloc(z, storm_xy, rng, record):
    """Keep (R_W, Theta_W) inside the concurrent ellipse; uniform fallback."""
    ellipse = Ellipse.from_axes(storm_xy + z["R_E"] * bearing_to_vec(z["Theta_E"]),
                                z["A"], z["B"], z["Gamma"])
    point = ellipse.centre + z["R_W"] * bearing_to_vec(z["Theta_W"])
    if ellipse.contains(point[None])[0]:
        return z
    point = _uniform_in_ellipse(ellipse, rng)
    off = point - ellipse.centre
    z = dict(z)
    z["R_W"] = float(np.hypot(*off))
    z["Theta_W"] = bearing_from_south(off) if z["R_W"] > 0 else 0.0
    record.meta["maxloc_fallbacks"] = record.meta.get("maxloc_fallbacks", 0) + 1
    return z


def simulate_footprints(track: StormTrack, plan: ActivePhasePlan,
                        transition: TransitionModel, initial: InitialModel,
                        grid, rng) -> WindstormRecord:
    """Simulate footprint features over a given activity plan.

    Each phase initializes at its anchor from the initial KDE and
    propagates component-by-component (R_E, Theta_E, A, B, W, Gamma, R_W,
    Theta_W) forwards then backwards, with the truncated-lag rule near the
    anchor. (R_W, Theta_W) pairs landing outside the concurrent ellipse
    are redrawn inside it (uniform fallback, counted in record.meta).
    """
    record = WindstormRecord(track.id, track.duration)
    for phase in plan.phases:
        _simulate_phase(phase, track, transition, initial, grid, rng, record)
    return record


def simulate_windstorm(track: StormTrack, activation: ActivityModel,
                       termination: ActivityModel, transition: TransitionModel,
                       initial: InitialModel, grid, rng) -> WindstormRecord:
    """Coupled activity-and-footprint simulation for one track.

    Identical search order to plan_activity, but each phase's footprints
    are simulated as the phase extends so termination draws condition on
    the previous step's simulated (sqrt(area), max wind). Returns the
    simulated record (features only).
    """
    record = WindstormRecord(track.id, track.duration)

    def term_cov(features: FootprintFeatures):
        return np.array([np.sqrt(features.delta), features.w])

    def act_draw(t):
        return rng.random() < activation.predict(_activation_covariates(track, t))

    def term_draw(features):
        return rng.random() < termination.predict(term_cov(features))

    ell = track.duration
    t_omega = track.t_max_vorticity
    t_anchor = None
    for t in [t_omega] + list(range(t_omega + 1, ell + 1)) + list(range(t_omega - 1, 0, -1)):
        if act_draw(t):
            t_anchor = t
            break
    if t_anchor is None:
        return record

    def grow_phase(anchor, forward=True, backward=True):
        sim = _PhaseSimulator(anchor, track, transition, initial, grid, rng,
                              record)
        if forward:
            while sim.end < ell and not term_draw(sim.features(sim.end)):
                sim.step_forward()
        if backward:
            while sim.start > 1 and not term_draw(sim.features(sim.start)):
                sim.step_backward()
        return sim.start, sim.end

    if t_anchor > t_omega:
        start, end = grow_phase(t_anchor, forward=True, backward=False)
    elif t_anchor < t_omega:
        start, end = grow_phase(t_anchor, forward=False, backward=True)
    else:
        start, end = grow_phase(t_anchor, forward=True, backward=True)

    cur = start - 1
    while cur >= 1:
        if act_draw(cur):
            s, _ = grow_phase(cur, forward=False, backward=True)
            cur = s - 1
        else:
            cur -= 1
    cur = end + 1
    while cur <= ell:
        if act_draw(cur):
            _, e = grow_phase(cur, forward=True, backward=False)
            cur = e + 1
        else:
            cur += 1
    return record
