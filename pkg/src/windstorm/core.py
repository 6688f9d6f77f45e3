"""Domain types: grids, field stacks, storm tracks, masks, and the synthetic corpus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KM_PER_DEGREE = 111.32

SCALE_TAGS = ("observed", "exp1", "gauss")
MASK_TAG = 255


@dataclass(frozen=True)
class Grid:
    """Regular raster grid; cell (0, 0) sits at (origin_lon, origin_lat)."""

    n_x: int
    n_y: int
    cell_size: float  # km per cell
    origin_lon: float = 0.0
    origin_lat: float = 0.0

    def __post_init__(self):
        if self.n_x <= 0 or self.n_y <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def shape(self):
        return (self.n_y, self.n_x)

    def lonlat_to_xy(self, lon, lat):
        """Map lon/lat (degrees) to fractional cell coordinates (x east, y north).

        Uses a local equirectangular projection anchored at the grid origin;
        adequate for the desk-scale domains this library targets.
        """
        coslat = np.cos(np.deg2rad(self.origin_lat))
        x = (np.asarray(lon) - self.origin_lon) * KM_PER_DEGREE * coslat / self.cell_size
        y = (np.asarray(lat) - self.origin_lat) * KM_PER_DEGREE / self.cell_size
        return x, y

    def xy_to_lonlat(self, x, y):
        coslat = np.cos(np.deg2rad(self.origin_lat))
        lon = self.origin_lon + np.asarray(x) * self.cell_size / (KM_PER_DEGREE * coslat)
        lat = self.origin_lat + np.asarray(y) * self.cell_size / KM_PER_DEGREE
        return lon, lat

    def contains_cell(self, x, y):
        return (0 <= x < self.n_x) and (0 <= y < self.n_y)


@dataclass
class FieldStack:
    """Time-indexed stack of 2-D rasters on a common grid.

    values has shape (n_t, n_y, n_x). scale_tag is one of "observed"
    (wind speeds, m/s), "exp1" (relative wind speeds) or "gauss".
    NaN marks missing cells; finite observed/exp1 values must be >= 0.
    """

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    scale_tag: str = "observed"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.values = np.asarray(self.values)
        if self.scale_tag not in SCALE_TAGS:
            raise ValueError(f"unknown scale_tag {self.scale_tag!r}")
        if self.values.ndim != 3:
            raise ValueError("values must be (n_t, n_y, n_x)")
        if self.values.shape != (len(self.times), self.grid.n_y, self.grid.n_x):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"times/grid ({len(self.times)}, {self.grid.n_y}, {self.grid.n_x})"
            )
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")
        if self.scale_tag in ("observed", "exp1"):
            finite = self.values[np.isfinite(self.values)]
            if finite.size and finite.min() < 0:
                raise ValueError(f"{self.scale_tag}-scale values must be >= 0")

    @property
    def n_t(self):
        return len(self.times)

    def time_index(self, t):
        idx = np.searchsorted(self.times, t)
        if idx >= len(self.times) or self.times[idx] != t:
            raise KeyError(f"time step {t} not in stack")
        return int(idx)

    def raster(self, t):
        return self.values[self.time_index(t)]

    def with_values(self, values, scale_tag=None):
        return FieldStack(self.grid, self.times.copy(), values,
                          scale_tag or self.scale_tag)


@dataclass(frozen=True)
class TrackPoint:
    t: int
    lon: float
    lat: float
    vorticity: float

    def __post_init__(self):
        if not self.vorticity > 0:
            raise ValueError(f"vorticity must be positive, got {self.vorticity}")


@dataclass
class StormTrack:
    """One cyclone track: consecutive steps t = 1..duration."""

    id: str
    points: list[TrackPoint]

    def __post_init__(self):
        if not self.points:
            raise ValueError("track must have at least one point")
        ts = [p.t for p in self.points]
        if ts != list(range(1, len(ts) + 1)):
            raise ValueError(f"track {self.id}: non-consecutive time steps {ts[:5]}...")

    @property
    def duration(self):
        return len(self.points)

    @property
    def lons(self):
        return np.array([p.lon for p in self.points])

    @property
    def lats(self):
        return np.array([p.lat for p in self.points])

    @property
    def vorticity(self):
        return np.array([p.vorticity for p in self.points])

    def point(self, t):
        if not 1 <= t <= self.duration:
            raise KeyError(f"step {t} outside track of duration {self.duration}")
        return self.points[t - 1]

    @property
    def t_max_vorticity(self):
        """Step of maximum vorticity (first argmax)."""
        return int(np.argmax(self.vorticity)) + 1


@dataclass
class CellMask:
    grid: Grid
    included: np.ndarray

    def __post_init__(self):
        self.included = np.asarray(self.included, dtype=bool)
        if self.included.shape != self.grid.shape:
            raise ValueError("mask shape does not match grid")

    @classmethod
    def all_included(cls, grid):
        return cls(grid, np.ones(grid.shape, dtype=bool))


def interpolate_track(track: StormTrack, factor: int = 3) -> StormTrack:
    """Refine a track to `factor` sub-steps per original interval.

    Lon/lat and vorticity are linearly interpolated; a single-point track
    is returned unchanged. Steps are renumbered 1..new duration.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if track.duration == 1 or factor == 1:
        return track
    old_t = np.arange(1, track.duration + 1, dtype=float)
    new_t = np.arange(1, (track.duration - 1) * factor + 2, dtype=float)
    pos = 1.0 + (new_t - 1.0) / factor
    lons = np.interp(pos, old_t, track.lons)
    lats = np.interp(pos, old_t, track.lats)
    vort = np.interp(pos, old_t, track.vorticity)
    points = [TrackPoint(int(i + 1), float(lons[i]), float(lats[i]), float(vort[i]))
              for i in range(len(pos))]
    return StormTrack(track.id, points)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    """Parameters of the synthetic test corpus.

    Each track carries a moving elliptical band of high winds whose
    amplitude and size scale with the track's vorticity, over an i.i.d.
    gamma background with a smooth spatial scale pattern (a land/sea-like
    contrast). Ground truth per step (band centre, axes, orientation,
    peak amplitude) is returned for oracle checks.
    """

    n_x: int = 128
    n_y: int = 128
    cell_size: float = 12.5
    origin_lon: float = -10.0
    origin_lat: float = 45.0
    n_tracks: int = 50
    mean_track_len: int = 40
    background_shape: float = 2.0
    background_scale: float = 2.0
    band_amp_per_vorticity: float = 2.4
    band_major_base: float = 10.0
    band_major_per_vorticity: float = 2.0
    band_aspect: float = 0.55


@dataclass
class PlantedTruth:
    """Per-step ground truth of the planted band for one track."""

    centre_xy: np.ndarray   # (duration, 2) band centre in cell coordinates
    semi_axes: np.ndarray   # (duration, 2) (a, b)
    orientation: np.ndarray  # (duration,) radians from north
    peak: np.ndarray        # (duration,) band peak added on top of background


def _smooth_noise(rng, n, scale, smooth=4):
    x = rng.standard_normal(n + 2 * smooth)
    kernel = np.exp(-0.5 * (np.arange(-smooth, smooth + 1) / (smooth / 2.0)) ** 2)
    kernel /= kernel.sum()
    return scale * np.convolve(x, kernel, mode="same")[smooth:n + smooth]


def generate_synthetic_corpus(config: CorpusConfig, seed: int):
    """Build (tracks, stacks, truths); deterministic in (config, seed).

    Returns lists aligned by index: one StormTrack, one observed-scale
    FieldStack and one PlantedTruth per track.
    """
    if config.n_tracks <= 0:
        raise ValueError("n_tracks must be positive")
    rng = np.random.default_rng(seed)
    grid = Grid(config.n_x, config.n_y, config.cell_size,
                config.origin_lon, config.origin_lat)

    yy, xx = np.mgrid[0:config.n_y, 0:config.n_x]
    # smooth spatial pattern in the background gamma scale ("land/sea" contrast)
    theta = config.background_scale * (
        1.0 + 0.4 * np.sin(2 * np.pi * xx / config.n_x)
        + 0.3 * np.cos(2 * np.pi * yy / config.n_y)
    )

    tracks, stacks, truths = [], [], []
    for i in range(config.n_tracks):
        duration = max(10, int(rng.poisson(config.mean_track_len)))
        t_peak = duration * rng.uniform(0.35, 0.65)

        # storm-centre path: enters from the west, drifts east/north-east
        x0 = rng.uniform(5.0, 0.25 * config.n_x)
        y0 = rng.uniform(0.25, 0.75) * config.n_y
        vx = rng.uniform(0.6, 1.1) + _smooth_noise(rng, duration, 0.15)
        vy = rng.uniform(-0.1, 0.45) + _smooth_noise(rng, duration, 0.15)
        sx = x0 + np.concatenate([[0.0], np.cumsum(vx[:-1])])
        sy = y0 + np.concatenate([[0.0], np.cumsum(vy[:-1])])

        steps = np.arange(1, duration + 1, dtype=float)
        vort = (3.0 + 5.0 * np.exp(-((steps - t_peak) / (0.3 * duration)) ** 2)
                + _smooth_noise(rng, duration, 0.3))
        vort = np.maximum(vort, 0.5)

        lon, lat = grid.xy_to_lonlat(sx, sy)
        points = [TrackPoint(int(t), float(lon[t - 1]), float(lat[t - 1]),
                             float(vort[t - 1])) for t in range(1, duration + 1)]
        track = StormTrack(f"synth{i:04d}", points)

        # band geometry relative to the storm centre: offset to the south-west
        offset_r = 7.0 + _smooth_noise(rng, duration, 1.0)
        offset_th = -np.pi / 4 + _smooth_noise(rng, duration, 0.15)
        cx = sx + offset_r * np.sin(offset_th)
        cy = sy - offset_r * np.cos(offset_th)
        a = (config.band_major_base + config.band_major_per_vorticity * vort
             + _smooth_noise(rng, duration, 0.8))
        a = np.maximum(a, 4.0)
        b = np.maximum(config.band_aspect * a * (1.0 + _smooth_noise(rng, duration, 0.05)), 2.5)
        gamma = rng.uniform(-np.pi / 3, np.pi / 3) + _smooth_noise(rng, duration, 0.08)
        peak = config.band_amp_per_vorticity * vort * (1.0 + _smooth_noise(rng, duration, 0.05))
        peak = np.maximum(peak, 0.0)

        values = rng.gamma(config.background_shape, theta,
                           size=(duration, config.n_y, config.n_x))
        for k in range(duration):
            # rotated anisotropic bump; level sets are ellipses with axes (a, b)
            ca, sa = np.cos(gamma[k]), np.sin(gamma[k])
            dx, dy = xx - cx[k], yy - cy[k]
            u = dx * sa + dy * ca   # along major axis (gamma from north)
            v = dx * ca - dy * sa
            q = (u / a[k]) ** 2 + (v / b[k]) ** 2
            values[k] += peak[k] * np.exp(-1.5 * q)

        stack = FieldStack(grid, np.arange(1, duration + 1),
                           values.astype(np.float32), "observed")
        truth = PlantedTruth(np.column_stack([cx, cy]), np.column_stack([a, b]),
                             gamma, peak)
        tracks.append(track)
        stacks.append(stack)
        truths.append(truth)
    return tracks, stacks, truths


def concatenate_stacks(stacks):
    """Pool stacks into one climatology stack (times renumbered 1..N)."""
    if not stacks:
        raise ValueError("no stacks to concatenate")
    grid = stacks[0].grid
    for s in stacks[1:]:
        if s.grid != grid or s.scale_tag != stacks[0].scale_tag:
            raise ValueError("stacks must share grid and scale")
    values = np.concatenate([s.values for s in stacks], axis=0)
    return FieldStack(grid, np.arange(1, len(values) + 1), values,
                      stacks[0].scale_tag)
