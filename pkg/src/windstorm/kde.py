"""Multivariate Gaussian kernel density estimation with conditional sampling.

The estimator is the usual mixture of Gaussian kernels centred at the
observations with a shared bandwidth matrix H. Conditioning on a subset of
dimensions yields a mixture over components with weights proportional to the
kernel evaluated at the conditioning values; a conditional draw picks a
component by weight and samples the Gaussian conditional of that kernel.

Angular dimensions are handled with wrapped kernel differences; each circular
dimension carries its own period (2*pi for bearings, pi for axial angles).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.special import logsumexp

_LOG_UNDERFLOW = -700.0  # exp() underflows double precision below this


def wrap_angles(values, period=2 * np.pi):
    """Wrap to the centred interval (-period/2, period/2]."""
    values = np.asarray(values, dtype=float)
    wrapped = values - period * np.round(values / period)
    # round() sends the lower boundary to -period/2; fold it to +period/2
    return np.where(wrapped <= -period / 2, wrapped + period, wrapped)


def circular_mean(values, period=2 * np.pi):
    phase = np.asarray(values) * (2 * np.pi / period)
    mean = np.arctan2(np.sin(phase).mean(), np.cos(phase).mean())
    return mean * period / (2 * np.pi)


def scott_bandwidth(data, factor=1.0, diagonal=False, circular=None):
    """Rule-of-thumb bandwidth H = factor^2 * n^(-2/(d+4)) * sample covariance.

    circular maps dimension index -> period; those dimensions are centred at
    their circular mean and wrapped before the covariance is formed, which
    makes H invariant to common shifts of the angular data.
    """
    if factor <= 0:
        raise ValueError("bandwidth factor must be positive")
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n, d = data.shape
    if n < 2:
        raise ValueError("need at least 2 observations for a bandwidth")
    centred = data.copy()
    for dim, period in (circular or {}).items():
        mu = circular_mean(data[:, dim], period)
        centred[:, dim] = wrap_angles(data[:, dim] - mu, period)
    cov = np.atleast_2d(np.cov(centred, rowvar=False))
    if diagonal:
        cov = np.diag(np.diag(cov))
    h = factor ** 2 * n ** (-2.0 / (d + 4)) * cov
    # reject non-PD bandwidths with a small ridge
    try:
        cholesky(h, lower=True)
    except np.linalg.LinAlgError:
        ridge = 1e-8 * max(np.trace(h), 1e-300)
        warnings.warn("singular sample covariance; adding ridge to bandwidth")
        h = h + ridge * np.eye(d)
    return h


@dataclass
class KdeModel:
    """Gaussian KDE with bandwidth H over an (n, d) data matrix.

    circular maps dimension index -> period for angular dimensions.
    """

    data: np.ndarray
    bandwidth: np.ndarray
    circular: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        self.bandwidth = np.atleast_2d(np.asarray(self.bandwidth, dtype=float))
        n, d = self.data.shape
        if n < 1:
            raise ValueError("need at least one observation")
        if self.bandwidth.shape != (d, d):
            raise ValueError("bandwidth shape does not match data dimension")
        if not np.allclose(self.bandwidth, self.bandwidth.T):
            raise ValueError("bandwidth must be symmetric")
        try:
            cholesky(self.bandwidth, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("bandwidth must be positive-definite") from exc
        for dim in self.circular:
            self.data[:, dim] = wrap_angles(self.data[:, dim],
                                            self.circular[dim])
        self._partitions: dict[tuple, tuple] = {}

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    @classmethod
    def from_data(cls, data, factor=1.0, diagonal=False, circular=None):
        circular = dict(circular or {})
        h = scott_bandwidth(data, factor=factor, diagonal=diagonal,
                            circular=circular)
        return cls(np.asarray(data, dtype=float), h, circular)

    # -- internals ---------------------------------------------------------

    def _diffs(self, z, dims, points=None):
        """Wrapped differences z - data over the given dims, shape (n, len(dims))."""
        pts = self.data[:, dims] if points is None else points[:, dims]
        diff = np.asarray(z, dtype=float)[None, :] - pts
        for j, dim in enumerate(dims):
            if dim in self.circular:
                diff[:, j] = wrap_angles(diff[:, j], self.circular[dim])
        return diff

    def _partition(self, cond_dims):
        key = tuple(cond_dims)
        if key not in self._partitions:
            cond = np.asarray(key, dtype=int)
            free = np.array([i for i in range(self.dim) if i not in set(key)],
                            dtype=int)
            if cond.size == 0 or free.size == 0:
                raise ValueError("cond_dims must be a nonempty proper subset")
            h_cc = self.bandwidth[np.ix_(cond, cond)]
            h_fc = self.bandwidth[np.ix_(free, cond)]
            h_ff = self.bandwidth[np.ix_(free, free)]
            cho_cc = cho_factor(h_cc, lower=True)
            gain = cho_solve(cho_cc, h_fc.T).T          # H_fc H_cc^-1
            sigma = h_ff - gain @ h_fc.T                # Schur complement
            sigma = (sigma + sigma.T) / 2
            try:
                sigma_chol = cholesky(sigma + 0.0, lower=True)
            except np.linalg.LinAlgError:
                sigma_chol = cholesky(
                    sigma + 1e-12 * max(np.trace(sigma), 1e-300) * np.eye(len(free)),
                    lower=True)
            self._partitions[key] = (cond, free, cho_cc, gain, sigma, sigma_chol)
        return self._partitions[key]

    def _log_weights(self, cond, cho_cc, cond_values, rows=None):
        data = self.data if rows is None else self.data[rows]
        diff = self._diffs(np.asarray(cond_values, float), cond, points=data)
        solved = cho_solve(cho_cc, diff.T)
        return -0.5 * np.einsum("ij,ji->i", diff, solved)

    def conditional_weights(self, cond_dims, cond_values, rows=None):
        """Normalized mixture weights w_i given the conditioning values."""
        cond, _, cho_cc, _, _, _ = self._partition(cond_dims)
        logk = self._log_weights(cond, cho_cc, cond_values, rows)
        if not np.any(np.isfinite(logk)) or logk.max() < _LOG_UNDERFLOW:
            return None  # caller applies the nearest-neighbour fallback
        return np.exp(logk - logsumexp(logk))


def kde_density(model: KdeModel, z):
    """Density of the KDE at point(s) z; z may be (d,) or (m, d)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    pts = np.atleast_2d(z)
    d = model.dim
    chol_h = cholesky(model.bandwidth, lower=True)
    logdet = 2 * np.sum(np.log(np.diag(chol_h)))
    lognorm = -0.5 * (d * np.log(2 * np.pi) + logdet)
    out = np.empty(len(pts))
    for i, p in enumerate(pts):
        diff = model._diffs(p, np.arange(d))
        solved = np.linalg.solve(chol_h, diff.T)
        logk = lognorm - 0.5 * np.einsum("ji,ji->i", solved, solved)
        out[i] = np.exp(logsumexp(logk)) / model.n
    return out[0] if single else out


def _nearest_row(model, cond, cond_values, rows):
    data = model.data if rows is None else model.data[rows]
    diff = model._diffs(np.asarray(cond_values, float), cond, points=data)
    return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))


def conditional_sample(model: KdeModel, cond_dims, cond_values, rng,
                       size=None, rows=None):
    """Draw from the conditional KDE given values on cond_dims.

    Picks a kernel component with probability proportional to its kernel
    weight at the conditioning point, then samples the Gaussian conditional
    of that component. Returns shape (d_free,) or (size, d_free).
    """
    cond, free, cho_cc, gain, _, sigma_chol = model._partition(cond_dims)
    weights = model.conditional_weights(cond_dims, cond_values, rows)
    data = model.data if rows is None else model.data[rows]
    if weights is None:
        warnings.warn("all conditional KDE weights underflowed; "
                      "falling back to nearest component")
        idx = np.full(size or 1, _nearest_row(model, cond, cond_values, rows))
    else:
        idx = rng.choice(len(data), size=size or 1, p=weights)
    diff = model._diffs(np.asarray(cond_values, float), cond, points=data)
    mu = data[np.ix_(idx, free)] + diff[idx] @ gain.T
    noise = rng.standard_normal((len(idx), len(free))) @ sigma_chol.T
    out = mu + noise
    for j, dim in enumerate(free):
        if dim in model.circular:
            out[:, j] = wrap_angles(out[:, j], model.circular[dim])
    return out[0] if size is None else out


def conditional_density(model: KdeModel, cond_dims, cond_values, z_free):
    """Conditional density at z_free (shape (d_free,) or (m, d_free))."""
    cond, free, cho_cc, gain, sigma, sigma_chol = model._partition(cond_dims)
    weights = model.conditional_weights(cond_dims, cond_values)
    if weights is None:
        warnings.warn("all conditional KDE weights underflowed; "
                      "falling back to nearest component")
        weights = np.zeros(model.n)
        weights[_nearest_row(model, cond, cond_values, None)] = 1.0
    z_free = np.asarray(z_free, dtype=float)
    if z_free.ndim == 0:
        pts, single = z_free.reshape(1, 1), True
    elif z_free.ndim == 1 and len(free) == 1:
        pts, single = z_free.reshape(-1, 1), False  # batch over one free dim
    elif z_free.ndim == 1:
        pts, single = z_free.reshape(1, -1), True
    else:
        pts, single = z_free, False

    diff_cond = model._diffs(np.asarray(cond_values, float), cond)
    mus = model.data[:, free] + diff_cond @ gain.T           # (n, d_free)
    logdet = 2 * np.sum(np.log(np.diag(sigma_chol)))
    lognorm = -0.5 * (len(free) * np.log(2 * np.pi) + logdet)
    out = np.empty(len(pts))
    for i, p in enumerate(pts):
        d = p[None, :] - mus
        for j, dim in enumerate(free):
            if dim in model.circular:
                d[:, j] = wrap_angles(d[:, j], model.circular[dim])
        solved = np.linalg.solve(sigma_chol, d.T)
        logk = lognorm - 0.5 * np.einsum("ji,ji->i", solved, solved)
        out[i] = np.exp(logsumexp(logk, b=weights))
    return out[0] if single else out
