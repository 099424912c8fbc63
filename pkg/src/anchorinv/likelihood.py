"""Nonparametric likelihood estimation with the k-th nearest-neighbor estimator.

For a sample z_1..z_n from a d-variate density f, and r the distance from
the evaluation point to its k-th nearest sample,

    f_hat = (k - 1) / n / (v_d r^d),    v_d = pi^(d/2) / Gamma(1 + d/2).

Only one query point is ever needed per candidate: the observed z_b.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, DegenerateDensityError, DomainError
from .fieldsim import ConditionalSampler
from .forward import add_observation_error
from .rng import generator

HIGH_DIM_WARNING = 10


def unit_ball_volume(d):
    """Volume of the unit ball in R^d."""
    if int(d) != d or d < 1:
        raise DomainError(f"dimension must be a positive integer, got {d}")
    return math.exp(0.5 * d * math.log(math.pi) - math.lgamma(1.0 + 0.5 * d))


def default_k(n):
    """round(sqrt(n)), clipped to [2, n]."""
    return int(min(max(2, round(math.sqrt(n))), n))


@dataclass
class SampleCloud:
    """Forward outputs (n, d) with the per-dimension shift/scale used for distances."""

    points: np.ndarray
    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.shift = np.asarray(self.shift, dtype=np.float64).ravel()
        self.scale = np.asarray(self.scale, dtype=np.float64).ravel()
        n, d = self.points.shape
        if n < 2:
            raise ConfigError("a sample cloud needs at least two points")
        if not np.all(np.isfinite(self.points)):
            raise DomainError("sample cloud has non-finite entries")
        if self.shift.shape != (d,) or self.scale.shape != (d,):
            raise ConfigError("standardization does not match the cloud dimension")
        if np.any(self.scale <= 0):
            raise DegenerateDensityError(
                f"sample cloud has zero spread in dimension(s) {np.nonzero(self.scale <= 0)[0].tolist()}")

    @classmethod
    def from_points(cls, points, standardize=True):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        d = points.shape[1]
        if points.shape[0] < 2:
            raise ConfigError("a sample cloud needs at least two points")
        if not standardize:
            return cls(points, np.zeros(d), np.ones(d))
        return cls(points, points.mean(axis=0), points.std(axis=0, ddof=1))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def standardized(self):
        return (self.points - self.shift) / self.scale


@dataclass(frozen=True)
class DensityEstimate:
    value: float
    k: int
    r: float
    n: int
    d: int
    log_value: float

    def to_dict(self):
        return {"value": self.value, "log_value": self.log_value, "k": self.k, "r": self.r, "n": self.n, "d": self.d}


def knn_density(cloud, point, k=None):
    """kNN density of ``cloud`` at ``point``, returned in original units.

    Distances are Euclidean in standardized coordinates; the Jacobian of
    the standardization (product of 1/scale) converts back.
    """
    point = np.atleast_1d(np.asarray(point, dtype=np.float64)).ravel()
    n, d = cloud.n, cloud.d
    if point.shape[0] != d:
        raise ConfigError(f"point has dimension {point.shape[0]}, cloud has {d}")
    k = default_k(n) if k is None else int(k)
    if not 2 <= k <= n:
        raise ConfigError(f"k must satisfy 2 <= k <= n={n}, got {k}")
    z = cloud.standardized()
    q = (point - cloud.shift) / cloud.scale
    r = _kernels.kth_neighbor_distance(z, q, k)
    if r <= 0.0:
        raise DegenerateDensityError(
            f"{k}-th nearest neighbor coincides with the evaluation point; add observation noise or reduce k")
    log_value = (math.log(k - 1) - math.log(n) - math.log(unit_ball_volume(d)) - d * math.log(r)
                 - float(np.sum(np.log(cloud.scale))))
    return DensityEstimate(math.exp(log_value), k, r, n, d, log_value)


def simulate_predictions(theta, anchors, model, n, rng, noise_sd=None):
    """Forward outputs of ``n`` fields drawn conditional on ``anchors``.

    Returns an (n, d_B) array; observation noise is added when ``noise_sd``
    has positive entries.
    """
    sampler = ConditionalSampler(model.grid, theta, anchors.locations, anchors.values)
    fields = sampler.sample(rng, n)
    z = model.evaluate_batch(fields, theta.lam)
    if noise_sd is not None and np.any(np.asarray(noise_sd) > 0):
        z = add_observation_error(z, noise_sd, rng)
    return z


def estimate_likelihood(theta, anchors, za, model, zb, n, k=None, seed=0, return_cloud=False):
    """Estimate p(z_b | theta, anchors) by simulation and kNN density estimation.

    Draws ``n`` fields conditional on all anchors, runs ``model`` on each,
    perturbs outputs with the type-B noise, and evaluates the kNN density
    of the resulting cloud at the observed ``zb.values``.
    """
    k = default_k(n) if k is None else int(k)
    if n < max(k + 1, 50):
        raise ConfigError(f"need n >= max(k + 1, 50) realizations, got n={n}, k={k}")
    if model.output_dim != len(zb):
        raise ConfigError(f"model produces {model.output_dim} outputs, data have {len(zb)}")
    if za is not None and len(za) and not np.array_equal(np.asarray(za.locations), anchors.a_locations):
        raise ConfigError("type-A anchors must sit on the type-A data locations")
    if len(zb) > HIGH_DIM_WARNING:
        warnings.warn(f"kNN likelihood in {len(zb)} dimensions is unreliable; consider summarizing z_b",
                      stacklevel=2)
    rng = generator(seed)
    z = simulate_predictions(theta, anchors, model, n, rng, zb.noise_sd)
    cloud = SampleCloud.from_points(z)
    estimate = knn_density(cloud, zb.values, k)
    return (estimate, cloud) if return_cloud else estimate
