"""Covariance models, Box-Cox transform and trend structure.

Locations are plain float arrays of shape (n, d) with d in {1, 2}; a
single location may be passed as a length-d vector.
"""

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from . import _kernels
from .errors import CoincidentLocationWarning, ConditioningError, ConfigError, DomainError

# Smoothness values with closed-form correlation functions.
HALF_INTEGER_KAPPAS = (0.5, 1.5, 2.5)

BOXCOX_LOG_THRESHOLD = 1e-10
JITTER_FACTOR = 1e-10


def as_locations(locations, ndim=None):
    """Coerce ``locations`` to a float (n, d) array."""
    arr = np.asarray(locations, dtype=np.float64)
    if arr.ndim == 1:
        if ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.size == 0:
            arr = arr.reshape(0, ndim or 1)
        else:
            arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ConfigError(f"locations must be (n, d), got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise DomainError("locations must be finite")
    if ndim is not None and arr.shape[0] and arr.shape[1] != ndim:
        raise ConfigError(f"expected {ndim}-D locations, got {arr.shape[1]}-D")
    return arr


@dataclass(frozen=True)
class Grid:
    """Regular grid of cell centers.

    ``dims`` is (nx,) or (nx, ny). Cells are numbered with x fastest:
    ``index = ix + nx * iy``.
    """

    dims: tuple
    spacing: tuple
    origin: tuple = None

    def __post_init__(self):
        dims = tuple(int(d) for d in np.atleast_1d(self.dims))
        spacing = tuple(float(s) for s in np.atleast_1d(self.spacing))
        if len(spacing) == 1 and len(dims) > 1:
            spacing = spacing * len(dims)
        origin = (0.0,) * len(dims) if self.origin is None else tuple(float(o) for o in np.atleast_1d(self.origin))
        if len(dims) not in (1, 2) or len(spacing) != len(dims) or len(origin) != len(dims):
            raise ConfigError(f"inconsistent grid: dims={dims} spacing={spacing} origin={origin}")
        if any(d <= 0 for d in dims) or any(not s > 0 for s in spacing):
            raise ConfigError("grid dims and spacing must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def n_cells(self):
        return int(np.prod(self.dims))

    @property
    def shape2d(self):
        """(ny, nx) array shape for reshaping a value vector."""
        return (1, self.dims[0]) if self.ndim == 1 else (self.dims[1], self.dims[0])

    def axis_centers(self, axis):
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.spacing[axis]

    def centers(self):
        if self.ndim == 1:
            return self.axis_centers(0)[:, None]
        xs, ys = np.meshgrid(self.axis_centers(0), self.axis_centers(1))
        return np.column_stack([xs.ravel(), ys.ravel()])

    def bounds(self):
        lo = np.asarray(self.origin)
        return lo, lo + np.asarray(self.dims) * np.asarray(self.spacing)

    def contains(self, locations):
        locs = as_locations(locations, self.ndim)
        lo, hi = self.bounds()
        return np.all((locs >= lo) & (locs <= hi), axis=1)

    def nearest_cell(self, locations):
        """Indices of the nearest cell centers and the offsets to them."""
        locs = as_locations(locations, self.ndim)
        if not locs.shape[0]:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.ndim))
        ij = np.floor((locs - np.asarray(self.origin)) / np.asarray(self.spacing)).astype(np.int64)
        ij = np.clip(ij, 0, np.asarray(self.dims) - 1)
        idx = ij[:, 0] if self.ndim == 1 else ij[:, 0] + self.dims[0] * ij[:, 1]
        offsets = locs - self.centers()[idx]
        return idx, offsets

    def to_dict(self):
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}


@dataclass(frozen=True)
class StructuralParams:
    """Geostatistical parameters: trend, variance, scale, nugget, smoothness, Box-Cox."""

    beta: tuple
    sigma2: float
    phi: float
    nugget: float = 0.0
    kappa: float = 0.5
    lam: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in np.atleast_1d(self.beta)))
        for name in ("sigma2", "phi", "nugget", "kappa", "lam"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if not self.sigma2 > 0:
            raise DomainError("sigma2 must be > 0")
        if not self.phi > 0:
            raise DomainError("phi must be > 0")
        if self.nugget < 0:
            raise DomainError("nugget must be >= 0")
        if not self.kappa > 0:
            raise DomainError("kappa must be > 0")

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {"beta": list(self.beta), "sigma2": self.sigma2, "phi": self.phi,
                "nugget": self.nugget, "kappa": self.kappa, "lam": self.lam}


@dataclass(frozen=True)
class TrendBasis:
    """Mean structure. ``constant`` is X = column of ones; ``linear`` is X = [1, coords]."""

    kind: str = "constant"

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ConfigError(f"unknown trend basis {self.kind!r}")

    def n_coef(self, ndim):
        return 1 if self.kind == "constant" else 1 + ndim

    def design_matrix(self, locations, ndim=None):
        locs = as_locations(locations, ndim)
        ones = np.ones((locs.shape[0], 1))
        if self.kind == "constant":
            return ones
        return np.hstack([ones, locs])


# ---------------------------------------------------------------------------
# Matérn correlation


def _check_matern(h, kappa, phi):
    h = np.asarray(h, dtype=np.float64)
    if not (math.isfinite(kappa) and kappa > 0):
        raise DomainError(f"kappa must be finite and > 0, got {kappa}")
    if not (math.isfinite(phi) and phi > 0):
        raise DomainError(f"phi must be finite and > 0, got {phi}")
    if not np.all(np.isfinite(h)) or np.any(h < 0):
        raise DomainError("lag distances must be finite and >= 0")
    return h


def matern_bessel(h, kappa, phi):
    """General-smoothness Matérn correlation via the modified Bessel function K.

    rho(h) = 2^(1-kappa) / Gamma(kappa) * u^kappa * K_kappa(u), u = h / phi.
    Evaluated in log space with the exponentially scaled Bessel function.
    """
    h = _check_matern(h, float(kappa), float(phi))
    u = h / phi
    out = np.ones_like(u)
    pos = u > 0
    up = u[pos]
    with np.errstate(over="ignore", under="ignore", divide="ignore"):
        logr = ((1.0 - kappa) * math.log(2.0) - special.gammaln(kappa)
                + kappa * np.log(up) + np.log(special.kve(kappa, up)) - up)
    out[pos] = np.exp(logr)
    # Very small u: u^kappa K_kappa(u) -> 2^(kappa-1) Gamma(kappa); guard rounding above 1.
    return np.minimum(out, 1.0)


def matern_correlation(h, kappa, phi):
    """Matérn correlation at lag(s) ``h``; closed forms for kappa in {0.5, 1.5, 2.5}."""
    kappa = float(kappa)
    phi = float(phi)
    h = _check_matern(h, kappa, phi)
    u = h / phi
    if kappa == 0.5:
        return np.exp(-u)
    if kappa == 1.5:
        return (1.0 + u) * np.exp(-u)
    if kappa == 2.5:
        return (1.0 + u + u * u / 3.0) * np.exp(-u)
    return matern_bessel(h, kappa, phi)


# ---------------------------------------------------------------------------
# covariance


def _coincident_pairs(dist, tol=0.0):
    i, j = np.nonzero(np.triu(dist <= tol, k=1))
    return list(zip(i.tolist(), j.tolist()))


def covariance_matrix(locations, theta, warn=True):
    """sigma2 * R + nugget * I for one set of locations."""
    locs = as_locations(locations)
    dist = _kernels.pairwise_distances(locs, locs)
    if warn and locs.shape[0] > 1:
        pairs = _coincident_pairs(dist)
        if pairs:
            warnings.warn(f"coincident locations {pairs[:5]}; covariance is singular without nugget",
                          CoincidentLocationWarning, stacklevel=2)
    cov = theta.sigma2 * matern_correlation(dist, theta.kappa, theta.phi)
    cov[np.diag_indices_from(cov)] = theta.sigma2 + theta.nugget
    return cov


def cross_covariance(a, b, theta):
    """Covariance between the field at locations ``a`` and at locations ``b``.

    The nugget is treated as part of the point value, so it contributes
    wherever two locations coincide.
    """
    a = as_locations(a)
    b = as_locations(b, a.shape[1] if a.shape[0] else None)
    dist = _kernels.pairwise_distances(a, b)
    cov = theta.sigma2 * matern_correlation(dist, theta.kappa, theta.phi)
    if theta.nugget > 0:
        cov = cov + theta.nugget * (dist == 0.0)
    return cov


def cholesky(cov, scale, locations=None, what="covariance"):
    """Lower Cholesky factor with a single ``JITTER_FACTOR * scale`` retry.

    Raises ConditioningError with diagnostics if the jittered matrix still
    fails; heavier jitter would bias likelihood estimates.
    """
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jittered = cov + JITTER_FACTOR * scale * np.eye(cov.shape[0])
    try:
        return np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError:
        pass
    diagnostics = {"min_eigenvalue": float(np.linalg.eigvalsh(cov).min()), "size": int(cov.shape[0])}
    if locations is not None:
        locs = as_locations(locations)
        dist = _kernels.pairwise_distances(locs, locs)
        pairs = _coincident_pairs(dist, tol=1e-12 * max(1.0, float(dist.max(initial=0.0))))
        diagnostics["coincident_pairs"] = pairs
        diagnostics["coincident_locations"] = [locs[i].tolist() for pair in pairs for i in pair]
    raise ConditioningError(f"{what} matrix is not positive definite", diagnostics)


# ---------------------------------------------------------------------------
# Box-Cox


def boxcox(y, lam):
    """(y^lam - 1) / lam, or log(y) when |lam| < 1e-10."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise DomainError("Box-Cox requires finite y > 0")
    if abs(lam) < BOXCOX_LOG_THRESHOLD:
        return np.log(y)
    return np.expm1(lam * np.log(y)) / lam


def inverse_boxcox(z, lam):
    z = np.asarray(z, dtype=np.float64)
    if abs(lam) < BOXCOX_LOG_THRESHOLD:
        return np.exp(z)
    base = 1.0 + lam * z
    if np.any(base <= 0) or not np.all(np.isfinite(z)):
        raise DomainError(f"value outside the range of the Box-Cox transform with lambda={lam}")
    return np.exp(np.log1p(lam * z) / lam)


def boxcox_log_jacobian(y, lam):
    """log |d boxcox(y) / dy| summed over ``y``."""
    y = np.asarray(y, dtype=np.float64)
    return float((lam - 1.0) * np.sum(np.log(y)))


def basis_for(beta, ndim):
    """Trend basis implied by the number of trend coefficients."""
    n = len(np.atleast_1d(beta))
    if n == 1:
        return TrendBasis("constant")
    if n == 1 + ndim:
        return TrendBasis("linear")
    raise ConfigError(f"{n} trend coefficients match no basis in {ndim}-D")


def trend_mean(locations, beta, basis=None):
    """Mean X @ beta at the given locations.

    ``basis`` defaults to the one implied by ``len(beta)``.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    locs = as_locations(locations)
    if basis is None:
        basis = basis_for(beta, locs.shape[1]) if locs.shape[0] else TrendBasis()
    if locs.shape[0] == 0:
        return np.zeros(0)
    X = basis.design_matrix(locs)
    if X.shape[1] != beta.shape[0]:
        raise ConfigError(f"trend basis {basis.kind!r} needs {X.shape[1]} coefficients, got {beta.shape[0]}")
    return X @ beta
