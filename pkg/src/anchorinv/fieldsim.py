"""Unconditional and conditional Gaussian random-field simulation.

Fields live in transformed (Box-Cox) space. Conditioning points are
snapped to their nearest grid cell, and that cell's value *is* the
conditioning variable: with zero observation noise a conditioned cell
reproduces its value exactly, with or without a nugget.
"""

import functools
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import geostat
from .errors import ConditioningError, ConfigError, DomainError
from .geostat import Grid, as_locations
from .rng import generator

MAX_DENSE_CELLS = 20_000


@dataclass
class Field:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.shape[0] != self.grid.n_cells:
            raise ConfigError(f"field has {self.values.shape[0]} values for {self.grid.n_cells} cells")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("field values must be finite")

    def as_2d(self):
        return self.values.reshape(self.grid.shape2d)


@dataclass
class TypeAData:
    """Direct measurements of Y at individual locations.

    ``values`` are in transformed space unless ``space == "attribute"``,
    in which case they are raw positive attribute values and the Box-Cox
    transform is applied per candidate with its own lambda.
    """

    locations: np.ndarray
    values: np.ndarray
    noise_var: float = 0.0
    space: str = "transformed"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.locations = as_locations(self.locations)
        if self.locations.shape[0] != self.values.shape[0]:
            raise ConfigError("type-A locations and values differ in length")
        if self.noise_var < 0:
            raise DomainError("type-A noise variance must be >= 0")
        if self.space not in ("transformed", "attribute"):
            raise ConfigError(f"unknown type-A value space {self.space!r}")
        if _has_duplicates(self.locations):
            raise ConfigError("type-A locations must be pairwise distinct")

    def __len__(self):
        return self.values.shape[0]

    def transformed(self, lam):
        if self.space == "attribute":
            return geostat.boxcox(self.values, lam)
        return self.values

    @classmethod
    def empty(cls, ndim=1):
        return cls(np.zeros((0, ndim)), np.zeros(0))


@dataclass
class AnchorSet:
    """Anchor locations and values: the type-A part sits on the type-A locations."""

    a_locations: np.ndarray
    a_values: np.ndarray
    b_locations: np.ndarray
    b_values: np.ndarray = field(default=None)

    def __post_init__(self):
        self.a_locations = np.asarray(self.a_locations, dtype=np.float64)
        self.b_locations = np.asarray(self.b_locations, dtype=np.float64)
        ndim = self.a_locations.shape[1] if self.a_locations.ndim == 2 else self.b_locations.shape[-1]
        self.a_locations = self.a_locations.reshape(-1, ndim)
        self.b_locations = self.b_locations.reshape(-1, ndim)
        self.a_values = np.asarray(self.a_values, dtype=np.float64).ravel()
        self.b_values = (np.full(self.b_locations.shape[0], np.nan) if self.b_values is None
                         else np.asarray(self.b_values, dtype=np.float64).ravel())
        if self.a_values.shape[0] != self.a_locations.shape[0] or self.b_values.shape[0] != self.b_locations.shape[0]:
            raise ConfigError("anchor locations and values differ in length")
        if _has_duplicates(np.vstack([self.a_locations, self.b_locations])):
            raise ConfigError("anchor locations must be distinct")

    @property
    def locations(self):
        return np.vstack([self.a_locations, self.b_locations])

    @property
    def values(self):
        return np.concatenate([self.a_values, self.b_values])

    @property
    def n_b(self):
        return self.b_locations.shape[0]


def _has_duplicates(locations):
    if locations.shape[0] < 2:
        return False
    return np.unique(locations, axis=0).shape[0] < locations.shape[0]


def _conditioning_arrays(conditioning, ndim):
    if conditioning is None:
        return np.zeros((0, ndim)), np.zeros(0)
    if isinstance(conditioning, (AnchorSet, TypeAData)):
        locs, vals = conditioning.locations, conditioning.values
        if isinstance(conditioning, TypeAData) and conditioning.space == "attribute":
            raise ConfigError("pass transformed type-A values, or an AnchorSet")
    else:
        locs, vals = conditioning
    locs = as_locations(locs, ndim) if np.size(locs) else np.zeros((0, ndim))
    vals = np.asarray(vals, dtype=np.float64).ravel()
    if locs.shape[0] != vals.shape[0]:
        raise ConfigError("conditioning locations and values differ in length")
    if not np.all(np.isfinite(vals)):
        raise DomainError("conditioning values must be finite")
    return locs, vals


# ---------------------------------------------------------------------------
# Gaussian conditioning at arbitrary locations


def condition_gaussian(theta, known_locations, known_values, targets, noise_var=0.0):
    """Conditional mean and covariance of the field at ``targets``.

    mean = m_t + C_tk C_kk^-1 (v - m_k),  cov = C_tt - C_tk C_kk^-1 C_kt,
    with ``noise_var`` added to the diagonal of C_kk.
    """
    targets = as_locations(targets)
    if targets.shape[0] == 0:
        raise ConfigError("condition_gaussian needs at least one target")
    ndim = targets.shape[1]
    known = as_locations(known_locations, ndim) if np.size(known_locations) else np.zeros((0, ndim))
    values = np.asarray(known_values, dtype=np.float64).ravel()
    if known.shape[0] != values.shape[0]:
        raise ConfigError("known locations and values differ in length")
    m_t = geostat.trend_mean(targets, theta.beta)
    c_tt = geostat.covariance_matrix(targets, theta, warn=False)
    if known.shape[0] == 0:
        return m_t, c_tt
    dup = _duplicate_groups(known)
    if dup:
        raise ConditioningError(
            f"known locations coincide: {[known[g[0]].tolist() for g in dup]}",
            {"coincident_locations": [known[g[0]].tolist() for g in dup], "groups": dup},
        )
    c_kk = geostat.covariance_matrix(known, theta, warn=False) + noise_var * np.eye(known.shape[0])
    chol = geostat.cholesky(c_kk, theta.sigma2, known, what="known-point covariance")
    c_tk = geostat.cross_covariance(targets, known, theta)
    a = scipy.linalg.solve_triangular(chol, c_tk.T, lower=True)
    r = scipy.linalg.solve_triangular(chol, values - geostat.trend_mean(known, theta.beta), lower=True)
    mean = m_t + a.T @ r
    cov = c_tt - a.T @ a
    return mean, 0.5 * (cov + cov.T)


def _duplicate_groups(locations):
    _, inverse, counts = np.unique(locations, axis=0, return_inverse=True, return_counts=True)
    inverse = np.asarray(inverse).ravel()
    return [np.nonzero(inverse == g)[0].tolist() for g in np.nonzero(counts > 1)[0]]


# ---------------------------------------------------------------------------
# grid sampling


@functools.lru_cache(maxsize=128)
def _grid_factor(grid, theta, cells, noise_var):
    """Value-independent part of conditional simulation on ``grid``.

    Returns (free cell indices, kriging weights free <- known, Cholesky of
    the conditional covariance of the free cells).
    """
    centers = grid.centers()
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size and noise_var == 0.0:
        free = np.setdiff1d(np.arange(grid.n_cells), cells)
    else:
        free = np.arange(grid.n_cells)
    c_ff = geostat.covariance_matrix(centers[free], theta, warn=False)
    if cells.size:
        c_kk = geostat.covariance_matrix(centers[cells], theta, warn=False) + noise_var * np.eye(cells.size)
        c_fk = geostat.cross_covariance(centers[free], centers[cells], theta)
        chol_k = geostat.cholesky(c_kk, theta.sigma2, centers[cells], what="conditioning covariance")
        a = scipy.linalg.solve_triangular(chol_k, c_fk.T, lower=True)
        weights = scipy.linalg.solve_triangular(chol_k, a, lower=True, trans="T").T
        c_ff = c_ff - a.T @ a
        c_ff = 0.5 * (c_ff + c_ff.T)
    else:
        weights = np.zeros((free.size, 0))
    chol = geostat.cholesky(c_ff, theta.sigma2, centers[free], what="conditional field covariance") if free.size \
        else np.zeros((0, 0))
    for arr in (free, weights, chol):
        arr.setflags(write=False)
    return free, weights, chol


class ConditionalSampler:
    """Draws fields on ``grid`` from N(m, C) conditioned on point values.

    The factorization is computed once per (grid, theta, conditioning
    cells, noise) and cached; only the mean depends on the values.
    """

    def __init__(self, grid, theta, locations=None, values=None, noise_var=0.0):
        if grid.n_cells > MAX_DENSE_CELLS:
            raise ConfigError(f"grid has {grid.n_cells} cells; dense simulation is limited to {MAX_DENSE_CELLS}")
        self.grid = grid
        self.theta = theta
        locs, vals = _conditioning_arrays(None if locations is None else (locations, values), grid.ndim)
        if locs.shape[0] and not np.all(grid.contains(locs)):
            warnings.warn("conditioning locations outside the grid are snapped to boundary cells", stacklevel=2)
        cells, offsets = grid.nearest_cell(locs)
        dup = _duplicate_groups(cells[:, None]) if cells.size > 1 else []
        if dup:
            raise ConditioningError(
                f"conditioning points share grid cells: {[locs[g].tolist() for g in dup]}",
                {"coincident_locations": [locs[g].tolist() for g in dup]},
            )
        self.cells = cells
        self.offsets = offsets
        self.values = vals
        self.noise_var = float(noise_var)
        self.free, self.weights, self.chol = _grid_factor(grid, theta, tuple(cells.tolist()), self.noise_var)
        centers = grid.centers()
        prior_mean = geostat.trend_mean(centers, theta.beta)
        self.mean = prior_mean.copy()
        if cells.size:
            self.mean[self.free] = prior_mean[self.free] + self.weights @ (vals - prior_mean[cells])
            if self.noise_var == 0.0:
                self.mean[cells] = vals

    def sample(self, rng, n):
        """(n, n_cells) array of draws using generator ``rng``."""
        z = rng.standard_normal((n, self.free.size))
        out = np.empty((n, self.grid.n_cells))
        out[:] = self.mean
        out[:, self.free] += z @ self.chol.T
        return out


def simulate_unconditional(grid, theta, seed):
    """One draw of the field on ``grid`` from the prior N(m(theta), C(theta))."""
    return Field(grid, ConditionalSampler(grid, theta).sample(generator(seed), 1)[0])


def simulate_conditional(grid, theta, conditioning, seed, noise_var=0.0):
    """One draw conditioned on ``conditioning``.

    ``conditioning`` is an AnchorSet, a TypeAData in transformed space, a
    ``(locations, values)`` tuple, or None (reduces to the unconditional draw
    along the same random stream).
    """
    locs, vals = _conditioning_arrays(conditioning, grid.ndim)
    if isinstance(conditioning, TypeAData):
        noise_var = conditioning.noise_var
    sampler = ConditionalSampler(grid, theta, locs, vals, noise_var)
    return Field(grid, sampler.sample(generator(seed), 1)[0])


def sample_anchor_prior(theta, za, anchor_locations, seed):
    """Draw anchor values from p(anchor values | theta, z_a)."""
    anchor_locations = np.asarray(anchor_locations, dtype=np.float64)
    if anchor_locations.size == 0:
        return np.zeros(0)
    rng = seed if isinstance(seed, np.random.Generator) else generator(seed)
    za_values = za.transformed(theta.lam) if len(za) else np.zeros(0)
    mean, cov = condition_gaussian(theta, za.locations if len(za) else np.zeros((0, anchor_locations.shape[-1])),
                                   za_values, anchor_locations, za.noise_var)
    chol = geostat.cholesky(cov, theta.sigma2, anchor_locations, what="anchor prior covariance")
    return mean + chol @ rng.standard_normal(mean.shape[0])


def anchor_prior_logpdf(theta, za, anchor_locations, anchor_values):
    """log p(anchor values | theta, z_a) under the Gaussian model."""
    anchor_locations = np.asarray(anchor_locations, dtype=np.float64)
    if anchor_locations.size == 0:
        return 0.0
    za_values = za.transformed(theta.lam) if len(za) else np.zeros(0)
    mean, cov = condition_gaussian(theta, za.locations if len(za) else np.zeros((0, anchor_locations.shape[-1])),
                                   za_values, anchor_locations, za.noise_var)
    chol = geostat.cholesky(cov, theta.sigma2, anchor_locations, what="anchor prior covariance")
    r = scipy.linalg.solve_triangular(chol, np.asarray(anchor_values) - mean, lower=True)
    return float(-0.5 * r @ r - np.log(np.diag(chol)).sum() - 0.5 * r.size * np.log(2 * np.pi))
