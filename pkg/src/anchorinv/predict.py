"""Posterior-predictive field ensembles.

Fields are drawn conditional on a resampled candidate's anchors only. No
forward model runs here: the anchors already carry what z_b says about
the field.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fieldsim import ConditionalSampler, Field
from .inversion import systematic_resample
from .rng import STAGE_PREDICT, STAGE_RESAMPLE, generator

QUANTILE_LEVELS = (0.05, 0.5, 0.95)


@dataclass
class PredictiveEnsemble:
    grid: object
    values: np.ndarray
    sources: np.ndarray
    targets: np.ndarray = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[0] == 0:
            raise ConfigError("predictive ensemble is empty")
        if self.values.shape[1] != self.grid.n_cells:
            raise ConfigError("ensemble fields do not match the grid")

    def __len__(self):
        return self.values.shape[0]

    @property
    def fields(self):
        return [Field(self.grid, v) for v in self.values]

    def mean(self):
        return self.values.mean(axis=0)

    def variance(self):
        return self.values.var(axis=0)


def _canonical_order(candidates):
    """Candidate positions sorted by content, so input order does not matter."""
    keys = []
    for c in candidates:
        th = c.theta
        keys.append(tuple(th.beta) + (th.sigma2, th.phi, th.nugget, th.kappa, th.lam)
                    + tuple(c.anchors.values.tolist()))
    return sorted(range(len(candidates)), key=lambda i: (keys[i], candidates[i].index))


def predictive_ensemble(posterior, grid, m, seed, targets=None):
    """``m`` fields; each from a systematically resampled candidate."""
    if m < 1:
        raise ConfigError("m must be >= 1")
    if not len(posterior):
        raise ConfigError("posterior ensemble is empty")
    order = _canonical_order(posterior.candidates)
    weights = np.asarray(posterior.weights, dtype=np.float64)[order]
    picks = systematic_resample(weights / weights.sum(), m, generator(seed, STAGE_RESAMPLE))
    values = np.empty((m, grid.n_cells))
    sources = np.empty(m, dtype=np.int64)
    samplers = {}
    for j, p in enumerate(picks):
        c = posterior.candidates[order[p]]
        if p not in samplers:
            samplers[p] = ConditionalSampler(grid, c.theta, c.anchors.locations, c.anchors.values)
        values[j] = samplers[p].sample(generator(seed, STAGE_PREDICT, j), 1)[0]
        sources[j] = c.index
    return PredictiveEnsemble(grid, values, sources, targets)


@dataclass
class PredictiveSummary:
    targets: np.ndarray
    cells: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    quantiles: dict

    def rows(self):
        for i in range(self.cells.size):
            yield ([*self.targets[i].tolist(), int(self.cells[i]), float(self.mean[i]), float(self.variance[i])]
                   + [float(self.quantiles[q][i]) for q in QUANTILE_LEVELS])


def predictive_summary(ensemble, targets):
    """Mean, variance and 5/50/95% quantiles at the cells nearest ``targets``."""
    if ensemble is None or len(ensemble) == 0:
        raise ConfigError("empty ensemble")
    grid = ensemble.grid
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, grid.ndim)
    if not np.all(grid.contains(targets)):
        raise ConfigError("prediction targets must lie inside the grid")
    cells, _ = grid.nearest_cell(targets)
    vals = ensemble.values[:, cells]
    qs = np.quantile(vals, QUANTILE_LEVELS, axis=0)
    return PredictiveSummary(targets, cells, vals.mean(axis=0), vals.var(axis=0),
                             {q: qs[i] for i, q in enumerate(QUANTILE_LEVELS)})


def summary_layers(ensemble):
    """Per-cell mean, sd and quantile layers over the whole grid."""
    qs = np.quantile(ensemble.values, QUANTILE_LEVELS, axis=0)
    layers = {"mean": ensemble.mean(), "sd": np.sqrt(ensemble.variance())}
    for i, q in enumerate(QUANTILE_LEVELS):
        layers[f"q{int(round(q * 100)):02d}"] = qs[i]
    return layers
