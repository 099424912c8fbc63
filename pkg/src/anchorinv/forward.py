"""Deterministic forward models mapping a field to a type-B prediction vector.

Models work on transformed-space fields. ``transform`` selects what the
model actually sees:

* ``"raw"``: the transformed values themselves;
* ``"exp"``: ``exp(values)``;
* ``"attribute"``: ``inverse_boxcox(values, lam)``, with ``lam`` taken from
  the candidate's structural parameters (equals ``"exp"`` for lam = 0).

Darcy conductivity defaults to ``"attribute"``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, geostat
from .errors import ConfigError, DomainError, SolverError
from .fieldsim import Field
from .geostat import Grid, as_locations
from .rng import generator

TRANSFORMS = ("raw", "exp", "attribute")
SIDES = ("left", "right", "bottom", "top")


def _apply_transform(values, transform, lam):
    if transform == "raw":
        return values
    if transform == "exp":
        return np.exp(values)
    if transform == "attribute":
        return geostat.inverse_boxcox(values, lam)
    raise ConfigError(f"unknown transform {transform!r}")


@dataclass
class TypeBData:
    """Observed forward-process data: a plain vector with per-component noise sd."""

    values: np.ndarray
    noise_sd: np.ndarray = 0.0

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=np.float64)).ravel()
        if self.values.size < 1 or not np.all(np.isfinite(self.values)):
            raise ConfigError("type-B data must be a nonempty finite vector")
        sd = np.asarray(self.noise_sd, dtype=np.float64)
        self.noise_sd = np.broadcast_to(sd, self.values.shape).astype(np.float64)
        if np.any(self.noise_sd < 0) or not np.all(np.isfinite(self.noise_sd)):
            raise ConfigError("type-B noise sd must be finite and >= 0")

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class BoundaryConditions:
    """Fixed heads per side; ``None`` is a no-flow side."""

    left: float = None
    right: float = None
    bottom: float = None
    top: float = None

    def __post_init__(self):
        if all(getattr(self, s) is None for s in SIDES):
            raise ConfigError("at least one side needs a fixed head; an all no-flow system is singular")

    def as_tuple(self):
        return tuple(np.nan if getattr(self, s) is None else float(getattr(self, s)) for s in SIDES)

    def to_dict(self):
        return {s: getattr(self, s) for s in SIDES if getattr(self, s) is not None}


def _layout(grid):
    """(ny, nx, dx, dy, transpose?) for the banded solver; the shorter axis goes fast."""
    if grid.ndim == 1:
        return 1, grid.dims[0], grid.spacing[0], 1.0, False
    nx, ny = grid.dims
    dx, dy = grid.spacing
    return ny, nx, dx, dy, nx > ny


def solve_heads_batch(grid, conductivity, bc, sources=None):
    """Heads for a stack of conductivity vectors, shape (m, n_cells)."""
    K = np.asarray(conductivity, dtype=np.float64)
    K = K.reshape(-1, grid.n_cells)
    if not np.all(np.isfinite(K)) or np.any(K <= 0):
        raise DomainError("conductivity must be finite and > 0")
    ny, nx, dx, dy, transpose = _layout(grid)
    left, right, bottom, top = bc.as_tuple()
    K3 = K.reshape(-1, ny, nx)
    src = None if sources is None else np.asarray(sources, dtype=np.float64).reshape(ny, nx)
    if transpose:
        K3 = np.ascontiguousarray(K3.transpose(0, 2, 1))
        src = None if src is None else np.ascontiguousarray(src.T)
        heads = _kernels.darcy_solve_batch(K3, dy, dx, (bottom, top, left, right), src)
        heads = heads.transpose(0, 2, 1)
    else:
        heads = _kernels.darcy_solve_batch(K3, dx, dy, (left, right, bottom, top), src)
    heads = np.ascontiguousarray(heads).reshape(-1, grid.n_cells)
    if not np.all(np.isfinite(heads)):
        bad = np.nonzero(~np.all(np.isfinite(heads), axis=1))[0]
        raise SolverError(f"Darcy solve failed for {bad.size} field(s)", residual=float("inf"))
    return heads


def _transmissivities(grid, K):
    ny, nx, dx, dy, _ = _layout(grid)
    K = K.reshape(ny, nx)
    tx = (dy / dx) * 2.0 * K[:, :-1] * K[:, 1:] / (K[:, :-1] + K[:, 1:])
    ty = (dx / dy) * 2.0 * K[:-1, :] * K[1:, :] / (K[:-1, :] + K[1:, :])
    return K, tx, ty, dx, dy


def boundary_fluxes(grid, conductivity, heads, bc):
    """Inflow rate through each fixed-head side (positive into the domain)."""
    K, _, _, dx, dy = _transmissivities(grid, np.asarray(conductivity, dtype=np.float64))
    h = np.asarray(heads, dtype=np.float64).reshape(K.shape)
    out = {}
    for side, hb in zip(SIDES, bc.as_tuple()):
        if np.isnan(hb):
            continue
        if side == "left":
            q = 2.0 * K[:, 0] * dy / dx * (hb - h[:, 0])
        elif side == "right":
            q = 2.0 * K[:, -1] * dy / dx * (hb - h[:, -1])
        elif side == "bottom":
            q = 2.0 * K[0, :] * dx / dy * (hb - h[0, :])
        else:
            q = 2.0 * K[-1, :] * dx / dy * (hb - h[-1, :])
        out[side] = float(q.sum())
    return out


def cell_residuals(grid, conductivity, heads, bc, sources=None):
    """Net outflow minus source per cell; zero for an exact discrete solution."""
    K, tx, ty, dx, dy = _transmissivities(grid, np.asarray(conductivity, dtype=np.float64))
    h = np.asarray(heads, dtype=np.float64).reshape(K.shape)
    out = np.zeros_like(h)
    fx = tx * (h[:, :-1] - h[:, 1:])
    out[:, :-1] += fx
    out[:, 1:] -= fx
    fy = ty * (h[:-1, :] - h[1:, :])
    out[:-1, :] += fy
    out[1:, :] -= fy
    left, right, bottom, top = bc.as_tuple()
    if not np.isnan(left):
        out[:, 0] += 2.0 * K[:, 0] * dy / dx * (h[:, 0] - left)
    if not np.isnan(right):
        out[:, -1] += 2.0 * K[:, -1] * dy / dx * (h[:, -1] - right)
    if not np.isnan(bottom):
        out[0, :] += 2.0 * K[0, :] * dx / dy * (h[0, :] - bottom)
    if not np.isnan(top):
        out[-1, :] += 2.0 * K[-1, :] * dx / dy * (h[-1, :] - top)
    if sources is not None:
        out -= np.asarray(sources, dtype=np.float64).reshape(K.shape)
    return out.ravel()


def darcy2d_solve(conductivity, bc, sources=None):
    """Steady heads for a single conductivity Field (cell-centered finite volumes)."""
    grid = conductivity.grid
    heads = solve_heads_batch(grid, conductivity.values, bc, sources)[0]
    res = cell_residuals(grid, conductivity.values, heads, bc, sources)
    scale = max(1.0, float(np.max(np.abs(conductivity.values))) * float(np.ptp(heads) or 1.0))
    if np.max(np.abs(res)) > 1e-6 * scale:
        raise SolverError("Darcy solve did not reach the discrete balance", residual=float(np.max(np.abs(res))))
    return Field(grid, heads)


# ---------------------------------------------------------------------------
# models


class ForwardModel:
    """Base class. Subclasses implement :meth:`evaluate_batch` and ``output_dim``."""

    kind = None

    def evaluate_batch(self, values, lam=0.0):
        raise NotImplementedError

    def evaluate(self, field, lam=0.0):
        if getattr(self, "grid", None) is not None and field.grid != self.grid:
            raise ConfigError("field grid does not match the forward model grid")
        return self.evaluate_batch(field.values[None, :], lam)[0]

    def to_dict(self):
        raise NotImplementedError


@dataclass(eq=False)
class LinearObserver(ForwardModel):
    """z = W @ g(y) with g selected by ``transform``."""

    grid: Grid
    weights: np.ndarray
    transform: str = "raw"
    kind = "linear_observer"

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if self.weights.shape[1] != self.grid.n_cells:
            raise ConfigError(f"observer weights have {self.weights.shape[1]} columns for {self.grid.n_cells} cells")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}")

    @property
    def output_dim(self):
        return self.weights.shape[0]

    def evaluate_batch(self, values, lam=0.0):
        return _apply_transform(np.atleast_2d(values), self.transform, lam) @ self.weights.T

    @classmethod
    def select(cls, grid, cells, transform="raw"):
        """Observer reading individual cells."""
        w = np.zeros((len(cells), grid.n_cells))
        w[np.arange(len(cells)), np.asarray(cells, dtype=np.int64)] = 1.0
        return cls(grid, w, transform)

    @classmethod
    def window_means(cls, grid, windows, transform="raw"):
        """Observer averaging each list of cells in ``windows``."""
        w = np.zeros((len(windows), grid.n_cells))
        for i, cells in enumerate(windows):
            w[i, np.asarray(cells, dtype=np.int64)] = 1.0 / len(cells)
        return cls(grid, w, transform)

    def to_dict(self):
        return {"kind": self.kind, "weights": self.weights.tolist(), "transform": self.transform}


@dataclass(eq=False)
class Darcy2D(ForwardModel):
    """Steady Darcy flow; outputs heads at wells followed by optional summaries.

    Summaries: ``"mean_head"`` (mean over all cells) and ``"inflow"`` (total
    inflow across fixed-head sides).
    """

    grid: Grid
    bc: BoundaryConditions
    wells: np.ndarray
    summaries: tuple = ()
    sources: np.ndarray = None
    transform: str = "attribute"
    kind = "darcy2d"
    well_cells: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.wells = as_locations(self.wells, self.grid.ndim) if np.size(self.wells) else np.zeros((0, self.grid.ndim))
        if self.wells.shape[0] and not np.all(self.grid.contains(self.wells)):
            raise ConfigError("observation wells must lie inside the grid")
        self.well_cells, _ = self.grid.nearest_cell(self.wells)
        self.summaries = tuple(self.summaries)
        for s in self.summaries:
            if s not in ("mean_head", "inflow"):
                raise ConfigError(f"unknown Darcy summary {s!r}")
        if self.sources is not None:
            self.sources = np.asarray(self.sources, dtype=np.float64).ravel()
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}")
        if self.output_dim < 1:
            raise ConfigError("Darcy model has no outputs: add wells or summaries")

    @property
    def output_dim(self):
        return self.well_cells.size + len(self.summaries)

    def evaluate_batch(self, values, lam=0.0):
        K = _apply_transform(np.atleast_2d(values), self.transform, lam)
        heads = solve_heads_batch(self.grid, K, self.bc, self.sources)
        cols = [heads[:, self.well_cells]]
        for s in self.summaries:
            if s == "mean_head":
                cols.append(heads.mean(axis=1, keepdims=True))
            else:
                cols.append(np.array([[sum(q for q in boundary_fluxes(self.grid, k, h, self.bc).values() if q > 0)]
                                      for k, h in zip(K, heads)]))
        return np.hstack(cols)

    def to_dict(self):
        d = {"kind": self.kind, "bc": self.bc.to_dict(), "wells": self.wells.tolist(),
             "summaries": list(self.summaries), "transform": self.transform}
        if self.sources is not None:
            d["sources"] = self.sources.tolist()
        return d


@dataclass(eq=False)
class Composite(ForwardModel):
    """Concatenation of several models over one grid."""

    models: list
    kind = "composite"

    def __post_init__(self):
        if not self.models:
            raise ConfigError("composite model needs at least one member")
        grids = {id(m.grid): m.grid for m in self.models}
        first = self.models[0].grid
        if any(g != first for g in grids.values()):
            raise ConfigError("composite members must share one grid")
        self.grid = first

    @property
    def output_dim(self):
        return sum(m.output_dim for m in self.models)

    def evaluate_batch(self, values, lam=0.0):
        return np.hstack([m.evaluate_batch(values, lam) for m in self.models])

    def to_dict(self):
        return {"kind": self.kind, "models": [m.to_dict() for m in self.models]}


def model_from_dict(grid, spec):
    kind = spec.get("kind")
    if kind == "linear_observer":
        transform = spec.get("transform", "raw")
        if "weights" in spec:
            return LinearObserver(grid, spec["weights"], transform)
        if "cells" in spec:
            return LinearObserver.select(grid, spec["cells"], transform)
        if "windows" in spec:
            return LinearObserver.window_means(grid, spec["windows"], transform)
        if "locations" in spec:
            cells, _ = grid.nearest_cell(spec["locations"])
            return LinearObserver.select(grid, cells, transform)
        raise ConfigError("linear_observer needs weights, cells, windows or locations")
    if kind == "darcy2d":
        sources = None
        if "sources" in spec:
            sources = np.asarray(spec["sources"], dtype=np.float64)
        elif "wells_pumping" in spec:
            sources = np.zeros(grid.n_cells)
            for loc, rate in spec["wells_pumping"]:
                cell, _ = grid.nearest_cell([loc])
                sources[cell[0]] -= rate
        return Darcy2D(grid, BoundaryConditions(**spec.get("bc", {})), spec.get("wells", []),
                       tuple(spec.get("summaries", ())), sources, spec.get("transform", "attribute"))
    if kind == "composite":
        return Composite([model_from_dict(grid, m) for m in spec["models"]])
    raise ConfigError(f"unknown forward model kind {kind!r}")


def evaluate(model, field, lam=0.0):
    """Prediction vector of ``model`` for one field."""
    return model.evaluate(field, lam)


def add_observation_error(prediction, noise_sd, seed):
    """Add independent N(0, noise_sd^2) noise componentwise; sd = 0 leaves values untouched."""
    prediction = np.asarray(prediction, dtype=np.float64)
    noise_sd = np.atleast_1d(np.asarray(noise_sd, dtype=np.float64))
    if noise_sd.size not in (1, prediction.shape[-1]):
        raise ConfigError("prediction and noise sd lengths differ")
    noise_sd = np.broadcast_to(noise_sd, prediction.shape[-1:])
    if np.any(noise_sd < 0):
        raise ConfigError("noise sd must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else generator(seed)
    noise = rng.standard_normal(prediction.shape)
    return np.where(noise_sd > 0, prediction + noise_sd * noise, prediction)


def sensitivity_map(model, field, lam=0.0, step=1e-4):
    """Per-cell norm of the forward-difference derivative of the outputs."""
    base = model.evaluate(field, lam)
    perturbed = field.values[None, :] + step * np.eye(field.values.size)
    out = model.evaluate_batch(perturbed, lam)
    return np.linalg.norm((out - base) / step, axis=1)
