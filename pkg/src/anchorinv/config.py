"""Experiment configuration (TOML).

A config describes one synthetic experiment end to end: the grid, the
structural parameters of the synthetic truth, how type-A data are sampled,
the forward model(s) producing type-B data, the prior, anchor placement,
inversion sizes, prediction targets, the master seed and the output
directory. ``to_dict`` / ``from_dict`` are exact inverses, and
``config_hash`` is a digest of the canonical JSON form.
"""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
import numpy as np
import tomli_w

from .errors import ConfigError
from .fieldsim import MAX_DENSE_CELLS
from .forward import model_from_dict
from .geostat import Grid, StructuralParams
from .inversion import PriorSpec
from .likelihood import default_k

ANCHOR_STRATEGIES = ("coverage", "sensitivity", "targeted")


@dataclass
class GridSpec:
    dims: list
    spacing: list
    origin: list = None

    def build(self):
        return Grid(tuple(self.dims), tuple(self.spacing), None if self.origin is None else tuple(self.origin))


@dataclass
class TruthSpec:
    beta: list
    sigma2: float
    phi: float
    nugget: float = 0.0
    kappa: float = 0.5
    lam: float = 0.0

    def build(self):
        return StructuralParams(list(self.beta), self.sigma2, self.phi, self.nugget, self.kappa, self.lam)


@dataclass
class TypeASpec:
    """Either ``count`` random distinct cells or explicit ``locations``."""

    count: int = 0
    locations: list = None
    noise_var: float = 0.0
    space: str = "transformed"


@dataclass
class DatasetSpec:
    """One forward model plus the noise sd of its synthetic observations (scalar or per output)."""

    model: dict
    noise_sd: float = 0.0


@dataclass
class AnchorSpec:
    strategy: str = "coverage"
    count: int = 4
    counts: list = None
    stability_tol: float = 0.05
    min_separation: float = 0.0


@dataclass
class InversionSpec:
    candidates: int = 200
    realizations: int = 100
    k: int = 0  # 0: round(sqrt(realizations))
    dependence_realizations: int = 200
    dependence_bootstrap: int = 200

    @property
    def knn_k(self):
        return self.k or default_k(self.realizations)


@dataclass
class PredictSpec:
    """``targets`` random held-out cells or explicit ``target_locations``."""

    fields: int = 100
    targets: int = 0
    target_locations: list = None


@dataclass
class ExperimentConfig:
    grid: GridSpec
    truth: TruthSpec
    prior: dict
    datasets: list
    type_a: TypeASpec = field(default_factory=TypeASpec)
    anchors: AnchorSpec = field(default_factory=AnchorSpec)
    inversion: InversionSpec = field(default_factory=InversionSpec)
    predict: PredictSpec = field(default_factory=PredictSpec)
    seed: int = 0
    output_dir: str = "run"

    # -- serialization --------------------------------------------------

    def to_dict(self):
        return _drop_none(asdict(self))

    @classmethod
    def from_dict(cls, data):
        data = copy.deepcopy(dict(data))
        known = {"grid", "truth", "prior", "datasets", "type_a", "anchors", "inversion", "predict", "seed",
                 "output_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        for name in ("grid", "truth", "prior", "datasets"):
            if name not in data:
                raise ConfigError(f"config is missing [{name}]")
        try:
            cfg = cls(
                grid=GridSpec(**data["grid"]),
                truth=TruthSpec(**data["truth"]),
                prior=dict(data["prior"]),
                datasets=[DatasetSpec(**d) for d in data["datasets"]],
                type_a=TypeASpec(**data.get("type_a", {})),
                anchors=AnchorSpec(**data.get("anchors", {})),
                inversion=InversionSpec(**data.get("inversion", {})),
                predict=PredictSpec(**data.get("predict", {})),
                seed=data.get("seed", 0),
                output_dir=data.get("output_dir", "run"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config entry: {exc}") from None
        cfg.validate()
        return cfg

    def dumps(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text):
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        return cls.loads(path.read_text())

    def save(self, path):
        Path(path).write_text(self.dumps())

    def config_hash(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    # -- derived objects -------------------------------------------------

    def build_grid(self):
        return self.grid.build()

    def build_truth(self):
        return self.truth.build()

    def build_prior(self):
        p = dict(self.prior)
        try:
            return PriorSpec(**p)
        except TypeError as exc:
            raise ConfigError(f"bad [prior] entry: {exc}") from None

    def build_models(self, grid=None):
        grid = grid or self.build_grid()
        return [model_from_dict(grid, d.model) for d in self.datasets]

    # -- validation ------------------------------------------------------

    def validate(self):
        """Raise ConfigError unless every object builds and every location is in-grid."""
        try:
            grid = self.build_grid()
            self.build_truth()
            self.build_prior()
            models = self.build_models(grid)
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        if grid.n_cells > MAX_DENSE_CELLS:
            raise ConfigError(f"grid has {grid.n_cells} cells; dense simulation supports {MAX_DENSE_CELLS}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if not self.datasets:
            raise ConfigError("need at least one dataset")
        for d, m in zip(self.datasets, models):
            sd = np.atleast_1d(np.asarray(d.noise_sd, dtype=np.float64))
            if sd.size not in (1, m.output_dim) or not np.all(np.isfinite(sd) & (sd >= 0)):
                raise ConfigError("dataset noise_sd must be >= 0, one value or one per output")
        if sum(m.output_dim for m in models) == 0:
            raise ConfigError("forward models produce no outputs")
        ta = self.type_a
        if ta.space not in ("transformed", "attribute"):
            raise ConfigError("type_a.space must be 'transformed' or 'attribute'")
        if ta.noise_var < 0:
            raise ConfigError("type_a.noise_var must be >= 0")
        if ta.locations is not None:
            _check_in_grid(grid, ta.locations, "type_a.locations")
        elif not 0 <= ta.count <= grid.n_cells:
            raise ConfigError("type_a.count must be in [0, number of cells]")
        a = self.anchors
        if a.strategy not in ANCHOR_STRATEGIES:
            raise ConfigError(f"anchors.strategy must be one of {ANCHOR_STRATEGIES}")
        if a.count < 0:
            raise ConfigError("anchors.count must be >= 0")
        if a.counts is not None and (len(a.counts) < 2 or any(y <= x for x, y in zip(a.counts, a.counts[1:]))):
            raise ConfigError("anchors.counts must be increasing with at least two entries")
        if a.stability_tol <= 0:
            raise ConfigError("anchors.stability_tol must be > 0")
        inv = self.inversion
        if inv.candidates < 1 or inv.realizations < 1:
            raise ConfigError("inversion sizes must be positive")
        k = inv.knn_k
        if not 2 <= k <= inv.realizations or inv.realizations < max(k + 1, 50):
            raise ConfigError(f"need realizations >= max(k + 1, 50) and 2 <= k, got n={inv.realizations}, k={k}")
        if inv.dependence_realizations < 10 or inv.dependence_bootstrap < 1:
            raise ConfigError("dependence diagnostic sizes too small")
        pr = self.predict
        if pr.fields < 1:
            raise ConfigError("predict.fields must be >= 1")
        if pr.target_locations is not None:
            _check_in_grid(grid, pr.target_locations, "predict.target_locations")
        elif pr.targets < 0 or pr.targets > grid.n_cells:
            raise ConfigError("predict.targets must be in [0, number of cells]")
        return self


def _check_in_grid(grid, locations, what):
    locs = np.asarray(locations, dtype=np.float64).reshape(-1, grid.ndim)
    if not np.all(grid.contains(locs)):
        raise ConfigError(f"{what} has points outside the grid")


def _drop_none(obj):
    # TOML has no null; absent keys mean "use the default"
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_drop_none(v) for v in obj]
    return obj


def demo_config_path():
    return Path(__file__).with_name("data") / "demo16.toml"


def demo_config():
    return ExperimentConfig.load(demo_config_path())
