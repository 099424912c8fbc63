"""File formats.

* Field CSV: header ``x,y,value`` (``x,value`` on 1-D grids), one row per cell.
* Field dump: ``<name>.bin`` holds little-endian float64 values, cell index
  fastest, optionally several fields back to back; ``<name>.json`` holds
  ``{"dims", "spacing", "origin", "count"}``.
* Candidate CSV: one row per candidate with theta fields, anchor values,
  likelihood and weight.

Floats are written with 17 significant digits, so files round-trip exactly
and identical runs produce identical bytes.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fieldsim import AnchorSet, Field
from .geostat import Grid, StructuralParams
from .inversion import Candidate, PosteriorEnsemble, effective_sample_size
from .likelihood import DensityEstimate


def fmt(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_field_csv(path, field):
    grid = field.grid
    header = ["x", "value"] if grid.ndim == 1 else ["x", "y", "value"]
    _write_rows(path, header, ([*c, v] for c, v in zip(grid.centers().tolist(), field.values)))


def read_field_csv(path, grid):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != grid.n_cells:
        raise ConfigError(f"{path}: {len(rows)} rows for {grid.n_cells} cells")
    return Field(grid, [float(r["value"]) for r in rows])


def write_field_bin(path, grid, values):
    """Write one (n_cells,) or several (m, n_cells) fields as raw float64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.atleast_2d(np.asarray(values, dtype="<f8"))
    values.tofile(path.with_suffix(".bin"))
    header = dict(grid.to_dict(), count=int(values.shape[0]), dtype="<f8")
    path.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")


def read_field_bin(path):
    """Returns (grid, values) with values shaped (count, n_cells)."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    grid = Grid(tuple(header["dims"]), tuple(header["spacing"]), tuple(header["origin"]))
    values = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    count = int(header.get("count", 1))
    if values.size != count * grid.n_cells:
        raise ConfigError(f"{path}: expected {count * grid.n_cells} values, found {values.size}")
    return grid, values.reshape(count, grid.n_cells)


def write_vectors_csv(path, values, key="realization"):
    values = np.atleast_2d(values)
    header = [key] + [f"z{j}" for j in range(values.shape[1])]
    _write_rows(path, header, ([i, *row] for i, row in enumerate(values.tolist())))


def read_vectors_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


# ---------------------------------------------------------------------------
# candidates


def candidate_header(n_beta, n_a, n_b):
    return (["index", "status"] + [f"beta{j}" for j in range(n_beta)]
            + ["sigma2", "phi", "nugget", "kappa", "lam"]
            + [f"anchor_a{j}" for j in range(n_a)] + [f"anchor_b{j}" for j in range(n_b)]
            + ["log_prior", "log_likelihood", "likelihood", "knn_k", "knn_r", "weight"])


def write_candidates_csv(path, ensemble):
    cands = ensemble.candidates
    c0 = cands[0]
    header = candidate_header(len(c0.theta.beta), c0.anchors.a_values.size, c0.anchors.n_b)
    rows = []
    for c, w in zip(cands, ensemble.weights):
        th = c.theta
        lk = c.likelihood
        rows.append([c.index, c.status, *th.beta, th.sigma2, th.phi, th.nugget, th.kappa, th.lam,
                     *c.anchors.a_values, *c.anchors.b_values, c.log_prior,
                     c.log_likelihood, lk.value if lk else 0.0, lk.k if lk else 0,
                     lk.r if lk else float("nan"), float(w)])
    _write_rows(path, header, rows)


def read_candidates_csv(path, a_locations, b_locations):
    """Rebuild a PosteriorEnsemble from a candidates CSV and the anchor locations."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path} has no candidates")
    n_beta = sum(1 for k in rows[0] if k.startswith("beta"))
    n_a = sum(1 for k in rows[0] if k.startswith("anchor_a"))
    n_b = sum(1 for k in rows[0] if k.startswith("anchor_b"))
    cands, weights = [], []
    for r in rows:
        th = StructuralParams([float(r[f"beta{j}"]) for j in range(n_beta)], float(r["sigma2"]),
                              float(r["phi"]), float(r["nugget"]), float(r["kappa"]), float(r["lam"]))
        anchors = AnchorSet(a_locations, [float(r[f"anchor_a{j}"]) for j in range(n_a)],
                            b_locations, [float(r[f"anchor_b{j}"]) for j in range(n_b)])
        lk = None
        if r["status"] == "ok":
            lk = DensityEstimate(float(r["likelihood"]), int(r["knn_k"]), float(r["knn_r"]), 0, 0,
                                 float(r["log_likelihood"]))
        cands.append(Candidate(th, anchors, float(r["log_prior"]), lk, float(r["weight"]), r["status"],
                               int(r["index"])))
        weights.append(float(r["weight"]))
    weights = np.asarray(weights)
    ess = effective_sample_size(weights)
    return PosteriorEnsemble(cands, weights, min(max(ess, 1.0), float(len(cands))),
                             sum(c.status == "degenerate" for c in cands))


def read_json(path):
    return json.loads(Path(path).read_text())


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
