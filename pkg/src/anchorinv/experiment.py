"""Configuration-driven synthetic experiments.

The stages are ``simulate`` (truth, z_a, z_b, held-out targets),
``anchors``, ``invert``, ``predict`` and ``diagnose``. Each stage reads
what it needs from a :class:`Run`, so the CLI subcommands can stop after
any one of them.

Writing is serialized and numeric files contain no timings, so a rerun of
the same config and seed reproduces every CSV and ``.bin`` file byte for
byte whatever the thread count. Timings only go to ``manifest.json``.
"""

import contextlib
import csv
import itertools
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, _kernels, io
from .config import ExperimentConfig
from .errors import ConfigError
from .fieldsim import Field, TypeAData, simulate_unconditional
from .forward import TypeBData, add_observation_error, sensitivity_map
from .geostat import inverse_boxcox, trend_mean
from .inversion import (
    PosteriorEnsemble,
    _joint_model,
    dependence_diagnostic,
    effective_sample_size,
    evaluate_candidates,
    place_anchors,
    point_estimate,
    posterior_weights,
    prior_sample,
    select_anchor_count,
)
from .predict import predictive_ensemble, predictive_summary, summary_layers
from .rng import (
    STAGE_ANCHOR_COUNT,
    STAGE_DIAGNOSTIC,
    STAGE_LIKELIHOOD,
    STAGE_PREDICT,
    STAGE_PRIOR,
    STAGE_RESAMPLE,
    STAGE_TRUTH,
    STAGE_TYPE_A,
    STAGE_TYPE_B_NOISE,
    generator,
    seed_sequence,
)

SEED_TREE = {
    "truth": [STAGE_TRUTH],
    "type_a_cells": [STAGE_TYPE_A, 0],
    "type_a_noise": [STAGE_TYPE_A, 1],
    "targets": [STAGE_TYPE_A, 2],
    "type_b_noise": [STAGE_TYPE_B_NOISE, "dataset"],
    "prior_theta": [STAGE_PRIOR, 0],
    "prior_anchor_b": [STAGE_PRIOR, 1, "candidate"],
    "likelihood": [STAGE_LIKELIHOOD, "candidate"],
    "predict": [STAGE_PREDICT, "draw"],
    "resample": [STAGE_RESAMPLE],
    "anchor_count": [STAGE_ANCHOR_COUNT],
    "dependence": [STAGE_DIAGNOSTIC, "pair", STAGE_DIAGNOSTIC, 0],
}


class StageError(Exception):
    """Wraps a library error with the pipeline stage it came from."""

    def __init__(self, stage, error):
        super().__init__(f"stage '{stage}': {error}")
        self.stage = stage
        self.error = error


@dataclass
class SyntheticData:
    grid: object
    truth: Field
    za: TypeAData
    datasets: list
    target_cells: np.ndarray

    @property
    def targets(self):
        return self.grid.centers()[self.target_cells]


@dataclass
class Run:
    config: object
    seed: int
    threads: int = 1
    out: Path = None
    dump_clouds: bool = False
    data: SyntheticData = None
    anchor_locations: np.ndarray = None
    posterior: PosteriorEnsemble = None
    clouds: list = None
    predictive: object = None
    prior_predictive: object = None
    timings: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)

    @contextlib.contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        self.timings[name] = round(time.perf_counter() - t0, 6)
        self.stages.append(name)


# ---------------------------------------------------------------------------
# stages


def simulate_data(config, seed):
    """Synthetic truth, type-A samples, observed type-B vectors and held-out targets."""
    grid = config.build_grid()
    theta = config.build_truth()
    truth = simulate_unconditional(grid, theta, generator(seed, STAGE_TRUTH))
    centers = grid.centers()

    ta = config.type_a
    if ta.locations is not None:
        a_cells, _ = grid.nearest_cell(ta.locations)
    else:
        a_cells = np.sort(generator(seed, STAGE_TYPE_A, 0).choice(grid.n_cells, ta.count, replace=False))
    values = truth.values[a_cells]
    if ta.noise_var > 0:
        values = values + math.sqrt(ta.noise_var) * generator(seed, STAGE_TYPE_A, 1).standard_normal(values.size)
    if ta.space == "attribute":
        values = inverse_boxcox(values, theta.lam)
    za = TypeAData(centers[a_cells], values, ta.noise_var, ta.space)

    datasets = []
    for i, (spec, model) in enumerate(zip(config.datasets, config.build_models(grid))):
        z = model.evaluate(truth, theta.lam)
        z = add_observation_error(z, spec.noise_sd, generator(seed, STAGE_TYPE_B_NOISE, i))
        datasets.append((model, TypeBData(z, spec.noise_sd)))

    pr = config.predict
    if pr.target_locations is not None:
        target_cells, _ = grid.nearest_cell(pr.target_locations)
    else:
        pool = np.setdiff1d(np.arange(grid.n_cells), a_cells)
        if pr.targets > pool.size:
            raise ConfigError(f"{pr.targets} held-out targets requested, {pool.size} cells free")
        target_cells = np.sort(generator(seed, STAGE_TYPE_A, 2).choice(pool, pr.targets, replace=False))
    return SyntheticData(grid, truth, za, datasets, np.asarray(target_cells, dtype=np.int64))


def choose_anchors(config, data, count=None):
    a = config.anchors
    count = a.count if count is None else count
    grid = data.grid
    aux = None
    if a.strategy == "sensitivity":
        # sensitivities at the trend implied by the prior midpoint; no use of the truth
        prior = config.build_prior()
        beta = [0.5 * (b.low + b.high) for b in prior.beta]
        lam = 0.5 * (prior.lam.low + prior.lam.high)
        model, _ = _joint_model(data.datasets)
        aux = sensitivity_map(model, Field(grid, trend_mean(grid.centers(), beta)), lam)
    elif a.strategy == "targeted":
        aux = data.targets
    return place_anchors(grid, count, a.strategy, aux, exclude=data.za.locations if len(data.za) else None,
                         min_separation=a.min_separation)


def invert(config, data, anchor_locations, seed, threads=1, keep_clouds=False):
    inv = config.inversion
    model, zb = _joint_model(data.datasets)
    candidates = prior_sample(config.build_prior(), data.za, anchor_locations, inv.candidates, seed)
    clouds = evaluate_candidates(candidates, model, zb, inv.realizations, inv.knn_k, seed, threads,
                                 keep_clouds=keep_clouds)
    return posterior_weights(candidates), clouds


def uniform_weights(posterior):
    """The same candidates with equal weights: the predictive given z_a only."""
    n = len(posterior)
    return PosteriorEnsemble(posterior.candidates, np.full(n, 1.0 / n), float(n))


def predict(config, data, posterior, seed):
    m = config.predict.fields
    return (predictive_ensemble(posterior, data.grid, m, seed, data.targets),
            predictive_ensemble(uniform_weights(posterior), data.grid, m, seed, data.targets))


def target_metrics(data, ensemble):
    if data.target_cells.size == 0:
        return {}
    s = predictive_summary(ensemble, data.targets)
    truth = data.truth.values[data.target_cells]
    return {"rmse": float(np.sqrt(np.mean((s.mean - truth) ** 2))),
            "mean_variance": float(np.mean(s.variance)),
            "coverage90": float(np.mean((s.quantiles[0.05] <= truth) & (truth <= s.quantiles[0.95])))}


def dependence_scores(config, data, posterior, seed):
    """Pairwise dependence scores between datasets at the MAP candidate."""
    if len(data.datasets) < 2:
        return []
    best = point_estimate(posterior, "MAP").candidate
    inv = config.inversion
    out = []
    for p, (i, j) in enumerate(itertools.combinations(range(len(data.datasets)), 2)):
        res = dependence_diagnostic(best.theta, best.anchors, data.datasets[i][0], data.datasets[j][0],
                                    inv.dependence_realizations, seed_sequence(seed, STAGE_DIAGNOSTIC, p),
                                    inv.dependence_bootstrap)
        out.append({"datasets": [i, j], "score": res.score, "null_upper95": res.null_upper,
                    "inside_null_band": bool(res.inside_null_band)})
    return out


def anchor_count_search(config, data, seed, threads=1):
    a = config.anchors
    if a.counts is None:
        raise ConfigError("select-anchors needs anchors.counts in the config")

    def pipeline(count, s):
        locs = choose_anchors(config, data, count)
        post, _ = invert(config, data, locs, s, threads)
        ens, _ = predict(config, data, post, s)
        return ens.mean()

    return select_anchor_count(pipeline, a.counts, a.stability_tol, seed_sequence(seed, STAGE_ANCHOR_COUNT),
                               full_trace=True)


# ---------------------------------------------------------------------------
# writing


def write_data(run):
    d = run.data
    out = run.out
    io.write_field_bin(out / "fields" / "truth", d.grid, d.truth.values)
    io.write_field_csv(out / "fields" / "truth.csv", d.truth)
    io._write_rows(out / "data" / "type_a.csv", _loc_header(d.grid) + ["value"],
                   ([*loc, v] for loc, v in zip(d.za.locations.tolist(), d.za.values.tolist())))
    rows = []
    for i, (_, zb) in enumerate(d.datasets):
        rows += [[i, j, v, s] for j, (v, s) in enumerate(zip(zb.values.tolist(), zb.noise_sd.tolist()))]
    io._write_rows(out / "data" / "type_b.csv", ["dataset", "component", "value", "noise_sd"], rows)
    io._write_rows(out / "data" / "targets.csv", ["cell"] + _loc_header(d.grid),
                   ([int(c), *loc] for c, loc in zip(d.target_cells, d.targets.tolist())))


def write_inversion(run):
    out = run.out
    io.write_candidates_csv(out / "candidates.csv", run.posterior)
    locs = run.posterior.candidates[0].anchors
    rows = [["a", i, *loc] for i, loc in enumerate(locs.a_locations.tolist())]
    rows += [["b", i, *loc] for i, loc in enumerate(locs.b_locations.tolist())]
    io._write_rows(out / "anchors.csv", ["kind", "index"] + _loc_header(run.data.grid), rows)
    if run.clouds is not None:
        for c, cloud in zip(run.posterior.candidates, run.clouds):
            if cloud is not None:
                io.write_vectors_csv(out / "clouds" / f"candidate_{c.index:05d}.csv", cloud)


def write_predictions(run):
    out = run.out
    grid = run.data.grid
    io.write_field_bin(out / "fields" / "predictive", grid, run.predictive.values)
    for name, layer in summary_layers(run.predictive).items():
        io.write_field_csv(out / "summary" / f"{name}.csv", Field(grid, layer))
    for name, ens in (("targets", run.predictive), ("prior_targets", run.prior_predictive)):
        if run.data.target_cells.size:
            s = predictive_summary(ens, run.data.targets)
            io._write_rows(out / "summary" / f"{name}.csv",
                           _loc_header(grid) + ["cell", "truth", "mean", "variance", "q05", "q50", "q95"],
                           ([*r[:grid.ndim + 1], float(run.data.truth.values[r[grid.ndim]]), *r[grid.ndim + 1:]]
                            for r in s.rows()))


def write_anchor_count(run, result):
    rows = [[a, b, m] for a, b, m in zip(result.counts[:-1], result.counts[1:], result.trace)]
    io._write_rows(run.out / "summary" / "anchor_count.csv", ["count", "next_count", "rms_change"], rows)


def _loc_header(grid):
    return ["x"] if grid.ndim == 1 else ["x", "y"]


def manifest(run, command):
    cfg = run.config
    m = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": run.seed,
        "seed_tree": SEED_TREE,
        "threads": run.threads,
        "backend": _kernels.get_backend(),
        "python": platform.python_version(),
        "stages": list(run.stages),
        "timings": dict(run.timings),
    }
    if run.data is not None:
        m["data"] = {"n_type_a": len(run.data.za), "type_b_dims": [len(z) for _, z in run.data.datasets],
                     "n_targets": int(run.data.target_cells.size)}
    if run.posterior is not None:
        post = run.posterior
        m["inversion"] = {"n_candidates": len(post), "n_realizations": cfg.inversion.realizations,
                          "k": cfg.inversion.knn_k, "ess": post.ess, "n_degenerate": post.n_degenerate,
                          "kappa_marginal": {repr(k): v for k, v in post.kappa_marginal().items()},
                          "n_anchors_b": int(post.candidates[0].anchors.n_b)}
    m.update(run.results)
    return m


# ---------------------------------------------------------------------------
# orchestration


def plan(config, command, seed, threads, out):
    """Human-readable execution plan; nothing is computed."""
    grid = config.build_grid()
    models = config.build_models(grid)
    inv = config.inversion
    d_b = sum(m.output_dim for m in models)
    lines = [f"command: {command}", f"config hash: {config.config_hash()}", f"master seed: {seed}",
             f"threads: {threads}", f"output: {out}", f"kernels: {_kernels.get_backend()}",
             f"grid: {'x'.join(str(n) for n in grid.dims)} cells ({grid.n_cells})",
             f"type-A data: {len(config.type_a.locations) if config.type_a.locations is not None else config.type_a.count}",
             f"datasets: {len(models)} ({', '.join(m.kind for m in models)}), d_B = {d_b}"]
    steps = ["simulate: truth field, type-A samples, type-B observations, held-out targets"]
    if command in ("invert", "predict", "run", "select-anchors"):
        steps += [f"anchors: {config.anchors.strategy}, {config.anchors.count} type-B anchors",
                  f"invert: {inv.candidates} candidates x {inv.realizations} realizations "
                  f"({inv.candidates * inv.realizations} forward runs), k = {inv.knn_k}"]
    if command in ("predict", "run"):
        steps.append(f"predict: {config.predict.fields} posterior and prior-predictive fields")
        if len(models) > 1:
            steps.append("diagnose: pairwise dependence scores")
    if command == "select-anchors":
        steps.append(f"select-anchors: counts {config.anchors.counts}, tol {config.anchors.stability_tol}")
    return "\n".join(lines + ["stages:"] + [f"  {i + 1}. {s}" for i, s in enumerate(steps)])


def execute(config, command, seed=None, out=None, threads=1, dump_clouds=False):
    """Run ``command`` ("simulate", "invert", "predict", "run", "select-anchors")."""
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    run = Run(config, config.seed if seed is None else int(seed), threads,
              Path(out if out is not None else config.output_dir), dump_clouds)
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "config.toml").write_text(config.dumps())
    with run.stage("simulate"):
        run.data = simulate_data(config, run.seed)
        write_data(run)
    if command == "select-anchors":
        with run.stage("select-anchors"):
            res = anchor_count_search(config, run.data, run.seed, threads)
            write_anchor_count(run, res)
            run.results["anchor_count"] = {"chosen": res.chosen, "stabilized": res.stabilized,
                                           "counts": res.counts, "trace": res.trace,
                                           "tol": config.anchors.stability_tol}
    elif command != "simulate":
        with run.stage("anchors"):
            run.anchor_locations = choose_anchors(config, run.data)
        with run.stage("invert"):
            run.posterior, run.clouds = invert(config, run.data, run.anchor_locations, run.seed, threads,
                                               keep_clouds=dump_clouds)
            write_inversion(run)
        if command in ("predict", "run"):
            run_prediction(run)
    io.write_json(run.out / "manifest.json", manifest(run, command))
    return run


def run_prediction(run):
    with run.stage("predict"):
        run.predictive, run.prior_predictive = predict(run.config, run.data, run.posterior, run.seed)
        write_predictions(run)
        run.results["predictive"] = {"posterior": target_metrics(run.data, run.predictive),
                                     "prior": target_metrics(run.data, run.prior_predictive),
                                     "mean_field_variance": float(run.predictive.variance().mean()),
                                     "prior_mean_field_variance": float(run.prior_predictive.variance().mean())}
    if len(run.data.datasets) > 1:
        with run.stage("dependence"):
            run.results["dependence"] = dependence_scores(run.config, run.data, run.posterior, run.seed)


def predict_from_dir(run_dir, config=None, seed=None, threads=1):
    """Predict from an existing run directory's candidates.csv."""
    run_dir = Path(run_dir)
    cand_path = run_dir / "candidates.csv"
    if not cand_path.is_file():
        raise ConfigError(f"{cand_path} not found; run 'invert' first")
    config = config or ExperimentConfig.load(run_dir / "config.toml")
    if seed is None:
        old = io.read_json(run_dir / "manifest.json") if (run_dir / "manifest.json").is_file() else {}
        seed = old.get("seed", config.seed)
    run = Run(config, int(seed), threads, run_dir)
    with run.stage("simulate"):
        run.data = simulate_data(config, run.seed)
    with run.stage("load"):
        a_locs, b_locs = _read_anchor_locations(run_dir / "anchors.csv", run.data.grid.ndim)
        run.posterior = io.read_candidates_csv(cand_path, a_locs, b_locs)
    run_prediction(run)
    io.write_json(run_dir / "manifest.json", manifest(run, "predict"))
    return run


def _read_anchor_locations(path, ndim):
    if not path.is_file():
        raise ConfigError(f"{path} not found")
    a, b = [], []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            loc = [float(r["x"])] + ([float(r["y"])] if ndim == 2 else [])
            (a if r["kind"] == "a" else b).append(loc)
    return np.asarray(a).reshape(-1, ndim), np.asarray(b).reshape(-1, ndim)


def diagnose(run_dir):
    """Report assembled from the manifest plus a recount of candidates.csv."""
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.is_file():
        raise ConfigError(f"no manifest.json in {run_dir}")
    man = io.read_json(mpath)
    report = {"run_dir": str(run_dir), "command": man.get("command"), "config_hash": man.get("config_hash"),
              "seed": man.get("seed")}
    cpath = run_dir / "candidates.csv"
    if cpath.is_file():
        with open(cpath, newline="") as fh:
            rows = list(csv.DictReader(fh))
        w = np.array([float(r["weight"]) for r in rows])
        kappa = {}
        for r, wi in zip(rows, w):
            kappa[r["kappa"]] = kappa.get(r["kappa"], 0.0) + float(wi)
        ess = effective_sample_size(w)
        report.update({"n_candidates": len(rows), "ess": min(max(ess, 1.0), float(len(rows))),
                       "n_degenerate": sum(r["status"] == "degenerate" for r in rows),
                       "kappa_marginal": dict(sorted(kappa.items(), key=lambda kv: float(kv[0])))})
    for key in ("dependence", "anchor_count", "predictive"):
        if key in man:
            report[key] = man[key]
    return report


def format_report(report):
    lines = [f"run: {report['run_dir']}  (command {report.get('command')}, seed {report.get('seed')})"]
    if "n_candidates" in report:
        lines.append(f"candidates: {report['n_candidates']}   ESS: {report['ess']:.2f}   "
                     f"degenerate: {report['n_degenerate']}")
        lines.append("kappa marginal: " + ", ".join(f"{k}: {v:.4f}" for k, v in report["kappa_marginal"].items()))
    for dep in report.get("dependence", []):
        flag = "inside" if dep["inside_null_band"] else "OUTSIDE"
        lines.append(f"dependence datasets {dep['datasets']}: score {dep['score']:.4f}, "
                     f"null 95% {dep['null_upper95']:.4f} ({flag} null band)")
    if "anchor_count" in report:
        ac = report["anchor_count"]
        lines.append(f"anchor count: chosen {ac['chosen']} (stabilized: {ac['stabilized']})")
        lines.append("  trace: " + ", ".join(f"{a}->{b}: {m:.4g}"
                                             for a, b, m in zip(ac["counts"], ac["counts"][1:], ac["trace"])))
    if "predictive" in report and report["predictive"].get("posterior"):
        p, q = report["predictive"]["posterior"], report["predictive"]["prior"]
        lines.append(f"held-out RMSE: posterior {p['rmse']:.4f}, prior {q['rmse']:.4f}; "
                     f"mean variance: posterior {p['mean_variance']:.4f}, prior {q['mean_variance']:.4f}")
    return "\n".join(lines)
