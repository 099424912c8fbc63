"""Prior sampling, likelihood weighting and the inversion-level operations.

The sampler is prior importance sampling: candidates (theta, anchors) are
drawn from p(theta, anchors | z_a) and weighted by their estimated
likelihood p(z_b | theta, anchors).

Drawing from p(theta, anchors | z_a) follows the factorization
p(anchors_a | z_a) p(theta | anchors_a, z_a) p(anchors_b | theta, anchors_a, z_a).
The middle factor has no closed form, so it is sampled by
sampling-importance-resampling: a pool of theta draws from p(theta) is
weighted by p(anchors_a | theta) (Gaussian, with the Box-Cox Jacobian when
z_a is given in attribute units) and resampled systematically.
"""

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import geostat
from .errors import ConfigError, DegenerateDensityError, InferenceFailure
from .fieldsim import AnchorSet, ConditionalSampler, TypeAData, anchor_prior_logpdf, sample_anchor_prior
from .forward import Composite, TypeBData
from .geostat import StructuralParams
from .likelihood import DensityEstimate, SampleCloud, default_k, knn_density, simulate_predictions
from .rng import STAGE_DIAGNOSTIC, STAGE_LIKELIHOOD, STAGE_PRIOR, generator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Uniform:
    """Uniform density on [low, high]; ``low == high`` is a point mass."""

    low: float
    high: float

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)) or self.high < self.low:
            raise ConfigError(f"empty or unbounded prior support [{self.low}, {self.high}]")

    @classmethod
    def fixed(cls, value):
        return cls(float(value), float(value))

    @property
    def is_fixed(self):
        return self.low == self.high

    def sample(self, rng, size):
        if self.is_fixed:
            return np.full(size, self.low)
        return rng.uniform(self.low, self.high, size)

    def logpdf(self, x):
        if self.is_fixed:
            return 0.0
        return -math.log(self.high - self.low)

    def to_list(self):
        return [self.low, self.high]


def _as_uniform(value):
    if isinstance(value, Uniform):
        return value
    if np.ndim(value) == 0:
        return Uniform.fixed(value)
    low, high = value
    return Uniform(float(low), float(high))


@dataclass
class PriorSpec:
    """Independent marginals for theta.

    Scale parameters are uniform on the log scale; ``kappa`` is a discrete
    set with probabilities (uniform by default). ``oversample`` sets the
    pool size, per requested candidate, for the type-A resampling step.
    """

    beta: list
    log_sigma2: Uniform
    log_phi: Uniform
    lam: Uniform = Uniform(0.0, 0.0)
    nugget: Uniform = Uniform(0.0, 0.0)
    kappa_values: tuple = (0.5,)
    kappa_probs: tuple = None
    oversample: int = 20

    def __post_init__(self):
        if isinstance(self.beta, (Uniform, int, float)):
            self.beta = [self.beta]
        self.beta = [_as_uniform(b) for b in self.beta]
        self.log_sigma2 = _as_uniform(self.log_sigma2)
        self.log_phi = _as_uniform(self.log_phi)
        self.lam = _as_uniform(self.lam)
        self.nugget = _as_uniform(self.nugget)
        self.kappa_values = tuple(float(k) for k in np.atleast_1d(self.kappa_values))
        if not self.kappa_values or any(not k > 0 for k in self.kappa_values):
            raise ConfigError("kappa set must be nonempty and positive")
        probs = np.full(len(self.kappa_values), 1.0 / len(self.kappa_values)) if self.kappa_probs is None \
            else np.asarray(self.kappa_probs, dtype=np.float64)
        if probs.shape != (len(self.kappa_values),) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ConfigError("kappa probabilities must be nonnegative and sum to 1")
        self.kappa_probs = tuple(float(p) for p in probs)
        if self.nugget.low < 0:
            raise ConfigError("nugget prior support must be >= 0")
        if int(self.oversample) < 1:
            raise ConfigError("oversample must be >= 1")

    def sample_thetas(self, rng, size):
        betas = np.column_stack([b.sample(rng, size) for b in self.beta])
        log_s2 = self.log_sigma2.sample(rng, size)
        log_phi = self.log_phi.sample(rng, size)
        lam = self.lam.sample(rng, size)
        nugget = self.nugget.sample(rng, size)
        kidx = rng.choice(len(self.kappa_values), size=size, p=self.kappa_probs) if len(self.kappa_values) > 1 \
            else np.zeros(size, dtype=int)
        return [StructuralParams(betas[i], math.exp(log_s2[i]), math.exp(log_phi[i]), nugget[i],
                                 self.kappa_values[kidx[i]], lam[i]) for i in range(size)]

    def logpdf(self, theta):
        """Log prior density of theta (on the log scale for sigma2 and phi)."""
        lp = sum(b.logpdf(v) for b, v in zip(self.beta, theta.beta))
        lp += self.log_sigma2.logpdf(math.log(theta.sigma2)) + self.log_phi.logpdf(math.log(theta.phi))
        lp += self.lam.logpdf(theta.lam) + self.nugget.logpdf(theta.nugget)
        return lp + math.log(self.kappa_probs[self.kappa_values.index(theta.kappa)])

    def to_dict(self):
        return {"beta": [b.to_list() for b in self.beta], "log_sigma2": self.log_sigma2.to_list(),
                "log_phi": self.log_phi.to_list(), "lam": self.lam.to_list(), "nugget": self.nugget.to_list(),
                "kappa_values": list(self.kappa_values), "kappa_probs": list(self.kappa_probs),
                "oversample": self.oversample}


@dataclass
class Candidate:
    theta: StructuralParams
    anchors: AnchorSet
    log_prior: float = 0.0
    likelihood: object = None
    weight: float = 0.0
    status: str = "pending"
    index: int = 0

    @property
    def log_likelihood(self):
        return -math.inf if self.likelihood is None else self.likelihood.log_value


@dataclass
class PosteriorEnsemble:
    candidates: list
    weights: np.ndarray
    ess: float
    n_degenerate: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.candidates)

    def kappa_marginal(self):
        """Posterior weight on each smoothness value present in the ensemble."""
        out = {}
        for c, w in zip(self.candidates, self.weights):
            out[c.theta.kappa] = out.get(c.theta.kappa, 0.0) + float(w)
        return dict(sorted(out.items()))

    def anchor_values(self):
        return np.array([c.anchors.b_values for c in self.candidates])

    def anchor_mean(self):
        return self.weights @ self.anchor_values()

    def anchor_sd(self):
        vals = self.anchor_values()
        mean = self.weights @ vals
        return np.sqrt(np.maximum(self.weights @ (vals - mean) ** 2, 0.0))


def effective_sample_size(weights):
    w = np.asarray(weights, dtype=np.float64)
    s2 = float(np.sum(w * w))
    return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0


def normalized_weights(log_values):
    """exp(log_values) normalized to sum 1; -inf entries get weight 0."""
    lv = np.asarray(log_values, dtype=np.float64)
    finite = np.isfinite(lv)
    if not finite.any():
        raise InferenceFailure("all candidate likelihoods are zero or degenerate")
    w = np.zeros_like(lv)
    w[finite] = np.exp(lv[finite] - lv[finite].max())
    return w / w.sum()


def systematic_resample(weights, m, rng):
    """Indices of ``m`` systematic-resampling draws from normalized ``weights``."""
    cdf = np.cumsum(np.asarray(weights, dtype=np.float64))
    cdf[-1] = 1.0
    u = (rng.uniform() + np.arange(m)) / m
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


# ---------------------------------------------------------------------------
# prior


def _type_a_loglik(theta, locations, values_t, raw=None):
    """log N(values_t; m(theta), C(theta)) plus the Box-Cox Jacobian of ``raw``."""
    mean = geostat.trend_mean(locations, theta.beta)
    cov = geostat.covariance_matrix(locations, theta, warn=False)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return -math.inf
    r = scipy.linalg.solve_triangular(chol, values_t - mean, lower=True)
    ll = -0.5 * float(r @ r) - float(np.log(np.diag(chol)).sum()) - 0.5 * r.size * math.log(2 * math.pi)
    if raw is not None:
        ll += geostat.boxcox_log_jacobian(raw, theta.lam)
    return ll


def prior_sample(prior, za, anchor_locations, count, seed):
    """Draw ``count`` candidates from p(theta, anchors | z_a).

    With error-free z_a the type-A anchors equal the (transformed) data
    exactly; with noisy z_a they are drawn around the data with the stated
    noise variance and the resampling step weighs them jointly with theta.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    za = za if za is not None else TypeAData.empty(np.asarray(anchor_locations).shape[-1] or 1)
    anchor_locations = np.asarray(anchor_locations, dtype=np.float64).reshape(-1, za.locations.shape[1])
    rng = generator(seed, STAGE_PRIOR, 0)
    n_a = len(za)
    if n_a == 0:
        thetas = prior.sample_thetas(rng, count)
        a_values = [np.zeros(0)] * count
        za_ll = np.zeros(count)
    else:
        pool = count * int(prior.oversample)
        thetas_pool = prior.sample_thetas(rng, pool)
        noise = rng.standard_normal((pool, n_a)) * math.sqrt(za.noise_var)
        raw = za.values if za.space == "attribute" else None
        pool_values, ll = [], np.empty(pool)
        for j, th in enumerate(thetas_pool):
            try:
                vt = za.transformed(th.lam)
            except ValueError:
                pool_values.append(None)
                ll[j] = -math.inf
                continue
            vt = vt + noise[j] if za.noise_var > 0 else vt
            pool_values.append(vt)
            ll[j] = _type_a_loglik(th, za.locations, vt, raw)
        idx = systematic_resample(normalized_weights(ll), count, rng)
        thetas = [thetas_pool[j] for j in idx]
        a_values = [pool_values[j] for j in idx]
        za_ll = ll[idx]
    candidates = []
    for i, (th, va) in enumerate(zip(thetas, a_values)):
        b_rng = generator(seed, STAGE_PRIOR, 1, i)
        cond = TypeAData(za.locations, va) if n_a else TypeAData.empty(za.locations.shape[1])
        vb = sample_anchor_prior(th, cond, anchor_locations, b_rng)
        anchors = AnchorSet(za.locations, va, anchor_locations, vb)
        log_prior = prior.logpdf(th) + za_ll[i] + anchor_prior_logpdf(th, cond, anchor_locations, vb)
        candidates.append(Candidate(th, anchors, log_prior=float(log_prior), index=i))
    return candidates


# ---------------------------------------------------------------------------
# likelihood evaluation and weighting


def _candidate_loglik(candidate, model, zb, n, k, seed, blocks, keep_cloud):
    rng = generator(seed, STAGE_LIKELIHOOD, candidate.index)
    z = simulate_predictions(candidate.theta, candidate.anchors, model, n, rng, zb.noise_sd)
    if blocks is None:
        cloud = SampleCloud.from_points(z)
        return knn_density(cloud, zb.values, k), (z if keep_cloud else None)
    total = 0.0
    last = None
    for sl in blocks:
        last = knn_density(SampleCloud.from_points(z[:, sl]), zb.values[sl], k)
        total += last.log_value
    est = DensityEstimate(math.exp(total) if total < 700 else math.inf, last.k, float("nan"), n, z.shape[1], total)
    return est, (z if keep_cloud else None)


def evaluate_candidates(candidates, model, zb, n, k=None, seed=0, threads=1, blocks=None, keep_clouds=False):
    """Attach a likelihood estimate to each candidate, in place.

    Each candidate's realizations come from its own seed node, so results
    are identical for any ``threads``. Degenerate estimates are marked and
    left without a likelihood. ``blocks`` (list of slices) switches to the
    product of per-block marginal estimates; only the sequential-comparison
    harness uses it.
    """
    if model.output_dim != len(zb):
        raise ConfigError(f"model produces {model.output_dim} outputs, data have {len(zb)}")
    k = default_k(n) if k is None else int(k)
    if n < max(k + 1, 50):
        raise ConfigError(f"need n >= max(k + 1, 50) realizations, got n={n}, k={k}")
    if len(zb) > 10:
        warnings.warn(f"kNN likelihood in {len(zb)} dimensions is unreliable; consider summarizing z_b",
                      stacklevel=2)

    def work(c):
        try:
            return _candidate_loglik(c, model, zb, n, k, seed, blocks, keep_clouds)
        except DegenerateDensityError as exc:
            return exc, None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, candidates))
    else:
        results = [work(c) for c in candidates]
    clouds = []
    for c, (res, cloud) in zip(candidates, results):
        if isinstance(res, DegenerateDensityError):
            c.likelihood, c.status = None, "degenerate"
        else:
            c.likelihood, c.status = res, "ok"
        clouds.append(cloud)
    return clouds if keep_clouds else None


def posterior_weights(candidates):
    """Normalize likelihoods into weights; degenerate candidates get weight 0."""
    if not candidates:
        raise InferenceFailure("no candidates")
    if any(c.status == "pending" for c in candidates):
        raise ConfigError("every candidate needs an evaluated likelihood")
    log_l = np.array([c.log_likelihood if c.status == "ok" else -math.inf for c in candidates])
    weights = normalized_weights(log_l)
    for c, w in zip(candidates, weights):
        c.weight = float(w)
    n_deg = sum(c.status == "degenerate" for c in candidates)
    if n_deg:
        log.info("%d of %d candidates had degenerate likelihoods", n_deg, len(candidates))
    ess = effective_sample_size(weights)
    return PosteriorEnsemble(list(candidates), weights, min(max(ess, 1.0), float(len(candidates))), n_deg)


@dataclass(frozen=True)
class PointEstimate:
    """An ML or MAP pick; ``mode`` labels which criterion produced it."""

    mode: str
    index: int
    candidate: Candidate
    score: float


def point_estimate(ensemble, mode="MAP"):
    """ML: argmax likelihood. MAP: argmax prior x likelihood. Ties go to the lowest index."""
    mode = mode.upper()
    if mode not in ("ML", "MAP"):
        raise ConfigError("mode must be 'ML' or 'MAP'")
    if not len(ensemble):
        raise ConfigError("empty ensemble")
    log_l = np.array([c.log_likelihood if c.status == "ok" else -math.inf for c in ensemble.candidates])
    score = log_l if mode == "ML" else log_l + np.array([c.log_prior for c in ensemble.candidates])
    i = int(np.argmax(score))
    return PointEstimate(mode, i, ensemble.candidates[i], float(score[i]))


def run_inversion(model, zb, za, prior, anchor_locations, n_candidates, n_realizations, k=None, seed=0,
                  threads=1, keep_clouds=False):
    """prior_sample -> evaluate_candidates -> posterior_weights."""
    candidates = prior_sample(prior, za, anchor_locations, n_candidates, seed)
    clouds = evaluate_candidates(candidates, model, zb, n_realizations, k, seed, threads, keep_clouds=keep_clouds)
    ensemble = posterior_weights(candidates)
    if keep_clouds:
        ensemble.diagnostics["clouds"] = clouds
    return ensemble


# ---------------------------------------------------------------------------
# multiple datasets


def _joint_model(datasets):
    if not datasets:
        raise ConfigError("need at least one dataset")
    grid = datasets[0][0].grid
    if any(m.grid != grid for m, _ in datasets):
        raise ConfigError("all datasets must share one grid")
    if len(datasets) == 1:
        return datasets[0]
    model = Composite([m for m, _ in datasets])
    zb = TypeBData(np.concatenate([d.values for _, d in datasets]),
                   np.concatenate([d.noise_sd for _, d in datasets]))
    return model, zb


def assimilate_joint(datasets, za, prior, anchor_locations, n_candidates, n_realizations, k=None, seed=0,
                     threads=1):
    """Invert several type-B datasets jointly by concatenating them into one z_b."""
    model, zb = _joint_model(datasets)
    return run_inversion(model, zb, za, prior, anchor_locations, n_candidates, n_realizations, k, seed, threads)


def naive_sequential_posterior(datasets, za, prior, anchor_locations, n_candidates, n_realizations, k=None,
                               seed=0, threads=1):
    """Product of per-dataset likelihoods, as if the datasets were independent.

    Only valid when the forward processes act on disjoint, far-apart parts
    of the field. Kept for comparison against :func:`assimilate_joint`; it
    reuses the same candidates and realizations so the two differ only in
    the factorization.
    """
    model, zb = _joint_model(datasets)
    sizes = [len(d) for _, d in datasets]
    edges = np.cumsum([0] + sizes)
    blocks = [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    candidates = prior_sample(prior, za, anchor_locations, n_candidates, seed)
    evaluate_candidates(candidates, model, zb, n_realizations, k, seed, threads, blocks=blocks)
    return posterior_weights(candidates)


def canonical_correlation(x, y, rtol=1e-10):
    """Largest canonical correlation between the columns of ``x`` and ``y``."""
    def basis(a):
        a = np.asarray(a, dtype=np.float64)
        a = a.reshape(a.shape[0], -1) - a.mean(axis=0).reshape(1, -1)
        u, s, _ = np.linalg.svd(a, full_matrices=False)
        keep = s > rtol * max(s.max(initial=0.0), 1e-300)
        return u[:, keep]
    qx, qy = basis(x), basis(y)
    if qx.shape[1] == 0 or qy.shape[1] == 0:
        return 0.0
    return float(min(np.linalg.svd(qx.T @ qy, compute_uv=False).max(), 1.0))


@dataclass(frozen=True)
class DependenceResult:
    score: float
    null_upper: float
    null_scores: np.ndarray = field(repr=False, default=None)

    @property
    def inside_null_band(self):
        return self.score <= self.null_upper


def dependence_diagnostic(theta, anchors, model1, model2, n, seed, n_boot=200, level=0.95):
    """Dependence between two forward models' outputs over the shared field.

    Simulates ``n`` conditional fields, evaluates both models on each and
    returns the largest canonical correlation between the two output
    blocks, with the ``level`` quantile of its bootstrap null (rows of the
    two blocks resampled independently).
    """
    if n < 10:
        raise ConfigError("dependence diagnostic needs n >= 10")
    if model1.grid != model2.grid:
        raise ConfigError("models must share one grid")
    rng = generator(seed, STAGE_DIAGNOSTIC, 0)
    fields = ConditionalSampler(model1.grid, theta, anchors.locations, anchors.values).sample(rng, n)
    z1 = model1.evaluate_batch(fields, theta.lam)
    z2 = model2.evaluate_batch(fields, theta.lam)
    score = canonical_correlation(z1, z2)
    null = np.empty(n_boot)
    for b in range(n_boot):
        null[b] = canonical_correlation(z1[rng.integers(0, n, n)], z2[rng.integers(0, n, n)])
    upper = float(np.quantile(null, level)) if n_boot else float("nan")
    return DependenceResult(score, upper, null)


# ---------------------------------------------------------------------------
# anchors


def _split(cells, centers, count):
    """Recursive bisection of ``cells`` into ``count`` strata of near-equal size."""
    if count == 1:
        return [cells]
    pts = centers[cells]
    axis = int(np.argmax(np.ptp(pts, axis=0)))
    order = cells[np.lexsort((cells, pts[:, axis]))]
    left_count = (count + 1) // 2
    cut = int(round(len(order) * left_count / count))
    return _split(order[:cut], centers, left_count) + _split(order[cut:], centers, count - left_count)


def place_anchors(grid, count, strategy="coverage", aux=None, exclude=None, min_separation=0.0):
    """Choose ``count`` anchor locations (cell centers) on ``grid``.

    * ``coverage``: stratified spread; the grid is split by recursive
      bisection into ``count`` equal-size strata and each stratum gets the
      feasible cell nearest its centroid.
    * ``sensitivity``: greedy top cells of the map ``aux`` (one value per
      cell) keeping at least ``min_separation`` between anchors.
    * ``targeted``: feasible cells nearest to the prediction target
      locations ``aux``, cycling through targets when count exceeds them.

    ``exclude`` lists locations (normally the type-A data) whose cells are
    not eligible.
    """
    if count < 0:
        raise ConfigError("anchor count must be >= 0")
    if count == 0:
        return np.zeros((0, grid.ndim))
    centers = grid.centers()
    feasible = np.ones(grid.n_cells, dtype=bool)
    if exclude is not None and np.size(exclude):
        feasible[grid.nearest_cell(exclude)[0]] = False
    if count > feasible.sum():
        raise ConfigError(f"{count} anchors requested but only {int(feasible.sum())} eligible cells")
    chosen = []

    def nearest_free(point, banned):
        d = np.linalg.norm(centers - point, axis=1)
        d[~feasible] = np.inf
        d[list(banned)] = np.inf
        j = int(np.argmin(d))
        return None if not np.isfinite(d[j]) else j

    if strategy == "coverage":
        for stratum in _split(np.arange(grid.n_cells), centers, count):
            j = nearest_free(centers[stratum].mean(axis=0), chosen)
            chosen.append(j)
    elif strategy == "sensitivity":
        if aux is None:
            raise ConfigError("sensitivity placement needs a sensitivity map")
        sens = np.asarray(aux, dtype=np.float64).ravel()
        if sens.shape[0] != grid.n_cells:
            raise ConfigError("sensitivity map must have one value per cell")
        for j in np.lexsort((np.arange(grid.n_cells), -sens)):
            if not feasible[j]:
                continue
            if chosen and np.min(np.linalg.norm(centers[chosen] - centers[j], axis=1)) < min_separation:
                continue
            chosen.append(int(j))
            if len(chosen) == count:
                break
        if len(chosen) < count:
            raise ConfigError(f"only {len(chosen)} anchors satisfy min_separation={min_separation}")
    elif strategy == "targeted":
        if aux is None or not np.size(aux):
            raise ConfigError("targeted placement needs prediction targets")
        targets = geostat.as_locations(aux, grid.ndim)
        i = 0
        while len(chosen) < count:
            j = nearest_free(targets[i % len(targets)], chosen)
            chosen.append(j)
            i += 1
    else:
        raise ConfigError(f"unknown anchor strategy {strategy!r}")
    return centers[np.asarray(chosen, dtype=np.int64)]


@dataclass
class AnchorCountResult:
    chosen: int
    stabilized: bool
    counts: list
    trace: list
    mean_fields: dict = field(repr=False, default_factory=dict)


def select_anchor_count(pipeline, counts, stability_tol, seed, full_trace=False):
    """Smallest count whose predictive mean stops changing.

    ``pipeline(count, seed)`` runs the whole inversion and returns the
    posterior-predictive mean field; every count gets the same seed. The metric between consecutive counts
    is the RMS difference of their mean fields. If no pair falls below
    ``stability_tol`` the largest count is returned with
    ``stabilized=False``.
    """
    counts = [int(c) for c in counts]
    if len(counts) < 2 or any(b <= a for a, b in zip(counts[:-1], counts[1:])):
        raise ConfigError("candidate counts must be an increasing list of length >= 2")
    means, trace = {}, []
    chosen = None
    for i, c in enumerate(counts):
        means[c] = np.asarray(pipeline(c, seed), dtype=np.float64)
        if i == 0:
            continue
        prev = counts[i - 1]
        metric = float(np.sqrt(np.mean((means[c] - means[prev]) ** 2)))
        trace.append(metric)
        if chosen is None and metric < stability_tol:
            chosen = prev
            if not full_trace:
                break
    if chosen is None:
        return AnchorCountResult(counts[-1], False, counts, trace, means)
    return AnchorCountResult(chosen, True, counts, trace, means)
