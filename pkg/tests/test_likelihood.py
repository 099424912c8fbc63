import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorinv.errors import ConfigError, DegenerateDensityError, DomainError
from anchorinv.fieldsim import AnchorSet, TypeAData
from anchorinv.forward import LinearObserver, TypeBData
from anchorinv.geostat import Grid, StructuralParams
from anchorinv.likelihood import (
    SampleCloud,
    default_k,
    estimate_likelihood,
    knn_density,
    unit_ball_volume,
)


def brute_knn(points, point, k):
    """Oracle: sort all distances in original units, apply the formula directly."""
    r = np.sort(np.linalg.norm(points - point, axis=1))[k - 1]
    d = points.shape[1]
    return (k - 1) / points.shape[0] / (math.pi ** (d / 2) / math.gamma(1 + d / 2) * r ** d)


@pytest.mark.parametrize("d,want", [(1, 2.0), (2, math.pi), (3, 4 * math.pi / 3), (4, math.pi ** 2 / 2),
                                    (5, 8 * math.pi ** 2 / 15)])
def test_unit_ball_volume(d, want):
    assert unit_ball_volume(d) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("d", [0, -1, 1.5])
def test_unit_ball_volume_domain(d):
    with pytest.raises(DomainError):
        unit_ball_volume(d)


def test_default_k():
    assert default_k(400) == 20
    assert default_k(4) == 2 and default_k(2) == 2


def test_knn_direct_substitution():
    # n = 100, k = 10, the 10th neighbour at distance 0.05
    pts = np.concatenate([np.full(9, 0.01), [0.05], np.linspace(1.0, 2.0, 90)])
    cloud = SampleCloud.from_points(pts, standardize=False)
    est = knn_density(cloud, [0.0], 10)
    assert est.r == pytest.approx(0.05, abs=1e-15)
    assert est.value == pytest.approx(0.9, rel=1e-12)
    assert (est.k, est.n, est.d) == (10, 100, 1)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(5, 200), st.integers(0, 10_000), st.booleans())
def test_knn_matches_brute_force(d, n, seed, standardize):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0, d)
    q = rng.normal(size=d)
    k = int(rng.integers(2, n + 1))
    cloud = SampleCloud.from_points(pts, standardize)
    est = knn_density(cloud, q, k)
    if standardize:
        # oracle in standardized units, then the Jacobian
        want = brute_knn(cloud.standardized(), (q - cloud.shift) / cloud.scale, k) / np.prod(cloud.scale)
    else:
        want = brute_knn(pts, q, k)
    assert est.value == pytest.approx(want, rel=1e-12)
    assert est.log_value == pytest.approx(math.log(want), abs=1e-12 * max(1, abs(math.log(want))))


def test_knn_2d_normal_origin():
    pts = np.random.default_rng(0).standard_normal((10_000, 2))
    est = knn_density(SampleCloud.from_points(pts), [0.0, 0.0], 100)
    assert est.value == pytest.approx(1 / (2 * math.pi), rel=0.15)


def test_knn_invariances():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(300, 3))
    q = np.array([0.1, -0.2, 0.3])
    base = knn_density(SampleCloud.from_points(pts), q, 17).value
    perm = knn_density(SampleCloud.from_points(pts[rng.permutation(300)]), q, 17).value
    shift = np.array([5.0, -3.0, 2.0])
    moved = knn_density(SampleCloud.from_points(pts + shift), q + shift, 17).value
    assert perm == pytest.approx(base, rel=1e-12)
    assert moved == pytest.approx(base, rel=1e-10)


@pytest.mark.parametrize("c", [0.1, 3.0, 250.0])
def test_knn_scaling_changes_density_by_one_over_c(c):
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(500, 2))
    q = np.array([0.2, 0.4])
    base = knn_density(SampleCloud.from_points(pts), q, 22).value
    pts2, q2 = pts.copy(), q.copy()
    pts2[:, 1] *= c
    q2[1] *= c
    assert knn_density(SampleCloud.from_points(pts2), q2, 22).value == pytest.approx(base / c, rel=1e-10)


def test_knn_degenerate():
    pts = np.vstack([np.zeros((5, 1)), np.ones((5, 1))])
    with pytest.raises(DegenerateDensityError):
        knn_density(SampleCloud.from_points(pts), [0.0], 3)
    with pytest.raises(DegenerateDensityError):
        SampleCloud.from_points(np.ones((5, 2)))


def test_knn_argument_checks():
    cloud = SampleCloud.from_points(np.random.default_rng(0).normal(size=(10, 2)))
    with pytest.raises(ConfigError):
        knn_density(cloud, [0.0], 3)
    with pytest.raises(ConfigError):
        knn_density(cloud, [0.0, 0.0], 1)
    with pytest.raises(ConfigError):
        knn_density(cloud, [0.0, 0.0], 11)
    with pytest.raises(ConfigError):
        SampleCloud.from_points(np.zeros((1, 2)))


def test_knn_1d_consistency_decreases_with_n():
    truth = 1 / math.sqrt(2 * math.pi)
    errs = []
    for n in (500, 5000, 50_000):
        e = [abs(knn_density(SampleCloud.from_points(np.random.default_rng(s).standard_normal(n)), [0.0],
                             default_k(n)).value / truth - 1) for s in range(20)]
        errs.append(np.mean(e))
    assert errs[0] > errs[1] > errs[2]


# -- estimate_likelihood ------------------------------------------------------------


def single_cell():
    grid = Grid((1,), 1.0)
    return grid, LinearObserver.select(grid, [0]), StructuralParams([0.0], 1.0, 1.0)


def test_estimate_standard_normal_oracle():
    grid, model, th = single_cell()
    anchors = AnchorSet(np.zeros((0, 1)), [], np.zeros((0, 1)))
    est = estimate_likelihood(th, anchors, None, model, TypeBData([0.0]), 5000, seed=3)
    assert est.value == pytest.approx(1 / math.sqrt(2 * math.pi), rel=0.15)
    assert est.k == 71


def test_estimate_degenerate_when_anchors_fix_output():
    grid, model, th = single_cell()
    anchors = AnchorSet(np.zeros((0, 1)), [], [[0.5]], [0.3])
    with pytest.raises(DegenerateDensityError):
        estimate_likelihood(th, anchors, None, model, TypeBData([0.3]), 100)


def test_estimate_noise_removes_degeneracy():
    grid, model, th = single_cell()
    anchors = AnchorSet(np.zeros((0, 1)), [], [[0.5]], [0.3])
    est = estimate_likelihood(th, anchors, None, model, TypeBData([0.3], 0.2), 2000, seed=1)
    assert est.value == pytest.approx(1 / (0.2 * math.sqrt(2 * math.pi)), rel=0.15)


def test_estimate_doubling_n_within_sampling_noise():
    grid, model, th = single_cell()
    anchors = AnchorSet(np.zeros((0, 1)), [], np.zeros((0, 1)))
    a = estimate_likelihood(th, anchors, None, model, TypeBData([0.5]), 1000, seed=10)
    b = estimate_likelihood(th, anchors, None, model, TypeBData([0.5]), 2000, seed=11)
    # relative sd of a kNN estimate is about 1/sqrt(k)
    noise = math.sqrt(1 / a.k + 1 / b.k)
    assert abs(a.value - b.value) / b.value < 3 * noise


def test_estimate_deterministic_given_seed():
    grid = Grid((6,), 1.0)
    model = LinearObserver.window_means(grid, [[0, 1], [3, 4, 5]])
    th = StructuralParams([0.0], 1.0, 2.0)
    anchors = AnchorSet(np.zeros((0, 1)), [], [[2.5]], [0.4])
    e1 = estimate_likelihood(th, anchors, None, model, TypeBData([0.1, 0.2], 0.05), 200, seed=5)
    e2 = estimate_likelihood(th, anchors, None, model, TypeBData([0.1, 0.2], 0.05), 200, seed=5)
    assert e1 == e2


def test_estimate_preconditions():
    grid, model, th = single_cell()
    anchors = AnchorSet(np.zeros((0, 1)), [], np.zeros((0, 1)))
    with pytest.raises(ConfigError):
        estimate_likelihood(th, anchors, None, model, TypeBData([0.0]), 49)
    with pytest.raises(ConfigError):
        estimate_likelihood(th, anchors, None, model, TypeBData([0.0, 1.0]), 100)
    za = TypeAData([[0.5]], [0.0])
    with pytest.raises(ConfigError):
        estimate_likelihood(th, anchors, za, model, TypeBData([0.0]), 100)


def test_estimate_high_dimension_warns():
    grid = Grid((12,), 1.0)
    model = LinearObserver.select(grid, list(range(11)))
    th = StructuralParams([0.0], 1.0, 2.0)
    anchors = AnchorSet(np.zeros((0, 1)), [], np.zeros((0, 1)))
    with pytest.warns(UserWarning, match="dimensions"):
        estimate_likelihood(th, anchors, None, model, TypeBData(np.zeros(11), 0.1), 60, k=5)
