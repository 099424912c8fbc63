import numpy as np
import pytest
import scipy.sparse
import scipy.sparse.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorinv.errors import ConfigError, DomainError
from anchorinv.fieldsim import Field, simulate_unconditional
from anchorinv.forward import (
    BoundaryConditions,
    Composite,
    Darcy2D,
    LinearObserver,
    TypeBData,
    add_observation_error,
    boundary_fluxes,
    cell_residuals,
    darcy2d_solve,
    evaluate,
    model_from_dict,
    sensitivity_map,
    solve_heads_batch,
)
from anchorinv.geostat import Grid, StructuralParams

LR = BoundaryConditions(left=1.0, right=0.0)


def sparse_oracle(grid, K, bc):
    """Independent assembly of the same finite-volume system with scipy.sparse."""
    nx, ny = grid.dims if grid.ndim == 2 else (grid.dims[0], 1)
    dx, dy = grid.spacing if grid.ndim == 2 else (grid.spacing[0], 1.0)
    K = np.asarray(K).reshape(ny, nx)
    A = scipy.sparse.lil_matrix((nx * ny, nx * ny))
    b = np.zeros(nx * ny)
    hb = dict(zip(("left", "right", "bottom", "top"), bc.as_tuple()))

    def idx(i, j):
        return j * nx + i

    for j in range(ny):
        for i in range(nx):
            p = idx(i, j)
            for di, dj, face, side in ((1, 0, dy / dx, "right"), (-1, 0, dy / dx, "left"),
                                       (0, 1, dx / dy, "top"), (0, -1, dx / dy, "bottom")):
                ii, jj = i + di, j + dj
                if 0 <= ii < nx and 0 <= jj < ny:
                    t = face * 2 * K[j, i] * K[jj, ii] / (K[j, i] + K[jj, ii])
                    A[p, p] += t
                    A[p, idx(ii, jj)] -= t
                elif not np.isnan(hb[side]):
                    t = face * 2 * K[j, i]
                    A[p, p] += t
                    b[p] += t * hb[side]
    return scipy.sparse.linalg.spsolve(A.tocsr(), b)


def rand_K(grid, seed, sigma2=1.0):
    th = StructuralParams([0.0], sigma2, 3.0, 0.0, 1.5)
    return np.exp(simulate_unconditional(grid, th, seed).values)


# -- Darcy: analytic cases -----------------------------------------------------


@pytest.mark.parametrize("dims", [(9, 5), (5, 9), (16, 16), (12,)])
def test_constant_k_linear_profile(dims, backend):
    grid = Grid(dims, 1.0)
    heads = darcy2d_solve(Field(grid, np.full(grid.n_cells, 3.7)), LR).values
    x = grid.centers()[:, 0]
    np.testing.assert_allclose(heads, 1.0 - x / dims[0], atol=1e-8)


def test_mid_column_head_half(backend):
    grid = Grid((9, 5), 1.0)
    heads = darcy2d_solve(Field(grid, np.ones(45)), LR).as_2d()
    np.testing.assert_allclose(heads[:, 4], 0.5, atol=1e-8)


def test_k_scaling_leaves_heads_unchanged(backend):
    grid = Grid((10, 7), (1.0, 2.0))
    K = rand_K(grid, 1)
    bc = BoundaryConditions(left=2.0, right=0.5, top=1.0)
    h1 = solve_heads_batch(grid, K, bc)[0]
    h2 = solve_heads_batch(grid, 17.0 * K, bc)[0]
    np.testing.assert_allclose(h1, h2, atol=1e-12)


@pytest.mark.parametrize("dims", [(20,), (20, 3)])
def test_two_layer_series_harmonic(dims, backend):
    grid = Grid(dims, 1.0)
    x = grid.centers()[:, 0]
    K = np.where(x < 10, 10.0, 1.0)
    heads = solve_heads_batch(grid, K, LR)[0]
    q = 1.0 / (10 / 10.0 + 10 / 1.0)  # series resistance L1/K1 + L2/K2
    h_interface = 1.0 - q * 10 / 10.0
    want = np.where(x < 10, 1.0 - q * x / 10.0, h_interface - q * (x - 10) / 1.0)
    np.testing.assert_allclose(heads, want, atol=1e-6)
    assert h_interface == pytest.approx(10 / 11)
    flux = boundary_fluxes(grid, K, heads, LR)
    assert flux["left"] == pytest.approx(q * (dims[1] if len(dims) > 1 else 1), rel=1e-10)


@pytest.mark.parametrize("dims", [(16, 16), (13, 6), (6, 13)])
def test_mass_balance(dims, backend):
    grid = Grid(dims, (1.0, 0.5))
    K = rand_K(grid, 3, 2.0)
    bc = BoundaryConditions(left=1.0, right=0.0, bottom=0.3)
    heads = solve_heads_batch(grid, K, bc)[0]
    res = cell_residuals(grid, K, heads, bc)
    fluxes = boundary_fluxes(grid, K, heads, bc)
    scale = sum(abs(v) for v in fluxes.values())
    assert np.max(np.abs(res)) < 1e-8 * scale
    assert abs(sum(fluxes.values())) < 1e-8 * scale


@pytest.mark.parametrize("dims", [(16, 16), (11, 7), (7, 11), (25,)])
def test_matches_sparse_oracle(dims, backend):
    grid = Grid(dims, (1.0, 1.5) if len(dims) == 2 else 1.0)
    K = rand_K(grid, 5)
    bc = BoundaryConditions(left=1.0, right=0.0, top=0.5) if len(dims) == 2 else LR
    np.testing.assert_allclose(solve_heads_batch(grid, K, bc)[0], sparse_oracle(grid, K, bc), atol=1e-10)


def test_grid_refinement_oracle():
    coarse = Grid((16, 16), 1.0)
    fine = Grid((64, 64), 0.25)
    K = rand_K(coarse, 11, 0.5).reshape(16, 16)
    K_fine = np.kron(K, np.ones((4, 4)))
    wells = np.array([[4.5, 4.5], [8.5, 11.5], [12.5, 6.5], [2.5, 13.5]])
    hc = solve_heads_batch(coarse, K.ravel(), LR)[0]
    hf = solve_heads_batch(fine, K_fine.ravel(), LR)[0].reshape(64, 64)
    coarse_vals = hc[coarse.nearest_cell(wells)[0]]
    # a coarse cell center is a fine-grid vertex: average its four fine neighbours
    fine_vals = []
    for x, y in wells:
        i, j = int(round(x / 0.25)), int(round(y / 0.25))
        fine_vals.append(hf[j - 1:j + 1, i - 1:i + 1].mean())
    np.testing.assert_allclose(coarse_vals, fine_vals, atol=0.02)


def test_refining_k_in_subregion_raises_flux():
    grid = Grid((12, 12), 1.0)
    K = rand_K(grid, 2)
    h = solve_heads_batch(grid, K, LR)[0]
    base = boundary_fluxes(grid, K, h, LR)["left"]
    K2 = K.reshape(12, 12).copy()
    K2[3:8, 4:9] *= 5.0
    h2 = solve_heads_batch(grid, K2.ravel(), LR)[0]
    assert boundary_fluxes(grid, K2.ravel(), h2, LR)["left"] >= base


def test_all_no_flow_is_config_error():
    with pytest.raises(ConfigError):
        BoundaryConditions()


def test_nonpositive_conductivity():
    with pytest.raises(DomainError):
        solve_heads_batch(Grid((4, 4), 1.0), -np.ones(16), LR)


def test_pumping_source_lowers_heads():
    grid = Grid((9, 9), 1.0)
    m = model_from_dict(grid, {"kind": "darcy2d", "bc": {"left": 1.0, "right": 1.0},
                               "wells": [[4.5, 4.5]], "wells_pumping": [[[4.5, 4.5], 0.2]]})
    out = m.evaluate(Field(grid, np.zeros(81)))
    assert out[0] < 1.0


# -- models ----------------------------------------------------------------------


def test_linear_observer_selects_cell():
    grid = Grid((10,), 1.0)
    f = Field(grid, np.arange(10.0) * 1.5)
    m = LinearObserver.select(grid, [5])
    assert evaluate(m, f).tolist() == [7.5]
    m_exp = LinearObserver.select(grid, [5], transform="exp")
    assert evaluate(m_exp, f)[0] == pytest.approx(np.exp(7.5))


def test_linear_observer_weights_and_windows():
    grid = Grid((6,), 1.0)
    w = np.eye(6)[[1, 4]]
    f = Field(grid, np.arange(6.0))
    assert evaluate(LinearObserver(grid, w), f).tolist() == [1.0, 4.0]
    assert evaluate(LinearObserver.window_means(grid, [[0, 1, 2]]), f).tolist() == [1.0]


def test_darcy_model_outputs():
    grid = Grid((9, 5), 1.0)
    m = Darcy2D(grid, LR, [[4.5, 2.5], [0.5, 0.5]], ("mean_head", "inflow"), transform="exp")
    out = m.evaluate(Field(grid, np.zeros(45)))
    assert m.output_dim == 4
    np.testing.assert_allclose(out[:3], [0.5, 1 - 0.5 / 9, 0.5], atol=1e-10)
    assert out[3] == pytest.approx(5 / 9, rel=1e-10)


def test_forward_referential_transparency():
    grid = Grid((8, 8), 1.0)
    m = Darcy2D(grid, LR, [[2.5, 2.5]], ("inflow",))
    f = Field(grid, np.log(rand_K(grid, 4)))
    assert m.evaluate(f).tobytes() == m.evaluate(f).tobytes()


def test_grid_mismatch_rejected():
    m = LinearObserver.select(Grid((5,), 1.0), [1])
    with pytest.raises(ConfigError):
        m.evaluate(Field(Grid((6,), 1.0), np.zeros(6)))


def test_composite_concatenates():
    grid = Grid((6,), 1.0)
    c = Composite([LinearObserver.select(grid, [0, 1]), LinearObserver.select(grid, [5])])
    assert c.output_dim == 3
    assert evaluate(c, Field(grid, np.arange(6.0))).tolist() == [0.0, 1.0, 5.0]
    with pytest.raises(ConfigError):
        Composite([LinearObserver.select(grid, [0]), LinearObserver.select(Grid((7,), 1.0), [0])])


def test_model_from_dict_round_trip():
    grid = Grid((8, 8), 1.0)
    spec = {"kind": "darcy2d", "bc": {"left": 1.0, "right": 0.0}, "wells": [[1.5, 1.5]],
            "summaries": ["inflow"], "transform": "attribute"}
    m = model_from_dict(grid, spec)
    assert m.to_dict() == spec
    m2 = model_from_dict(grid, {"kind": "composite", "models": [spec, {"kind": "linear_observer", "cells": [3]}]})
    assert m2.output_dim == 3
    with pytest.raises(ConfigError):
        model_from_dict(grid, {"kind": "tracer"})


def test_sensitivity_map_linear():
    grid = Grid((5,), 1.0)
    m = LinearObserver(grid, np.array([[0.0, 2.0, 0.0, 0.0, 1.0]]))
    s = sensitivity_map(m, Field(grid, np.zeros(5)))
    np.testing.assert_allclose(s, [0, 2, 0, 0, 1], atol=1e-8)


# -- observation error -------------------------------------------------------------


def test_zero_noise_is_identity():
    x = np.array([1.0, 2.0, 3.0])
    assert add_observation_error(x, np.zeros(3), 1).tobytes() == x.tobytes()


def test_noise_reproducible():
    x = np.zeros(4)
    np.testing.assert_array_equal(add_observation_error(x, 0.5, 9), add_observation_error(x, 0.5, 9))


def test_noise_sd_monte_carlo():
    out = add_observation_error(np.zeros((10_000, 1)), [0.3], 3)
    assert 0.29 <= out.std(ddof=1) <= 0.31


def test_noise_shape_mismatch():
    with pytest.raises(ConfigError):
        add_observation_error(np.zeros(3), [0.1, 0.2], 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=6), st.integers(0, 1000))
def test_noise_only_where_sd_positive(sds, seed):
    x = np.arange(len(sds), dtype=float)
    out = add_observation_error(x, sds, seed)
    zero = np.asarray(sds) == 0
    np.testing.assert_array_equal(out[zero], x[zero])


def test_type_b_validation():
    with pytest.raises(ConfigError):
        TypeBData([])
    with pytest.raises(ConfigError):
        TypeBData([1.0], -0.1)
    assert TypeBData([1.0, 2.0], 0.1).noise_sd.tolist() == [0.1, 0.1]
