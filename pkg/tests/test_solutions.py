import numpy as np
import pytest

from w2delta.errors import ConfigError, ConvergenceError
from w2delta.pucci import Ellipticity
from w2delta.solutions import (CutCellGrid, GridFunction, ManufacturedSolution, apply_operator, assemble,
                               read_grid_function, sample, solve_linear)

from conftest import cusp, flat, wavy


def test_grid_nodes_and_arms():
    grid = CutCellGrid(wavy(), 1 / 32)
    N = grid.n_interior
    assert np.all(grid.domain.contains(grid.points[:N]))
    assert np.allclose(grid.points[:N], grid.lattice * grid.h)
    assert np.all((grid.arm_len > 0) & (grid.arm_len <= grid.h + 1e-15))
    # each arm ends at its neighbour
    for col in range(4):
        axis, sign = divmod(col, 2)
        step = np.zeros(2)
        step[axis] = 1 if sign else -1
        end = grid.points[:N] + grid.arm_len[:, col, None] * step
        assert np.allclose(end, grid.points[grid.arm_nbr[:, col]], atol=1e-12)
    bpts = grid.points[grid.graph_boundary_nodes()]
    assert np.allclose(grid.domain.height(bpts), 0, atol=1e-12)


def test_quadratic_reproduced():
    ms = ManufacturedSolution("quadratic", A=np.array([[2.0, 0.3], [0.3, 1.0]]), b=np.array([0.1, -0.4]), c=0.7,
                              coeffs=(1.0, 2.0))
    dom = wavy()
    grid = CutCellGrid(dom, 1 / 64)
    u, f, g = sample(ms, grid)
    for method in ("direct", "sor"):
        sol = solve_linear(dom, (1.0, 2.0), f, g, grid.h, method=method, grid=grid)
        assert np.max(np.abs(sol.values - u.values)) < 1e-9


def test_second_order_convergence():
    ms = ManufacturedSolution("smooth-bump", k=(1.0, 2.0), coeffs=(1.0, 2.0))
    dom = wavy()
    errs, hs = [], [1 / 16, 1 / 32, 1 / 64, 1 / 128]
    for h in hs:
        grid = CutCellGrid(dom, h)
        u, f, g = sample(ms, grid)
        sol = solve_linear(dom, (1.0, 2.0), f, g, h, method="direct", grid=grid)
        errs.append(np.max(np.abs(sol.values - u.values)))
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order == pytest.approx(2.0, abs=0.3)


def test_operator_consistency_on_quadratic():
    grid = CutCellGrid(cusp(), 1 / 32)
    ms = ManufacturedSolution("quadratic", coeffs=(1.5, 1.0))
    u, f, _ = sample(ms, grid)
    Lu = apply_operator(grid, u.values, (1.5, 1.0))
    assert np.allclose(Lu, f.values[: grid.n_interior], atol=1e-8)


def test_assembled_matrix_is_monotone():
    grid = CutCellGrid(wavy(), 1 / 16)
    D, M_I, M_B = assemble(grid, (1.0, 2.0))
    assert np.all(D > 0) and M_I.min() >= 0 and M_B.min() >= 0
    rowsum = np.asarray(M_I.sum(axis=1)).ravel() + np.asarray(M_B.sum(axis=1)).ravel()
    assert np.allclose(rowsum, D)


def test_maximum_principle_random_instances(rng):
    dom = wavy()
    grid = CutCellGrid(dom, 1 / 16)
    N = grid.n_interior
    for _ in range(20):
        f = -rng.uniform(0, 5, grid.n_nodes)
        g = rng.normal(size=grid.n_nodes)
        a = tuple(rng.uniform(1, 2, 2))
        sol = solve_linear(dom, a, GridFunction(grid, f), GridFunction(grid, g), grid.h, method="direct", grid=grid)
        assert sol.values[:N].min() >= g[N:].min() - 1e-12


def test_power_barrier_and_bad_inputs():
    grid = CutCellGrid(flat(), 1 / 16)
    u, f, g = sample(ManufacturedSolution("power-barrier", alpha0=0.5), grid)
    bnodes = grid.graph_boundary_nodes()
    assert np.all(g.values[bnodes] == 0) and np.all(u.valid)
    with pytest.raises(ConfigError):
        ManufacturedSolution("cubic")
    with pytest.raises(ConfigError):
        ManufacturedSolution("quadratic", coeffs=(0.5, 1.0))
    with pytest.raises(ConfigError):
        solve_linear(flat(), (1.0, 3.0), f, g, 1 / 16, ellipticity=Ellipticity(1, 2), grid=grid)


def test_sor_reports_stall():
    dom = wavy()
    grid = CutCellGrid(dom, 1 / 32)
    u, f, g = sample(ManufacturedSolution("smooth-bump"), grid)
    with pytest.raises(ConvergenceError) as exc:
        solve_linear(dom, (1.0, 1.0), f, g, grid.h, method="sor", tol=1e-30, max_iter=20, grid=grid)
    assert len(exc.value.history) >= 1


def test_grid_function_csv_round_trip(tmp_path):
    grid = CutCellGrid(wavy(), 1 / 16)
    u, _, _ = sample(ManufacturedSolution("smooth-bump"), grid)
    u.to_csv(tmp_path / "u.csv")
    back = read_grid_function(tmp_path / "u.csv")
    assert np.array_equal(back.values, u.values) and np.array_equal(back.grid.points, grid.points)
    assert np.array_equal((2 * u).values, 2 * u.values)
