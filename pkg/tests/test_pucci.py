import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from w2delta.errors import ConfigError
from w2delta.pucci import (Ellipticity, SymMatrix, hand_examples, identity_suite, in_S_discrete, pucci_minus,
                           pucci_pair, pucci_plus, sym_eigenvalues)
from w2delta.solutions import CutCellGrid, GridFunction, ManufacturedSolution, sample

from conftest import flat, wavy

E = Ellipticity(1.0, 2.0)
sym2 = arrays(np.float64, (2, 2), elements=st.floats(-100, 100)).map(lambda a: (a + a.T) / 2)
sym3 = arrays(np.float64, (3, 3), elements=st.floats(-100, 100)).map(lambda a: (a + a.T) / 2)
ellip = st.tuples(st.floats(0.1, 5), st.floats(1, 4)).map(lambda t: Ellipticity(t[0], t[0] * t[1]))


def test_hand_examples_exact():
    ex = hand_examples(E)
    assert tuple(map(float, ex["diag(1,1)"])) == (2.0, 4.0)
    assert tuple(map(float, ex["diag(1,-1)"])) == (-1.0, 1.0)


def test_eigenvalue_oracle_against_closed_form_2x2():
    a, b, c = 3.0, 1.5, -2.0
    disc = np.sqrt(((a - c) / 2) ** 2 + b * b)
    assert np.allclose(sym_eigenvalues(np.array([[a, b], [b, c]])), [(a + c) / 2 - disc, (a + c) / 2 + disc])


@settings(max_examples=300, deadline=None)
@given(st.one_of(sym2, sym3), ellip)
def test_bracket_and_duality(M, e):
    lo, hi = pucci_pair(M, e)
    tol = 1e-9 * (1 + np.abs(M).max())
    assert lo <= hi + tol
    assert pucci_minus(-M, e) == pytest.approx(-pucci_plus(M, e), abs=tol)
    # every operator with eigenvalues in [lam, Lam] lies between the two
    for a in (e.lam, e.Lam, 0.5 * (e.lam + e.Lam)):
        assert lo - tol <= a * np.trace(M) <= hi + tol


@settings(max_examples=300, deadline=None)
@given(sym2, sym2, ellip)
def test_sub_and_super_additivity(A, B, e):
    tol = 1e-9 * (1 + np.abs(A).max() + np.abs(B).max())
    assert pucci_minus(A + B, e) >= pucci_minus(A, e) + pucci_minus(B, e) - tol
    assert pucci_plus(A + B, e) <= pucci_plus(A, e) + pucci_plus(B, e) + tol


@settings(max_examples=200, deadline=None)
@given(sym3, st.floats(0, 50))
def test_homogeneity(M, t):
    tol = 1e-9 * (1 + t) * (1 + np.abs(M).max())
    assert pucci_plus(t * M, E) == pytest.approx(t * pucci_plus(M, E), abs=tol)


def test_trace_degeneracy_when_lambda_equals_Lambda(rng):
    M = rng.normal(size=(1000, 3, 3))
    M = M + np.swapaxes(M, 1, 2)
    e = Ellipticity(1.5, 1.5)
    lo, hi = pucci_pair(M, e)
    assert np.allclose(lo, 1.5 * np.trace(M, axis1=1, axis2=2)) and np.allclose(hi, lo)


def test_identity_suite_small():
    res = identity_suite(count=20_000, n=3, seed=4)
    assert max(res.values()) <= 1e-9


def test_stacked_and_single_agree(rng):
    M = rng.normal(size=(5, 2, 2))
    M = M + np.swapaxes(M, 1, 2)
    stack = pucci_minus(M, E)
    assert np.allclose(stack, [pucci_minus(m, E) for m in M])


def test_input_validation():
    with pytest.raises(ConfigError):
        Ellipticity(2.0, 1.0)
    with pytest.raises(ConfigError):
        Ellipticity(0.0, 1.0)
    with pytest.raises(ValueError):
        pucci_minus(np.eye(4), E)
    with pytest.raises(ValueError):
        pucci_minus(np.array([[np.nan, 0], [0, 1]]), E)
    with pytest.raises(ValueError):
        SymMatrix(np.ones((2, 3)))
    assert np.array_equal(SymMatrix.from_upper(2, [1.0, 2.0, 3.0]).values, [[1, 2], [2, 3]])
    assert E.widen(0.5, 1.0) == Ellipticity(0.5, 2.0)


def test_membership_passes_on_manufactured_data():
    grid = CutCellGrid(wavy(), 1 / 64)
    u, f, _ = sample(ManufacturedSolution("smooth-bump", coeffs=(1.0, 2.0)), grid)
    rep = in_S_discrete(u, f, E, trunc_const=10.0)
    assert rep.fraction == 1.0 and len(rep.nodes) > 1000


def test_membership_detects_a_wrong_right_side():
    grid = CutCellGrid(flat(), 1 / 32)
    u, f, _ = sample(ManufacturedSolution("quadratic"), grid)   # D^2u = 2I, so f must lie in [4, 8]
    bad = GridFunction(grid, np.full(grid.n_nodes, 100.0))
    assert in_S_discrete(u, f, E).fraction == 1.0
    assert in_S_discrete(u, bad, E).fraction == 0.0


def test_membership_requires_same_grid(tmp_path):
    g1, g2 = CutCellGrid(flat(), 1 / 16), CutCellGrid(flat(), 1 / 16)
    u, _, _ = sample(ManufacturedSolution("quadratic"), g1)
    _, f, _ = sample(ManufacturedSolution("quadratic"), g2)
    with pytest.raises(ValueError):
        in_S_discrete(u, f, E)
    rep = in_S_discrete(u, sample(ManufacturedSolution("quadratic"), g1)[1], E)
    rep.to_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().count("\n") == len(rep.nodes) + 1
