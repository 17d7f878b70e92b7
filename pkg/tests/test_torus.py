from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meanstop.torus import (
    EmpiricalState,
    GridFunction,
    GridMeasure,
    GridMismatchError,
    TorusGrid,
    approximate_measure,
    bl_distance,
    bl_norm_dual,
    circle_distance,
    empirical_rho,
    empirical_rho_bruteforce,
    format_measure,
    load_measure,
    parse_measure,
    random_measure,
    rho_distance,
    save_measure,
    w1_distance,
)


def cvxopt_bl_norm(mu: np.ndarray, h: float) -> float:
    """The sup over ``|f| <= s``, ``|Df|/h <= t``, ``s + t <= 1`` with an interior-point LP solver."""
    from cvxopt import matrix, solvers

    n = mu.size
    rows, rhs = [], []
    for j in range(n):
        for sign in (1.0, -1.0):
            r = np.zeros(n + 2)
            r[j], r[n] = sign, -1.0
            rows.append(r)
            rhs.append(0.0)
            r = np.zeros(n + 2)
            r[(j + 1) % n] += sign / h
            r[j] -= sign / h
            r[n + 1] = -1.0
            rows.append(r)
            rhs.append(0.0)
    r = np.zeros(n + 2)
    r[n] = r[n + 1] = 1.0
    rows.append(r)
    rhs.append(1.0)
    for k in (n, n + 1):
        r = np.zeros(n + 2)
        r[k] = -1.0
        rows.append(r)
        rhs.append(0.0)
    solvers.options["show_progress"] = False
    solvers.options["abstol"] = 1e-11
    solvers.options["reltol"] = 1e-11
    sol = solvers.lp(matrix(-np.r_[mu, 0.0, 0.0]), matrix(np.array(rows)), matrix(np.array(rhs)))
    return -float(sol["primal objective"])


def test_grid_basics():
    g = TorusGrid(8)
    assert g.h == 0.125
    np.testing.assert_allclose(g.nodes, np.arange(8) / 8)
    assert list(g.nearest([0.0, 0.124, 0.99, 1.0])) == [0, 1, 0, 0]
    with pytest.raises(ValueError):
        TorusGrid(0)


def test_measure_validation():
    g = TorusGrid(4)
    with pytest.raises(ValueError):
        GridMeasure(g, [0.5, 0.5, 0.5, 0.0])
    with pytest.raises(ValueError):
        GridMeasure(g, [-0.1, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        GridMeasure(g, [0.1, 0.1])
    m = GridMeasure.uniform(g, 0.4)
    assert m.total == pytest.approx(0.4)
    assert GridMeasure.zero(g).leq(m)
    assert not m.leq(GridMeasure.zero(g))
    with pytest.raises(GridMismatchError):
        bl_distance(m, GridMeasure.zero(TorusGrid(5)))


def test_grid_function_difference():
    g = TorusGrid(4)
    f = GridFunction(g, [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(f.forward_diff(), [4.0, -4.0, 4.0, -4.0])
    with pytest.raises(ValueError):
        GridFunction(g, [np.nan, 0, 0, 0])


def test_circle_distance():
    assert circle_distance(0.1, 0.9) == pytest.approx(0.2)
    assert circle_distance(0.25, 0.75) == pytest.approx(0.5)


def test_bl_single_atom_and_two_atoms():
    g = TorusGrid(32)
    assert bl_distance(GridMeasure.dirac(g, 0.3), GridMeasure.zero(g)) == pytest.approx(1.0, abs=1e-9)
    # optimal test function trades height s against slope 1 - s: value min(2s, (1-s) r) = 2r/(2+r)
    for j in (1, 3, 8, 16):
        r = j / 32
        d = bl_distance(GridMeasure.dirac(g, 0.0), GridMeasure.dirac(g, r))
        assert d == pytest.approx(2 * r / (2 + r), abs=1e-9)


def test_bl_matches_interior_point_solver():
    rng = np.random.default_rng(7)
    g = TorusGrid(12)
    for _ in range(5):
        a, b = random_measure(g, rng), random_measure(g, rng)
        assert bl_distance(a, b) == pytest.approx(cvxopt_bl_norm(a.mass - b.mass, g.h), abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 16))
def test_bl_primal_equals_dual(seed, n):
    rng = np.random.default_rng(seed)
    g = TorusGrid(n)
    a, b = random_measure(g, rng), random_measure(g, rng, sparsity=0.5)
    assert bl_distance(a, b) == pytest.approx(bl_norm_dual(a.mass - b.mass, g.h), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    g = TorusGrid(10)
    a, b, c = (random_measure(g, rng) for _ in range(3))
    assert bl_distance(a, a) == pytest.approx(0.0, abs=1e-12)
    assert bl_distance(a, b) == pytest.approx(bl_distance(b, a), abs=1e-10)
    assert bl_distance(a, c) <= bl_distance(a, b) + bl_distance(b, c) + 1e-9


def test_w1_against_bl_and_closed_form():
    g = TorusGrid(20)
    # W1 between atoms is the arc length; the bounded-Lipschitz distance never exceeds it
    for j in (1, 4, 10, 13):
        a, b = GridMeasure.dirac(g, 0.0), GridMeasure.dirac(g, j / 20)
        assert w1_distance(a, b) == pytest.approx(min(j, 20 - j) / 20)
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b = random_measure(g, rng, total=0.6), random_measure(g, rng, total=0.6)
        assert bl_distance(a, b) <= w1_distance(a, b) + 1e-9
    with pytest.raises(ValueError):
        w1_distance(GridMeasure.uniform(g, 0.5), GridMeasure.uniform(g, 0.4))


def test_rho_properties():
    rng = np.random.default_rng(11)
    g = TorusGrid(16)
    m = random_measure(g, rng, total=0.5)
    assert rho_distance(m, m) == pytest.approx(0.0, abs=1e-10)
    # removing mass in place costs exactly the removed mass
    n = GridMeasure(g, m.mass * 0.6)
    assert rho_distance(m, n) == pytest.approx(0.4 * m.total, abs=1e-9)
    assert rho_distance(m, GridMeasure.zero(g)) == pytest.approx(m.total, abs=1e-10)
    p = random_measure(g, rng, total=0.8)
    assert rho_distance(m, p) == pytest.approx(rho_distance(p, m), abs=1e-10)


def test_empirical_rho_removal_identity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        N = int(rng.integers(2, 9))
        k = int(rng.integers(1, N + 1))
        x = EmpiricalState(N, rng.random(k))
        i = int(rng.integers(k))
        assert empirical_rho(x, x.without(i)) == 1.0 / N


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 4), st.integers(0, 4))
def test_empirical_rho_matches_bruteforce(seed, ka, kb):
    rng = np.random.default_rng(seed)
    a, b = EmpiricalState(5, rng.random(ka)), EmpiricalState(5, rng.random(kb))
    assert empirical_rho(a, b) == pytest.approx(empirical_rho_bruteforce(a, b), abs=1e-12)


def test_empirical_state():
    x = EmpiricalState(4, [0.2, 1.3])
    np.testing.assert_allclose(x.positions, [0.2, 0.3])
    assert x.total == 0.5
    assert x.without([0]).k == 1
    with pytest.raises(ValueError):
        EmpiricalState(1, [0.1, 0.2])
    m = x.as_measure(TorusGrid(10))
    assert m.mass[2] == 0.25 and m.mass[3] == 0.25


def test_approximate_measure_converges():
    g = TorusGrid(64)
    dens = 1 + 0.5 * np.cos(2 * np.pi * g.nodes)
    m = GridMeasure(g, 0.8 * dens / dens.sum())
    errs = []
    for N in (8, 32, 128):
        x = approximate_measure(m, N)
        assert x.k == round(0.8 * N)
        errs.append(bl_distance(x.as_measure(g), m))
    assert errs[0] > errs[1] > errs[2]
    assert approximate_measure(GridMeasure.zero(g), 10).k == 0


def test_serialisation_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    m = random_measure(TorusGrid(9), rng)
    assert np.array_equal(parse_measure(format_measure(m)).mass, m.mass)
    save_measure(m, tmp_path / "m.txt")
    assert np.array_equal(load_measure(tmp_path / "m.txt").mass, m.mass)
    with pytest.raises(ValueError):
        parse_measure("# something else\n0,1\n")
    with pytest.raises(ValueError):
        parse_measure("# torus-measure n_cells=2\n0,0.1\n0,0.2\n")
