from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meanstop.envelopes import (
    EnvelopeCapacityError,
    PartitionOfUnity,
    continuous_envelope,
    discrete_envelope,
    discrete_envelope_batch,
    mollify_terminal,
    subsets,
)
from meanstop.models import make_model
from meanstop.torus import EmpiricalState, GridMeasure, PointMeasure, TorusGrid, random_measure


def brute_envelope(model, x: EmpiricalState) -> float:
    N, pts = x.big_n, x.positions
    psi = model.psi(pts, PointMeasure(pts, np.full(pts.size, 1.0 / N))) / N
    best = np.inf
    for r in range(x.k + 1):
        for s in itertools.combinations(range(x.k), r):
            keep = [i for i in range(x.k) if i not in s]
            g = float(model.terminal(PointMeasure(pts[keep], np.full(len(keep), 1.0 / N))))
            best = min(best, g + float(sum(psi[list(s)])))
    return best


def qp_envelope(model, m: GridMeasure) -> float:
    """``min G(m') + <Psi(m), m - m'>`` over ``0 <= m' <= m`` as a cvxopt QP (``G`` quadratic in the mass)."""
    from cvxopt import matrix, solvers

    p = model.params
    n = m.grid.n_cells
    x = m.grid.nodes
    g = p["g0"] + p["g1"] * np.cos(2 * np.pi * x)
    psi = model.psi(x, m)
    P = p["gamma"] * np.ones((n, n)) + 1e-12 * np.eye(n)
    q = g - psi
    G = np.vstack([np.eye(n), -np.eye(n)])
    h = np.r_[m.mass, np.zeros(n)]
    solvers.options["show_progress"] = False
    solvers.options["abstol"] = 1e-12
    solvers.options["reltol"] = 1e-12
    solvers.options["feastol"] = 1e-12
    sol = solvers.qp(matrix(P), matrix(q), matrix(G), matrix(h))
    w = np.array(sol["x"]).ravel()
    return float(np.dot(g, w) + 0.5 * p["gamma"] * w.sum() ** 2 + np.dot(psi, m.mass - w))


def test_subsets_order():
    assert subsets(2) == ((), (0,), (1,), (0, 1))
    assert len(subsets(5)) == 32


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_discrete_matches_bruteforce(seed, k):
    rng = np.random.default_rng(seed)
    model = make_model("congestion", gamma=float(rng.uniform(0, 1)), c1=float(rng.uniform(0, 1)))
    x = EmpiricalState(6, rng.random(k))
    assert discrete_envelope(model, x).value == pytest.approx(brute_envelope(model, x), abs=1e-13)


def test_discrete_batch_agrees_with_single():
    model = make_model("congestion")
    pts = np.random.default_rng(1).random((7, 3))
    vals, idx = discrete_envelope_batch(model, pts, 4)
    for row, v, i in zip(pts, vals, idx):
        r = discrete_envelope(model, EmpiricalState(4, row))
        assert r.value == v and r.minimizer == subsets(3)[i]


def test_discrete_prohibitive_keeps_everyone():
    model = make_model("quadratic")
    x = EmpiricalState(3, [0.1, 0.4, 0.8])
    r = discrete_envelope(model, x)
    assert r.minimizer == ()
    assert r.value == pytest.approx(float(model.terminal(x)))


def test_capacity_guard():
    with pytest.raises(EnvelopeCapacityError):
        discrete_envelope(make_model("congestion"), EmpiricalState(30, np.linspace(0, 1, 21, endpoint=False)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_discrete_removal_inequality(seed):
    rng = np.random.default_rng(seed)
    model = make_model("congestion", gamma=0.5)
    N = 5
    x = EmpiricalState(N, rng.random(int(rng.integers(1, 5))))
    s = subsets(x.k)[int(rng.integers(1, 2**x.k))]
    rest = x.without(s)
    rest_val = discrete_envelope(model, rest).value if rest.k else model.terminal_zero()
    pen = float(np.sum(model.psi(x.points, x)[list(s)])) / N
    assert discrete_envelope(model, x).value <= rest_val + pen + 1e-12


def test_continuous_linear_closed_form():
    model = make_model("linearG", c1=0.3, c2=0.5, g1=1.2)
    g = TorusGrid(24)
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = random_measure(g, rng)
        x = g.nodes
        closed = float(np.dot(np.minimum(model.terminal_density(x), model.psi(x, m)), m.mass))
        r = continuous_envelope(model, m)
        assert r.value == closed
        assert r.minimizer.leq(m)


def test_continuous_quadratic_matches_qp():
    model = make_model("congestion", gamma=0.8, g1=0.9)
    g = TorusGrid(16)
    rng = np.random.default_rng(4)
    for _ in range(4):
        m = random_measure(g, rng, total=float(rng.uniform(0.3, 1.0)))
        assert continuous_envelope(model, m).value == pytest.approx(qp_envelope(model, m), abs=1e-8)


def test_continuous_removal_inequality():
    model = make_model("congestion", gamma=0.6)
    g = TorusGrid(16)
    rng = np.random.default_rng(9)
    for _ in range(10):
        m = random_measure(g, rng, total=float(rng.uniform(0.2, 1.0)))
        n = GridMeasure(g, m.mass * rng.random(g.n_cells))
        lhs = continuous_envelope(model, m).value
        rhs = continuous_envelope(model, n).value + float(np.dot(model.psi(g.nodes, m), m.mass - n.mass))
        assert lhs <= rhs + 1e-10


def test_envelope_below_terminal():
    model = make_model("congestion")
    g = TorusGrid(16)
    m = random_measure(g, np.random.default_rng(2))
    assert continuous_envelope(model, m).value <= float(model.terminal(m)) + 1e-14


def test_partition_of_unity():
    pou = PartitionOfUnity.for_diameter(0.2)
    x = np.linspace(0, 1, 101)
    vals = pou(x)
    np.testing.assert_allclose(vals.sum(axis=-1), 1.0)
    assert np.all(vals >= 0)
    # supports have diameter at most delta
    for i, c in enumerate(pou.centers):
        support = x[vals[:, i] > 0]
        d = np.abs((support - c + 0.5) % 1.0 - 0.5)
        assert d.max() <= 0.2 / 2 + 1e-12
    assert pou.integrals().sum() == pytest.approx(1.0)


@pytest.mark.parametrize("gamma", [0.0, 0.5])
def test_mollified_terminal_is_close_and_removal_monotone(gamma):
    model = make_model("congestion", gamma=gamma)
    g = TorusGrid(32)
    rng = np.random.default_rng(5)
    gaps = []
    for delta in (0.4, 0.2):
        mol = mollify_terminal(model, delta, eta=1e-3, n_samples=16)
        worst = 0.0
        for _ in range(6):
            m = random_measure(g, rng, total=float(rng.uniform(0.2, 1.0)))
            n = GridMeasure(g, m.mass * rng.random(g.n_cells))
            worst = max(worst, abs(float(mol.terminal(m)) - float(model.terminal(m))))
            jump = float(np.dot(model.psi(g.nodes, m), m.mass - n.mass))
            assert float(mol.terminal(m)) <= float(mol.terminal(n)) + jump + 1e-10
        gaps.append(worst)
    assert gaps[1] < gaps[0]


def test_mollify_rejects_bad_parameters():
    model = make_model("congestion")
    with pytest.raises(ValueError):
        mollify_terminal(model, 0.0, 0.1)
    with pytest.raises(ValueError):
        mollify_terminal(model, 0.5, 0.9)
