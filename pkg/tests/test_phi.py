from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meanstop.phi import (
    h1_inner,
    h1_norm,
    h_minus1_norm,
    pairing,
    phi_energy_inequality_check,
    phi_gradient_check,
    phi_lipschitz_check,
    phi_objective,
    phi_penalized,
    phi_solve,
)


def qp_phi(mu: np.ndarray) -> tuple[float, np.ndarray]:
    """Maximise ``<mu, f> - |f|^2 / 2`` over ``f <= 0`` with cvxopt, assembling the H1 form from scratch."""
    from cvxopt import matrix, solvers

    n = mu.size
    h = 1.0 / n
    D = (np.roll(np.eye(n), 1, axis=1) - np.eye(n)) / h
    P = h * (np.eye(n) + D.T @ D)
    solvers.options["show_progress"] = False
    for k in ("abstol", "reltol", "feastol"):
        solvers.options[k] = 1e-13
    sol = solvers.qp(matrix(P), matrix(-h * mu), matrix(np.eye(n)), matrix(np.zeros(n)))
    f = np.array(sol["x"]).ravel()
    return float(h * mu @ f - 0.5 * f @ P @ f), f


def random_density(rng, n: int) -> np.ndarray:
    k = np.arange(1, 4)
    x = np.arange(n) / n
    return rng.normal() + (rng.normal(size=3)[:, None] * np.cos(2 * np.pi * np.outer(k, x) + rng.uniform(0, 6, 3)[:, None])).sum(0)


def test_matches_qp_solver():
    rng = np.random.default_rng(0)
    for n in (8, 24):
        for _ in range(4):
            mu = random_density(rng, n)
            res = phi_solve(mu)
            val, f = qp_phi(mu)
            assert res.value == pytest.approx(val, abs=1e-8)
            np.testing.assert_allclose(res.f_hat.values, f, atol=1e-5)


@pytest.mark.parametrize("c", [-2.0, -0.3, 0.0, 0.7])
def test_constant_density_closed_form(c):
    res = phi_solve(np.full(16, c))
    assert res.value == pytest.approx(0.5 * min(c, 0.0) ** 2, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([6, 16, 33]))
def test_optimality_conditions(seed, n):
    rng = np.random.default_rng(seed)
    mu = random_density(rng, n)
    res = phi_solve(mu)
    f = res.f_hat.values
    assert np.all(f <= 0) and res.value >= 0
    # Phi equals the objective at f_hat and half the pairing
    assert res.value == pytest.approx(phi_objective(mu, f), abs=1e-10)
    assert res.value == pytest.approx(0.5 * pairing(mu, f), abs=1e-10)
    # variational inequality against random nonpositive competitors
    for _ in range(5):
        g = -np.abs(rng.normal(size=n)) * rng.uniform(0, 3)
        assert h1_inner(f, g - f) - pairing(mu, g - f) >= -1e-9


def test_nonnegative_density_gives_zero():
    mu = 1.0 + 0.5 * np.sin(2 * np.pi * np.arange(20) / 20)
    res = phi_solve(mu)
    assert res.value == 0.0 and np.all(res.f_hat.values == 0.0)


def test_order_reversing():
    rng = np.random.default_rng(2)
    for _ in range(10):
        mu = random_density(rng, 20)
        nu = mu + np.abs(rng.normal(size=20))
        assert phi_solve(nu).value <= phi_solve(mu).value + 1e-12


def test_gradient_and_lipschitz():
    rng = np.random.default_rng(4)
    mu = random_density(rng, 24) - 1.0
    assert phi_gradient_check(mu, [rng.normal(size=24) for _ in range(4)]) <= 1e-3
    pairs = [(random_density(rng, 24), random_density(rng, 24)) for _ in range(6)]
    assert phi_lipschitz_check(pairs) <= 1 + 1e-6
    with pytest.raises(ValueError):
        phi_gradient_check(mu, [np.zeros(24)])


def test_energy_inequality():
    rng = np.random.default_rng(5)
    for _ in range(6):
        assert phi_energy_inequality_check(random_density(rng, 32)) >= -1e-6


def test_penalised_approaches_exact_value():
    mu = random_density(np.random.default_rng(6), 16) - 0.5
    exact = phi_solve(mu).value
    gaps = []
    for eps in (1e-1, 1e-2, 1e-3):
        f, _ = phi_penalized(mu, eps)
        gaps.append(abs(0.5 * h1_inner(f, f) - exact))
    assert gaps[0] > gaps[1] > gaps[2]
    with pytest.raises(ValueError):
        phi_penalized(mu, 0.0)


def test_norms():
    n = 32
    x = np.arange(n) / n
    f = np.cos(2 * np.pi * x)
    # the discrete symbol of D^T D at the first mode is (2n sin(pi/n))^2
    lam = (2 * n * np.sin(np.pi / n)) ** 2
    assert h1_norm(f) ** 2 == pytest.approx(0.5 * (1 + lam))
    assert h_minus1_norm(f) ** 2 == pytest.approx(0.5 / (1 + lam))
    with pytest.raises(ValueError):
        phi_solve(np.ones(2))
    with pytest.raises(ValueError):
        phi_solve(np.ones(8), epsilon=0.0)
