from __future__ import annotations

import numpy as np
import pytest

from meanstop.envelopes import discrete_envelope
from meanstop.hierarchy import extract_policy, query_value, solve_hierarchy
from meanstop.models import make_model
from meanstop.montecarlo import NullPolicy, SimConfig, policy_gap, simulate, simulate_paths
from meanstop.torus import EmpiricalState


@pytest.fixture(scope="module")
def quad_hier():
    model = make_model("quadratic", g1=1.0)
    return model, solve_hierarchy(model, 2, 2, 16, 400)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0, 0.1, 0, 0.0, EmpiricalState(2, [0.1]))
    with pytest.raises(ValueError):
        SimConfig(10, 0.0, 0, 0.0, EmpiricalState(2, [0.1]))


def test_start_at_horizon_settles_immediately():
    model = make_model("congestion")
    x = EmpiricalState(3, [0.1, 0.5, 0.55])
    est = simulate(model, NullPolicy(), SimConfig(50, 0.01, 0, model.horizon, x))
    assert est.mean == pytest.approx(discrete_envelope(model, x).value, abs=1e-14)
    assert est.std_error <= 1e-15


def test_heat_flow_closed_form():
    model = make_model("quadratic", g1=1.0)
    x = EmpiricalState(2, [0.1, 0.3])
    tau = 0.05
    est = simulate(model, NullPolicy(), SimConfig(8000, tau / 50, 4, 1.0 - tau, x))
    exact = np.sum(np.cos(2 * np.pi * x.positions)) * np.exp(-4 * np.pi**2 * tau) / 2
    assert abs(est.mean - exact) <= 3 * est.std_error
    assert est.mean == pytest.approx(sum(est.breakdown.values()))


def test_bit_reproducible():
    model = make_model("congestion")
    cfg = SimConfig(500, 0.01, 99, 0.5, EmpiricalState(2, [0.2, 0.7]))
    a, b = simulate(model, NullPolicy(), cfg), simulate(model, NullPolicy(), cfg)
    assert a.mean == b.mean and a.std_error == b.std_error
    assert a.samples.tobytes() == b.samples.tobytes()
    c = simulate(model, NullPolicy(), SimConfig(500, 0.01, 100, 0.5, EmpiricalState(2, [0.2, 0.7])))
    assert c.mean != a.mean


def test_std_error_scaling():
    model = make_model("quadratic", g1=1.0)
    x = EmpiricalState(1, [0.2])
    a = simulate(model, NullPolicy(), SimConfig(1000, 0.01, 1, 0.8, x))
    b = simulate(model, NullPolicy(), SimConfig(4000, 0.01, 2, 0.8, x))
    ratio = a.std_error / b.std_error
    assert 2 / 1.5 <= ratio <= 2 * 1.5


def test_seeds_give_independent_estimates():
    # the spread of means across seeds must match the reported standard error
    model = make_model("quadratic", g1=1.0)
    x = EmpiricalState(2, [0.1, 0.3])
    ests = [simulate(model, NullPolicy(), SimConfig(400, 0.01, s, 0.9, x)) for s in range(40)]
    spread = np.std([e.mean for e in ests], ddof=1)
    se = np.mean([e.std_error for e in ests])
    assert 0.7 <= spread / se <= 1.3


def test_free_removal_never_costs_more_than_stopping_now():
    model = make_model("quadratic", c0=0.0, g1=1.0)
    H = solve_hierarchy(model, 2, 2, 16, 400)
    pol = extract_policy(H, model)
    parts, _ = simulate_paths(model, pol, SimConfig(2000, H.dt, 0, 0.0, EmpiricalState(2, [0.3, 0.9])))
    # removal is free, so the policy can always fall back on the empty terminal cost G(0) = 0
    assert np.all(parts["stopping"] == 0.0)
    total = parts["running"] + parts["terminal"]
    assert total.mean() <= 3 * total.std() / np.sqrt(total.size) + 5 * (H.h**2 + H.dt)
    assert query_value(H, 0.0, EmpiricalState(2, [0.3, 0.9])) <= 1e-12


def test_policy_matches_pde_value(quad_hier):
    model, H = quad_hier
    x = EmpiricalState(2, [0.1, 0.35])
    pol = extract_policy(H, model)
    est = simulate(model, pol, SimConfig(4000, H.dt, 5, 0.8, x))
    assert abs(est.mean - query_value(H, 0.8, x)) <= 3 * est.std_error + 5 * (H.h**2 + H.dt)


def test_coarse_step_warns(quad_hier):
    model, H = quad_hier
    pol = extract_policy(H, model)
    est = simulate(model, pol, SimConfig(10, 10 * H.dt, 0, 0.9, EmpiricalState(2, [0.1])))
    assert est.warnings


def test_policy_gap(quad_hier):
    model, H = quad_hier
    cfg = SimConfig(2000, H.dt, 3, 0.8, EmpiricalState(2, [0.1, 0.6]))
    zero = policy_gap(model, H, cfg, 0.0)
    assert zero.mean == 0.0 and zero.std_error == 0.0
    gap = policy_gap(model, H, cfg, 0.5)
    assert gap.mean <= 3 * gap.std_error
