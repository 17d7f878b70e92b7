from __future__ import annotations

import numpy as np
import pytest

from meanstop.envelopes import discrete_envelope_batch, subsets
from meanstop.hierarchy import (
    CFLError,
    extract_policy,
    hierarchy_violations,
    holder_exponent,
    level_points,
    load_hierarchy,
    query_value,
    regularity_report,
    save_hierarchy,
    solve_hierarchy,
)
from meanstop.models import make_model
from meanstop.reference import single_particle_reference
from meanstop.torus import EmpiricalState


@pytest.fixture(scope="module")
def congestion():
    return make_model("congestion")


@pytest.fixture(scope="module")
def hier2(congestion):
    return solve_hierarchy(congestion, 3, 2, 12, 120)


def test_level_zero_and_terminal(hier2, congestion):
    assert np.all(hier2.tables[0] == congestion.terminal_zero())
    for k in (1, 2):
        env, _ = discrete_envelope_batch(congestion, level_points(12, k), 3)
        np.testing.assert_array_equal(hier2.tables[k][-1], env)


def test_invariants(hier2, congestion):
    v = hierarchy_violations(hier2, congestion)
    assert v["psi_monotone"] <= 1e-9 and v["obstacle"] <= 1e-9
    assert v["terminal"] == 0.0 and v["level0"] == 0.0


def test_exchangeable(hier2):
    t = hier2.tables[2]
    assert np.max(np.abs(t - np.swapaxes(t, 1, 2))) <= 1e-12


def heat(table: np.ndarray, tau: float) -> np.ndarray:
    """Heat semigroup ``e^{tau Lap}`` on the periodic K-dimensional grid, spectrally."""
    n = table.shape[0]
    freq = np.fft.fftfreq(n, d=1.0 / n)
    decay = np.ones(table.shape)
    for i in range(table.ndim):
        shape = [1] * table.ndim
        shape[i] = n
        decay = decay * np.exp(-4 * np.pi**2 * freq.reshape(shape) ** 2 * tau)
    return np.real(np.fft.ifftn(np.fft.fftn(table) * decay))


def test_do_nothing_upper_bound(hier2, congestion):
    # zero drift costs nothing here (f0 = kappa = 0), so V(t) is below the heat flow of the envelope
    tol = 5 * (hier2.h**2 + hier2.dt)
    for k in (1, 2):
        env = hier2.tables[k][-1]
        for j in (0, 30, 60, 119):
            bound = heat(env, hier2.horizon - hier2.times[j])
            assert np.all(hier2.tables[k][j] <= bound + tol)


def test_query_value(hier2, congestion):
    x = EmpiricalState(3, [2 / 12, 5 / 12])
    j = 40
    assert query_value(hier2, hier2.times[j], x) == hier2.tables[2][j, 2, 5]
    assert query_value(hier2, 0.37, EmpiricalState(3)) == congestion.terminal_zero()
    mid = EmpiricalState(3, [2.5 / 12])
    v = query_value(hier2, hier2.times[j], mid)
    a, b = hier2.tables[1][j, 2], hier2.tables[1][j, 3]
    assert min(a, b) <= v <= max(a, b)
    with pytest.raises(ValueError):
        query_value(hier2, 0.0, EmpiricalState(3, [0.1, 0.2, 0.3]))
    with pytest.raises(ValueError):
        query_value(hier2, 1.5, x)


def test_cfl_refusal_suggests_steps(congestion):
    with pytest.raises(CFLError) as info:
        solve_hierarchy(congestion, 2, 1, 32, 5)
    need = info.value.suggested_steps
    assert need > 5
    solve_hierarchy(congestion, 2, 1, 32, need)


def test_memory_budget(congestion):
    with pytest.raises(MemoryError):
        solve_hierarchy(congestion, 3, 3, 32, 1000, memory_budget=10**6)


def test_argument_checks(congestion):
    with pytest.raises(ValueError):
        solve_hierarchy(congestion, 2, 3, 8, 100)
    with pytest.raises(ValueError):
        solve_hierarchy(congestion, 4, 4, 8, 100)
    with pytest.raises(ValueError):
        solve_hierarchy(congestion, 2, 1, 8, 100, obstacle="some")


def test_zero_costs_give_zero_value():
    model = make_model("quadratic", c0=0.0, g1=0.0)
    H = solve_hierarchy(model, 2, 2, 8, 40)
    for k in range(3):
        assert np.max(np.abs(H.tables[k])) == 0.0
    pol = extract_policy(H, model)
    # every removal is free, so the obstacle is in contact everywhere
    assert np.all(pol.stop[1] > 0) and np.all(pol.stop[2] > 0)


def test_prohibitive_single_particle_matches_cole_hopf():
    model = make_model("quadratic", g1=1.0, f0_amp=0.5)
    ref = single_particle_reference(model)
    H = solve_hierarchy(model, 1, 1, 16, 400)
    x = H.grid.nodes
    for j in (0, 200):
        err = np.max(np.abs(H.tables[1][j] - ref.value(H.times[j], x)))
        assert err <= 5 * (H.h**2 + H.dt)
    pol = extract_policy(H, model)
    assert not np.any(pol.stop[1])


def test_single_removal_mode_agrees_when_psi_ignores_mass():
    model = make_model("congestion", c1=0.0)
    a = solve_hierarchy(model, 3, 3, 8, 80, obstacle="all")
    b = solve_hierarchy(model, 3, 3, 8, 80, obstacle="single")
    for k in range(4):
        assert np.max(np.abs(a.tables[k] - b.tables[k])) <= 1e-10


def test_single_removal_mode_misses_joint_removals_when_psi_depends_on_mass(congestion):
    # Psi falls as mass leaves, so removing two at the common pre-removal measure beats two single steps
    b = solve_hierarchy(congestion, 4, 3, 8, 80, obstacle="single")
    assert hierarchy_violations(b, congestion)["obstacle"] > 1e-3


def test_policy_quadratic_drift(hier2, congestion):
    pol = extract_policy(hier2, congestion)
    j = 10
    tab = hier2.tables[1][j]
    grad = (np.roll(tab, -1) - np.roll(tab, 1)) * 12 / 2
    np.testing.assert_allclose(pol.drift[1][j, :, 0], -np.clip(3 * grad, -hier2.radius, hier2.radius) * (np.abs(3 * grad) <= hier2.radius))
    assert np.all(np.isfinite(pol.drift[2]))


def test_policy_terminal_stopping_matches_envelope(hier2, congestion):
    pol = extract_policy(hier2, congestion, contact_tol=0.0)
    for k in (1, 2):
        _, idx = discrete_envelope_batch(congestion, level_points(12, k), 3)
        stop = pol.stop[k][-1]
        # where the envelope removes someone, the terminal slice sits on the obstacle
        assert np.all(stop[idx > 0] > 0)


def test_regularity_constant_model():
    model = make_model("congestion", c2=0.0, g1=0.0)
    H = solve_hierarchy(model, 3, 2, 8, 60)
    rep = regularity_report(H, n_pairs=100)
    for k in (1, 2):
        assert rep[k]["spatial"] <= 1e-10


def test_regularity_removal_bound(hier2, congestion):
    rep = regularity_report(hier2, n_pairs=200, seed=1)
    p = congestion.params
    psi_sup = p["c0"] + p["c1"] + abs(p["c2"])
    for k in (1, 2):
        assert np.isfinite(rep[k]["spatial"])
        assert rep[k]["removal"] <= psi_sup + 1e-9


def test_holder_exponent_on_kinked_data():
    model = make_model("quadratic", g1=0.0, g_kink=1.0)
    H = solve_hierarchy(model, 2, 1, 32, 1000)
    assert 0.45 <= holder_exponent(H) <= 0.55


def test_persistence_roundtrip(tmp_path, hier2):
    paths = save_hierarchy(hier2, tmp_path / "a")
    assert paths[1].read_text().startswith("# vnk N=3 K=1 n_cells=12 n_steps=120 T=1.0")
    back = load_hierarchy(tmp_path / "a")
    for k in range(3):
        np.testing.assert_array_equal(back.tables[k], hier2.tables[k])
    save_hierarchy(back, tmp_path / "b")
    for k in range(3):
        assert (tmp_path / "a" / f"vnk_K{k}.txt").read_bytes() == (tmp_path / "b" / f"vnk_K{k}.txt").read_bytes()
    with pytest.raises(FileNotFoundError):
        load_hierarchy(tmp_path / "missing")
