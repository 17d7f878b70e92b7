"""The thirteen acceptance criteria, each one test that also records a PASS/FAIL summary line.

The shipped suites are run once (module fixture) and a second time for the
determinism criterion; criteria read the checks and tables of those runs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from meanstop.experiments import default_workers, run_experiment, shipped_config, shipped_configs
from meanstop.torus import EmpiricalState, TorusGrid, bl_distance, empirical_rho, random_measure, rho_distance

pytestmark = pytest.mark.slow


def record(num: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[num] = (title, bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} {num:2d} {title}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("first")
    reports = {}
    for name, text in shipped_configs():
        rep = run_experiment(shipped_config(name), default_workers())
        rep.write(out / name)
        reports[name] = rep
    return reports, out


def checks(rep, *names):
    """``(all passed, joined details)`` for checks whose name contains any of ``names``."""
    sel = [c for c in rep.checks if any(n in c.name for n in names)]
    assert sel, f"{rep.name} has no check matching {names}"
    return all(c.passed for c in sel), "; ".join(f"{c.name} {'ok' if c.passed else 'FAIL'} ({c.detail})" for c in sel)


def test_01_metric_sandwich():
    rng = np.random.default_rng(20)
    grid = TorusGrid(64)
    worst = 0.0
    for _ in range(200):
        m = random_measure(grid, rng, total=float(rng.uniform(0.05, 1.0)))
        n = random_measure(grid, rng, total=float(rng.uniform(0.05, 1.0)), sparsity=float(rng.uniform(0, 0.8)))
        d, r = bl_distance(m, n), rho_distance(m, n)
        worst = max(worst, d - r, r - 3 * d)
    record(1, "metric sandwich d <= rho <= 3d", worst <= 1e-8, f"worst violation {worst:.3e} over 200 pairs")


def test_02_removal_distance():
    rng = np.random.default_rng(21)
    bad = 0
    for _ in range(100):
        N = int(rng.integers(1, 17))
        k = int(rng.integers(1, N + 1))
        x = EmpiricalState(N, rng.random(k))
        i = int(rng.integers(k))
        bad += empirical_rho(x, x.without(i)) != 1.0 / N
    record(2, "removal distance is exactly 1/N", bad == 0, f"{bad} mismatches over 100 states")


def test_03_envelope_monotonicity(runs):
    ok, detail = checks(runs[0]["10-envelope"], "removal_inequality", "linear_closed_form")
    record(3, "envelope removal inequality and linear closed form", ok, detail)


def test_04_envelope_convergence(runs):
    rep = runs[0]["10-envelope"]
    assert list(rep.table("envelope_convergence").column("N")) == [4, 8, 16]
    assert rep.config_echo and not shipped_config("10-envelope").build_model().params["gamma"]
    ok, detail = checks(rep, "convergence_strictly_decreasing")
    record(4, "envelope gap strictly decreasing in N", ok, detail)


def test_05_hierarchy_vs_reference(runs):
    ok, detail = checks(runs[0]["21-nparticle-reference"], "reference n=", "refinement_ratio")
    record(5, "single-particle hierarchy vs independent solver", ok, detail)


def test_06_hierarchy_invariants(runs):
    ok, detail = checks(runs[0]["20-nparticle"], ":psi_monotone", ":obstacle")
    record(6, "hierarchy psi-monotonicity and obstacle", ok, detail)


def test_07_montecarlo(runs):
    cfg = shipped_config("30-montecarlo")
    assert cfg.opt_int("n_paths", 0) == 20000 and cfg.big_n == [2] and len(cfg.opt_floats("positions", [])) == 2
    ok, detail = checks(runs[0]["30-montecarlo"], "policy_vs_pde", "heat_flow_closed_form")
    record(7, "Monte Carlo vs PDE and heat flow", ok, detail)


def test_08_meanfield_internals(runs):
    ok, detail = checks(runs[0]["40-meanfield"], "mass_ledger", "adjoint_gradient", "dynamic_programming")
    record(8, "mean-field ledger, adjoint, dynamic programming", ok, detail)


def test_09_regularization_ladder(runs):
    a, da = checks(runs[0]["50-ladder"], "cauchy_decreasing", "penalty_positivity")
    b, db = checks(runs[0]["51-ladder-lipschitz"], "lipschitz_stable")
    assert len(shipped_config("50-ladder").deltas) == 4
    record(9, "regularization ladder", a and b, f"{da}; {db}")


def test_10_meanfield_psi_monotone(runs):
    cfg = shipped_config("40-meanfield")
    assert cfg.opt_int("psi_n_cells", 0) == 64 and cfg.opt_int("psi_n_steps", 0) == 1000 and cfg.opt_int("psi_pairs", 0) == 20
    ok, detail = checks(runs[0]["40-meanfield"], "psi_monotone")
    record(10, "mean-field psi-monotonicity", ok, detail)


def test_11_phi(runs):
    assert shipped_config("90-phi").opt_int("samples", 0) == 50
    ok, detail = checks(runs[0]["90-phi"], "nonnegative_zero", "constant_closed_form", "gradient", "lipschitz", "energy_inequality")
    record(11, "Phi functional", ok, detail)


def test_12_convergence(runs):
    a, da = checks(runs[0]["60-converge-decoupled"], "decoupled_tolerance")
    b, db = checks(runs[0]["61-converge-coupled"], "nonincreasing K=1")
    record(12, "hierarchy to mean-field convergence", a and b, f"{da}; {db}")


def test_13_determinism(runs, tmp_path):
    first_out = runs[1]
    diffs = []
    n_files = 0
    for name, _ in shipped_configs():
        run_experiment(shipped_config(name), default_workers()).write(tmp_path / name)
        for p in sorted((first_out / name).rglob("*.csv")):
            n_files += 1
            q = tmp_path / name / p.relative_to(first_out / name)
            if not q.exists() or q.read_bytes() != p.read_bytes():
                diffs.append(str(Path(name) / p.relative_to(first_out / name)))
    record(13, "byte-identical CSVs on rerun", not diffs and n_files > 0, f"{n_files} files compared, differing: {diffs or 'none'}")
