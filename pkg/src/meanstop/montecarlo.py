"""Monte Carlo simulation of the controlled and stopped N-particle system.

Particles follow ``dX = alpha dt + sqrt(2) dW`` on the torus. Stopping is
decided at step boundaries; a stopped set ``S`` pays
``(1/N) sum_{i in S} Psi(x^i, m_{t-})`` with the pre-removal measure, and
survivors settle the discrete envelope of ``G`` at the horizon.

Gaussian increments for step ``s`` come from a Philox generator keyed by
``seed`` with counter ``s``; within a step they are laid out path-major, so
the increment of particle ``i`` on path ``p`` depends only on
``(seed, s, p, i)`` and the number of paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envelopes import discrete_envelope_batch, removal_costs, subsets
from .hierarchy import FeedbackPolicy, ValueHierarchy, extract_policy, interpolate, obstacle_stack
from .models import ModelSpec
from .torus import EmpiricalState, PointMeasure


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    dt_sim: float
    seed: int
    t0: float
    initial: EmpiricalState

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be positive")


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int
    breakdown: dict[str, float] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)


class NullPolicy:
    """Zero drift, never stop before the horizon."""

    drift_scale = 1.0

    def act(self, model, big_n, t, points):
        return np.zeros(points.shape), np.zeros(points.shape[:-1], dtype=int)

    def scaled(self, factor):
        return self


def _policy_act(policy: FeedbackPolicy, model: ModelSpec, big_n: int, t: float, points: np.ndarray):
    """Drift and removal-set index at arbitrary positions ``points`` of shape ``(P, K)``."""
    hier: ValueHierarchy = policy.hierarchy
    k = points.shape[-1]
    j = int(round(min(max(t / hier.dt, 0.0), hier.n_steps)))
    drift = np.stack([interpolate(policy.drift[k][j][..., i], points) for i in range(k)], axis=-1)
    drift = drift * policy.drift_scale
    value = interpolate(hier.tables[k][j], points)
    costs = removal_costs(model, points, big_n)
    cands = []
    for s in subsets(k)[1:]:
        keep = [i for i in range(k) if i not in s]
        lower = interpolate(hier.tables[k - len(s)][j], points[..., keep])
        cands.append(lower + costs[..., list(s)].sum(axis=-1))
    cands = np.stack(cands)
    best = cands.argmin(axis=0)
    gap = np.take_along_axis(cands, best[None], axis=0)[0] - value
    stop = np.where(gap <= policy.contact_tol, best + 1, 0)
    return drift, stop


def _act(policy, model, big_n, t, points):
    if isinstance(policy, FeedbackPolicy):
        return _policy_act(policy, model, big_n, t, points)
    return policy.act(model, big_n, t, points)


def _step_normals(seed: int, step: int, shape) -> np.ndarray:
    # (seed, step) is the 128-bit Philox key; keying by counter offset instead would make
    # consecutive steps replay shifted copies of one stream and correlate the paths
    key = np.array([seed % (1 << 64), step], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(shape)


def _groups(alive: np.ndarray):
    """Yield ``(k, rows, cols)`` where ``cols`` are original particle indices in order."""
    counts = alive.sum(axis=1)
    for k in range(1, alive.shape[1] + 1):
        rows = np.nonzero(counts == k)[0]
        if rows.size:
            cols = np.nonzero(alive[rows])[1].reshape(rows.size, k)
            yield k, rows, cols


def simulate_paths(model: ModelSpec, policy, cfg: SimConfig) -> tuple[dict[str, np.ndarray], tuple[str, ...]]:
    """Per-path running, stopping and terminal costs."""
    T = model.horizon
    if cfg.t0 > T + 1e-12:
        raise ValueError("t0 beyond the horizon")
    big_n, k0, P = cfg.initial.big_n, cfg.initial.k, cfg.n_paths
    warnings: list[str] = []
    if isinstance(policy, FeedbackPolicy) and cfg.dt_sim > policy.hierarchy.dt * (1 + 1e-9):
        warnings.append("dt_sim coarser than the policy time mesh")
    n_steps = max(int(round((T - cfg.t0) / cfg.dt_sim)), 0) if T - cfg.t0 > 1e-12 else 0
    dt = (T - cfg.t0) / n_steps if n_steps else 0.0
    pos = np.tile(cfg.initial.positions, (P, 1))
    alive = np.ones((P, k0), dtype=bool)
    running = np.zeros(P)
    stopping = np.zeros(P)
    for s in range(n_steps):
        t = cfg.t0 + s * dt
        drift = np.zeros_like(pos)
        for k, rows, cols in _groups(alive):
            pts = np.take_along_axis(pos[rows], cols, axis=1)
            _, stop = _act(policy, model, big_n, t, pts)
            stopped = stop > 0
            if stopped.any():
                costs = removal_costs(model, pts[stopped], big_n)
                table = np.zeros((len(subsets(k)), k), dtype=bool)
                for idx, sub in enumerate(subsets(k)):
                    table[idx, list(sub)] = True
                mask = table[stop[stopped]]
                stopping[rows[stopped]] += (costs * mask).sum(axis=1)
                r = np.repeat(rows[stopped], k)[mask.ravel()]
                c = cols[stopped][mask]
                alive[r, c] = False
        for k, rows, cols in _groups(alive):
            pts = np.take_along_axis(pos[rows], cols, axis=1)
            a, _ = _act(policy, model, big_n, t, pts)
            meas = PointMeasure(pts, np.full(pts.shape, 1.0 / big_n))
            running[rows] += dt / big_n * model.lagrangian(pts, a, meas).sum(axis=1)
            full = np.zeros((rows.size, k0))
            np.put_along_axis(full, cols, a, axis=1)
            drift[rows] = full
        z = _step_normals(cfg.seed, s, (P, k0))
        pos = np.where(alive, np.mod(pos + drift * dt + math.sqrt(2.0 * dt) * z, 1.0), pos)
    terminal = np.full(P, model.terminal_zero())
    for k, rows, cols in _groups(alive):
        pts = np.take_along_axis(pos[rows], cols, axis=1)
        vals, _ = discrete_envelope_batch(model, pts, big_n)
        terminal[rows] = vals
    return {"running": running, "stopping": stopping, "terminal": terminal}, tuple(warnings)


def _estimate(parts: dict[str, np.ndarray], warnings=()) -> CostEstimate:
    total = parts["running"] + parts["stopping"] + parts["terminal"]
    n = total.size
    se = float(total.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    breakdown = {k: float(v.mean()) for k, v in parts.items()}
    mean = breakdown["running"] + breakdown["stopping"] + breakdown["terminal"]
    return CostEstimate(mean, se, n, breakdown, tuple(warnings), total)


def simulate(model: ModelSpec, policy, cfg: SimConfig) -> CostEstimate:
    parts, warnings = simulate_paths(model, policy, cfg)
    return _estimate(parts, warnings)


def policy_gap(model: ModelSpec, hierarchy: ValueHierarchy, cfg: SimConfig, perturbation: float, contact_tol: float | None = None) -> CostEstimate:
    """Cost of the extracted policy minus that of its drift scaled by ``1 + perturbation``.

    Both runs share random streams, so the estimate is a paired difference.
    """
    policy = extract_policy(hierarchy, model, contact_tol)
    a, _ = simulate_paths(model, policy, cfg)
    b, _ = simulate_paths(model, policy.scaled(1.0 + perturbation), cfg)
    diff = {k: a[k] - b[k] for k in a}
    return _estimate(diff)
