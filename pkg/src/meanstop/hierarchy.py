"""Backward finite-difference solver for the N-particle hierarchy of obstacle HJB equations.

Level ``K`` holds ``V^{N,K}`` on the tensor grid ``(grid)^K`` at every time
node. Levels are solved in ascending ``K`` so that the obstacle of level
``K`` can read the finished tables of every lower level at the same time.
One backward step is

1. explicit Hamiltonian: ``V* = V - dt/N sum_i H^R(x^i, N D_i V, m_x)``,
   centred differences where the cell Peclet number ``h |D_pH|`` is at most 2
   and a Godunov upwind flux elsewhere;
2. implicit diffusion ``(I - dt sum_i Delta_i) V = V*``, solved exactly by FFT;
3. obstacle projection ``V = min(V, min_S V^{K-|S|}(x^{-S}) + (1/N) sum_{i in S} Psi(x^i, m_x))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envelopes import discrete_envelope_batch, removal_costs, subsets
from .models import ModelSpec, truncate_hamiltonian
from .torus import EmpiricalState, PointMeasure, TorusGrid

MAX_LEVEL = 3
MEMORY_BUDGET = 60_000_000  # stored float64 values across all tables
PECLET_LIMIT = 2.0


class CFLError(ValueError):
    def __init__(self, message: str, suggested_steps: int):
        super().__init__(message)
        self.suggested_steps = suggested_steps


class SolverDivergenceError(RuntimeError):
    pass


@dataclass
class ValueHierarchy:
    big_n: int
    k_max: int
    n_cells: int
    n_steps: int
    horizon: float
    tables: list[np.ndarray]
    radius: float = math.inf
    obstacle_mode: str = "all"
    model: ModelSpec | None = field(default=None, repr=False, compare=False)

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.n_cells)

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


def level_points(n_cells: int, k: int) -> np.ndarray:
    """Node coordinates of ``(grid)^k`` with shape ``(n,)*k + (k,)``."""
    nodes = np.arange(n_cells) / n_cells
    if k == 0:
        return np.zeros((0,))
    return np.stack(np.meshgrid(*([nodes] * k), indexing="ij"), axis=-1)


def _empirical(points: np.ndarray, big_n: int) -> PointMeasure:
    return PointMeasure(points, np.full(points.shape, 1.0 / big_n))


def _expand_lower(lower: np.ndarray, removed: tuple[int, ...]) -> np.ndarray:
    """View a level ``K - |S|`` slice as a function on ``(grid)^K`` constant in the removed coordinates."""
    if lower.ndim == 0:
        return lower
    return np.expand_dims(lower, axis=removed)


def obstacle_stack(lower_slices: list, costs: np.ndarray, k: int) -> np.ndarray:
    """Obstacle candidates for every nonempty removal set, in ``subsets(k)[1:]`` order.

    ``lower_slices[j]`` is the level ``j`` value at the current time.
    """
    out = []
    for s in subsets(k)[1:]:
        base = _expand_lower(np.asarray(lower_slices[k - len(s)]), s)
        out.append(base + costs[..., list(s)].sum(axis=-1))
    return np.stack([np.broadcast_to(o, costs.shape[:-1]) for o in out])


def single_removal_stack(lower_slices: list, costs: np.ndarray, k: int) -> np.ndarray:
    """Single removals plus the full removal only."""
    out = []
    for i in range(k):
        base = _expand_lower(np.asarray(lower_slices[k - 1]), (i,))
        out.append(base + costs[..., i])
    out.append(np.asarray(lower_slices[0]) + costs.sum(axis=-1))
    return np.stack([np.broadcast_to(o, costs.shape[:-1]) for o in out])


def _minimiser_momentum(model: ModelSpec, pts: np.ndarray, meas, radius: float, k: int) -> np.ndarray:
    """Per node and particle, the ``p`` where ``D_pH`` vanishes (bisection on ``[-R, R]``)."""
    lo = np.full(pts.shape, -radius)
    hi = np.full(pts.shape, radius)
    cols = []
    for i in range(k):
        x = pts[..., i : i + 1]
        a, b = lo[..., i : i + 1].copy(), hi[..., i : i + 1].copy()
        for _ in range(60):
            mid = 0.5 * (a + b)
            up = model.grad_p(x, mid, meas) >= 0
            b = np.where(up, mid, b)
            a = np.where(up, a, mid)
        cols.append(0.5 * (a + b))
    return np.concatenate(cols, axis=-1)


def _hamiltonian_term(model: ModelSpec, v: np.ndarray, pts, meas, pstar, big_n: int, h: float) -> np.ndarray:
    """``sum_i H_num(x^i, N D_i V, m_x)`` with the hybrid centred/upwind stencil."""
    k = v.ndim
    total = np.zeros_like(v)
    for i in range(k):
        fwd = big_n * (np.roll(v, -1, axis=i) - v) / h
        bwd = big_n * (v - np.roll(v, 1, axis=i)) / h
        cen = 0.5 * (fwd + bwd)
        x = pts[..., i : i + 1]
        ps = pstar[..., i : i + 1]
        h_cen = model.hamiltonian(x, cen[..., None], meas)[..., 0]
        drift = model.grad_p(x, cen[..., None], meas)[..., 0]
        h_up = np.maximum(
            model.hamiltonian(x, np.minimum(fwd[..., None], ps), meas),
            model.hamiltonian(x, np.maximum(bwd[..., None], ps), meas),
        )[..., 0]
        total += np.where(np.abs(drift) * h <= PECLET_LIMIT, h_cen, h_up)
    return total


def _diffusion_denominator(n_cells: int, k: int, dt: float) -> np.ndarray:
    h = 1.0 / n_cells
    full = 4.0 / h**2 * np.sin(np.pi * np.arange(n_cells) / n_cells) ** 2
    half = full[: n_cells // 2 + 1]
    den = np.ones((n_cells,) * (k - 1) + (half.size,))
    for i in range(k):
        lam = half if i == k - 1 else full
        shape = [1] * k
        shape[i] = lam.size
        den = den + dt * lam.reshape(shape)
    return den


def _terminal_gradient(values: np.ndarray, big_n: int, h: float) -> float:
    g = 0.0
    for i in range(values.ndim):
        g = max(g, float(np.max(np.abs(np.roll(values, -1, axis=i) - values))) * big_n / h)
    return g


def solve_hierarchy(
    model: ModelSpec,
    big_n: int,
    k_max: int,
    n_cells: int,
    n_steps: int,
    obstacle: str = "all",
    radius: float | None = None,
    memory_budget: int = MEMORY_BUDGET,
    layer_levels: int = 4,
) -> ValueHierarchy:
    """Solve ``V^{N,K}`` for ``K = 0..k_max`` on ``[0, T]`` with ``n_steps`` uniform steps.

    ``obstacle="all"`` enumerates every nonempty removal set; ``"single"``
    uses single removals plus the full removal only. The terminal envelope
    is kinked, so the ``r``-th step below ``T`` is split into
    ``2^(layer_levels - r)`` sub-steps; the obstacle is applied on the
    uniform mesh only.
    """
    if not 0 <= k_max <= MAX_LEVEL:
        raise ValueError(f"k_max must be in 0..{MAX_LEVEL}")
    if k_max > big_n:
        raise ValueError("k_max cannot exceed N")
    if obstacle not in ("all", "single"):
        raise ValueError("obstacle must be 'all' or 'single'")
    stored = sum((n_steps + 1) * n_cells**k for k in range(k_max + 1))
    if stored > memory_budget:
        raise MemoryError(f"{stored} table entries exceed the budget of {memory_budget}")
    T = model.horizon
    dt = T / n_steps
    h = 1.0 / n_cells
    g0 = model.terminal_zero()
    tables: list[np.ndarray] = [np.full(n_steps + 1, g0)]

    # terminal envelopes first; they calibrate the truncation radius
    terminals = [np.asarray(g0)]
    for k in range(1, k_max + 1):
        vals, _ = discrete_envelope_batch(model, level_points(n_cells, k), big_n)
        terminals.append(vals)
    if radius is None:
        grad = max([_terminal_gradient(t, big_n, h) for t in terminals[1:]], default=0.0)
        radius = 4.0 * max(grad, 1.0)
    model_r = truncate_hamiltonian(model, radius)

    for k in range(1, k_max + 1):
        pts = level_points(n_cells, k)
        meas = _empirical(pts, big_n)
        costs = removal_costs(model, pts, big_n)
        pstar = _minimiser_momentum(model, pts, meas, radius, k)
        vmax = float(
            np.max(np.abs(np.concatenate([model_r.grad_p(pts, np.full(pts.shape, s * radius), meas) for s in (-1.0, 1.0)])))
        )
        if dt * vmax > h * (1.0 + 1e-9):
            need = math.ceil(T * vmax / h)
            raise CFLError(f"dt*max|D_pH|/h = {dt * vmax / h:.3g} > 1 at K={k}; use n_steps >= {need}", need)
        stack_fn = obstacle_stack if obstacle == "all" else single_removal_stack
        dens: dict[int, np.ndarray] = {}
        table = np.empty((n_steps + 1,) + (n_cells,) * k)
        lower = lambda j: [tables[i][j] for i in range(k)]  # noqa: E731
        table[-1] = np.minimum(terminals[k], stack_fn(lower(n_steps), costs, k).min(axis=0))
        v = table[-1]
        for j in range(n_steps - 1, -1, -1):
            sub = 2 ** max(layer_levels - (n_steps - 1 - j), 0)
            if sub not in dens:
                dens[sub] = _diffusion_denominator(n_cells, k, dt / sub)
            for _ in range(sub):
                v = v - dt / sub / big_n * _hamiltonian_term(model_r, v, pts, meas, pstar, big_n, h)
                v = np.fft.irfftn(np.fft.rfftn(v) / dens[sub], s=v.shape, axes=tuple(range(k)))
            v = np.minimum(v, stack_fn(lower(j), costs, k).min(axis=0))
            if not np.all(np.isfinite(v)):
                raise SolverDivergenceError(f"non-finite values at K={k}, time index {j}")
            table[j] = v
        tables.append(table)
    return ValueHierarchy(big_n, k_max, n_cells, n_steps, T, tables, radius, obstacle, model)


# ---------------------------------------------------------------- interpolation


def interpolate(table: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Periodic multilinear interpolation of a ``(n,)*K`` table at points of shape ``batch + (K,)``."""
    points = np.asarray(points, dtype=float)
    k = table.ndim
    if k == 0:
        return np.broadcast_to(table, points.shape[:-1]).astype(float)
    n = table.shape[0]
    s = np.mod(points, 1.0) * n
    base = np.floor(s).astype(int)
    frac = s - base
    out = np.zeros(points.shape[:-1])
    for corner in range(1 << k):
        bits = [(corner >> i) & 1 for i in range(k)]
        w = np.ones(points.shape[:-1])
        idx = []
        for i, b in enumerate(bits):
            w = w * (frac[..., i] if b else 1.0 - frac[..., i])
            idx.append(np.mod(base[..., i] + b, n))
        out += w * table[tuple(idx)]
    return out


def _time_bracket(hier: ValueHierarchy, t: float) -> tuple[int, float]:
    if not -1e-12 <= t <= hier.horizon + 1e-12:
        raise ValueError(f"t={t} outside [0, {hier.horizon}]")
    s = min(max(t / hier.dt, 0.0), hier.n_steps)
    j = min(int(math.floor(s)), hier.n_steps - 1)
    return j, s - j


def query_value(hier: ValueHierarchy, t: float, state: EmpiricalState) -> float:
    """Multilinear in space, linear in time."""
    if state.k > hier.k_max:
        raise ValueError(f"K={state.k} exceeds k_max={hier.k_max}")
    if state.big_n != hier.big_n:
        raise ValueError("state and hierarchy use different N")
    j, w = _time_bracket(hier, t)
    tab = hier.tables[state.k]
    pts = state.positions[None, :]
    a = interpolate(tab[j], pts)[0]
    b = interpolate(tab[j + 1], pts)[0]
    return float((1.0 - w) * a + w * b)


# ---------------------------------------------------------------- policy


@dataclass
class FeedbackPolicy:
    """Drift ``-D_pH(x^i, N D_i V, m_x)`` and stopping sets for every level and time node.

    ``drift[K]`` has shape ``(n_steps + 1,) + (n,)*K + (K,)``; ``stop[K]``
    holds the index into ``subsets(K)`` of the removal set (0 means continue).
    """

    hierarchy: ValueHierarchy
    drift: list[np.ndarray]
    stop: list[np.ndarray]
    contact_tol: float
    drift_scale: float = 1.0

    def scaled(self, factor: float) -> FeedbackPolicy:
        return FeedbackPolicy(self.hierarchy, self.drift, self.stop, self.contact_tol, self.drift_scale * factor)


def centred_gradients(v: np.ndarray, h: float) -> np.ndarray:
    """Centred differences along every axis, stacked on a trailing axis."""
    return np.stack([(np.roll(v, -1, axis=i) - np.roll(v, 1, axis=i)) / (2 * h) for i in range(v.ndim)], axis=-1)


def extract_policy(hier: ValueHierarchy, model: ModelSpec, contact_tol: float | None = None) -> FeedbackPolicy:
    """Feedback drift and stopping region; contact tolerance defaults to ``10 (h^2 + dt)``."""
    if contact_tol is None:
        contact_tol = 10.0 * (hier.h**2 + hier.dt)
    model_r = truncate_hamiltonian(model, hier.radius)
    drift: list[np.ndarray] = [np.zeros((hier.n_steps + 1, 0))]
    stop: list[np.ndarray] = [np.zeros(hier.n_steps + 1, dtype=np.int16)]
    stack_fn = obstacle_stack if hier.obstacle_mode == "all" else single_removal_stack
    for k in range(1, hier.k_max + 1):
        pts = level_points(hier.n_cells, k)
        meas = _empirical(pts, hier.big_n)
        costs = removal_costs(model, pts, hier.big_n)
        tab = hier.tables[k]
        d = np.empty(tab.shape + (k,))
        s = np.zeros(tab.shape, dtype=np.int16)
        for j in range(hier.n_steps + 1):
            grads = hier.big_n * centred_gradients(tab[j], hier.h)
            d[j] = -model_r.grad_p(pts, grads, meas)
            obst = stack_fn([hier.tables[i][j] for i in range(k)], costs, k)
            best = obst.argmin(axis=0)
            gap = np.take_along_axis(obst, best[None], axis=0)[0] - tab[j]
            s[j] = np.where(gap <= contact_tol, _stack_to_subset_index(best, k, hier.obstacle_mode), 0)
        drift.append(d)
        stop.append(s)
    return FeedbackPolicy(hier, drift, stop, contact_tol)


def _stack_to_subset_index(best: np.ndarray, k: int, mode: str) -> np.ndarray:
    if mode == "all":
        return best + 1
    lookup = np.array([subsets(k).index((i,)) for i in range(k)] + [len(subsets(k)) - 1])
    return lookup[best]


# ---------------------------------------------------------------- regularity


def regularity_report(hier: ValueHierarchy, n_pairs: int = 400, seed: int = 0) -> dict[int, dict[str, float]]:
    """Empirical spatial, removal and time-Holder constants per level.

    * ``spatial``: ``sup N |V(t,x) - V(t,y)| / sum_i |x^i - y^i|`` over random node pairs;
    * ``removal``: ``sup N |V^{K-1}(t, x^{-i}) - V^K(t, x)|``;
    * ``holder``: ``sup |V(t,x) - V(s,x)| / |t - s|^{1/2}``.
    """
    rng = np.random.default_rng(seed)
    n, N = hier.n_cells, hier.big_n
    out: dict[int, dict[str, float]] = {}
    times = np.arange(hier.n_steps + 1)
    for k in range(1, hier.k_max + 1):
        tab = hier.tables[k]
        ia = rng.integers(0, n, size=(n_pairs, k))
        ib = np.mod(ia + rng.integers(-max(n // 8, 1), max(n // 8, 1) + 1, size=(n_pairs, k)), n)
        tj = rng.integers(0, hier.n_steps + 1, size=n_pairs)
        va = tab[(tj,) + tuple(ia.T)]
        vb = tab[(tj,) + tuple(ib.T)]
        dist = np.sum(np.minimum(np.abs(ia - ib), n - np.abs(ia - ib)), axis=1) / n
        ok = dist > 0
        spatial = float(np.max(N * np.abs(va - vb)[ok] / dist[ok])) if ok.any() else 0.0

        lower = hier.tables[k - 1]
        removal = 0.0
        for i in range(k):
            rest = np.delete(ia, i, axis=1)
            vl = lower[(tj,) + tuple(rest.T)] if k > 1 else lower[tj]
            removal = max(removal, float(np.max(N * np.abs(vl - va))))

        s1 = rng.choice(times, size=n_pairs)
        s2 = rng.choice(times, size=n_pairs)
        ok = s1 != s2
        v1 = tab[(s1,) + tuple(ia.T)]
        v2 = tab[(s2,) + tuple(ia.T)]
        holder = float(np.max(np.abs(v1 - v2)[ok] / np.sqrt(np.abs(s1 - s2)[ok] * hier.dt))) if ok.any() else 0.0
        out[k] = {"spatial": spatial, "removal": removal, "holder": holder}
    return out


def holder_exponent(hier: ValueHierarchy, k: int = 1, s_min: float | None = None, s_max: float | None = None, n_lags: int = 8) -> float:
    """Least-squares slope of ``log sup_x |V(T,x) - V(T - s,x)|`` against ``log s``.

    Lags are geometrically spaced over ``[s_min, s_max]``, by default
    ``[4 dt, T/64]``: shorter lags see the scheme's first-step layer, longer
    ones the saturation of the torus.
    """
    tab = hier.tables[k]
    m = hier.n_steps
    lo = 4 * hier.dt if s_min is None else s_min
    hi = hier.horizon / 64 if s_max is None else s_max
    if not 0 < lo < hi:
        raise ValueError("need 0 < s_min < s_max")
    lags = np.unique(np.clip(np.round(np.geomspace(lo, hi, n_lags) / hier.dt).astype(int), 1, m))
    end = tab[-1]
    sup = np.array([float(np.max(np.abs(tab[m - lag] - end))) for lag in lags])
    ok = sup > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(lags[ok] * hier.dt), np.log(sup[ok]), 1)[0])


def hierarchy_violations(hier: ValueHierarchy, model: ModelSpec) -> dict[str, float]:
    """Largest violation of each structural invariant, recomputed by direct indexing.

    * ``level0``: spread of ``V^{N,0}`` around ``G(0)``;
    * ``terminal``: ``|V^{N,K}(T) - G^{N,K}_Psi|``;
    * ``psi_monotone``: ``V^K(t,x) - V^{K-1}(t,x^{-i}) - Psi(x^i, m_x)/N`` over ``t, x, i``;
    * ``obstacle``: the same over every nonempty removal set.
    """
    N, n = hier.big_n, hier.n_cells
    out = {"level0": float(np.max(np.abs(hier.tables[0] - model.terminal_zero())))}
    terminal = psi_mono = obstacle = -math.inf
    for k in range(1, hier.k_max + 1):
        pts = level_points(n, k)
        env, _ = discrete_envelope_batch(model, pts, N)
        terminal = max(terminal, float(np.max(np.abs(hier.tables[k][-1] - env))))
        costs = model.psi(pts, _empirical(pts, N)) / N
        tab = hier.tables[k]
        for s in subsets(k)[1:]:
            keep = [i for i in range(k) if i not in s]
            lower = hier.tables[k - len(s)]
            # lower-level value at x^{-S}: broadcast the kept axes into the K-dim grid
            shape = [tab.shape[0]] + [n if i in keep else 1 for i in range(k)]
            below = lower.reshape(shape)
            gap = float(np.max(tab - below - costs[..., list(s)].sum(axis=-1)))
            obstacle = max(obstacle, gap)
            if len(s) == 1:
                psi_mono = max(psi_mono, gap)
    out.update(terminal=terminal, psi_monotone=psi_mono, obstacle=obstacle)
    return out


# ---------------------------------------------------------------- persistence


def format_level(hier: ValueHierarchy, k: int) -> str:
    lines = [f"# vnk N={hier.big_n} K={k} n_cells={hier.n_cells} n_steps={hier.n_steps} T={hier.horizon!r}"]
    tab = hier.tables[k].reshape(hier.n_steps + 1, -1)
    for row in tab:
        lines.append(",".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


def save_hierarchy(hier: ValueHierarchy, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(hier.k_max + 1):
        p = directory / f"vnk_K{k}.txt"
        p.write_text(format_level(hier, k))
        paths.append(p)
    return paths


def load_hierarchy(directory) -> ValueHierarchy:
    directory = Path(directory)
    tables = []
    meta = None
    k = 0
    while (directory / f"vnk_K{k}.txt").exists():
        text = (directory / f"vnk_K{k}.txt").read_text().splitlines()
        fields = dict(item.split("=") for item in text[0][len("# vnk ") :].split())
        meta = fields
        n_cells, n_steps = int(fields["n_cells"]), int(fields["n_steps"])
        rows = np.array([[float(v) for v in line.split(",")] for line in text[1:]])
        tables.append(rows.reshape((n_steps + 1,) + (n_cells,) * k))
        k += 1
    if meta is None:
        raise FileNotFoundError(f"no hierarchy tables in {directory}")
    return ValueHierarchy(int(meta["N"]), k - 1, int(meta["n_cells"]), int(meta["n_steps"]), float(meta["T"]), tables)
