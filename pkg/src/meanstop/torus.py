"""Periodic 1-D grids, sub-probability measures and their distances.

Measures are stored as cell masses. A cell ``j`` is centred at the node
``x_j = j * h`` and spans ``[x_j - h/2, x_j + h/2)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, sparse

MASS_TOL = 1e-12


class GridMismatchError(ValueError):
    """Two grid objects that must share a grid do not."""


@dataclass(frozen=True)
class TorusGrid:
    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) < 1:
            raise ValueError(f"n_cells must be positive, got {self.n_cells}")
        object.__setattr__(self, "n_cells", int(self.n_cells))

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_cells) * self.h

    def wrap(self, j):
        return np.mod(j, self.n_cells)

    def nearest(self, x) -> np.ndarray:
        """Index of the cell containing each torus point."""
        return np.mod(np.rint(np.asarray(x, dtype=float) * self.n_cells), self.n_cells).astype(int)


@dataclass(frozen=True)
class PointMeasure:
    """Weighted atoms, possibly batched: ``points`` and ``weights`` of shape ``batch + (k,)``."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def total(self):
        return self.weights.sum(axis=-1)


@dataclass(frozen=True, eq=False)
class GridMeasure:
    grid: TorusGrid
    mass: np.ndarray

    def __post_init__(self):
        mass = np.array(self.mass, dtype=float)
        if mass.shape != (self.grid.n_cells,):
            raise ValueError(f"mass must have shape ({self.grid.n_cells},), got {mass.shape}")
        if not np.all(np.isfinite(mass)):
            raise ValueError("mass entries must be finite")
        if mass.min(initial=0.0) < -MASS_TOL:
            raise ValueError(f"negative cell mass {mass.min():.3e}")
        if mass.sum() > 1.0 + MASS_TOL:
            raise ValueError(f"total mass {mass.sum():.17g} exceeds 1")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def zero(cls, grid: TorusGrid) -> GridMeasure:
        return cls(grid, np.zeros(grid.n_cells))

    @classmethod
    def uniform(cls, grid: TorusGrid, total: float = 1.0) -> GridMeasure:
        return cls(grid, np.full(grid.n_cells, total / grid.n_cells))

    @classmethod
    def dirac(cls, grid: TorusGrid, x: float, weight: float = 1.0) -> GridMeasure:
        mass = np.zeros(grid.n_cells)
        mass[grid.nearest(x)] = weight
        return cls(grid, mass)

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    @property
    def density(self) -> np.ndarray:
        return self.mass / self.grid.h

    @property
    def points(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def weights(self) -> np.ndarray:
        return self.mass

    def __add__(self, other: GridMeasure) -> GridMeasure:
        _check_grid(self, other)
        return GridMeasure(self.grid, self.mass + other.mass)

    def scaled(self, factor) -> GridMeasure:
        return GridMeasure(self.grid, self.mass * factor)

    def leq(self, other: GridMeasure, tol: float = 1e-14) -> bool:
        _check_grid(self, other)
        return bool(np.all(self.mass <= other.mass + tol))


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n_cells,):
            raise ValueError(f"values must have shape ({self.grid.n_cells},), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def forward_diff(self) -> np.ndarray:
        return (np.roll(self.values, -1) - self.values) / self.grid.h


@dataclass(frozen=True, eq=False)
class EmpiricalState:
    """``K`` particles normalised by the initial population ``big_n``."""

    big_n: int
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        pos = np.mod(np.atleast_1d(np.array(self.positions, dtype=float)), 1.0)
        if pos.ndim != 1:
            raise ValueError("positions must be one-dimensional")
        if int(self.big_n) < 1:
            raise ValueError("big_n must be positive")
        if pos.size > self.big_n:
            raise ValueError(f"K={pos.size} exceeds N={self.big_n}")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "big_n", int(self.big_n))

    @property
    def k(self) -> int:
        return int(self.positions.size)

    @property
    def points(self) -> np.ndarray:
        return self.positions

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.k, 1.0 / self.big_n)

    @property
    def total(self) -> float:
        return self.k / self.big_n

    def without(self, indices) -> EmpiricalState:
        keep = np.setdiff1d(np.arange(self.k), np.atleast_1d(indices).astype(int))
        return EmpiricalState(self.big_n, self.positions[keep])

    def as_measure(self, grid: TorusGrid) -> GridMeasure:
        """Deposit each particle's mass ``1/N`` on its nearest cell."""
        mass = np.bincount(grid.nearest(self.positions), minlength=grid.n_cells) / self.big_n
        return GridMeasure(grid, mass)


def _check_grid(m, n):
    if m.grid != n.grid:
        raise GridMismatchError(f"grids differ: {m.grid} vs {n.grid}")


def circle_distance(x, y):
    """Shorter-arc distance on the unit circle."""
    d = np.abs(np.mod(np.asarray(x) - np.asarray(y), 1.0))
    return np.minimum(d, 1.0 - d)


# ---------------------------------------------------------------- distances


def _difference_matrix(n: int) -> sparse.csr_matrix:
    """Periodic forward difference ``(Df)_j = f_{j+1} - f_j`` (unscaled)."""
    eye = sparse.identity(n, format="csr")
    shift = sparse.csr_matrix((np.ones(n), (np.arange(n), (np.arange(n) + 1) % n)), shape=(n, n))
    return (shift - eye).tocsr()


def _linprog(c, A_ub, b_ub, A_eq=None, b_eq=None, bounds=None):
    res = optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    return res


def bl_norm(signed_mass: np.ndarray, h: float) -> float:
    """Dual ``W^{1,inf}`` norm of a signed grid measure, solved as the primal LP over test functions.

    Variables are ``(f_0..f_{n-1}, s, t)`` with ``|f_j| <= s``, ``|f_{j+1}-f_j|/h <= t`` and ``s + t <= 1``.
    """
    c_mass = np.asarray(signed_mass, dtype=float)
    n = c_mass.size
    if not np.any(c_mass):
        return 0.0
    eye = sparse.identity(n, format="csr")
    diff = _difference_matrix(n) / h
    col_s = sparse.csr_matrix(np.ones((n, 1)))
    zero = sparse.csr_matrix((n, 1))
    A = sparse.vstack(
        [
            sparse.hstack([eye, -col_s, zero]),
            sparse.hstack([-eye, -col_s, zero]),
            sparse.hstack([diff, zero, -col_s]),
            sparse.hstack([-diff, zero, -col_s]),
            sparse.csr_matrix(np.r_[np.zeros(n), 1.0, 1.0][None, :]),
        ]
    ).tocsr()
    b = np.r_[np.zeros(4 * n), 1.0]
    bounds = [(None, None)] * n + [(0, None), (0, None)]
    res = _linprog(-np.r_[c_mass, 0.0, 0.0], A, b, bounds=bounds)
    return max(-res.fun, 0.0)


def bl_distance(m: GridMeasure, n: GridMeasure) -> float:
    """Bounded-Lipschitz distance ``sup { <f, m - n> : ||f||_inf + ||Df||_inf <= 1 }``."""
    _check_grid(m, n)
    return bl_norm(m.mass - n.mass, m.grid.h)


def _bl_dual_blocks(n: int, h: float):
    """Constraint blocks of the dual (decomposition) form of the bounded-Lipschitz norm.

    ``||mu|| = min max(|mu1|_1, h |q|_1)`` over ``mu = mu1 + D^T q``; variables
    ``(mu1 (n), q (n), a (n) >= |mu1|, b (n) >= |q|, z)``.
    """
    eye = sparse.identity(n, format="csr")
    DT = _difference_matrix(n).T.tocsr()
    Z = sparse.csr_matrix((n, n))
    zc = sparse.csr_matrix((n, 1))
    A_ub = sparse.vstack(
        [
            sparse.hstack([eye, Z, -eye, Z, zc]),
            sparse.hstack([-eye, Z, -eye, Z, zc]),
            sparse.hstack([Z, eye, Z, -eye, zc]),
            sparse.hstack([Z, -eye, Z, -eye, zc]),
            sparse.csr_matrix(np.r_[np.zeros(2 * n), np.ones(n), np.zeros(n), -1.0][None, :]),
            sparse.csr_matrix(np.r_[np.zeros(3 * n), np.full(n, h), -1.0][None, :]),
        ]
    ).tocsr()
    A_mu = sparse.hstack([eye, DT, Z, Z, zc]).tocsr()
    return A_ub, A_mu


def bl_norm_dual(signed_mass: np.ndarray, h: float) -> float:
    """Same norm as :func:`bl_norm`, from the dual side (used as a cross-check)."""
    mu = np.asarray(signed_mass, dtype=float)
    n = mu.size
    A_ub, A_mu = _bl_dual_blocks(n, h)
    c = np.r_[np.zeros(4 * n), 1.0]
    bounds = [(None, None)] * (2 * n) + [(0, None)] * (2 * n + 1)
    res = _linprog(c, A_ub, np.zeros(A_ub.shape[0]), A_eq=A_mu, b_eq=mu, bounds=bounds)
    return float(res.fun)


def w1_distance(m: GridMeasure, n: GridMeasure) -> float:
    """1-Wasserstein distance on the circle between equal-mass grid measures.

    Uses ``W1 = h * min_c sum_j |F_j - c|`` with ``F`` the cumulative mass difference.
    """
    _check_grid(m, n)
    if abs(m.total - n.total) > 1e-10:
        raise ValueError(f"w1_distance needs equal masses, got {m.total} and {n.total}")
    F = np.cumsum(m.mass - n.mass)
    return float(m.grid.h * np.abs(F - np.median(F)).sum())


def rho_distance(m: GridMeasure, n: GridMeasure) -> float:
    """``n(T) - m(T) + inf { d(m, n') : n' <= n, n'(T) = m(T) }`` for ``m(T) <= n(T)``, symmetric otherwise.

    The inner infimum is one LP over ``n'`` and the dual variables of the
    bounded-Lipschitz norm.
    """
    _check_grid(m, n)
    if m.total > n.total:
        m, n = n, m
    size = m.grid.n_cells
    h = m.grid.h
    A_ub, A_mu = _bl_dual_blocks(size, h)
    zc = sparse.csr_matrix((A_ub.shape[0], size))
    A_ub = sparse.hstack([A_ub, zc]).tocsr()
    # mu1 + D^T q + n' = m
    A_eq = sparse.vstack(
        [
            sparse.hstack([A_mu, sparse.identity(size, format="csr")]),
            sparse.csr_matrix(np.r_[np.zeros(4 * size + 1), np.ones(size)][None, :]),
        ]
    ).tocsr()
    b_eq = np.r_[m.mass, m.total]
    c = np.r_[np.zeros(4 * size), 1.0, np.zeros(size)]
    bounds = [(None, None)] * (2 * size) + [(0, None)] * (2 * size + 1) + [(0.0, float(v)) for v in n.mass]
    res = _linprog(c, A_ub, np.zeros(A_ub.shape[0]), A_eq=A_eq, b_eq=b_eq, bounds=bounds)
    return float(n.total - m.total + max(res.fun, 0.0))


def matching_cost(a: np.ndarray, b: np.ndarray) -> float:
    """Minimal total circle distance matching every point of ``a`` to a distinct point of ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    cost = circle_distance(a[:, None], b[None, :])
    rows, cols = optimize.linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def empirical_rho(a: EmpiricalState, b: EmpiricalState) -> float:
    """``(K_b - K_a)/N`` plus the best matching of ``a`` into a size-``K_a`` sub-selection of ``b``."""
    if a.big_n != b.big_n:
        raise ValueError(f"normalisers differ: {a.big_n} vs {b.big_n}")
    if a.k > b.k:
        a, b = b, a
    return (b.k - a.k) / a.big_n + matching_cost(a.positions, b.positions) / a.big_n


def empirical_rho_bruteforce(a: EmpiricalState, b: EmpiricalState) -> float:
    """Enumerate sub-selections and permutations; for small ``K`` only."""
    if a.k > b.k:
        a, b = b, a
    best = 0.0 if a.k == 0 else np.inf
    for sub in itertools.combinations(range(b.k), a.k):
        for perm in itertools.permutations(sub):
            best = min(best, float(circle_distance(a.positions, b.positions[list(perm)]).sum()))
    return (b.k - a.k) / a.big_n + best / a.big_n


def approximate_measure(m0: GridMeasure, big_n: int) -> EmpiricalState:
    """Place ``round(N m0(T))`` particles at quantile midpoints of the normalised ``m0``.

    The cumulative distribution is linear inside each cell.
    """
    if big_n < 1:
        raise ValueError("big_n must be >= 1")
    total = m0.total
    k = int(round(big_n * total))
    if total <= 0.0 or k == 0:
        return EmpiricalState(big_n, np.zeros(0))
    h = m0.grid.h
    cdf = np.r_[0.0, np.cumsum(m0.mass / total)]
    edges = m0.grid.nodes[0] - h / 2 + h * np.arange(m0.grid.n_cells + 1)
    q = (np.arange(k) + 0.5) / k
    # np.interp needs strictly increasing xp; drop repeated cdf levels (empty cells)
    keep = np.r_[True, np.diff(cdf) > 0]
    xs = np.interp(q, cdf[keep], edges[keep])
    return EmpiricalState(big_n, np.mod(xs, 1.0))


# ---------------------------------------------------------------- serialisation


def format_measure(m: GridMeasure) -> str:
    lines = [f"# torus-measure n_cells={m.grid.n_cells}"]
    lines += [f"{j},{v:.17g}" for j, v in enumerate(m.mass)]
    return "\n".join(lines) + "\n"


def parse_measure(text: str) -> GridMeasure:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    header = lines[0]
    if not header.startswith("# torus-measure n_cells="):
        raise ValueError(f"not a torus-measure file: {header!r}")
    grid = TorusGrid(int(header.split("=", 1)[1]))
    mass = np.zeros(grid.n_cells)
    seen = set()
    for ln in lines[1:]:
        idx, val = ln.split(",")
        j = int(idx)
        if not 0 <= j < grid.n_cells or j in seen:
            raise ValueError(f"bad or repeated cell index {j}")
        seen.add(j)
        mass[j] = float(val)
    return GridMeasure(grid, mass)


def save_measure(m: GridMeasure, path) -> None:
    Path(path).write_text(format_measure(m))


def load_measure(path) -> GridMeasure:
    return parse_measure(Path(path).read_text())


def random_measure(grid: TorusGrid, rng: np.random.Generator, total: float | None = None, sparsity: float = 0.0) -> GridMeasure:
    """Random sub-probability measure, used by samplers and property checks."""
    w = rng.random(grid.n_cells)
    if sparsity > 0:
        w[rng.random(grid.n_cells) < sparsity] = 0.0
    if w.sum() == 0:
        w[rng.integers(grid.n_cells)] = 1.0
    if total is None:
        total = rng.uniform(0.05, 1.0)
    return GridMeasure(grid, w / w.sum() * total)
