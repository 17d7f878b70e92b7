"""The obstacle functional ``Phi(mu) = sup_{f <= 0} <mu, f> - |f|_{H1}^2 / 2`` on the periodic grid.

Discrete geometry, shared by every norm here: with the forward difference
``D`` and ``S = I + D^T D``::

    <f, g>_{H1}  = h f.S g
    <mu, f>      = h mu.f           (mu a density)
    |mu|_{H-1}^2 = h mu.S^{-1} mu

The maximiser solves ``S f + lambda = mu`` with ``f <= 0``, ``lambda >= 0``
and ``lambda f = 0``, so ``Phi = |f|_{H1}^2 / 2 = <mu, f> / 2`` holds exactly.
It is approached through the penalised equation ``S f + f_+ / eps = mu``
(semismooth Newton, eps halved until Phi settles) and finished by a
primal-dual active-set pass on the exact problem.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .torus import GridFunction, TorusGrid


class PhiConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhiResult:
    value: float
    f_hat: GridFunction
    epsilon_used: float
    newton_iters: int
    method: str = "newton"


@lru_cache(maxsize=32)
def _h1_operator(n: int) -> sparse.csc_matrix:
    """``S = I + D^T D`` for the forward difference ``D`` on ``n`` periodic cells of width ``1/n``."""
    h = 1.0 / n
    eye = sparse.identity(n, format="csr")
    shift = sparse.csr_matrix((np.ones(n), (np.arange(n), (np.arange(n) + 1) % n)), shape=(n, n))
    d = (shift - eye) / h
    return sparse.csc_matrix(eye + d.T @ d)


def _density(mu) -> tuple[np.ndarray, TorusGrid]:
    if isinstance(mu, GridFunction):
        return np.asarray(mu.values, dtype=float), mu.grid
    arr = np.asarray(mu, dtype=float)
    if arr.ndim != 1 or arr.size < 3:
        raise ValueError("mu must be a 1-d grid density with at least 3 cells")
    return arr, TorusGrid(arr.size)


def forward_difference(f: np.ndarray) -> np.ndarray:
    n = f.size
    return (np.roll(f, -1) - f) * n


def h1_inner(f, g) -> float:
    f, g = np.asarray(f, dtype=float), np.asarray(g, dtype=float)
    h = 1.0 / f.size
    return float(h * np.dot(f, g) + h * np.dot(forward_difference(f), forward_difference(g)))


def h1_norm(f) -> float:
    return float(np.sqrt(max(h1_inner(f, f), 0.0)))


def h_minus1_norm(mu) -> float:
    """``sqrt(<mu, w>)`` with ``(I - Lap) w = mu``."""
    m, grid = _density(mu)
    w = splinalg.spsolve(_h1_operator(grid.n_cells), m)
    return float(np.sqrt(max(grid.h * np.dot(m, w), 0.0)))


def pairing(mu, f) -> float:
    """``<mu, f> = h sum mu f`` for a density ``mu``."""
    m, grid = _density(mu)
    return float(grid.h * np.dot(m, np.asarray(f, dtype=float)))


def phi_objective(mu, f) -> float:
    """``<mu, f> - |f|_{H1}^2 / 2``."""
    return pairing(mu, f) - 0.5 * h1_inner(f, f)


def phi_penalized(mu, epsilon: float, f0: np.ndarray | None = None, max_iter: int = 100) -> tuple[np.ndarray, int]:
    """Solve ``S f + f_+ / eps = mu`` by semismooth Newton on the set ``{f > 0}``.

    Raises ``PhiConvergenceError`` if the active set cycles.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    m, grid = _density(mu)
    S = _h1_operator(grid.n_cells)
    f = splinalg.spsolve(S, m) if f0 is None else np.asarray(f0, dtype=float)
    active = f > 0
    seen = set()
    for it in range(1, max_iter + 1):
        key = active.tobytes()
        if key in seen:
            raise PhiConvergenceError(f"active set cycled after {it} Newton steps")
        seen.add(key)
        f = splinalg.spsolve(sparse.csc_matrix(S + sparse.diags(active / epsilon)), m)
        new = f > 0
        if np.array_equal(new, active):
            return f, it
        active = new
    raise PhiConvergenceError(f"no Newton convergence in {max_iter} steps")


def _active_set_polish(m: np.ndarray, f: np.ndarray, max_iter: int = 100) -> tuple[np.ndarray, int] | None:
    """Primal-dual active-set iteration for ``S f + lambda = mu``, ``f <= 0 <= lambda``, ``lambda f = 0``."""
    n = m.size
    S = _h1_operator(n)
    active = f > -1e-12
    for it in range(1, max_iter + 1):
        free = ~active
        g = np.zeros(n)
        if free.any():
            g[free] = splinalg.spsolve(sparse.csc_matrix(S[free][:, free]), m[free])
        lam = m - S @ g
        new = (lam + g) > 0
        if np.array_equal(new, active):
            # a repeated set is feasible: g = 0 < lambda on it, lambda = 0 >= g off it
            return np.minimum(g, 0.0), it
        active = new
    return None


def _projected_ascent(m: np.ndarray, f: np.ndarray, max_iter: int = 20000, tol: float = 1e-12) -> tuple[np.ndarray, int]:
    """Projected gradient ascent on the exact problem; every accepted step increases the objective."""
    n = m.size
    S = _h1_operator(n)
    step = 1.0 / (1.0 + 4.0 * n * n)  # 1 / lambda_max(S)
    f = np.minimum(f, 0.0)
    obj = phi_objective(m, f)
    for it in range(1, max_iter + 1):
        grad = m - S @ f
        nxt = np.minimum(f + step * grad, 0.0)
        new_obj = phi_objective(m, nxt)
        if new_obj < obj - 1e-15:
            raise PhiConvergenceError("projected ascent lost monotonicity")
        if np.max(np.abs(nxt - f)) <= tol:
            return nxt, it
        f, obj = nxt, new_obj
    return f, max_iter


def phi_solve(mu, epsilon: float = 1e-2, tol: float = 1e-8, min_epsilon: float = 1e-12) -> PhiResult:
    """``Phi(mu)`` and its maximiser ``f_hat <= 0``.

    ``epsilon`` is halved until consecutive penalised values differ by less
    than ``tol``; the result is then polished on the exact constrained problem.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    m, grid = _density(mu)
    S = _h1_operator(grid.n_cells)
    iters = 0
    method = "newton"
    eps = epsilon
    try:
        f, k = phi_penalized(m, eps)
        iters += k
        prev = 0.5 * grid.h * float(f @ (S @ f))
        while eps > min_epsilon:
            eps *= 0.5
            f, k = phi_penalized(m, eps, f0=f)
            iters += k
            val = 0.5 * grid.h * float(f @ (S @ f))
            if abs(val - prev) < tol:
                break
            prev = val
    except PhiConvergenceError:
        f, k = _projected_ascent(m, np.zeros_like(m))
        iters += k
        method = "projected-ascent"
    polished = _active_set_polish(m, f)
    if polished is not None:
        f, k = polished
        iters += k
    else:
        f = np.minimum(f, 0.0)
    value = 0.5 * h1_inner(f, f)
    return PhiResult(value, GridFunction(grid, f), eps, iters, method)


def phi_value(mu, **kw) -> float:
    return phi_solve(mu, **kw).value


def phi_gradient_check(mu, directions, t: float = 1e-4) -> float:
    """Worst relative error between central differences of ``Phi`` and ``<nu, f_hat>``."""
    m, grid = _density(mu)
    f_hat = phi_solve(m).f_hat.values
    worst = 0.0
    for nu in directions:
        nu, _ = _density(nu)
        if not np.any(nu):
            raise ValueError("directions must be nonzero")
        fd = (phi_value(m + t * nu) - phi_value(m - t * nu)) / (2 * t)
        exact = pairing(nu, f_hat)
        err = abs(fd - exact)
        if err > 1e-12:
            worst = max(worst, err / max(abs(exact), abs(fd)))
    return worst


def phi_lipschitz_check(pairs) -> float:
    """``max |f1 - f2|_{H1} / |mu1 - mu2|_{H-1}`` over pairs, skipping coincident ones."""
    worst = 0.0
    for mu1, mu2 in pairs:
        a, _ = _density(mu1)
        b, _ = _density(mu2)
        den = h_minus1_norm(a - b)
        if den <= 1e-14:
            continue
        f1 = phi_solve(a).f_hat.values
        f2 = phi_solve(b).f_hat.values
        worst = max(worst, h1_norm(f1 - f2) / den)
    return worst


def phi_energy_inequality_check(mu) -> float:
    """``int D f_hat . D mu + 2 Phi(mu) - |mu_-|_2^2``, nonnegative in theory."""
    m, grid = _density(mu)
    res = phi_solve(m)
    f = res.f_hat.values
    cross = grid.h * float(np.dot(forward_difference(f), forward_difference(m)))
    neg = grid.h * float(np.sum(np.square(np.minimum(m, 0.0))))
    return cross + 2.0 * res.value - neg
