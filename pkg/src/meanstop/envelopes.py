"""Psi-monotone envelopes of the terminal cost and their smooth approximation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .models import ModelSpec, UnsupportedModelError, lipschitz_constants
from .torus import EmpiricalState, GridMeasure, PointMeasure, circle_distance

MAX_ENUMERATION_K = 20


class EnvelopeCapacityError(ValueError):
    pass


@dataclass(frozen=True)
class EnvelopeResult:
    value: float
    minimizer: tuple | GridMeasure


@lru_cache(maxsize=None)
def subsets(k: int) -> tuple[tuple[int, ...], ...]:
    """All subsets of ``range(k)``, by size and then lexicographically."""
    return tuple(s for r in range(k + 1) for s in itertools.combinations(range(k), r))


def removal_costs(model: ModelSpec, points: np.ndarray, big_n: int) -> np.ndarray:
    """``Psi(x^i, m_x^{N,K}) / N`` for every particle of a batch of states ``(..., K)``."""
    weights = np.full(points.shape, 1.0 / big_n)
    return model.psi(points, PointMeasure(points, weights)) / big_n


def discrete_envelope_batch(model: ModelSpec, points: np.ndarray, big_n: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised discrete envelope over a batch of states.

    Returns the envelope values (batch shape) and the index into
    ``subsets(K)`` of the minimising removal set.
    """
    points = np.asarray(points, dtype=float)
    k = points.shape[-1]
    if k > MAX_ENUMERATION_K:
        raise EnvelopeCapacityError(f"K={k} > {MAX_ENUMERATION_K}: 2^K enumeration is infeasible, use a greedy envelope")
    costs = removal_costs(model, points, big_n)
    vals = []
    for s in subsets(k):
        keep = [i for i in range(k) if i not in s]
        kept = points[..., keep]
        g = model.terminal(PointMeasure(kept, np.full(kept.shape, 1.0 / big_n)))
        g = np.broadcast_to(g, points.shape[:-1])
        vals.append(g + costs[..., list(s)].sum(axis=-1))
    vals = np.stack(vals)
    idx = np.argmin(vals, axis=0)
    return np.take_along_axis(vals, idx[None], axis=0)[0], idx


def discrete_envelope(model: ModelSpec, state: EmpiricalState) -> EnvelopeResult:
    """Exact minimum over removal sets ``S`` of ``G(m_{x^-S}) + (1/N) sum_{i in S} Psi(x^i, m_x)``.

    Ties go to the smaller set, then the lexicographically first one.
    """
    val, idx = discrete_envelope_batch(model, state.positions, state.big_n)
    return EnvelopeResult(float(val), subsets(state.k)[int(idx)])


def continuous_envelope(model: ModelSpec, m: GridMeasure, n_starts: int = 8, seed: int = 0, max_iter: int = 2000) -> EnvelopeResult:
    """Minimise ``G(m') + int Psi(x, m) d(m - m')`` over ``0 <= m' <= m``."""
    if not model.cylindrical:
        raise UnsupportedModelError("continuous envelope needs a cylindrical terminal cost")
    x = m.grid.nodes
    psi = model.psi(x, m)
    if model.terminal_is_affine:
        g = model.terminal_density(x)
        keep = g <= psi
        mp = GridMeasure(m.grid, np.where(keep, m.mass, 0.0))
        value = model.terminal_offset + float(np.dot(g, mp.mass)) + float(np.dot(psi, m.mass - mp.mass))
        return EnvelopeResult(value, mp)
    if model.terminal_lin is None:
        raise UnsupportedModelError("nonlinear terminal cost needs its linear derivative")

    def objective(w):
        return float(model.terminal(GridMeasure(m.grid, w))) + float(np.dot(psi, m.mass - w))

    def gradient(w):
        return model.terminal_lin(GridMeasure(m.grid, w), x) - psi

    rng = np.random.default_rng(seed)
    starts = [m.mass.copy(), np.zeros_like(m.mass), 0.5 * m.mass]
    while len(starts) < n_starts:
        starts.append(m.mass * rng.random(m.mass.size))
    best_val, best_w = np.inf, None
    for w in starts:
        f = objective(w)
        step = 1.0
        for _ in range(max_iter):
            gvec = gradient(w)
            while True:
                cand = np.clip(w - step * gvec, 0.0, m.mass)
                fc = objective(cand)
                if fc <= f - 1e-4 / step * np.sum((cand - w) ** 2) or step < 1e-12:
                    break
                step *= 0.5
            moved = np.max(np.abs(cand - w))
            w, f = cand, min(fc, f)
            step = min(step * 2.0, 1e6)
            if moved < 1e-14:
                break
        if f < best_val - 1e-15:
            best_val, best_w = f, w
    return EnvelopeResult(best_val, GridMeasure(m.grid, best_w))


# ---------------------------------------------------------------- mollification


def _bump(r):
    out = np.zeros_like(r)
    inside = np.abs(r) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


@dataclass(frozen=True)
class PartitionOfUnity:
    """Smooth periodic bumps on a uniform lattice, normalised to sum to one."""

    centers: np.ndarray
    spacing: float

    @classmethod
    def for_diameter(cls, delta: float) -> PartitionOfUnity:
        n = max(3, math.ceil(2.0 / delta))
        return cls(np.arange(n) / n, 1.0 / n)

    @property
    def size(self) -> int:
        return self.centers.size

    def __call__(self, x) -> np.ndarray:
        """Values ``phi_i(x)`` with the patch index as the last axis."""
        x = np.asarray(x, dtype=float)
        raw = _bump(circle_distance(x[..., None], self.centers) / self.spacing)
        return raw / raw.sum(axis=-1, keepdims=True)

    def integrals(self, n_quad: int = 8192) -> np.ndarray:
        xq = (np.arange(n_quad) + 0.5) / n_quad
        return self(xq).mean(axis=0)

    def max_slope(self, n_quad: int = 8192) -> float:
        xq = np.arange(n_quad) / n_quad
        return float(np.max(np.abs(np.diff(self(np.r_[xq, 1.0]), axis=0))) * n_quad)


def mollify_terminal(model: ModelSpec, delta: float, eta: float, n_samples: int = 64, seed: int = 0) -> ModelSpec:
    """Smooth, Psi-non-increasing replacement for ``G`` built on a partition of unity.

    ``G_{delta,eta}(m)`` averages ``G(sum_i (a_i(m) + y_i) delta_{x_i})`` over
    ``y ~ rho_eta^{(x)n}``, with ``a_i(m) = <phi_i, (1 - eta/r) m + (eta/r) Leb>``,
    and is tilted by ``-C (delta + (1 + n) eta + eta / r) m(T)``.
    """
    if not delta > 0 or not eta > 0:
        raise ValueError("delta and eta must be positive")
    pou = PartitionOfUnity.for_diameter(delta)
    ints = pou.integrals()
    r_delta = float(ints.min())
    if eta >= r_delta:
        raise ValueError(f"eta={eta} must be below r_delta={r_delta:.6g}")
    lam = eta / r_delta
    lip_psi, lip_g = lipschitz_constants(model)
    c_tilt = lip_psi + lip_g
    tilt = c_tilt * (delta + (1 + pou.size) * eta + lam)
    anchors = pou.centers
    G, G_lin = model.terminal, model.terminal_lin

    rng = np.random.default_rng(seed)
    # rho_eta: density proportional to (1 - (y/eta)^2)^2 on [-eta, eta], antithetic pairs
    half = eta * (2.0 * rng.beta(3.0, 3.0, size=(n_samples // 2, pou.size)) - 1.0)
    ys = np.concatenate([half, -half])

    def coefficients(m):
        phi = pou(np.asarray(m.points))
        pair = np.einsum("...k,...ki->...i", np.asarray(m.weights), phi)
        return (1.0 - lam) * pair + lam * ints

    def averaged(m, fn):
        a = coefficients(m)
        w = a[..., None, :] + ys
        pts = np.broadcast_to(anchors, w.shape)
        return fn(PointMeasure(pts, w))

    if model.terminal_is_affine:
        g = model.terminal_density
        gx = g(anchors)
        offset = model.terminal_offset + lam * float(np.dot(gx, ints))

        def density(y):
            return (1.0 - lam) * pou(y) @ gx - tilt

        def terminal(m):
            w = np.asarray(m.weights)
            return offset + (density(np.asarray(m.points)) * w).sum(axis=-1)

        def terminal_lin(m, y):
            return density(np.asarray(y))

        return model.replace(
            terminal=terminal,
            terminal_lin=terminal_lin,
            terminal_density=density,
            terminal_offset=offset,
            lip_terminal=None,
            params={**model.params, "mollify_delta": delta, "mollify_eta": eta},
        )

    if G_lin is None:
        raise UnsupportedModelError("mollification of a nonlinear G needs its linear derivative")

    def terminal(m):
        return averaged(m, G).mean(axis=-1) - tilt * np.asarray(m.weights).sum(axis=-1)

    def terminal_lin(m, y):
        a = coefficients(m)
        w = a[None, :] + ys
        pts = np.broadcast_to(anchors, w.shape)
        dg = G_lin(PointMeasure(pts, w), pts).mean(axis=0)
        return (1.0 - lam) * pou(np.asarray(y)) @ dg - tilt

    return model.replace(
        terminal=terminal,
        terminal_lin=terminal_lin,
        terminal_density=None,
        lip_terminal=None,
        params={**model.params, "mollify_delta": delta, "mollify_eta": eta},
    )
