"""Problem data: Hamiltonian, Lagrangian, stopping penalty and terminal cost.

Every measure argument is anything exposing ``points`` and ``weights``
(``GridMeasure``, ``EmpiricalState`` or a batched ``PointMeasure``) whose
arrays have shape ``batch + (k,)``. Query points ``x`` have shape
``batch + (q,)`` and results follow ``x``. Built-in models depend on the
measure only through its total mass and integrals against fixed functions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .torus import TorusGrid, bl_distance, random_measure

TWO_PI = 2.0 * np.pi


class UnsupportedModelError(ValueError):
    pass


def total_mass(m) -> np.ndarray:
    """Total mass with a trailing singleton axis, ready to broadcast against query points."""
    return np.asarray(m.weights).sum(axis=-1)[..., None]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    hamiltonian: Callable
    grad_p: Callable
    lagrangian: Callable
    grad_a: Callable
    psi: Callable
    psi_lin: Callable
    terminal: Callable
    terminal_lin: Callable | None = None
    lagrangian_lin: Callable | None = None
    horizon: float = 1.0
    # G(m) = terminal_offset + int terminal_density dm when G is affine
    terminal_density: Callable | None = None
    terminal_offset: float = 0.0
    cylindrical: bool = True
    lip_psi: float | None = None
    lip_terminal: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def replace(self, **changes) -> ModelSpec:
        return dataclasses.replace(self, **changes)

    @property
    def terminal_is_affine(self) -> bool:
        return self.terminal_density is not None

    def terminal_zero(self) -> float:
        """``G`` at the zero measure."""
        empty = _Empty()
        return float(self.terminal(empty))


class _Empty:
    points = np.zeros(0)
    weights = np.zeros(0)


# ---------------------------------------------------------------- builtins

DEFAULTS = {
    "quadratic": dict(f0_const=0.0, f0_amp=0.0, kappa=0.0, c0=1e3, c1=0.0, c2=0.0, g0=0.0, g1=1.0, g_kink=0.0, gamma=0.0, T=1.0),
    "congestion": dict(f0_const=0.0, f0_amp=0.0, kappa=0.0, c0=0.5, c1=0.5, c2=0.2, g0=0.6, g1=0.4, g_kink=0.0, gamma=0.0, T=1.0),
    "linearG": dict(f0_const=0.0, f0_amp=0.0, kappa=0.0, c0=1.0, c1=0.0, c2=0.0, g0=2.0, g1=0.0, g_kink=0.0, gamma=0.0, T=1.0),
}


def _kink(x):
    return np.abs(np.mod(x, 1.0) - 0.5)


def make_model(name: str, **params) -> ModelSpec:
    """Build a named model.

    Ingredients shared by all built-ins (``M`` is total mass):

    * ``H = p^2/2 - f0(x) - kappa M`` and ``L = a^2/2 + f0(x) + kappa M``
      with ``f0(x) = f0_const + f0_amp cos(2 pi x)``;
    * ``Psi(x, m) = c0 + c1 (1 - M) + c2 cos(2 pi x)``, non-increasing in ``m`` iff ``c1 >= 0``;
    * ``G(m) = int g dm + gamma M^2 / 2`` with ``g = g0 + g1 cos(2 pi x) + g_kink |x - 1/2|``.

    The names only change default parameters.
    """
    if name not in DEFAULTS:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(DEFAULTS)}")
    p = dict(DEFAULTS[name])
    unknown = set(params) - set(p)
    if unknown:
        raise KeyError(f"unknown parameters for {name}: {sorted(unknown)}")
    p.update({k: float(v) for k, v in params.items()})
    f0c, f0a, kappa = p["f0_const"], p["f0_amp"], p["kappa"]
    c0, c1, c2 = p["c0"], p["c1"], p["c2"]
    g0, g1, gk, gamma = p["g0"], p["g1"], p["g_kink"], p["gamma"]

    def f0(x):
        return f0c + f0a * np.cos(TWO_PI * x)

    def hamiltonian(x, p_, m):
        return 0.5 * np.square(p_) - f0(x) - kappa * total_mass(m)

    def grad_p(x, p_, m):
        return np.broadcast_to(np.asarray(p_, dtype=float), np.broadcast(x, p_).shape).copy()

    def lagrangian(x, a, m):
        return 0.5 * np.square(a) + f0(x) + kappa * total_mass(m)

    def grad_a(x, a, m):
        return np.broadcast_to(np.asarray(a, dtype=float), np.broadcast(x, a).shape).copy()

    def lagrangian_lin(x, a, m, y):
        return np.full(np.broadcast(x, a, y).shape, kappa)

    def psi(x, m):
        return c0 + c1 * (1.0 - total_mass(m)) + c2 * np.cos(TWO_PI * np.asarray(x))

    def psi_lin(x, m, y):
        return np.full(np.broadcast(x, y).shape, -c1)

    def g(y):
        return g0 + g1 * np.cos(TWO_PI * y) + gk * _kink(y)

    def terminal(m):
        w = np.asarray(m.weights)
        val = (g(np.asarray(m.points)) * w).sum(axis=-1)
        if gamma:
            val = val + 0.5 * gamma * np.square(w.sum(axis=-1))
        return val

    def terminal_lin(m, y):
        val = g(np.asarray(y))
        if gamma:
            val = val + gamma * total_mass(m)
        return val

    lip_g = abs(g0) + abs(g1) + 0.5 * abs(gk) + TWO_PI * abs(g1) + abs(gk) + abs(gamma)
    return ModelSpec(
        name=name,
        hamiltonian=hamiltonian,
        grad_p=grad_p,
        lagrangian=lagrangian,
        grad_a=grad_a,
        psi=psi,
        psi_lin=psi_lin,
        terminal=terminal,
        terminal_lin=terminal_lin,
        lagrangian_lin=lagrangian_lin,
        horizon=p["T"],
        terminal_density=None if gamma else g,
        terminal_offset=0.0,
        cylindrical=True,
        lip_psi=TWO_PI * abs(c2) + abs(c1),
        lip_terminal=lip_g,
        params=p,
    )


def builtin_models() -> dict[str, ModelSpec]:
    return {name: make_model(name) for name in DEFAULTS}


# ---------------------------------------------------------------- truncation


def truncate_hamiltonian(model: ModelSpec, radius: float) -> ModelSpec:
    """Replace ``H(x, p, m)`` by ``H(x, clip(p, -R, R), m)``; ``D_pH`` vanishes outside ``[-R, R]``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    H, Hp = model.hamiltonian, model.grad_p

    def hamiltonian(x, p, m):
        return H(x, np.clip(p, -radius, radius), m)

    def grad_p(x, p, m):
        p = np.asarray(p, dtype=float)
        return np.where(np.abs(p) <= radius, Hp(x, np.clip(p, -radius, radius), m), 0.0)

    return model.replace(hamiltonian=hamiltonian, grad_p=grad_p, params={**model.params, "truncation": radius})


# ---------------------------------------------------------------- validation


@dataclass
class ValidatorReport:
    flags: dict[str, bool]
    constants: dict[str, float]
    samples: int
    messages: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())


def _coercivity_constant(values, sq):
    """Smallest ``C >= 1`` with ``sq/C - C <= values <= C sq + C`` on every sample."""
    upper = np.max(values / (sq + 1.0))
    lower = np.max((-values + np.sqrt(values**2 + 4.0 * sq)) / 2.0)
    return float(max(1.0, upper, lower))


def validate(
    model: ModelSpec,
    samples: int = 200,
    seed: int = 0,
    n_cells: int = 16,
    box: float = 10.0,
    max_constant: float = 50.0,
    gap_tol: float = 1e-6,
) -> ValidatorReport:
    """Sample the standing assumptions on ``(x, p, a, m)`` with ``p, a`` in ``[-box, box]``.

    A non-finite evaluation is reported as a failed flag rather than raised.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    grid = TorusGrid(n_cells)
    flags: dict[str, bool] = {}
    consts: dict[str, float] = {}
    msgs: list[str] = []

    measures = [random_measure(grid, rng) for _ in range(samples)]
    xs = rng.random(samples)
    ps = rng.uniform(-box, box, samples)
    ps[:3] = [-box, 0.0, box]
    As = rng.uniform(-box, box, samples)

    with np.errstate(all="ignore"):
        Hv = np.array([model.hamiltonian(np.array([x]), np.array([p]), m)[0] for x, p, m in zip(xs, ps, measures)])
        Lv = np.array([model.lagrangian(np.array([x]), np.array([a]), m)[0] for x, a, m in zip(xs, As, measures)])
        eps = 1e-4
        Hpp = np.array(
            [
                (model.grad_p(np.array([x]), np.array([p + eps]), m)[0] - model.grad_p(np.array([x]), np.array([p - eps]), m)[0]) / (2 * eps)
                for x, p, m in zip(xs, ps, measures)
            ]
        )
    finite = bool(np.all(np.isfinite(Hv)) and np.all(np.isfinite(Lv)) and np.all(np.isfinite(Hpp)))
    flags["finite"] = finite
    if not finite:
        msgs.append("non-finite model evaluation")
        return ValidatorReport(flags, consts, samples, msgs)

    c_h = _coercivity_constant(Hv, ps**2)
    c_l = _coercivity_constant(Lv, As**2)
    consts["C_hamiltonian"] = c_h
    consts["C_lagrangian"] = c_l
    flags["hamiltonian_growth"] = c_h <= max_constant
    flags["lagrangian_growth"] = c_l <= max_constant
    if Hpp.min() <= 0:
        flags["hamiltonian_convexity"] = False
        consts["C_convexity"] = np.inf
    else:
        c_conv = float(max(Hpp.max(), 1.0 / Hpp.min()))
        consts["C_convexity"] = c_conv
        flags["hamiltonian_convexity"] = c_conv <= max_constant

    # Legendre duality gap, sup over p by grid search then a bounded refinement
    pgrid = np.linspace(-4 * box, 4 * box, 1601)
    gaps = []
    for x, a, m in zip(xs[:50], As[:50], measures[:50]):
        xv = np.full_like(pgrid, x)
        vals = -pgrid * a - model.hamiltonian(xv, pgrid, m)
        j = int(np.argmax(vals))
        lo, hi = pgrid[max(j - 1, 0)], pgrid[min(j + 1, pgrid.size - 1)]
        res = optimize.minimize_scalar(
            lambda p: -(-p * a - model.hamiltonian(np.array([x]), np.array([p]), m)[0]),
            bounds=(lo, hi),
            method="bounded",
            options={"xatol": 1e-12},
        )
        sup = max(vals[j], -res.fun)
        gaps.append(abs(model.lagrangian(np.array([x]), np.array([a]), m)[0] - sup))
    consts["duality_gap"] = float(max(gaps))
    flags["legendre_duality"] = consts["duality_gap"] <= gap_tol

    # Psi non-increasing along random chains n <= m
    worst = 0.0
    for m in measures[: min(samples, 100)]:
        n = m.scaled(rng.random(grid.n_cells))
        viol = model.psi(grid.nodes, n) - model.psi(grid.nodes, m)
        worst = min(worst, float(viol.min()))
    consts["psi_monotonicity_violation"] = -worst
    flags["psi_non_increasing"] = worst >= -1e-12

    # sampled Lipschitz constants
    xg = np.linspace(0, 1, 257)
    lip_x = 0.0
    for m in measures[:20]:
        v = model.psi(xg, m)
        lip_x = max(lip_x, float(np.max(np.abs(np.diff(v))) / (xg[1] - xg[0])))
    lip_m = 0.0
    lip_g = 0.0
    for m, n in zip(measures[:20], measures[20:40]):
        d = bl_distance(m, n)
        if d > 1e-12:
            lip_m = max(lip_m, float(np.max(np.abs(model.psi(grid.nodes, m) - model.psi(grid.nodes, n)))) / d)
            lip_g = max(lip_g, abs(float(model.terminal(m)) - float(model.terminal(n))) / d)
    consts["lip_psi_x"] = lip_x
    consts["lip_psi_m"] = lip_m
    consts["lip_terminal"] = lip_g
    flags["psi_lipschitz"] = lip_x + lip_m <= max_constant
    flags["terminal_lipschitz"] = lip_g <= max_constant
    return ValidatorReport(flags, consts, samples, msgs)


def lipschitz_constants(model: ModelSpec, seed: int = 0) -> tuple[float, float]:
    """Lipschitz constants of ``Psi`` and ``G``: analytic when the model carries them, sampled x1.5 otherwise."""
    if model.lip_psi is not None and model.lip_terminal is not None:
        return model.lip_psi, model.lip_terminal
    rep = validate(model, samples=60, seed=seed)
    lp = model.lip_psi if model.lip_psi is not None else 1.5 * (rep.constants["lip_psi_x"] + rep.constants["lip_psi_m"])
    lg = model.lip_terminal if model.lip_terminal is not None else 1.5 * rep.constants["lip_terminal"]
    return lp, lg
