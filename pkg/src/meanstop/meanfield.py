"""Mean-field control with killing: Fokker-Planck scheme, adjoint, and the regularised value.

Discrete state equation on a uniform time mesh, for step ``k``::

    m'      = (m^k - atom^k) / (1 + dt beta^k)       # implicit killing
    m~      = A(alpha^k) m'                          # donor-cell upwind transport
    m^{k+1} = (I - dt Lap)^{-1} m~                   # implicit diffusion (FFT)

The mass removed in step ``k`` is exactly ``dt sum beta m'``. The discrete
cost charged to a control is::

    J = sum_k dt sum_j m'_j [L(x_j, alpha_j, m^k) + Psi(x_j, mu^k) beta_j + delta/2 beta_j^2]
        + sum_k sum_j atom^k_j Psi(x_j, m^k) + G(m^M)

with ``mu^k = sum_l w_l m^{k-l}`` the backward time mollification
(``m`` extended by the initial measure, or a supplied history, before
``t0``). The adjoint ``u`` is the exact discrete adjoint of this scheme,
so adjoint gradients agree with finite differences of ``J`` to rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelSpec
from .torus import GridMeasure, PointMeasure, TorusGrid, bl_distance


class NegativeMassError(RuntimeError):
    pass


class NewtonError(RuntimeError):
    pass


@dataclass(frozen=True)
class MFMesh:
    n_cells: int
    n_steps: int
    t0: float
    horizon: float

    def __post_init__(self):
        if self.n_steps < 1 or not self.horizon > self.t0:
            raise ValueError("mesh needs n_steps >= 1 and t0 < T")

    @classmethod
    def with_step(cls, n_cells: int, dt: float, t0: float, horizon: float) -> MFMesh:
        return cls(n_cells, max(int(round((horizon - t0) / dt)), 1), t0, horizon)

    @property
    def dt(self) -> float:
        return (self.horizon - self.t0) / self.n_steps

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.n_cells)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def tail(self, k: int) -> MFMesh:
        """The same mesh restarted at time index ``k``."""
        return MFMesh(self.n_cells, self.n_steps - k, float(self.times[k]), self.horizon)


@dataclass
class ControlField:
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def zeros(cls, mesh: MFMesh) -> ControlField:
        shape = (mesh.n_steps, mesh.n_cells)
        return cls(np.zeros(shape), np.zeros(shape))

    def copy(self) -> ControlField:
        return ControlField(self.alpha.copy(), self.beta.copy())


@dataclass
class MeasurePath:
    """``measures[k]`` is ``m_{t_k-}`` (before any atom at ``t_k``)."""

    mesh: MFMesh
    measures: np.ndarray
    killed: np.ndarray
    atoms: np.ndarray | None = None
    post_kill: np.ndarray | None = field(default=None, repr=False)

    def at(self, k: int) -> GridMeasure:
        return GridMeasure(self.mesh.grid, np.clip(self.measures[k], 0.0, None))

    def totals(self) -> np.ndarray:
        return self.measures.sum(axis=1)


@dataclass
class JumpMeasure:
    """Removal measure: a rate part (mass per unit time per cell) and atoms per time node."""

    rate: np.ndarray
    atoms: np.ndarray


# ---------------------------------------------------------------- mollification


def mollifier_weights(theta: float, dt: float) -> np.ndarray:
    """Weights ``w_l`` of ``xi_theta(l dt)``, ``xi_theta(s) ~ (s/theta)^2 (1 - s/theta)^2``, summing to one."""
    if theta <= 0:
        return np.array([1.0])
    lags = int(math.floor(theta / dt + 1e-9))
    if lags < 2:
        raise ValueError(f"theta={theta} must be at least 2 dt = {2 * dt}")
    s = np.arange(lags + 1) * dt / theta
    w = s**2 * (1.0 - s) ** 2
    return w / w.sum()


def _mollify_array(measures: np.ndarray, weights: np.ndarray, history: np.ndarray | None) -> np.ndarray:
    """``mu^k = sum_l w_l m^{k-l}`` for every row, padding before the first row."""
    lags = weights.size - 1
    if history is None or len(history) == 0:
        pad = np.repeat(measures[:1], lags, axis=0)
    else:
        history = np.asarray(history)
        need = max(lags - len(history), 0)
        pad = np.concatenate([np.repeat(history[:1], need, axis=0), history[len(history) - lags + need :]]) if lags else history[:0]
        pad = pad[-lags:] if lags else pad
    ext = np.concatenate([pad, measures]) if lags else measures
    out = np.zeros_like(measures)
    for l, w in enumerate(weights):
        if w:
            out += w * ext[lags - l : lags - l + measures.shape[0]]
    return out


def time_mollify(path: MeasurePath, theta: float, history=None) -> MeasurePath:
    """``(xi_theta * m)_t = int_0^theta xi_theta(s) m_{t-s} ds`` on the path mesh."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    w = mollifier_weights(theta, path.mesh.dt)
    mu = _mollify_array(path.measures, w, history)
    return MeasurePath(path.mesh, mu, np.zeros_like(path.killed))


# ---------------------------------------------------------------- problem


class _Problem:
    def __init__(self, model: ModelSpec, mesh: MFMesh, m0: np.ndarray, theta: float, delta: float, history=None):
        self.model = model
        self.mesh = mesh
        self.m0 = np.asarray(m0, dtype=float)
        self.theta = theta
        self.delta = delta
        self.history = None if history is None else np.asarray(history, dtype=float)
        self.weights = mollifier_weights(theta, mesh.dt)
        n = mesh.n_cells
        self.x = mesh.grid.nodes
        self.X = np.broadcast_to(self.x, (mesh.n_steps, n))
        self.prev = (np.arange(n) - 1) % n
        self.next = (np.arange(n) + 1) % n
        lam = 4.0 / mesh.h**2 * np.sin(np.pi * np.arange(n // 2 + 1) / n) ** 2
        self.den = 1.0 + mesh.dt * lam
        # (I - dt Lap)^{-1} as a dense circulant: a mat-vec is cheaper than two FFTs at these sizes
        self.resolvent = np.fft.irfft(np.fft.rfft(np.eye(n), axis=0) / self.den[:, None], n=n, axis=0)
        self.resolvent_t = np.ascontiguousarray(self.resolvent.T)
        self.amax = mesh.h / mesh.dt
        self.lags = self.weights.size - 1
        self.pad_weight = np.cumsum(self.weights[::-1])[::-1]  # sum_{l >= r} w_l

    def pm(self, mass) -> PointMeasure:
        return PointMeasure(self.x, mass)

    def batch(self, masses) -> PointMeasure:
        return PointMeasure(self.X[: len(masses)], masses)

    # -- pieces
    def diffuse(self, v):
        return self.resolvent @ v

    def diffuse_adjoint(self, v):
        return self.resolvent_t @ v

    def transport(self, mp, alpha):
        c = self.mesh.dt / self.mesh.h
        right = c * np.maximum(alpha, 0.0) * mp
        left = c * np.maximum(-alpha, 0.0) * mp
        return mp - right - left + right[self.prev] + left[self.next]

    def differences(self, w):
        h = self.mesh.h
        return (w[self.next] - w) / h, (w - w[self.prev]) / h

    def mollified(self, measures):
        return _mollify_array(measures, self.weights, self.history)

    def psi_path(self, measures):
        """``Psi(x_j, mu^k)`` for every step ``k < M``."""
        M = self.mesh.n_steps
        mu = self.mollified(measures)[:M]
        return np.broadcast_to(self.model.psi(self.X, self.batch(mu)), mu.shape), mu

    # -- forward
    def forward(self, ctrl: ControlField, atoms=None) -> MeasurePath:
        mesh, dt = self.mesh, self.mesh.dt
        if np.max(np.abs(ctrl.alpha), initial=0.0) * dt > mesh.h * (1 + 1e-12):
            raise NegativeMassError("transport CFL violated: dt |alpha| > h")
        if np.min(ctrl.beta, initial=0.0) < 0:
            raise ValueError("killing rate must be nonnegative")
        M, n = mesh.n_steps, mesh.n_cells
        ms = np.empty((M + 1, n))
        mps = np.empty((M, n))
        ms[0] = self.m0
        scale = 1.0 + dt * ctrl.beta
        for k in range(M):
            mk = ms[k] if atoms is None else ms[k] - atoms[k]
            mp = mk / scale[k]
            mps[k] = mp
            nxt = self.diffuse(self.transport(mp, ctrl.alpha[k]))
            if nxt.min() < -1e-12:
                raise NegativeMassError(f"negative mass {nxt.min():.3e} at step {k}")
            ms[k + 1] = nxt
        killed = dt * np.einsum("kj,kj->k", ctrl.beta, mps)
        return MeasurePath(mesh, ms, killed, None if atoms is None else np.asarray(atoms), mps)

    # -- cost
    def cost_parts(self, path: MeasurePath, ctrl: ControlField) -> dict[str, float]:
        model, dt = self.model, self.mesh.dt
        M = self.mesh.n_steps
        mp = path.post_kill
        a, b = ctrl.alpha, ctrl.beta
        lag = model.lagrangian(self.X, a, self.batch(path.measures[:M]))
        running = dt * float(np.sum(mp * lag))
        stopping = penalty = jumps = 0.0
        if np.any(b):
            psi, _ = self.psi_path(path.measures)
            stopping = dt * float(np.sum(mp * psi * b))
            penalty = 0.5 * self.delta * dt * float(np.sum(mp * b * b))
        final = path.measures[M]
        if path.atoms is not None:
            atoms = np.asarray(path.atoms)
            psi_pre = np.broadcast_to(model.psi(self.X, self.batch(path.measures[:M])), (M, self.x.size))
            jumps = float(np.sum(atoms[:M] * psi_pre))
            if np.any(atoms[M]):
                jumps += float(np.dot(atoms[M], model.psi(self.x, self.pm(final))))
                final = final - atoms[M]
        terminal = float(model.terminal(self.pm(final)))
        return {"running": running, "stopping": stopping + jumps, "penalty": penalty, "terminal": terminal}

    def objective(self, ctrl: ControlField) -> float:
        parts = self.cost_parts(self.forward(ctrl), ctrl)
        return parts["running"] + parts["stopping"] + parts["penalty"] + parts["terminal"]

    # -- backward
    def _psi_lin_row(self, mass_weights, mu):
        """``sum_i c_i dPsi/dm(x_i, mu, x_j)`` for every node ``j``."""
        kern = self.model.psi_lin(self.x[:, None], self.pm(mu), self.x[None, :])
        kern = np.broadcast_to(kern, (self.x.size, self.x.size))
        return mass_weights @ kern

    def _lag_lin_row(self, mp, alpha, mk):
        if self.model.lagrangian_lin is None:
            return 0.0
        kern = self.model.lagrangian_lin(self.x[:, None], alpha[:, None], self.pm(mk), self.x[None, :])
        kern = np.broadcast_to(kern, (self.x.size, self.x.size))
        return mp @ kern

    def best_alpha(self, dp, dm, mk_pm):
        """Upwind-optimal drift and its Lagrangian value at every node."""
        model, x = self.model, self.x
        a = -model.grad_p(x, np.stack([dp, dm]), mk_pm)
        a_plus = np.clip(a[0], 0.0, self.amax)
        a_minus = np.clip(a[1], -self.amax, 0.0)
        lag = np.broadcast_to(model.lagrangian(x, np.stack([np.zeros_like(x), a_plus, a_minus]), mk_pm), (3, x.size))
        l0, lp, lm = lag
        vp, vm = lp + a_plus * dp, lm + a_minus * dm
        # near-ties are broken deterministically (zero, then rightward) so that
        # rounding noise cannot flip the drift between Picard rounds
        tie = 1e-10 * (1.0 + np.abs(l0))
        use_p = (vp < l0 - tie) & (vp <= vm + tie)
        use_m = (vm < l0 - tie) & ~use_p
        alpha = np.where(use_p, a_plus, np.where(use_m, a_minus, 0.0))
        return alpha, np.where(use_p, lp, np.where(use_m, lm, l0))

    def best_beta(self, r, psi):
        """Minimiser over ``beta >= 0`` of ``(r + dt(Psi beta + delta beta^2/2)) / (1 + dt beta)``."""
        c = np.maximum(r - psi, 0.0) / self.delta
        return 2.0 * c / (1.0 + np.sqrt(1.0 + 2.0 * self.mesh.dt * c))

    def backward(self, path: MeasurePath, ctrl: ControlField, best_response: bool):
        """Adjoint ``u`` (and, if requested, the node-wise best-response control).

        Returns ``u``, the control used, and the gradient of ``J`` in ``(alpha, beta)``.
        """
        model, mesh = self.model, self.mesh
        M, n, dt = mesh.n_steps, mesh.n_cells, mesh.dt
        psi_all, mu = self.psi_path(path.measures)
        u = np.empty((M + 1, n))
        u[M] = np.broadcast_to(model.terminal_lin(self.pm(path.measures[M]), self.x), (n,))
        new = ctrl.copy() if not best_response else ControlField(np.empty((M, n)), np.empty((M, n)))
        if not best_response:
            lag_all = np.broadcast_to(model.lagrangian(self.X, ctrl.alpha, self.batch(path.measures[:M])), (M, n))
        slopes = np.empty((M, n))
        g_beta = np.zeros((M, n))
        lags = self.lags
        # src[k] = dt sum_i m'_i beta_i dPsi/dm(x_i, mu^k, x_j), padded so windows never run off the end
        src = np.zeros((M + lags, n))
        wts = self.weights
        has_psi_lin = model.psi_lin is not None
        for k in range(M - 1, -1, -1):
            mk = path.measures[k]
            psi = psi_all[k]
            w = self.diffuse_adjoint(u[k + 1])
            dp, dm = self.differences(w)
            if best_response:
                mk_pm = self.pm(mk)
                alpha, lag = self.best_alpha(dp, dm, mk_pm)
                slope = np.where(alpha > 0, dp, dm)
                atw = w + dt * alpha * slope
                beta = self.best_beta(atw + dt * lag, psi)
                new.alpha[k], new.beta[k] = alpha, beta
            else:
                alpha, beta, lag = ctrl.alpha[k], ctrl.beta[k], lag_all[k]
                slope = np.where(alpha > 0, dp, dm)
                atw = w + dt * alpha * slope
            slopes[k] = slope
            scale = 1.0 + dt * beta
            mp = mk / scale
            q = dt * (lag + psi * beta + 0.5 * self.delta * beta**2) + atw
            if has_psi_lin and np.any(beta):
                src[k] = dt * self._psi_lin_row(mp * beta, mu[k])
            nonlocal_ = dt * self._lag_lin_row(mp, alpha, mk) + wts @ src[k : k + lags + 1]
            if k == 0 and self.history is None:
                # m^0 also fills the padding of every mu^{k'} with k' < lags
                kp = np.arange(min(lags, M))
                nonlocal_ = nonlocal_ + self.pad_weight[kp + 1] @ src[kp]
            u[k] = q / scale + nonlocal_
            g_beta[k] = dt * mp * (psi + self.delta * beta - q / scale)
        alpha_used = new.alpha
        mps = path.measures[:M] / (1.0 + dt * new.beta)
        grad_a = model.grad_a(self.X, alpha_used, self.batch(path.measures[:M]))
        g_alpha = dt * mps * (grad_a + slopes)
        return u, new, ControlField(g_alpha, g_beta)


# ---------------------------------------------------------------- public API


@dataclass
class MFCSolution:
    path: MeasurePath
    control: ControlField
    u: np.ndarray
    value: float
    theta: float
    delta: float
    iterations: int
    residual: float
    converged: bool = True
    phase: str = "picard"
    history: list[float] = field(default_factory=list)
    parts: dict[str, float] = field(default_factory=dict)
    drift_clipped: bool = False

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        mesh = self.path.mesh
        meta = {
            "n_cells": mesh.n_cells,
            "n_steps": mesh.n_steps,
            "t0": mesh.t0,
            "T": mesh.horizon,
            "theta": self.theta,
            "delta": self.delta,
            "value": self.value,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "phase": self.phase,
        }
        (directory / "meta").write_text("".join(f"{k}={_fmt(v)}\n" for k, v in meta.items()))
        for name, arr in (("m", self.path.measures), ("alpha", self.control.alpha), ("beta", self.control.beta), ("u", self.u)):
            _write_matrix(directory / f"{name}.csv", arr)
        return directory


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _write_matrix(path: Path, arr: np.ndarray) -> None:
    lines = [",".join(format(v, ".17g") for v in row) for row in np.atleast_2d(arr)]
    path.write_text("\n".join(lines) + "\n")


def load_solution_meta(directory) -> dict[str, str]:
    text = (Path(directory) / "meta").read_text().splitlines()
    return dict(line.split("=", 1) for line in text if line)


def solve_fp(model: ModelSpec, control: ControlField, m0: GridMeasure, mesh: MFMesh, atoms=None) -> MeasurePath:
    """Fokker-Planck with drift ``alpha`` and killing rate ``beta`` (plus optional atoms per time node)."""
    return _Problem(model, mesh, m0.mass, 0.0, 1.0).forward(control, atoms)


def solve_hjb_penalized(model: ModelSpec, path: MeasurePath, theta: float, delta: float, mesh: MFMesh | None = None, history=None):
    """Backward penalised HJB along a frozen measure path.

    Returns ``(u, control)`` with the node-wise optimal drift and killing rate.
    """
    mesh = mesh or path.mesh
    prob = _Problem(model, mesh, path.measures[0], theta, delta, history)
    path = MeasurePath(mesh, path.measures, path.killed, None, path.post_kill)
    u, ctrl, _ = prob.backward(path, ControlField.zeros(mesh), best_response=True)
    return u, ctrl


def adjoint_gradient(model: ModelSpec, m0: GridMeasure, control: ControlField, theta: float, delta: float, mesh: MFMesh, history=None) -> ControlField:
    prob = _Problem(model, mesh, m0.mass, theta, delta, history)
    path = prob.forward(control)
    _, _, grad = prob.backward(path, control, best_response=False)
    return grad


def evaluate_J_theta_delta(model, m0: GridMeasure, control: ControlField, theta: float, delta: float, mesh: MFMesh, history=None) -> float:
    return _Problem(model, mesh, m0.mass, theta, delta, history).objective(control)


def evaluate_J_theta(model, m0: GridMeasure, control: ControlField, theta: float, mesh: MFMesh, history=None) -> float:
    prob = _Problem(model, mesh, m0.mass, theta, 0.0, history)
    parts = prob.cost_parts(prob.forward(control), control)
    return parts["running"] + parts["stopping"] + parts["terminal"]


def evaluate_J(model, m0: GridMeasure, mesh: MFMesh, alpha: np.ndarray, removal: JumpMeasure) -> float:
    """Unregularised cost of a drift and a removal measure.

    The rate part is converted to a killing rate on the post-atom mass; atoms
    pay ``Psi`` at the pre-jump measure ``m_{t-}``.
    """
    prob = _Problem(model, mesh, m0.mass, 0.0, 0.0)
    M, n, dt = mesh.n_steps, mesh.n_cells, mesh.dt
    atoms = np.asarray(removal.atoms, dtype=float)
    if atoms.shape != (M + 1, n):
        raise ValueError(f"atoms must have shape {(M + 1, n)}")
    ms = np.empty((M + 1, n))
    mps = np.empty((M, n))
    killed = np.zeros(M)
    beta = np.zeros((M, n))
    ms[0] = m0.mass
    for k in range(M):
        mk = ms[k] - atoms[k]
        if mk.min() < -1e-8:
            raise ValueError(f"atom at step {k} exceeds the available mass")
        mk = np.clip(mk, 0.0, None)
        rate = np.asarray(removal.rate[k], dtype=float)
        mp = mk - dt * rate
        if mp.min() < -1e-8:
            raise ValueError(f"removal rate at step {k} exceeds the available mass")
        mp = np.clip(mp, 0.0, None)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta[k] = np.where(mp > 0, rate / np.where(mp > 0, mp, 1.0), 0.0)
        mps[k] = mp
        killed[k] = float(mk.sum() - mp.sum())
        ms[k + 1] = prob.diffuse(prob.transport(mp, np.asarray(alpha[k], dtype=float)))
    path = MeasurePath(mesh, ms, killed, atoms, mps)
    parts = prob.cost_parts(path, ControlField(np.asarray(alpha, dtype=float), beta))
    return parts["running"] + parts["stopping"] + parts["terminal"]


def _sup_change(a: ControlField, b: ControlField) -> float:
    return float(max(np.max(np.abs(a.alpha - b.alpha), initial=0.0), np.max(np.abs(a.beta - b.beta), initial=0.0)))


def solve_mfc(
    model: ModelSpec,
    m0: GridMeasure,
    theta: float,
    delta: float,
    mesh: MFMesh,
    damping: float = 1.0,
    tol: float = 1e-6,
    max_iter: int = 200,
    stall_rounds: int = 10,
    gd_iter: int = 200,
    history=None,
    init: ControlField | None = None,
    anderson: int = 10,
) -> MFCSolution:
    """Damped Picard iteration on the optimality system, with adjoint gradient descent as fallback.

    ``anderson > 0`` mixes the last ``anderson`` Picard updates (Anderson
    acceleration, projected back onto the admissible controls); ``0`` gives
    plain damped Picard.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if not delta > 0:
        raise ValueError("delta must be positive")
    prob = _Problem(model, mesh, m0.mass, theta, delta, history)
    ctrl = init.copy() if init is not None else ControlField.zeros(mesh)
    if m0.total == 0.0:
        path = prob.forward(ctrl)
        u, _, _ = prob.backward(path, ctrl, best_response=False)
        value = model.terminal_zero()
        return MFCSolution(path, ctrl, u, value, theta, delta, 0, 0.0, True, "trivial", [value])

    best_val, best_ctrl = math.inf, ctrl.copy()
    accel = _Anderson(anderson, damping) if anderson else None
    values: list[float] = []
    since_best = 0
    best_residual = math.inf
    residual = math.inf
    it = 0
    phase = "picard"
    converged = False
    for it in range(1, max_iter + 1):
        path = prob.forward(ctrl)
        parts = prob.cost_parts(path, ctrl)
        val = sum(parts.values())
        values.append(val)
        _, resp, _ = prob.backward(path, ctrl, best_response=True)
        residual = _sup_change(resp, ctrl)
        # stalled = neither the cost nor the fixed-point residual has improved lately
        improved = residual < 0.9 * best_residual
        best_residual = min(best_residual, residual)
        if val < best_val - 1e-14:
            best_val, best_ctrl = val, ctrl.copy()
            improved = True
        since_best = 0 if improved else since_best + 1
        if residual <= tol:
            ctrl = resp
            converged = True
            break
        if since_best >= stall_rounds:
            break
        ctrl = accel.step(prob, ctrl, resp, residual) if accel else ControlField(
            (1 - damping) * ctrl.alpha + damping * resp.alpha,
            (1 - damping) * ctrl.beta + damping * resp.beta,
        )
    if not converged:
        phase = "gradient"
        ctrl, residual, converged, extra = _gradient_descent(prob, best_ctrl, gd_iter, tol, values)
        it += extra
    path = prob.forward(ctrl)
    u, _, _ = prob.backward(path, ctrl, best_response=False)
    parts = prob.cost_parts(path, ctrl)
    value = sum(parts.values())
    clipped = bool(np.any(np.abs(ctrl.alpha) >= prob.amax * (1 - 1e-9)))
    return MFCSolution(path, ctrl, u, value, theta, delta, it, residual, converged, phase, values, parts, clipped)


def _project(prob: _Problem, ctrl: ControlField) -> ControlField:
    return ControlField(np.clip(ctrl.alpha, -prob.amax, prob.amax), np.maximum(ctrl.beta, 0.0))


class _Anderson:
    """Anderson mixing for the Picard map ``ctrl -> best response``.

    The history is dropped whenever the residual grows, which reverts the
    next step to plain damped Picard.
    """

    def __init__(self, depth: int, damping: float):
        self.depth = depth
        self.damping = damping
        self.xs: list[np.ndarray] = []
        self.fs: list[np.ndarray] = []
        self.last = math.inf

    def step(self, prob: _Problem, ctrl: ControlField, resp: ControlField, residual: float) -> ControlField:
        x = np.concatenate([ctrl.alpha.ravel(), ctrl.beta.ravel()])
        f = np.concatenate([resp.alpha.ravel(), resp.beta.ravel()]) - x
        if residual > self.last:
            self.xs, self.fs = [], []
        self.last = residual
        self.xs.append(x)
        self.fs.append(f)
        if len(self.xs) > self.depth + 1:
            self.xs.pop(0)
            self.fs.pop(0)
        nxt = x + self.damping * f
        if len(self.xs) > 1:
            dX = np.diff(np.array(self.xs), axis=0).T
            dF = np.diff(np.array(self.fs), axis=0).T
            gamma = np.linalg.lstsq(dF, f, rcond=None)[0]
            nxt = nxt - (dX + self.damping * dF) @ gamma
        half = ctrl.alpha.size
        out = ControlField(nxt[:half].reshape(ctrl.alpha.shape), nxt[half:].reshape(ctrl.beta.shape))
        return _project(prob, out)


def _gradient_descent(prob: _Problem, ctrl: ControlField, n_iter: int, tol: float, values: list[float]):
    """Projected gradient descent on ``J^{theta,delta}`` with Armijo backtracking.

    The gradient is divided by the local mass ``dt m'`` (a diagonal
    preconditioner) so that steps are expressed in control units.
    """
    dt = prob.mesh.dt
    f = prob.objective(ctrl)
    step = 1.0
    residual = math.inf
    for i in range(1, n_iter + 1):
        path = prob.forward(ctrl)
        _, resp, _ = prob.backward(path, ctrl, best_response=True)
        residual = _sup_change(resp, ctrl)
        if residual <= tol:
            return resp, residual, True, i
        _, _, grad = prob.backward(path, ctrl, best_response=False)
        weight = dt * np.maximum(path.post_kill, 1e-12)
        direction = ControlField(-grad.alpha / weight, -grad.beta / weight)
        slope = float(np.sum(grad.alpha * direction.alpha) + np.sum(grad.beta * direction.beta))
        if slope >= 0:
            return ctrl, residual, False, i
        while step > 1e-12:
            cand = _project(prob, ControlField(ctrl.alpha + step * direction.alpha, ctrl.beta + step * direction.beta))
            fc = prob.objective(cand)
            if fc <= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            return ctrl, residual, False, i
        ctrl, f = cand, fc
        values.append(f)
        step = min(2.0 * step, 1.0)
    return ctrl, residual, False, n_iter


def mfc_value(model, m0: GridMeasure, theta: float, delta: float, mesh: MFMesh, **kw) -> float:
    return solve_mfc(model, m0, theta, delta, mesh, **kw).value


def check_dpp(model, m0: GridMeasure, t1_index: int, theta: float, delta: float, mesh: MFMesh, **kw) -> float:
    """``|U(t0, m0) - [cost on [t0, t1] + U(t1, m_{t1})]|`` with the history before ``t1`` carried over."""
    if t1_index == 0 or m0.total == 0.0:
        return 0.0
    full = solve_mfc(model, m0, theta, delta, mesh, **kw)
    prob = _Problem(model, mesh, m0.mass, theta, delta)
    k1 = t1_index
    psi, _ = prob.psi_path(full.path.measures)
    mp = full.path.post_kill[:k1]
    a, b = full.control.alpha[:k1], full.control.beta[:k1]
    lag = model.lagrangian(prob.X[:k1], a, prob.batch(full.path.measures[:k1]))
    head = mesh.dt * float(np.sum(mp * (lag + psi[:k1] * b + 0.5 * delta * b * b)))
    m1 = GridMeasure(mesh.grid, np.clip(full.path.measures[k1], 0.0, None))
    hist = full.path.measures[:k1]
    tail_init = ControlField(full.control.alpha[k1:].copy(), full.control.beta[k1:].copy())
    tail = solve_mfc(model, m1, theta, delta, mesh.tail(k1), history=hist, init=tail_init, **kw)
    tail_cold = solve_mfc(model, m1, theta, delta, mesh.tail(k1), history=hist, **kw)
    return abs(full.value - (head + min(tail.value, tail_cold.value)))


@dataclass
class LadderCell:
    theta: float
    delta: float
    value: float
    iterations: int
    residual: float
    converged: bool
    undelta_value: float


def regularization_ladder(model, m0: GridMeasure, thetas, deltas, mesh: MFMesh, **kw) -> list[LadderCell]:
    """``U^{theta,delta}`` for every pair, warm-starting along each row of decreasing ``delta``."""
    cells = []
    for theta in thetas:
        init = None
        for delta in deltas:
            sol = solve_mfc(model, m0, theta, delta, mesh, init=init, **kw)
            init = sol.control
            j_theta = evaluate_J_theta(model, m0, sol.control, theta, mesh)
            cells.append(LadderCell(theta, delta, sol.value, sol.iterations, sol.residual, sol.converged, j_theta))
    return cells


def ladder_differences(cells: list[LadderCell]) -> dict[str, list[float]]:
    """Cauchy differences along ``delta`` (per theta) and along ``theta`` (per delta)."""
    thetas = sorted({c.theta for c in cells}, reverse=True)
    deltas = sorted({c.delta for c in cells}, reverse=True)
    val = {(c.theta, c.delta): c.value for c in cells}
    out = {}
    for th in thetas:
        out[f"delta@theta={th:g}"] = [abs(val[(th, a)] - val[(th, b)]) for a, b in zip(deltas, deltas[1:])]
    for de in deltas:
        out[f"theta@delta={de:g}"] = [abs(val[(a, de)] - val[(b, de)]) for a, b in zip(thetas, thetas[1:])]
    return out


def format_ladder(cells: list[LadderCell]) -> str:
    lines = ["theta,delta,value,iterations,residual"]
    for c in cells:
        lines.append(f"{c.theta:.17g},{c.delta:.17g},{c.value:.17g},{c.iterations},{c.residual:.17g}")
    return "\n".join(lines) + "\n"


def psi_monotonicity_check(model, pairs, theta: float, delta: float, mesh: MFMesh, **kw) -> float:
    """``max U(m0) - U(n0) - int Psi(x, m0) d(m0 - n0)`` over pairs with ``n0 <= m0``."""
    worst = -math.inf
    x = mesh.grid.nodes
    for m0, n0 in pairs:
        if not n0.leq(m0):
            raise ValueError("pairs must satisfy n0 <= m0")
        um = solve_mfc(model, m0, theta, delta, mesh, **kw)
        un = solve_mfc(model, n0, theta, delta, mesh, init=um.control, **kw)
        jump = float(np.dot(model.psi(x, m0), m0.mass - n0.mass))
        worst = max(worst, um.value - un.value - jump)
    return worst


def lipschitz_quotients(model, pairs, theta: float, delta: float, mesh: MFMesh, **kw) -> np.ndarray:
    """``|U(m) - U(m')| / d(m, m')`` for each pair."""
    out = []
    for m, mp in pairs:
        d = bl_distance(m, mp)
        if d <= 0:
            continue
        a = solve_mfc(model, m, theta, delta, mesh, **kw).value
        b = solve_mfc(model, mp, theta, delta, mesh, **kw).value
        out.append(abs(a - b) / d)
    return np.array(out)


def lipschitz_ladder(model, pairs, theta: float, deltas, mesh: MFMesh, **kw) -> np.ndarray:
    """Quotients ``|U(m) - U(m')| / d(m, m')`` for every ``delta`` (rows) and pair (columns).

    Each measure's solve is warm-started from its solution at the previous ``delta``.
    """
    pairs = [(m, mp, bl_distance(m, mp)) for m, mp in pairs]
    pairs = [p for p in pairs if p[2] > 0]
    out = np.empty((len(deltas), len(pairs)))
    warm: dict[tuple[int, int], ControlField] = {}
    for i, delta in enumerate(deltas):
        for j, (m, mp, d) in enumerate(pairs):
            vals = []
            for side, meas in enumerate((m, mp)):
                sol = solve_mfc(model, meas, theta, delta, mesh, init=warm.get((j, side)), **kw)
                warm[(j, side)] = sol.control
                vals.append(sol.value)
            out[i, j] = abs(vals[0] - vals[1]) / d
    return out
