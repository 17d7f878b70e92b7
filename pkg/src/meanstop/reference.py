"""Single-particle reference values through the Cole-Hopf transform.

For ``H = p^2/2 - f(x)`` the value ``W`` of ``-W_t - W_xx + H(x, W_x) = 0``,
``W(T) = g`` is ``W = -2 log phi`` with ``phi_t + phi_xx - (f/2) phi = 0``,
``phi(T) = exp(-g/2)``. The linear problem is solved with a Fourier
spectral operator and a matrix exponential, so it shares no code with the
finite-difference solvers it is used to check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .models import ModelSpec, UnsupportedModelError


@dataclass(frozen=True)
class ColeHopfSolution:
    horizon: float
    n_modes: int
    generator: np.ndarray
    phi_terminal: np.ndarray

    def phi(self, t: float) -> np.ndarray:
        return linalg.expm((self.horizon - t) * self.generator) @ self.phi_terminal

    def value(self, t: float, x) -> np.ndarray:
        """``W(t, x)`` at arbitrary torus points by trigonometric interpolation of ``phi``."""
        coef = np.fft.fft(self.phi(t)) / self.n_modes
        k = np.fft.fftfreq(self.n_modes, d=1.0 / self.n_modes)
        x = np.asarray(x, dtype=float)
        vals = np.real(np.exp(2j * np.pi * x[..., None] * k) @ coef)
        return -2.0 * np.log(vals)


def spectral_laplacian(n: int) -> np.ndarray:
    k = np.fft.fftfreq(n, d=1.0 / n)
    eye = np.eye(n)
    return np.real(np.fft.ifft(-((2 * np.pi * k) ** 2)[:, None] * np.fft.fft(eye, axis=0), axis=0))


def cole_hopf(
    potential,
    terminal,
    horizon: float,
    n_modes: int = 128,
) -> ColeHopfSolution:
    """``potential(x) = f(x)`` and ``terminal(x) = g(x)`` are vectorised callables."""
    x = np.arange(n_modes) / n_modes
    gen = spectral_laplacian(n_modes) - np.diag(0.5 * potential(x))
    return ColeHopfSolution(horizon, n_modes, gen, np.exp(-0.5 * terminal(x)))


def single_particle_reference(model: ModelSpec, mass: float = 0.0, n_modes: int = 128) -> ColeHopfSolution:
    """Reference for a built-in quadratic model whose removal is never worthwhile.

    ``mass`` is the (frozen) total mass entering the ``kappa`` coupling.
    """
    p = model.params
    if not {"f0_const", "f0_amp", "kappa"} <= set(p) or model.terminal_density is None:
        raise UnsupportedModelError("reference needs a built-in model with affine terminal cost")

    def potential(x):
        return p["f0_const"] + p["f0_amp"] * np.cos(2 * np.pi * x) + p["kappa"] * mass

    return cole_hopf(potential, model.terminal_density, model.horizon, n_modes)
