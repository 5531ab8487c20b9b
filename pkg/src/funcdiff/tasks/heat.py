"""Recovering an initial temperature from a noisy terminal heat field."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

from ..funcspace import Grid1D, SineBasis
from . import Observation, Task


def gen_heat_dataset(n_samples: int, grid: Grid1D, rng: np.random.Generator,
                     center=(0.2, 0.5), rate=(75.0, 115.0), amp=(0.9, 1.1)) -> np.ndarray:
    """Antisymmetric pairs of Gaussian bumps ``a (exp(-g (x-l)^2) - exp(-g (x-1+l)^2))``."""
    lam = rng.uniform(*center, size=(n_samples, 1))
    gam = rng.uniform(*rate, size=(n_samples, 1))
    alpha = rng.uniform(*amp, size=(n_samples, 1))
    return heat_bumps(grid.points, lam, gam, alpha)


def heat_bumps(x, lam, gam, alpha):
    return alpha * (np.exp(-gam * (x - lam) ** 2) - np.exp(-gam * (x - (1 - lam)) ** 2))


class CrankNicolson:
    """Crank-Nicolson integrator for ``w_t = nu w_xx`` with zero Dirichlet ends.

    Interior values evolve by ``(I - r/2 L) w' = (I + r/2 L) w`` with ``L`` the
    second-difference matrix and ``r = nu dt / h^2``.  Both sides are
    symmetric and commute, so the propagator is self-adjoint.
    """

    def __init__(self, grid: Grid1D, nu: float = 0.05, T: float = 0.2, dt: float = 0.001):
        if grid.layout != "endpoint":
            raise ValueError("the heat solver needs an endpoint grid")
        self.grid, self.nu, self.T, self.dt = grid, nu, T, dt
        self.n_steps = int(round(T / dt))
        if not np.isclose(self.n_steps * dt, T):
            raise ValueError("T must be a whole number of steps")
        r = nu * dt / grid.spacing**2
        m = grid.n - 2
        self._ab = np.zeros((3, m))
        self._ab[0, 1:] = -r / 2
        self._ab[1, :] = 1 + r
        self._ab[2, :-1] = -r / 2
        self._r = r

    def _rhs(self, w):
        out = (1 - self._r) * w
        out[1:] += self._r / 2 * w[:-1]
        out[:-1] += self._r / 2 * w[1:]
        return out

    def solve(self, f) -> np.ndarray:
        """Terminal field for each row of ``f``; boundary values are pinned to 0."""
        f = np.asarray(f, dtype=float)
        lead = f.shape[:-1]
        w = f.reshape(-1, f.shape[-1])[:, 1:-1].T.copy()
        for _ in range(self.n_steps):
            w = solve_banded((1, 1), self._ab, self._rhs(w))
        out = np.zeros((w.shape[1], self.grid.n))
        out[:, 1:-1] = w.T
        return out.reshape(lead + (self.grid.n,))

    def adjoint(self, g) -> np.ndarray:
        """Euclidean transpose of :meth:`solve` (the same sweep; boundaries drop out)."""
        return self.solve(g)

    def propagator(self) -> np.ndarray:
        """Dense (n, n) matrix of :meth:`solve`, built once by sweeping the identity."""
        if not hasattr(self, "_matrix"):
            self._matrix = self.solve(np.eye(self.grid.n)).T
            self._matrix.setflags(write=False)
        return self._matrix


def heat_forward(f, grid: Grid1D, nu: float = 0.05, T: float = 0.2, dt: float = 0.001) -> np.ndarray:
    return CrankNicolson(grid, nu, T, dt).solve(f)


class HeatTask(Task):
    """Heat-equation benchmark on an endpoint grid with the sine basis.

    Training signals are projected onto the sine basis, which enforces the
    zero boundary values assumed by the forward model.
    """

    name = "heat"

    def __init__(self, n: int = 128, nu_heat: float = 0.05, T: float = 0.2, dt: float = 0.001,
                 noise: float = 0.1, nu: float = 1.0):
        self.grid = Grid1D(n, "endpoint")
        self.basis = SineBasis(self.grid)
        self.solver = CrankNicolson(self.grid, nu_heat, T, dt)
        self.noise, self.nu = noise, nu

    def generate(self, n, rng):
        return self.basis.project(gen_heat_dataset(n, self.grid, rng))

    def observe(self, x0, rng, noisy=True):
        y = self.solver.solve(np.atleast_2d(x0))
        if noisy:
            y = y + self.noise * rng.standard_normal(y.shape)
        return Observation("heat", y, self.noise)

    def apply_forward(self, f, obs):
        return np.asarray(f) @ self.solver.propagator().T

    def apply_adjoint(self, r, obs):
        return np.asarray(r) @ self.solver.propagator()

    def cond_features(self, obs):
        return obs.values[:, None, :]

    @property
    def cond_shape(self):
        return (1, self.grid.n)
