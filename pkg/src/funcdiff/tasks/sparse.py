"""Recovering a function from a few kernel-smoothed point values."""

from __future__ import annotations

import numpy as np

from ..funcspace import FourierBasis, Grid1D
from . import Observation, Task


def gen_sparse_dataset(n_samples: int, grid: Grid1D, rng: np.random.Generator,
                       max_terms: int = 8, amp=(0.3, 1.0), freq=(1.0, 11.0)) -> np.ndarray:
    """Random sums ``sum_i a_i sin(w_i pi x + phi_i)`` with 1 to ``max_terms`` terms."""
    x = grid.points
    out = np.zeros((n_samples, grid.n))
    for i in range(n_samples):
        k = rng.integers(1, max_terms + 1)
        a = rng.uniform(*amp, size=k)
        w = rng.uniform(*freq, size=k)
        phase = rng.uniform(0.0, 2 * np.pi, size=k)
        out[i] = np.sum(a[:, None] * np.sin(w[:, None] * np.pi * x + phase[:, None]), axis=0)
    return out


def kernel_matrix(grid: Grid1D, locations, width: float = 0.02) -> np.ndarray:
    """Rows of normalised Gaussian weights, shape (..., K, n).

    Row ``i`` holds quadrature weights ``h w(x_j - x_i)`` scaled so that the
    row sums to one, hence constants are reproduced exactly.
    """
    locations = np.asarray(locations, dtype=float)
    if np.any((locations < 0) | (locations > 1)):
        raise ValueError("sensor locations must lie in [0, 1]")
    d = grid.points - locations[..., None]
    w = np.exp(-0.5 * (d / width) ** 2) * grid.quadrature_weights()
    return w / w.sum(axis=-1, keepdims=True)


def sparse_forward(f, locations, grid: Grid1D, width: float = 0.02) -> np.ndarray:
    """Kernel-smoothed point values of ``f`` at ``locations``."""
    M = kernel_matrix(grid, locations, width)
    return np.einsum("...kn,...n->...k", M, np.asarray(f, dtype=float))


def lift_observations(grid: Grid1D, locations, values, width: float = 0.01) -> np.ndarray:
    """Grid channels ``[v, m]`` with ``v = sum y_i k(x, x_i)`` and ``m = sum k(x, x_i)``."""
    k = np.exp(-0.5 * ((grid.points - np.asarray(locations)[..., None]) / width) ** 2)
    v = np.einsum("...k,...kn->...n", np.asarray(values), k)
    m = k.sum(axis=-2)
    return np.stack([v, m], axis=-2)


class SparseTask(Task):
    """Sparse observation benchmark on a periodic grid with the Fourier basis."""

    name = "sparse"

    def __init__(self, n: int = 128, n_sensors: int = 10, noise: float = 0.01,
                 kernel_width: float = 0.02, lift_width: float = 0.01, nu: float = 1.0):
        self.grid = Grid1D(n, "periodic")
        self.basis = FourierBasis(self.grid)
        self.n_sensors, self.noise = n_sensors, noise
        self.kernel_width, self.lift_width, self.nu = kernel_width, lift_width, nu

    def generate(self, n, rng):
        return gen_sparse_dataset(n, self.grid, rng)

    def observe(self, x0, rng, noisy=True):
        x0 = np.atleast_2d(x0)
        locs = rng.uniform(0.0, 1.0, size=(x0.shape[0], self.n_sensors))
        y = sparse_forward(x0, locs, self.grid, self.kernel_width)
        if noisy:
            y = y + self.noise * rng.standard_normal(y.shape)
        return Observation("sparse", y, self.noise, locations=locs)

    def apply_forward(self, f, obs):
        return sparse_forward(f, obs.locations, self.grid, self.kernel_width)

    def apply_adjoint(self, r, obs):
        M = kernel_matrix(self.grid, obs.locations, self.kernel_width)
        return np.einsum("...kn,...k->...n", M, r)

    def cond_features(self, obs):
        return lift_observations(self.grid, obs.locations, obs.values, self.lift_width)

    @property
    def cond_shape(self):
        return (2, self.grid.n)
