"""Benchmark inverse problems: data laws, forward operators and potentials.

Every task exposes the same batched interface (see :class:`Task`).  States
are arrays with the state axis last: grid values for the sparse and heat
tasks, flat elliptic Fourier coefficient vectors for the shape task.
Likelihood gradients are Riesz representers in the task's quadrature inner
product, so they are discretisation-consistent approximations of the
Frechet derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..funcspace import Basis, CovarianceOp, Grid1D


@dataclass
class Observation:
    """A batch of observations ``y = G(f) + eta``.

    Attributes
    ----------
    task : {"sparse", "heat", "shape", "gaussian"}
    values : array, shape (B, k)
        Observed data, one row per signal.
    noise : float
        Standard deviation of the additive Gaussian noise.
    locations : array, shape (B, K), optional
        Sensor locations (sparse task).
    m : int, optional
        Number of observed EFD modes (shape task).
    """

    task: str
    values: np.ndarray
    noise: float
    locations: np.ndarray | None = None
    m: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.locations is not None:
            self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observation values must be finite")
        if not self.noise > 0:
            raise ValueError("noise level must be positive")

    def __len__(self):
        return self.values.shape[0]

    def take(self, idx) -> "Observation":
        idx = np.atleast_1d(idx)
        locs = None if self.locations is None else self.locations[idx]
        return replace(self, values=self.values[idx], locations=locs)

    def repeat(self, n: int) -> "Observation":
        """Broadcast a single observation to ``n`` identical rows."""
        if len(self) != 1:
            raise ValueError("only a single observation can be repeated")
        return self.take(np.zeros(n, dtype=int))


class Task:
    """Interface shared by the three benchmark problems."""

    name: str = ""
    grid: Grid1D | None = None
    basis: Basis
    nu: float = 1.0

    @property
    def state_size(self) -> int:
        return self.grid.n if self.grid is not None else self.basis.size

    def covariance(self) -> CovarianceOp:
        return CovarianceOp(self.basis, self.nu)

    def quadrature_weights(self) -> np.ndarray:
        return self.basis.quadrature_weights()

    def generate(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def observe(self, x0, rng: np.random.Generator, noisy: bool = True) -> Observation:
        """Simulate observations of the states ``x0``."""
        raise NotImplementedError

    def apply_forward(self, f, obs: Observation) -> np.ndarray:
        """Noise-free ``G(f)`` for each row of ``f`` with the sensors of ``obs``."""
        raise NotImplementedError

    def apply_adjoint(self, r, obs: Observation) -> np.ndarray:
        """Euclidean transpose of :meth:`apply_forward`."""
        raise NotImplementedError

    def cond_features(self, obs: Observation) -> np.ndarray:
        """Conditioning input for amortised networks."""
        raise NotImplementedError

    @property
    def cond_shape(self) -> tuple:
        raise NotImplementedError

    def phi(self, f, obs: Observation):
        """Potential ``|G f - y|^2 / (2 sigma^2)`` and its gradient, row-wise.

        The gradient is the Riesz representer in the quadrature inner
        product: the Euclidean gradient divided by the quadrature weights.
        """
        f = np.atleast_2d(np.asarray(f, dtype=float))
        resid = self.apply_forward(f, obs) - obs.values
        value = 0.5 * np.sum(resid**2, axis=-1) / obs.noise**2
        grad = self.apply_adjoint(resid, obs) / obs.noise**2 / self.quadrature_weights()
        return value, grad

    def state_gradient(self, f, obs: Observation) -> np.ndarray:
        """Euclidean gradient of ``Phi`` with respect to the raw state vector.

        Equals the Riesz representer times the quadrature weights; this is
        the scale guidance terms are built from.
        """
        return self.phi(f, obs)[1] * self.quadrature_weights()

    def metric_embedding(self, x) -> tuple[np.ndarray, np.ndarray]:
        """States mapped to the space where RMSE/ES are computed, and its weights."""
        return np.asarray(x, dtype=float), self.quadrature_weights()


def potential_phi(task: Task, f, obs: Observation):
    """``(Phi(f, y), grad_f Phi)`` for the given task."""
    return task.phi(f, obs)


def get_task(name: str, **kwargs) -> Task:
    from .gaussian import GaussianTask
    from .heat import HeatTask
    from .shape import ShapeTask
    from .sparse import SparseTask

    tasks = {"sparse": SparseTask, "heat": HeatTask, "shape": ShapeTask, "gaussian": GaussianTask}
    if name not in tasks:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(tasks)}")
    return tasks[name](**kwargs)
