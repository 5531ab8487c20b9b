"""Conjugate Gaussian test problem: a few spectral modes observed in noise.

The prior is ``N(0, C_pi)`` with ``C_pi`` diagonal in the Fourier basis of a
periodic grid, and ``y_k = <f, e_k> + eta_k`` for the first ``n_observed``
modes.  Every posterior quantity is available in closed form through
:mod:`funcdiff.oracle`, which makes this the calibration task for trained
scores and guidance.
"""

from __future__ import annotations

import numpy as np

from ..funcspace import FourierBasis, Grid1D
from ..oracle import GaussianLinearProblem
from . import Observation, Task


class GaussianTask(Task):
    """Gaussian prior with diagonal spectral observations.

    Parameters
    ----------
    n : int
        Periodic grid size.
    n_observed : int
        Number of leading modes observed.
    s2 : float
        Observation noise variance.
    prior_scale : array or float
        Per-mode ratio ``c_pi_k / lambda_k``; 1 gives the stationary prior.
    nu : float
        Exponent of the reference covariance.
    """

    name = "gaussian"

    def __init__(self, n: int = 64, n_observed: int = 8, s2: float = 0.01, prior_scale=1.0, nu: float = 1.0):
        self.grid = Grid1D(n, "periodic")
        self.basis = FourierBasis(self.grid)
        self.nu, self.n_observed = nu, int(n_observed)
        self.noise = float(np.sqrt(s2))
        lam = self.covariance().eigenvalues
        self.c_prior = lam * np.broadcast_to(np.asarray(prior_scale, dtype=float), lam.shape)

    def problem(self, y=None) -> GaussianLinearProblem:
        """Oracle problem for one observation row (spectral ``y`` of length ``n_observed``)."""
        lam = self.covariance().eigenvalues
        a = np.zeros_like(lam)
        a[: self.n_observed] = 1.0
        full = np.zeros_like(lam)
        if y is not None:
            full[: self.n_observed] = np.asarray(y, dtype=float).ravel()
        return GaussianLinearProblem(self.c_prior, lam, a, self.noise**2, full)

    def generate(self, n, rng):
        return self.basis.inverse(rng.standard_normal((n, self.basis.size)) * np.sqrt(self.c_prior))

    def observe(self, x0, rng, noisy=True):
        y = self.basis.forward(np.atleast_2d(x0))[:, : self.n_observed]
        if noisy:
            y = y + self.noise * rng.standard_normal(y.shape)
        return Observation("gaussian", y, self.noise)

    def apply_forward(self, f, obs):
        return self.basis.forward(np.asarray(f, dtype=float))[..., : self.n_observed]

    def apply_adjoint(self, r, obs):
        r = np.asarray(r, dtype=float)
        full = np.zeros(r.shape[:-1] + (self.basis.size,))
        full[..., : self.n_observed] = r
        return self.basis.forward_adjoint(full)

    def cond_features(self, obs):
        # the observed modes synthesised on the grid: one channel
        full = np.zeros((len(obs), self.basis.size))
        full[:, : self.n_observed] = obs.values
        return self.basis.inverse(full)[:, None, :]

    @property
    def cond_shape(self):
        return (1, self.grid.n)
