"""Forward Ornstein-Uhlenbeck marginals, the Tweedie map and reverse samplers.

The forward process is ``dX = -X/2 dt + C^{1/2} dW`` with stationary law
``N(0, C)``.  States are grid values (or coefficient vectors) with the state
axis last and an optional leading batch axis.

A *score function* is any callable ``score_fn(z, t) -> s`` returning an array
shaped like ``z``; guidance that differentiates through the score also needs
``score_fn.vjp(z, t) -> (s, pullback)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Literal

import numpy as np

from .funcspace import CovarianceOp, FunctionSample, Grid1D

log = logging.getLogger(__name__)


class TrajectoryBlowUp(FloatingPointError):
    """Raised when a reverse trajectory produces non-finite values."""

    def __init__(self, message, chains=()):
        super().__init__(message)
        self.chains = list(chains)


def _values(x):
    return x.values if isinstance(x, FunctionSample) else np.asarray(x, dtype=float)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Diffusion horizon and reverse-time grid.

    ``spacing="uniform"`` takes equal steps in t; ``"log"`` spaces the grid
    geometrically between ``T`` and ``t_min`` so that steps shrink where the
    score varies fastest.
    """

    T: float = 10.0
    t_min: float = 1e-3
    n_steps: int = 1000
    spacing: Literal["uniform", "log"] = "log"

    def __post_init__(self):
        if not 0 < self.t_min < self.T:
            raise ValueError("need 0 < t_min < T")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if np.exp(-self.T) > 0.01:
            raise ValueError("T too short: exp(-T) must not exceed 0.01")
        if self.spacing not in ("uniform", "log"):
            raise ValueError(f"unknown spacing {self.spacing!r}")

    def times(self) -> np.ndarray:
        """Decreasing diffusion times ``T = t_0 > ... > t_N = t_min``."""
        if self.spacing == "uniform":
            return np.linspace(self.T, self.t_min, self.n_steps + 1)
        return np.geomspace(self.T, self.t_min, self.n_steps + 1)


@dataclass
class GuidanceSpec:
    """Which guidance the reverse sampler applies.

    ``term(z, t, score_fn) -> (s, g)`` evaluates the score and the guidance
    drift together so that Jacobian-based guidance can reuse one forward
    pass.  It is built by :mod:`funcdiff.guidance` for the ``tweedie`` and
    ``learned`` kinds; ``amortized`` folds the observation into ``score_fn``.
    """

    kind: Literal["none", "tweedie", "learned", "amortized"] = "none"
    observation: Any = None
    term: Callable | None = None
    gamma: float | None = None
    k_exp: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("none", "tweedie", "learned", "amortized"):
            raise ValueError(f"unknown guidance kind {self.kind!r}")
        if (self.observation is None) != (self.kind == "none"):
            raise ValueError("an observation is required exactly when guidance is active")
        if self.kind in ("tweedie", "learned") and self.term is None:
            raise ValueError(f"{self.kind} guidance needs a term")
        if self.kind == "tweedie" and not (self.gamma and self.gamma > 0):
            raise ValueError("tweedie guidance needs gamma > 0")
        if self.kind == "learned" and self.k_exp not in (0, 0.5, 1):
            raise ValueError("learned guidance needs k_exp in {0, 1/2, 1}")


NO_GUIDANCE = GuidanceSpec()


def sigma(t):
    return np.sqrt(-np.expm1(-np.asarray(t, dtype=float)))


def _col(t, ndim):
    t = np.asarray(t, dtype=float)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim)) if t.ndim else t


def forward_marginal(x0, t, C: CovarianceOp, rng: np.random.Generator):
    """Draw ``x_t = e^{-t/2} x0 + sigma_t C^{1/2} eps``.

    Parameters
    ----------
    x0 : array or FunctionSample
        Clean states, shape (..., n).
    t : float or array
        Diffusion time, scalar or one per leading index of ``x0``.
    C : CovarianceOp
    rng : numpy Generator

    Returns
    -------
    xt : array
    eps : array
        The white spectral noise used, shape (..., C.basis.size).
    sigma_t : float or array
    """
    x0 = _values(x0)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    eps = rng.standard_normal(x0.shape[:-1] + (C.basis.size,))
    s = sigma(t)
    noise = C.basis.inverse(eps * C.spectral_power(0.5))
    xt = _col(np.exp(-0.5 * t), x0.ndim) * x0 + _col(s, x0.ndim) * noise
    return xt, eps, s


def tweedie(xt, t, score):
    """Posterior-mean estimate ``e^{t/2} (x_t + (1 - e^{-t}) s)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("the Tweedie map is singular at t <= 0")
    xt, score = _values(xt), _values(score)
    return _col(np.exp(0.5 * t), xt.ndim) * (xt + _col(-np.expm1(-t), xt.ndim) * score)


def drift_terms(z, t, score_fn, guidance: GuidanceSpec = NO_GUIDANCE):
    """Score and guidance at ``(z, t)``; the guidance is zero when inactive."""
    if guidance.term is not None:
        s, g = guidance.term(z, t, score_fn)
    else:
        s, g = score_fn(z, t), 0.0
    return s, g


def reverse_step(z, t, dt, score_fn, guidance: GuidanceSpec, C: CovarianceOp, rng):
    """One Euler-Maruyama step of the guided reverse SDE.

    ``z' = z + (z/2 + s(t, z) + g(t, z)) dt + sqrt(dt) C^{1/2} eps``, with the
    score and guidance evaluated at the diffusion time ``t`` of the current
    state.  ``rng`` is a Generator or a pre-drawn white spectral noise array.

    Raises
    ------
    TrajectoryBlowUp
        If the drift is not finite.
    """
    z = _values(z)
    s, g = drift_terms(z, t, score_fn, guidance)
    drift = 0.5 * z + s + g
    bad = ~np.all(np.isfinite(np.reshape(drift, (-1, z.shape[-1]))), axis=-1)
    if bad.any():
        raise TrajectoryBlowUp(f"non-finite drift at t={float(t):.4g}", np.flatnonzero(bad))
    eps = rng.standard_normal(z.shape[:-1] + (C.basis.size,)) if isinstance(rng, np.random.Generator) else rng
    noise = C.basis.inverse(np.asarray(eps) * C.spectral_power(0.5))
    return z + drift * dt + np.sqrt(dt) * noise


def sample_array(spec: GuidanceSpec, schedule: DiffusionSchedule, score_fn, C: CovarianceOp,
                 n_samples: int, seed: int, chunk: int = 256, denoise: bool = True,
                 progress: Callable | None = None) -> np.ndarray:
    """Run ``n_samples`` reverse chains and return the states, shape (n_samples, state).

    Chain ``i`` owns the generator seeded with ``seed + i``: it draws its
    initial state first and then one noise vector per step, so results do
    not depend on ``chunk``.  After the last step the state is mapped through
    the Tweedie estimate with the guided score and projected onto the basis.
    """
    if n_samples == 0:
        return np.zeros((0, _state_size(C)))
    times = schedule.times()
    basis = C.basis
    root = C.spectral_power(0.5)
    out = []
    for lo in range(0, n_samples, chunk):
        hi = min(lo + chunk, n_samples)
        rngs = [np.random.default_rng(seed + i) for i in range(lo, hi)]
        z = basis.inverse(np.stack([r.standard_normal(basis.size) for r in rngs]) * root)
        block = 64
        for start in range(0, len(times) - 1, block):
            stop = min(start + block, len(times) - 1)
            noise = np.stack([r.standard_normal((stop - start, basis.size)) for r in rngs], axis=1)
            for j in range(start, stop):
                t, dt = times[j], times[j] - times[j + 1]
                try:
                    z = reverse_step(z, t, dt, score_fn, spec, C, noise[j - start])
                except TrajectoryBlowUp as err:
                    raise TrajectoryBlowUp(str(err), [lo + c for c in err.chains]) from None
                if progress is not None:
                    progress(lo, j)
        if denoise:
            s, g = drift_terms(z, times[-1], score_fn, spec)
            z = tweedie(z, times[-1], s + g)
        z = basis.project(z)
        bad = ~np.all(np.isfinite(z), axis=-1)
        if bad.any():
            raise TrajectoryBlowUp("non-finite final state", lo + np.flatnonzero(bad))
        out.append(z)
    return np.concatenate(out, axis=0)


def _state_size(C: CovarianceOp) -> int:
    return C.basis.grid.n if C.basis.grid is not None else C.basis.size


def sample_posterior(spec: GuidanceSpec, schedule: DiffusionSchedule, score_fn, C: CovarianceOp,
                     grid: Grid1D | None, n_samples: int, seed: int, **kwargs) -> list:
    """Reverse-sample ``n_samples`` states; returns FunctionSamples on ``grid``.

    For coefficient-space states (``grid`` is None) plain arrays are returned.
    """
    arr = sample_array(spec, schedule, score_fn, C, n_samples, seed, **kwargs)
    if grid is None:
        return list(arr)
    return [FunctionSample(grid, row) for row in arr]
