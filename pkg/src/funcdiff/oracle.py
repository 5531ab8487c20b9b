"""Closed-form Gaussian ground truth for scores, guidance and posteriors.

The prior is ``N(0, C_pi)`` and the reference noise covariance is ``C``, both
diagonal in a shared orthonormal basis.  Observations act mode by mode,
``y_k = a_k x_k + eta_k`` with ``eta_k ~ N(0, s2)``; unobserved modes have
``a_k = 0``.  Every quantity below is therefore a per-mode scalar formula and
all functions accept coefficient arrays whose last axis runs over modes.

Notation: ``e = exp(-t)``, ``sigma_t**2 = 1 - e``, ``alpha_t = 1 / (1 - e)``
and ``beta_t = exp(-t/2) / (1 - e)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .funcspace import Basis, CovarianceOp


@dataclass
class GaussianLinearProblem:
    """Conjugate Gaussian problem in spectral coordinates.

    Parameters
    ----------
    c_prior : array
        Prior eigenvalues ``c_pi_k``.
    lam : array
        Eigenvalues of the diffusion covariance ``C``.
    a : array
        Diagonal observation map; zero for unobserved modes.
    s2 : float or array
        Observation noise variance per mode.
    y : array
        Observation in spectral coordinates (ignored where ``a == 0``).
    """

    c_prior: np.ndarray
    lam: np.ndarray
    a: np.ndarray
    s2: float | np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.c_prior = np.asarray(self.c_prior, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        size = self.c_prior.shape[-1]
        self.a = np.broadcast_to(np.asarray(self.a, dtype=float), (size,)).copy()
        self.s2 = np.broadcast_to(np.asarray(self.s2, dtype=float), (size,)).copy()
        self.y = np.asarray(self.y, dtype=float)
        if np.any(self.c_prior <= 0) or np.any(self.lam <= 0) or np.any(self.s2 <= 0):
            raise ValueError("prior, reference and noise variances must be positive")
        if self.lam.shape[-1] != size or self.y.shape[-1] != size:
            raise ValueError("all per-mode arrays must share the mode axis length")

    @classmethod
    def stationary(cls, C: CovarianceOp, n_observed: int, s2: float, y=None, a=1.0):
        """Prior equal to the reference law, first ``n_observed`` modes observed."""
        lam = C.eigenvalues.copy()
        obs = np.zeros_like(lam)
        obs[:n_observed] = a
        y = np.zeros_like(lam) if y is None else np.asarray(y, dtype=float)
        return cls(lam.copy(), lam, obs, s2, y)

    @property
    def size(self) -> int:
        return self.c_prior.shape[-1]

    def with_observation(self, y) -> "GaussianLinearProblem":
        return GaussianLinearProblem(self.c_prior, self.lam, self.a, self.s2, y)

    def sample_joint(self, rng: np.random.Generator, n: int):
        """Draw ``n`` pairs ``(x0, y)`` from the joint law."""
        x0 = rng.standard_normal((n, self.size)) * np.sqrt(self.c_prior)
        y = self.a * x0 + rng.standard_normal((n, self.size)) * np.sqrt(self.s2)
        return x0, np.where(self.a != 0, y, 0.0)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("the score is singular at t = 0")
    return t


def _col(t):
    # broadcast a batch of times against a trailing mode axis
    t = np.asarray(t, dtype=float)
    return t[..., None] if t.ndim else t


def alpha_t(t):
    return 1.0 / -np.expm1(-np.asarray(t, dtype=float))


def beta_t(t):
    t = np.asarray(t, dtype=float)
    return np.exp(-0.5 * t) / -np.expm1(-t)


def transition(c_prior, lam, t):
    """``(C_t, K_t, P_t)`` for a prior variance ``c_prior`` per mode."""
    e = np.exp(-_col(t))
    Ct = e * c_prior + (1.0 - e) * lam
    Kt = np.sqrt(e) * c_prior / Ct
    Pt = c_prior - e * c_prior**2 / Ct
    return Ct, Kt, Pt


def oracle_transition(prob: GaussianLinearProblem, t):
    """Per-mode marginal covariance ``C_t``, regression gain ``K_t`` and residual ``P_t``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    return transition(prob.c_prior, prob.lam, t)


def oracle_posterior(prob: GaussianLinearProblem):
    """Mean and variance of ``X_0 | Y = y`` per mode."""
    c, a, s2 = prob.c_prior, prob.a, prob.s2
    denom = a**2 * c + s2
    return c * a * prob.y / denom, c * s2 / denom


def conditional_mean(prob: GaussianLinearProblem, t, x):
    """``E[X_0 | X_t = x]`` per mode."""
    _, Kt, _ = transition(prob.c_prior, prob.lam, t)
    return Kt * x


def conditional_mean_given_y(prob: GaussianLinearProblem, t, x):
    """``E[X_0 | X_t = x, Y = y]``: the transition gain applied to the posterior."""
    m, v = oracle_posterior(prob)
    _, Kt, _ = transition(v, prob.lam, t)
    return m + Kt * (x - np.exp(-0.5 * _col(t)) * m)


def oracle_score(prob: GaussianLinearProblem, t, x):
    """Unconditional score ``-alpha_t (x - e^{-t/2} K_t x)``."""
    t = _check_time(t)
    x = np.asarray(x, dtype=float)
    return -_col(alpha_t(t)) * (x - np.exp(-0.5 * _col(t)) * conditional_mean(prob, t, x))


def oracle_conditional_score(prob: GaussianLinearProblem, t, x):
    t = _check_time(t)
    x = np.asarray(x, dtype=float)
    return -_col(alpha_t(t)) * (x - np.exp(-0.5 * _col(t)) * conditional_mean_given_y(prob, t, x))


def oracle_guidance(prob: GaussianLinearProblem, t, x):
    """Exact guidance drift ``s^y - s``."""
    return oracle_conditional_score(prob, t, x) - oracle_score(prob, t, x)


def likelihood_gradient(prob: GaussianLinearProblem, f):
    """Gradient of ``sum_k (a_k f_k - y_k)**2 / (2 s2_k)`` in spectral coordinates."""
    return prob.a * (prob.a * f - prob.y) / prob.s2


def stein_guidance(prob: GaussianLinearProblem, t, x):
    """Guidance as ``-C K_t^* E[grad Phi(X_0) | X_t = x, Y = y]``.

    This route never forms the conditional score: it smooths the likelihood
    gradient under the posterior transition and maps it back through the
    adjoint gain.  Per mode ``C K_t^* = lam K_t = beta_t P_t``.
    """
    t = _check_time(t)
    _, Kt, _ = transition(prob.c_prior, prob.lam, t)
    smoothed = likelihood_gradient(prob, conditional_mean_given_y(prob, t, x))
    return -prob.lam * Kt * smoothed


def decomposition_rhs(prob: GaussianLinearProblem, t, x):
    """``beta_t (E[X_0|X_t, Y] - E[X_0|X_t])``, the other side of ``s^y - s``."""
    t = _check_time(t)
    return _col(beta_t(t)) * (conditional_mean_given_y(prob, t, x) - conditional_mean(prob, t, x))


def residual_floor(prior_var, lam, t, norm: str = "L2"):
    """Expected squared score-matching residual at the optimum, summed over modes.

    With ``X_t = e^{-t/2} X_0 + sigma_t C^{1/2} eps`` and ``X_0`` of variance
    ``prior_var``, the best predictor of ``-sigma_t^{-1} C^{1/2} eps`` leaves a
    per-mode variance ``lam / sigma_t**2 * e v / (e v + sigma_t**2 lam)``.
    Pass the posterior variance for the conditional (guided) floor.
    """
    e = np.exp(-_col(t))
    s2t = 1.0 - e
    per_mode = lam / s2t * e * prior_var / (e * prior_var + s2t * lam)
    if norm == "cameron_martin":
        per_mode = per_mode / lam
    elif norm != "L2":
        raise ValueError(f"unknown norm {norm!r}")
    return per_mode.sum(axis=-1)


def regression_check(prob: GaussianLinearProblem, t: float, mode: int, n_draws: int, rng):
    """Monte Carlo regression of ``X_0`` on ``(X_t, Y)`` for one mode.

    Returns ``(estimate, closed_form, stderr)``, each holding the slopes on
    ``X_t`` and ``Y``.
    """
    c, lam, a, s2 = prob.c_prior[mode], prob.lam[mode], prob.a[mode], prob.s2[mode]
    e = np.exp(-t)
    x0 = rng.standard_normal(n_draws) * np.sqrt(c)
    y = a * x0 + rng.standard_normal(n_draws) * np.sqrt(s2)
    xt = np.sqrt(e) * x0 + np.sqrt((1 - e) * lam) * rng.standard_normal(n_draws)
    X = np.stack([xt, y], axis=1)
    coef, *_ = np.linalg.lstsq(X, x0, rcond=None)
    resid = x0 - X @ coef
    cov = np.linalg.inv(X.T @ X) * resid.var(ddof=2)
    # closed form: E = m(y) + g (x - sqrt(e) m(y)) with m(y) = c a y / (a^2 c + s2)
    v = c * s2 / (a**2 * c + s2)
    g = np.sqrt(e) * v / (e * v + (1 - e) * lam)
    exact = np.array([g, (1 - g * np.sqrt(e)) * c * a / (a**2 * c + s2)])
    return coef, exact, np.sqrt(np.diag(cov))


class OracleScore:
    """Grid-valued wrapper of the oracle score, conditional score or guidance.

    Parameters
    ----------
    prob : GaussianLinearProblem
        Problem whose mode axis matches ``basis.size``.
    basis : Basis
        Maps grid values to the spectral coordinates of ``prob``.
    which : {"score", "conditional", "guidance"}
    """

    def __init__(self, prob: GaussianLinearProblem, basis: Basis, which: str = "score"):
        if prob.size != basis.size:
            raise ValueError(f"problem has {prob.size} modes, basis has {basis.size}")
        fns = {"score": oracle_score, "conditional": oracle_conditional_score, "guidance": oracle_guidance}
        if which not in fns:
            raise ValueError(f"unknown oracle quantity {which!r}")
        self.prob, self.basis, self.which = prob, basis, which
        self._fn = fns[which]

    def __call__(self, z, t):
        return self.basis.inverse(self._fn(self.prob, t, self.basis.forward(z)))

    def vjp(self, z, t):
        """Value and Euclidean-transpose pullback of the affine map ``z -> s``."""
        out = self(z, t)
        zero = np.zeros(self.prob.size)
        # slope per mode: the map is affine, so evaluate its action on unit coefficients
        slope = self._fn(self.prob, t, np.ones(self.prob.size)) - self._fn(self.prob, t, zero)

        def pullback(v):
            return self.basis.forward_adjoint(slope * self.basis.inverse_adjoint(v))

        return out, pullback


def _transition_by_schur(c, lam, t):
    # the joint covariance of (X_0, X_t) and its Schur complement, entry by entry
    e = np.exp(-_col(t))
    var_t = e * c + (1.0 - e) * lam
    cross = np.sqrt(e) * c
    return var_t, cross / var_t, c - cross * cross / var_t


def identity_suite(nus=(0.5, 1.0, 2.0), times=(0.01, 0.1, 0.5, 1.0, 2.0, 5.0), n_modes: int = 32,
                   n_observed: int = 8, s2: float = 0.01, tol: float = 1e-10, mc_draws: int = 0,
                   seed: int = 0, perturb_gain: float = 0.0) -> list[dict]:
    """Check the closed-form identities linking scores, posteriors and guidance.

    Each entry reports ``name``, ``max_error``, ``threshold`` and ``passed``.
    ``perturb_gain`` scales the unconditional gain entering the score by
    ``1 + perturb_gain``; it exists so the report can be shown to fail.
    With ``mc_draws > 0`` a Monte Carlo regression of ``X_0`` on
    ``(X_t, Y)`` is added and judged against three standard errors.
    """
    rng = np.random.default_rng(seed)
    k = np.arange(1, n_modes + 1, dtype=float)
    errs = {"decomposition": 0.0, "tweedie": 0.0, "transition": 0.0, "stein": 0.0}
    probs = []
    for nu in nus:
        lam = k**-nu
        c = lam * rng.uniform(0.5, 1.5, n_modes)
        a = np.where(k <= n_observed, rng.uniform(0.5, 2.0, n_modes), 0.0)
        prob = GaussianLinearProblem(c, lam, a, s2, rng.standard_normal(n_modes))
        probs.append(prob)
        x = rng.standard_normal((4, n_modes)) * np.sqrt(lam)
        for t in times:
            e = np.exp(-t)
            s = oracle_score(prob, t, x)
            if perturb_gain:
                gain = transition(c, lam, t)[1] * (1.0 + perturb_gain)
                s = -alpha_t(t) * (x - np.sqrt(e) * gain * x)
            lhs = oracle_conditional_score(prob, t, x) - s
            rhs = decomposition_rhs(prob, t, x)
            errs["decomposition"] = max(errs["decomposition"], np.max(np.abs(lhs - rhs)))
            tw = np.exp(0.5 * t) * (x + (1.0 - e) * s)
            errs["tweedie"] = max(errs["tweedie"], np.max(np.abs(tw - conditional_mean(prob, t, x))))
            for a_ref, b_ref in zip(transition(c, lam, t), _transition_by_schur(c, lam, t)):
                errs["transition"] = max(errs["transition"], np.max(np.abs(a_ref - b_ref)))
            st = stein_guidance(prob, t, x)
            errs["stein"] = max(errs["stein"], np.max(np.abs(st - lhs)))
    names = {
        "decomposition": "guidance decomposition s^y - s = beta_t (E[X0|Xt,Y] - E[X0|Xt])",
        "tweedie": "Tweedie map e^{t/2}(x + sigma_t^2 s) = E[X0|Xt]",
        "transition": "transition formulas (C_t, K_t, P_t) vs joint-covariance Schur complement",
        "stein": "Stein form -beta_t P_t E[grad Phi] = s^y - s",
    }
    report = [{"name": names[key], "key": key, "max_error": float(v), "threshold": tol,
               "passed": bool(v <= tol)} for key, v in errs.items()]
    if mc_draws:
        prob = probs[len(probs) // 2]
        coef, exact, se = regression_check(prob, 0.5, 0, mc_draws, rng)
        z = np.abs(coef - exact) / se
        report.append({"name": "Monte Carlo regression of X0 on (Xt, Y), t=0.5, mode 1", "key": "monte_carlo",
                       "max_error": float(np.max(np.abs(coef - exact))), "stderr": se.tolist(),
                       "threshold": "3 stderr", "passed": bool(np.all(z <= 3.0))})
    return report
