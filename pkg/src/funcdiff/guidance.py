"""Guidance drifts for the reverse sampler.

Two approximations of the exact guidance ``C grad log h``:

* the training-free Tweedie (FunDPS-style) term ``-gamma C J^* grad Phi(x_hat)``
  where ``x_hat`` is the Tweedie estimate and ``J`` its derivative in ``z``;
* a learned term ``C^k (u1(t, z, y) + u2(t) grad Phi(x_hat))``.

Both are exposed as *terms* ``(z, t, score_fn) -> (s, g)`` that plug into
:class:`funcdiff.diffusion.GuidanceSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .diffusion import GuidanceSpec, tweedie
from .funcspace import CovarianceOp
from .nets import tape as T
from .nets.models import Network, TimeScalar, build_network
from .nets.params import ModelParams
from .nets.score import scaled_output


class GuidanceBlowUp(FloatingPointError):
    pass


def _check(g, what):
    if not np.all(np.isfinite(g)):
        raise GuidanceBlowUp(f"non-finite {what}")
    return g


@dataclass
class TweedieGuidanceConfig:
    """Scale and Jacobian treatment of the Tweedie guidance.

    ``grad_phi(f)`` returns the likelihood gradient (Riesz representer in the
    quadrature inner product given by ``weights``) for a batch of states.

    ``gradient`` fixes the units of ``gamma``.  With ``"euclidean"`` the
    guidance is built from the gradient with respect to the raw state
    vector (grid values or coefficients), the convention under which
    published FunDPS scales are tuned.  With ``"riesz"`` it is built from the
    quadrature-consistent representer; on a grid of spacing ``h`` the two
    differ by a factor ``h`` in ``gamma``.
    """

    gamma: float
    grad_phi: Callable
    jacobian_mode: Literal["full", "identity"] = "full"
    weights: np.ndarray | None = None
    gradient: Literal["euclidean", "riesz"] = "euclidean"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.jacobian_mode not in ("full", "identity"):
            raise ValueError(f"unknown jacobian mode {self.jacobian_mode!r}")
        if self.gradient not in ("euclidean", "riesz"):
            raise ValueError(f"unknown gradient convention {self.gradient!r}")


def tweedie_term(cfg: TweedieGuidanceConfig, C: CovarianceOp):
    """Sampler term computing the score and ``-gamma C J^* grad Phi(x_hat)`` together."""
    w = np.ones(1) if cfg.weights is None else np.asarray(cfg.weights)

    def term(z, t, score_fn):
        if cfg.jacobian_mode == "full":
            s, pullback = score_fn.vjp(z, t)
        else:
            s = score_fn(z, t)
        x_hat = tweedie(z, t, s)
        # Euclidean gradient of Phi with respect to the state vector
        v = w * _check(cfg.grad_phi(x_hat), "likelihood gradient")
        if cfg.jacobian_mode == "full":
            v = np.exp(0.5 * t) * (v - np.expm1(-t) * pullback(v))
        if cfg.gradient == "riesz":
            # W^{-1} J^T W: the adjoint in the weighted inner product
            v = v / w
        g = -cfg.gamma * C.apply_power(v, 1.0)
        return s, _check(g, "Tweedie guidance")

    return term


def tweedie_guidance(z, t, score_fn, cfg: TweedieGuidanceConfig, C: CovarianceOp):
    """The Tweedie guidance drift alone."""
    if t <= 0:
        raise ValueError("guidance needs t > 0")
    return tweedie_term(cfg, C)(np.asarray(z, dtype=float), t, score_fn)[1]


class GuidanceParametrisation:
    """``u = u1(t, x, y) + u2(t) grad Phi(x_hat)``, applied as ``C^k u``.

    Parameters
    ----------
    u1 : ModelParams
        Network on ``(x_t, cond(y))`` with a zero-initialised output layer.
    u2 : ModelParams
        Scalar time network, initialised to a small constant.
    k_exp : {0, 0.5, 1}
    grad_phi : callable
        ``grad_phi(f, obs)`` batch likelihood gradient supplied by the task.
    cond_fn : callable
        ``cond_fn(obs)`` conditioning input for ``u1``.
    """

    def __init__(self, u1: ModelParams, u2: ModelParams, k_exp: float, grad_phi: Callable,
                 cond_fn: Callable):
        if k_exp not in (0, 0.5, 1):
            raise ValueError("k_exp must be 0, 1/2 or 1")
        self.u1, self.u2, self.k_exp = u1, u2, float(k_exp)
        self.grad_phi, self.cond_fn = grad_phi, cond_fn
        self.u1_net: Network = build_network(u1.arch)
        self.u2_net: TimeScalar = build_network(u2.arch)

    @classmethod
    def initialise(cls, u1_net: Network, k_exp: float, grad_phi, cond_fn, seed: int = 0,
                   u2_init: float = 0.01):
        u2_net = TimeScalar(init=u2_init)
        return cls(u1_net.init(seed), u2_net.init(seed + 1), k_exp, grad_phi, cond_fn)

    def models(self) -> dict:
        return {"u1": self.u1, "u2": self.u2}

    def trainable_vars(self) -> dict:
        return {"u1": self.u1.as_vars(True, "u1/"), "u2": self.u2.as_vars(True, "u2/")}

    def u_vars(self, pv: dict, x, t, cond, grad) -> T.Var:
        """Taped ``u`` before preconditioning; ``grad`` is ``grad Phi(x_hat)``."""
        u1 = scaled_output(self.u1_net, pv["u1"], x, t, cond)
        u2 = self.u2_net.forward(pv["u2"], None, t)
        return u1 + T.mul(u2, grad)

    def precondition(self, u: T.Var, C: CovarianceOp) -> T.Var:
        """``C^k u`` as a taped linear map."""
        if self.k_exp == 0:
            return u
        basis, d = C.basis, C.spectral_power(self.k_exp)
        return T.basis_op(u, lambda v: C.apply_power(v, self.k_exp),
                          lambda g: basis.forward_adjoint(d * basis.inverse_adjoint(g)))

    def apply(self, z, t, s, obs, C: CovarianceOp) -> np.ndarray:
        """``C^k (u1 + u2 grad Phi(x_hat))`` with ``x_hat`` the Tweedie point of ``s``."""
        x_hat = tweedie(z, t, s)
        grad = _check(self.grad_phi(x_hat, obs), "likelihood gradient")
        pv = {"u1": self.u1.as_vars(), "u2": self.u2.as_vars()}
        u = self.u_vars(pv, z, t, self.cond_fn(obs), grad)
        return _check(self.precondition(u, C).value, "learned guidance")


def learned_guidance(z, t, obs, param: GuidanceParametrisation, frozen_score, C: CovarianceOp):
    """The learned guidance drift at ``(z, t)`` for observation ``obs``."""
    z = np.asarray(z, dtype=float)
    return param.apply(z, t, frozen_score(z, t), obs, C)


def learned_term(param: GuidanceParametrisation, obs, C: CovarianceOp):
    def term(z, t, score_fn):
        s = score_fn(z, t)
        return s, param.apply(z, t, s, obs, C)

    return term


def tweedie_spec(cfg: TweedieGuidanceConfig, C: CovarianceOp, obs) -> GuidanceSpec:
    return GuidanceSpec("tweedie", obs, tweedie_term(cfg, C), gamma=cfg.gamma,
                        meta={"jacobian_mode": cfg.jacobian_mode})


def learned_spec(param: GuidanceParametrisation, C: CovarianceOp, obs) -> GuidanceSpec:
    return GuidanceSpec("learned", obs, learned_term(param, obs, C), k_exp=param.k_exp)
