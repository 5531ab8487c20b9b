"""Score functions backed by networks.

A network output ``o(t, x)`` is read as the score

    s = -x + e^{-t/2} o / sigma_t,        sigma_t = sqrt(1 - e^{-t}),

so that the Tweedie estimate is ``x_hat = e^{-t/2} x + sigma_t o``.  The
``-x`` part is the exact score of the reference law ``N(0, C)``.  The
regression target for ``o`` has unit scale at every ``t`` and the Tweedie
Jacobian ``e^{-t/2} + sigma_t do/dx`` carries no ``e^{t/2}`` amplification
of network error at large ``t``.  Learned guidance networks use the plain
``o / sigma_t`` scaling (:func:`scaled_output`).  The loss is unchanged.
"""

from __future__ import annotations

import numpy as np

from . import tape as T
from .models import Network, build_network
from .params import ModelParams


def _sigma(t):
    return np.sqrt(-np.expm1(-np.asarray(t, dtype=float)))


def _broadcast_cond(cond, batch):
    if cond is None:
        return None
    cond = np.asarray(cond, dtype=float)
    if cond.shape[0] == batch:
        return cond
    if cond.shape[0] == 1:
        return np.broadcast_to(cond, (batch,) + cond.shape[1:])
    raise ValueError(f"{cond.shape[0]} conditioning rows for a batch of {batch}")


def scaled_output(net: Network, pvars: dict, x, t, cond=None, gain=1.0) -> T.Var:
    """Taped ``gain * net(x, t, cond) / sigma_t`` with ``t`` a scalar or one time per row."""
    x_val = x.value if isinstance(x, T.Var) else np.asarray(x)
    out = net.forward(pvars, x, t, _broadcast_cond(cond, x_val.shape[0]))
    inv = gain / _sigma(t)
    if np.ndim(inv):
        inv = inv.reshape((-1,) + (1,) * (out.value.ndim - 1))
    return T.mul(out, inv)


def score_output(net: Network, pvars: dict, x, t, cond=None) -> T.Var:
    """Taped score ``-x + e^{-t/2} net(x, t, cond) / sigma_t``."""
    return scaled_output(net, pvars, x, t, cond, gain=np.exp(-0.5 * np.asarray(t, dtype=float))) - x


class ScoreModel:
    """Callable score ``(z, t) -> s`` from a network and fixed parameters.

    ``cond`` is bound at construction (amortised models) and broadcast
    across the chain batch when it holds a single row.
    """

    def __init__(self, params: ModelParams, cond=None, net: Network | None = None):
        self.params = params
        self.net = net or build_network(params.arch)
        self.cond = cond

    def with_cond(self, cond) -> "ScoreModel":
        return ScoreModel(self.params, cond, self.net)

    def __call__(self, z, t):
        return score_output(self.net, self.params.as_vars(), z, t, self.cond).value

    def vjp(self, z, t):
        zv = T.Var(np.asarray(z, dtype=float), requires_grad=True, name="input")
        out = score_output(self.net, self.params.as_vars(), zv, t, self.cond)

        def pullback(v):
            zv.grad = None
            T.backward(out, v)
            return zv.grad

        return out.value, pullback
