"""Time-modulated Fourier neural operator and residual coefficient MLP.

Both networks share the same calling convention::

    out = net.forward(vars, x, t, cond)      # taped, returns a Var
    out = net(params, x, t, cond)            # plain evaluation, returns an array
    out, pullback = net.vjp(params, x, t, cond)

``x`` has shape (batch, n) for the FNO and (batch, dim) for the MLP; ``t``
is a scalar or an array of shape (batch,).
"""

from __future__ import annotations

import numpy as np

from . import tape as T
from .params import ModelParams

TIME_FEATURES = 64


def time_features(t, width: int = TIME_FEATURES) -> np.ndarray:
    """Sinusoidal features of ``log t``, shape (len(t), width)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0):
        raise ValueError("time embedding needs t > 0")
    freqs = np.geomspace(0.1, 10.0, width // 2)
    arg = np.log(t)[:, None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _dense(rng, n_in, n_out, zero=False):
    if zero:
        return np.zeros((n_in, n_out))
    return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)


class Network:
    arch: dict

    def init(self, seed=0) -> ModelParams:
        raise NotImplementedError

    def forward(self, p: dict, x, t, cond=None) -> T.Var:
        raise NotImplementedError

    def __call__(self, params: ModelParams, x, t, cond=None) -> np.ndarray:
        return self.forward(params.as_vars(), x, t, cond).value

    def vjp(self, params: ModelParams, x, t, cond=None):
        """Output and a pullback ``v -> (d out / d x)^T v``."""
        xv = T.Var(np.asarray(x, dtype=float), requires_grad=True, name="input")
        out = self.forward(params.as_vars(), xv, t, cond)

        def pullback(v):
            xv.grad = None
            T.backward(out, v)
            return xv.grad

        return out.value, pullback


class FNO(Network):
    """Stack of time-modulated Fourier layers on a 1-D grid.

    Each layer computes ``silu((1 + g(t)) W v + b(t) + irfft(p(t) R rfft(v)))``
    with the scale ``g``, bias ``b`` and spectral gain ``p`` produced by a
    small MLP on sinusoidal features of log t.  Inputs are the state, the
    optional conditioning channels and two periodic coordinate channels.
    """

    def __init__(self, width=64, layers=4, modes=16, cond_channels=0, hidden_time=64,
                 zero_init_output=True):
        self.arch = dict(kind="fno", width=int(width), layers=int(layers), modes=int(modes),
                         cond_channels=int(cond_channels), hidden_time=int(hidden_time),
                         zero_init_output=bool(zero_init_output))

    @property
    def in_channels(self):
        return 1 + self.arch["cond_channels"] + 2

    def init(self, seed=0) -> ModelParams:
        rng = np.random.default_rng(seed)
        a = self.arch
        w, m, ht = a["width"], a["modes"], a["hidden_time"]
        p = {
            "lift.W": _dense(rng, self.in_channels, w),
            "lift.b": np.zeros(w),
            "proj1.W": _dense(rng, w, w),
            "proj1.b": np.zeros(w),
            "proj2.W": _dense(rng, w, 1, zero=a["zero_init_output"]),
            "proj2.b": np.zeros(1),
        }
        for l in range(a["layers"]):
            p[f"layer{l}.W"] = _dense(rng, w, w)
            p[f"layer{l}.R"] = rng.standard_normal((m, w, w, 2)) / (w * m)
            p[f"layer{l}.time1.W"] = _dense(rng, TIME_FEATURES, ht)
            p[f"layer{l}.time1.b"] = np.zeros(ht)
            p[f"layer{l}.time2.W"] = np.zeros((ht, 3 * w))
            p[f"layer{l}.time2.b"] = np.zeros(3 * w)
        return ModelParams(dict(a), p)

    def forward(self, p, x, t, cond=None):
        a = self.arch
        w, m = a["width"], a["modes"]
        x = T.as_var(x)
        B, n = x.value.shape
        if (cond is None) != (a["cond_channels"] == 0):
            raise ValueError("conditioning channels must be given exactly when the model expects them")
        chans = [T.reshape(x, (B, n, 1))]
        if cond is not None:
            cond = np.asarray(cond, dtype=float)
            if cond.shape != (B, a["cond_channels"], n):
                raise ValueError(f"cond has shape {cond.shape}, expected {(B, a['cond_channels'], n)}")
            chans.append(T.constant(cond.transpose(0, 2, 1)))
        phase = 2 * np.pi * np.arange(n) / n
        pos = np.stack([np.sin(phase), np.cos(phase)], axis=-1)
        chans.append(T.constant(np.broadcast_to(pos, (B, n, 2))))
        h = T.linear(T.concat(chans, axis=-1), p["lift.W"], p["lift.b"])

        temb = T.constant(time_features(t))
        Bt = temb.value.shape[0]
        for l in range(a["layers"]):
            hid = T.silu(T.linear(temb, p[f"layer{l}.time1.W"], p[f"layer{l}.time1.b"]))
            mod = T.reshape(T.linear(hid, p[f"layer{l}.time2.W"], p[f"layer{l}.time2.b"]), (Bt, 1, 3 * w))
            gain, bias, spec = T.split(mod, [w, w, w])
            local = T.linear(h, p[f"layer{l}.W"]) * (gain + 1.0) + bias
            modes = T.rfft_modes(h, m, axis=1)
            spectral = T.irfft_modes(T.spectral_multiply(modes, p[f"layer{l}.R"], spec + 1.0), n, axis=1)
            h = T.silu(local + spectral)
        out = T.linear(T.silu(T.linear(h, p["proj1.W"], p["proj1.b"])), p["proj2.W"], p["proj2.b"])
        return T.reshape(out, (B, n))


class CoefficientMLP(Network):
    """Residual MLP on flat coefficient vectors with a time-embedding input."""

    def __init__(self, dim=64, hidden=256, blocks=4, cond_dim=0, zero_init_output=True):
        self.arch = dict(kind="mlp", dim=int(dim), hidden=int(hidden), blocks=int(blocks),
                         cond_dim=int(cond_dim), zero_init_output=bool(zero_init_output))

    def init(self, seed=0) -> ModelParams:
        rng = np.random.default_rng(seed)
        a = self.arch
        h = a["hidden"]
        p = {
            "in.W": _dense(rng, a["dim"] + a["cond_dim"] + TIME_FEATURES, h),
            "in.b": np.zeros(h),
            "out.W": _dense(rng, h, a["dim"], zero=a["zero_init_output"]),
            "out.b": np.zeros(a["dim"]),
        }
        for i in range(a["blocks"]):
            p[f"block{i}.W"] = _dense(rng, h, h) * 0.5
            p[f"block{i}.b"] = np.zeros(h)
        return ModelParams(dict(a), p)

    def forward(self, p, x, t, cond=None):
        a = self.arch
        x = T.as_var(x)
        B, d = x.value.shape
        if d != a["dim"]:
            raise ValueError(f"expected coefficient vectors of length {a['dim']}, got {d}")
        if (cond is None) != (a["cond_dim"] == 0):
            raise ValueError("conditioning input must be given exactly when the model expects it")
        parts = [x]
        if cond is not None:
            cond = np.asarray(cond, dtype=float)
            if cond.shape != (B, a["cond_dim"]):
                raise ValueError(f"cond has shape {cond.shape}, expected {(B, a['cond_dim'])}")
            parts.append(T.constant(cond))
        parts.append(T.constant(np.broadcast_to(time_features(t), (B, TIME_FEATURES))))
        h = T.silu(T.linear(T.concat(parts, axis=-1), p["in.W"], p["in.b"]))
        for i in range(a["blocks"]):
            h = h + T.silu(T.linear(h, p[f"block{i}.W"], p[f"block{i}.b"]))
        return T.linear(h, p["out.W"], p["out.b"])


class TimeScalar(Network):
    """Scalar function of time, ``t -> R``; starts at the constant ``init``."""

    def __init__(self, hidden=64, init=0.01):
        self.arch = dict(kind="time_scalar", hidden=int(hidden), init=float(init))

    def init(self, seed=0) -> ModelParams:
        rng = np.random.default_rng(seed)
        h = self.arch["hidden"]
        return ModelParams(dict(self.arch), {
            "l1.W": _dense(rng, TIME_FEATURES, h),
            "l1.b": np.zeros(h),
            "l2.W": np.zeros((h, 1)),
            "l2.b": np.full(1, self.arch["init"]),
        })

    def forward(self, p, x, t, cond=None):
        temb = T.constant(time_features(t))
        return T.linear(T.silu(T.linear(temb, p["l1.W"], p["l1.b"])), p["l2.W"], p["l2.b"])

    def __call__(self, params, t):
        return self.forward(params.as_vars(), None, t).value


def build_network(arch: dict) -> Network:
    kind = arch["kind"]
    kwargs = {k: v for k, v in arch.items() if k != "kind"}
    if kind == "fno":
        return FNO(**kwargs)
    if kind == "mlp":
        return CoefficientMLP(**kwargs)
    if kind == "time_scalar":
        return TimeScalar(**kwargs)
    raise ValueError(f"unknown architecture {kind!r}")
