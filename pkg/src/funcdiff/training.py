"""Score-matching losses, the optimiser loop and the control-cost diagnostic.

All losses share the residual ``r = s(t, x_t) + sigma_t^{-1} C^{1/2} eps``
with ``x_t = e^{-t/2} x_0 + sigma_t C^{1/2} eps``; they differ in what ``s``
is:

* ``dsm_loss``: the unconditional network;
* ``conditional_dsm_loss``: a network that also sees the observation;
* ``sgt_loss``: a frozen score plus the preconditioned guidance ``C^k u``.

The residual is measured in L2 (quadrature) or in the Cameron-Martin norm
``|C^{-1/2} r|``.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from .diffusion import DiffusionSchedule, forward_marginal, sigma, tweedie
from .funcspace import CovarianceOp
from .nets import tape as T
from .nets.models import Network
from .nets.params import ModelParams
from .nets.score import score_output

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimisation settings.

    ``time_law`` draws training times uniformly on ``[t_min, T]`` or
    log-uniformly; ``weighting="sigma2"`` multiplies each sample's loss by
    ``sigma_t**2`` (a variance-reduction choice; the minimiser is unchanged).
    """

    batch: int = 64
    steps: int = 5000
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    norm: Literal["L2", "cameron_martin"] = "L2"
    time_law: Literal["uniform", "log_uniform"] = "uniform"
    weighting: Literal["none", "sigma2"] = "none"
    clip: float = 1.0
    seed: int = 0
    log_path: str | None = None
    log_every: int = 50

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch < 1 or self.steps < 1:
            raise ValueError("batch and steps must be positive")
        if self.norm not in ("L2", "cameron_martin"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.time_law not in ("uniform", "log_uniform"):
            raise ValueError(f"unknown time law {self.time_law!r}")
        if self.weighting not in ("none", "sigma2"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr_start`` at step 0 to ``lr_end`` at the last step."""
    if cfg.steps == 1:
        return cfg.lr_start
    frac = step / (cfg.steps - 1)
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1 + np.cos(np.pi * frac))


def sample_times(rng, n: int, schedule: DiffusionSchedule, law: str = "uniform") -> np.ndarray:
    if law == "uniform":
        return rng.uniform(schedule.t_min, schedule.T, size=n)
    return np.exp(rng.uniform(np.log(schedule.t_min), np.log(schedule.T), size=n))


# -- losses -----------------------------------------------------------------


def residual_norm(r: T.Var, C: CovarianceOp, norm: str) -> T.Var:
    """Per-row squared norm of a taped residual."""
    if norm == "L2":
        return T.weighted_sqnorm(r, C.basis.quadrature_weights())
    basis = C.basis
    coeffs = T.basis_op(r, basis.forward, basis.forward_adjoint)
    return T.weighted_sqnorm(coeffs, C.spectral_power(-1.0))


def _noise_target(eps, sig, C: CovarianceOp):
    """``sigma_t^{-1} C^{1/2} eps`` on the grid."""
    colored = C.basis.inverse(eps * C.spectral_power(0.5))
    return colored / np.reshape(sig, (-1,) + (1,) * (colored.ndim - 1))


def _reduce(per_sample: T.Var, sig, weighting: str) -> T.Var:
    if weighting == "sigma2":
        per_sample = T.mul(per_sample, np.asarray(sig) ** 2)
    return T.mean(per_sample)


def _noisy_batch(x0, C, schedule, cfg, rng, t=None, eps=None):
    t = sample_times(rng, len(x0), schedule, cfg.time_law) if t is None else np.asarray(t, dtype=float)
    if eps is None:
        xt, eps, sig = forward_marginal(x0, t, C, rng)
    else:
        sig = sigma(t)
        colored = C.basis.inverse(eps * C.spectral_power(0.5))
        xt = np.exp(-0.5 * t)[:, None] * x0 + sig[:, None] * colored
    return t, xt, eps, sig


def dsm_loss(net: Network, pvars: dict, x0, C: CovarianceOp, schedule: DiffusionSchedule,
             cfg: TrainConfig, rng, cond=None, t=None, eps=None):
    """Denoising score-matching loss as a taped scalar.

    Returns ``(loss, info)`` where ``info`` holds the times and per-sample
    residual norms.  ``t`` and ``eps`` may be fixed for deterministic checks.
    """
    t, xt, eps, sig = _noisy_batch(np.asarray(x0, dtype=float), C, schedule, cfg, rng, t, eps)
    s = score_output(net, pvars, xt, t, cond)
    r = s + _noise_target(eps, sig, C)
    per = residual_norm(r, C, cfg.norm)
    return _reduce(per, sig, cfg.weighting), {"t": t, "residual": per.value}


def conditional_dsm_loss(net: Network, pvars: dict, x0, cond, C, schedule, cfg, rng, t=None, eps=None):
    """DSM loss for an amortised model fed the observation features ``cond``."""
    return dsm_loss(net, pvars, x0, C, schedule, cfg, rng, cond=cond, t=t, eps=eps)


def sgt_loss(param, pvars: dict, frozen_score, x0, obs, C, schedule, cfg, rng, t=None, eps=None):
    """Supervised guidance loss with the frozen score treated as a constant.

    ``frozen_score(x_t, t)`` is evaluated without recording, so no gradient
    buffer is ever attached to the score model's parameters.
    """
    t, xt, eps, sig = _noisy_batch(np.asarray(x0, dtype=float), C, schedule, cfg, rng, t, eps)
    s = frozen_score(xt, t)
    grad = param.grad_phi(tweedie(xt, t, s), obs)
    u = param.u_vars(pvars, xt, t, param.cond_fn(obs), grad)
    r = T.add(param.precondition(u, C), s + _noise_target(eps, sig, C))
    per = residual_norm(r, C, cfg.norm)
    return _reduce(per, sig, cfg.weighting), {"t": t, "residual": per.value}


# -- optimiser --------------------------------------------------------------


class Adam:
    """Adam with bias correction over a dict of named arrays."""

    def __init__(self, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(params: dict, grads: dict, step_index: int, cfg: TrainConfig, state: Adam) -> bool:
    """Clip, then apply one Adam update at the scheduled rate.

    Returns False (and leaves everything untouched) when a gradient is not
    finite.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("step %d: non-finite gradient, update skipped", step_index)
        return False
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if cfg.clip and total > cfg.clip:
        grads = {k: g * (cfg.clip / total) for k, g in grads.items()}
    state.step(params, grads, cosine_lr(step_index, cfg))
    return True


class ResidualMonitor:
    """Warns when small-time residuals jump far above their running median.

    Residuals are multiplied by ``sigma_t**2`` first: the raw residual of an
    optimal model grows like ``1 / sigma_t**2`` as ``t -> 0``.
    """

    def __init__(self, t_small=0.01, factor=10.0, window=512):
        self.t_small, self.factor = t_small, factor
        self.hist = deque(maxlen=window)
        self.warned = 0

    def update(self, t, residual, step):
        t = np.asarray(t, dtype=float)
        keep = t < self.t_small
        small = np.asarray(residual)[keep] * -np.expm1(-t[keep])
        if small.size == 0:
            return
        if len(self.hist) >= 32:
            med = np.median(self.hist)
            if np.any(small > self.factor * med) and self.warned < 10:
                self.warned += 1
                log.warning("step %d: small-t residual %.3g exceeds %gx running median %.3g",
                            step, small.max(), self.factor, med)
        self.hist.extend(small.tolist())


@dataclass
class TrainResult:
    models: dict
    losses: list = field(default_factory=list)
    skipped: int = 0
    final_loss: float = float("nan")
    checkpoints: dict = field(default_factory=dict)


def fit(models: dict[str, ModelParams], loss_fn: Callable, cfg: TrainConfig, rng,
        checkpoint_at=(), callback: Callable | None = None) -> TrainResult:
    """Generic loop: ``loss_fn(pvars, rng) -> (loss, info)`` over role-keyed parameters.

    ``checkpoint_at`` lists step counts after which a copy of the parameters
    is kept in ``TrainResult.checkpoints``.
    """
    opt = Adam()
    current = {role: p.copy() for role, p in models.items()}
    monitor = ResidualMonitor()
    result = TrainResult(current)
    writer, fh = None, None
    if cfg.log_path:
        Path(cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(cfg.log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "wall_time"])
    start = time.perf_counter()
    try:
        for step in range(cfg.steps):
            pv = {role: p.as_vars(True, f"{role}/") for role, p in current.items()}
            loss, info = loss_fn(pv, rng)
            value = float(loss.value)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at step {step}")
            T.backward(loss)
            grads = {f"{role}/{k}": (v.grad if v.grad is not None else np.zeros_like(v.value))
                     for role, vs in pv.items() for k, v in vs.items()}
            flat = {f"{role}/{k}": t for role, p in current.items() for k, t in p.tensors.items()}
            if adam_step(flat, grads, step, cfg, opt):
                for role, p in current.items():
                    for k in p.tensors:
                        p.tensors[k] = flat[f"{role}/{k}"]
            else:
                result.skipped += 1
            monitor.update(info["t"], info["residual"], step)
            result.losses.append(value)
            if writer and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                writer.writerow([step, f"{value:.10g}", f"{cosine_lr(step, cfg):.6g}",
                                 f"{time.perf_counter() - start:.3f}"])
            if step + 1 in checkpoint_at:
                result.checkpoints[step + 1] = {r: p.copy() for r, p in current.items()}
            if callback is not None:
                callback(step, value)
    finally:
        if fh:
            fh.close()
    result.final_loss = result.losses[-1]
    return result


# -- drivers ----------------------------------------------------------------


def _batches(data, cfg, rng):
    idx = rng.integers(0, len(data), size=cfg.batch)
    return data[idx]


def train_unconditional(net: Network, data, C, schedule, cfg: TrainConfig, params=None, **kw):
    rng = np.random.default_rng(cfg.seed)
    params = params or net.init(cfg.seed)

    def loss_fn(pv, rng):
        return dsm_loss(net, pv["score"], _batches(data, cfg, rng), C, schedule, cfg, rng)

    return fit({"score": params}, loss_fn, cfg, rng, **kw)


def train_conditional(net: Network, data, task, C, schedule, cfg: TrainConfig, params=None, **kw):
    """Amortised conditional model trained on fresh synthetic observations per batch."""
    rng = np.random.default_rng(cfg.seed)
    params = params or net.init(cfg.seed)

    def loss_fn(pv, rng):
        x0 = _batches(data, cfg, rng)
        obs = task.observe(x0, rng)
        return conditional_dsm_loss(net, pv["score"], x0, task.cond_features(obs), C, schedule, cfg, rng)

    return fit({"score": params}, loss_fn, cfg, rng, **kw)


def train_sgt(param, frozen_score, data, task, C, schedule, cfg: TrainConfig, **kw):
    """Fit ``u1`` and ``u2`` with the score frozen; returns the TrainResult.

    ``param`` is updated in place with the trained tensors.
    """
    rng = np.random.default_rng(cfg.seed)

    def loss_fn(pv, rng):
        x0 = _batches(data, cfg, rng)
        obs = task.observe(x0, rng)
        return sgt_loss(param, pv, frozen_score, x0, obs, C, schedule, cfg, rng)

    result = fit(param.models(), loss_fn, cfg, rng, **kw)
    param.u1, param.u2 = result.models["u1"], result.models["u2"]
    return result


# -- control-cost diagnostic ------------------------------------------------


def soc_loss_estimate(term, score_fn, phi_fn: Callable, C: CovarianceOp, schedule: DiffusionSchedule,
                      n_traj: int, rng) -> tuple[float, float]:
    """Monte Carlo control cost ``E[Phi(Z) + 1/2 int |C^{-1/2} g|^2 dt]``.

    ``term(z, t, score_fn) -> (s, g)`` supplies the guidance drift ``g``
    (pass None for zero control); ``phi_fn(z)`` evaluates the potential on
    the terminal states.  Returns the estimate and its standard error.
    """
    basis = C.basis
    times = schedule.times()
    z = basis.inverse(rng.standard_normal((n_traj, basis.size)) * C.spectral_power(0.5))
    running = np.zeros(n_traj)
    inv = C.spectral_power(-1.0)
    for j in range(len(times) - 1):
        t, dt = times[j], times[j] - times[j + 1]
        if term is None:
            s, g = score_fn(z, t), 0.0
        else:
            s, g = term(z, t, score_fn)
            running += 0.5 * dt * np.sum(basis.forward(g) ** 2 * inv, axis=-1)
        drift = 0.5 * z + s + g
        if not np.all(np.isfinite(drift)):
            raise FloatingPointError("trajectory blow-up in control-cost estimate")
        z = z + drift * dt + np.sqrt(dt) * basis.inverse(rng.standard_normal((n_traj, basis.size)) * C.spectral_power(0.5))
    total = np.asarray(phi_fn(z)) + running
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(n_traj))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
