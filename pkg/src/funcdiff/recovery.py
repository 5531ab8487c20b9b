"""Calibration runs on the Gaussian task, where the exact score and guidance are known.

``score_recovery`` trains an unconditional FNO and measures its relative L2
score error against the closed form; ``guidance_recovery`` trains the learned
guidance against a frozen exact score and measures the distance to the exact
guidance at several checkpoints.  Both return plain dicts that serialise to
JSON.
"""

from __future__ import annotations

import time

import numpy as np

from .diffusion import DiffusionSchedule, forward_marginal
from .guidance import GuidanceParametrisation, learned_guidance
from .nets.models import FNO
from .nets.score import ScoreModel
from .oracle import OracleScore, oracle_guidance
from .tasks.gaussian import GaussianTask
from .training import TrainConfig, train_sgt, train_unconditional

TIMES = (0.1, 0.5, 1.0, 2.0)


def _relative_l2(a, b, w):
    """``sqrt(sum |a - b|^2 / sum |b|^2)`` over the batch, in the quadrature norm."""
    return float(np.sqrt(np.sum(w * (a - b) ** 2) / np.sum(w * b**2)))


def _test_states(task, t, n, rng, x0=None):
    if x0 is None:
        x0 = task.generate(n, rng)
    xt, _, _ = forward_marginal(x0, np.full(len(x0), t), task.covariance(), rng)
    return xt


def score_errors(score_fn, task: GaussianTask, times=TIMES, n_test=256, seed=1) -> list[float]:
    """Relative L2 error of ``score_fn`` against the exact prior score at each time."""
    exact = OracleScore(task.problem(), task.basis, "score")
    rng = np.random.default_rng(seed)
    w = task.quadrature_weights()
    out = []
    for t in times:
        z = _test_states(task, t, n_test, rng)
        out.append(_relative_l2(score_fn(z, t), exact(z, t), w))
    return out


def score_recovery(n=128, prior_scale=1.0, width=64, layers=4, modes=16, steps=5000, batch=64,
                   n_train=10_000, times=TIMES, n_test=256, seed=0, train_overrides=None) -> dict:
    """Train the unconditional FNO on a Gaussian prior and compare with the exact score.

    ``prior_scale`` is the per-mode ratio of prior to reference variance; at
    1 the prior equals the reference law, whose score the network
    parametrisation already returns at initialisation.
    """
    task = GaussianTask(n=n, prior_scale=prior_scale)
    C = task.covariance()
    data = task.generate(n_train, np.random.default_rng(seed))
    net = FNO(width=width, layers=layers, modes=modes)
    params = net.init(seed)
    initial = score_errors(ScoreModel(params, net=net), task, times, n_test, seed + 1)
    cfg = TrainConfig(batch=batch, steps=steps, lr_start=1e-3, lr_end=1e-5, time_law="log_uniform",
                      weighting="sigma2", seed=seed, **(train_overrides or {}))
    start = time.perf_counter()
    res = train_unconditional(net, data, C, DiffusionSchedule(), cfg, params=params)
    runtime = time.perf_counter() - start
    errors = score_errors(ScoreModel(res.models["score"], net=net), task, times, n_test, seed + 1)
    return {"errors": dict(zip(map(str, times), errors)), "mean_error": float(np.mean(errors)),
            "initial_errors": dict(zip(map(str, times), initial)), "initial_mean_error": float(np.mean(initial)),
            "train_seconds": runtime, "final_loss": res.final_loss}


def guidance_distance(param: GuidanceParametrisation, task: GaussianTask, times=TIMES, n_test=256, seed=1):
    """Relative L2 distance of the learned guidance to the exact one at each time.

    Test pairs ``(x0, y)`` come from the joint law; states are forward
    marginals of ``x0``.  The frozen score is the exact prior score.
    """
    frozen = OracleScore(task.problem(), task.basis, "score")
    C = task.covariance()
    w = task.quadrature_weights()
    rng = np.random.default_rng(seed)
    out = []
    for t in times:
        x0 = task.generate(n_test, rng)
        obs = task.observe(x0, rng)
        z = _test_states(task, t, n_test, rng, x0)
        learned = learned_guidance(z, t, obs, param, frozen, C)
        coeffs = task.basis.forward(z)
        exact = np.stack([task.basis.inverse(oracle_guidance(task.problem(obs.values[i]), t, coeffs[i]))
                          for i in range(n_test)])
        out.append(_relative_l2(learned, exact, w))
    return out


def guidance_recovery(n=128, n_observed=8, s2=0.01, k_exp=0, norm="L2", width=32, layers=4, modes=16,
                      steps=2500, batch=64, n_train=10_000, times=TIMES, n_test=256, seed=0,
                      fractions=(0.25, 0.5, 1.0)) -> dict:
    """Train the learned guidance with the exact score frozen; distances at checkpoints."""
    task = GaussianTask(n=n, n_observed=n_observed, s2=s2)
    C = task.covariance()
    data = task.generate(n_train, np.random.default_rng(seed))
    frozen = OracleScore(task.problem(), task.basis, "score")
    param = GuidanceParametrisation.initialise(FNO(width=width, layers=layers, modes=modes, cond_channels=1),
                                               k_exp, task.state_gradient, task.cond_features, seed=seed)
    marks = sorted({max(1, int(round(f * steps))) for f in fractions})
    cfg = TrainConfig(batch=batch, steps=steps, lr_start=1e-3, lr_end=1e-5, norm=norm,
                      time_law="log_uniform", weighting="sigma2", seed=seed)
    initial = guidance_distance(param, task, times, n_test, seed + 1)
    start = time.perf_counter()
    res = train_sgt(param, frozen, data, task, C, DiffusionSchedule(), cfg, checkpoint_at=marks)
    runtime = time.perf_counter() - start
    by_step = {}
    for step in marks:
        snap = res.checkpoints[step]
        p = GuidanceParametrisation(snap["u1"], snap["u2"], k_exp, task.state_gradient, task.cond_features)
        d = guidance_distance(p, task, times, n_test, seed + 1)
        by_step[str(step)] = {"distances": dict(zip(map(str, times), d)), "mean": float(np.mean(d))}
    return {"initial_mean": float(np.mean(initial)), "checkpoints": by_step, "final_mean": by_step[str(marks[-1])]["mean"],
            "train_seconds": runtime, "norm": norm, "k_exp": k_exp}
