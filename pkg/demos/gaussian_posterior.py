"""Posterior sampling on the Gaussian task, compared with the closed form.

Runs the reverse SDE three ways for one observation:

* with the exact conditional score (amortised-style sampling),
* with the exact prior score plus Tweedie (FunDPS-style) guidance,
* with the exact prior score plus the exact guidance term,

and prints per-mode posterior means and variances against the oracle.

    python3 demos/gaussian_posterior.py
"""

import numpy as np

from funcdiff.diffusion import DiffusionSchedule, GuidanceSpec, sample_array
from funcdiff.guidance import TweedieGuidanceConfig, tweedie_spec
from funcdiff.oracle import OracleScore, oracle_posterior
from funcdiff.tasks.gaussian import GaussianTask

task = GaussianTask(n=32, n_observed=4, s2=0.01)
basis, C = task.basis, task.covariance()
rng = np.random.default_rng(0)
x0 = task.generate(1, rng)
obs = task.observe(x0, rng)
prob = task.problem(obs.values[0])
mean, var = oracle_posterior(prob)

schedule = DiffusionSchedule(t_min=1e-4, n_steps=500)
prior_score = OracleScore(prob, basis, "score")
exact_guidance = OracleScore(prob, basis, "guidance")


def exact_term(z, t, score_fn):
    return score_fn(z, t), exact_guidance(z, t)


runs = {
    "conditional score": (GuidanceSpec("amortized", obs), OracleScore(prob, basis, "conditional")),
    "exact guidance": (GuidanceSpec("learned", obs, exact_term, k_exp=1), prior_score),
    "Tweedie guidance": (tweedie_spec(TweedieGuidanceConfig(1.0, lambda f: task.phi(f, obs)[1], "full",
                                                             task.quadrature_weights()), C, obs), prior_score),
}

print(f"{'mode':>4} {'oracle mean':>12} {'oracle var':>11}   " + "   ".join(f"{k:>24}" for k in runs))
coeffs = {}
for name, (spec, score) in runs.items():
    coeffs[name] = basis.forward(sample_array(spec, schedule, score, C, 4000, seed=1, chunk=1000))
for k in range(6):
    cells = "   ".join(f"{c[:, k].mean():>11.4f} {c[:, k].var():>12.2e}" for c in coeffs.values())
    print(f"{k:>4} {mean[k]:>12.4f} {var[k]:>11.2e}   {cells}")
print("observed modes: 0-3.  Tweedie guidance at gamma=1 pulls too weakly there: the Euclidean gradient\n"
      "on a 32-point grid carries the grid spacing, which is why gamma is tuned per task.")
