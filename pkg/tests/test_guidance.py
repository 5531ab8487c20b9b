import numpy as np
import pytest

from funcdiff.diffusion import tweedie
from funcdiff.guidance import (
    GuidanceBlowUp,
    GuidanceParametrisation,
    TweedieGuidanceConfig,
    learned_guidance,
    learned_spec,
    tweedie_guidance,
    tweedie_spec,
)
from funcdiff.nets.models import FNO
from funcdiff.nets.score import ScoreModel
from funcdiff.oracle import OracleScore
from funcdiff.tasks.gaussian import GaussianTask

TASK = GaussianTask(n=32, n_observed=8, s2=0.01)
BASIS, GRID = TASK.basis, TASK.grid
C = TASK.covariance()
W = GRID.quadrature_weights()


def _setup(seed=0):
    rng = np.random.default_rng(seed)
    x0 = TASK.generate(1, rng)
    obs = TASK.observe(x0, rng)
    prob = TASK.problem(obs.values[0])
    return obs, prob


def _states(n, t, rng):
    # draws from the forward marginal of the reference law
    return BASIS.inverse(rng.standard_normal((n, 32)) * np.sqrt(C.eigenvalues))


def _cfg(obs, gamma=1.0, mode="full", gradient="euclidean"):
    return TweedieGuidanceConfig(gamma, lambda f: TASK.phi(f, obs)[1], mode, W, gradient)


def test_config_invariants():
    with pytest.raises(ValueError):
        TweedieGuidanceConfig(0.0, lambda f: f)
    with pytest.raises(ValueError):
        TweedieGuidanceConfig(1.0, lambda f: f, jacobian_mode="diagonal")
    with pytest.raises(ValueError):
        TweedieGuidanceConfig(1.0, lambda f: f, gradient="sobolev")


def test_zero_likelihood_gradient_gives_zero_guidance():
    obs, prob = _setup()
    score = OracleScore(prob, BASIS, "score")
    z = _states(5, 1.0, np.random.default_rng(1))
    cfg = TweedieGuidanceConfig(1.0, lambda f: np.zeros_like(f), "full", W)
    assert np.all(tweedie_guidance(z, 1.0, score, cfg, C) == 0)
    with pytest.raises(ValueError):
        tweedie_guidance(z, 0.0, score, cfg, C)


@pytest.mark.parametrize("mode", ["full", "identity"])
def test_guidance_linear_in_gamma(mode):
    obs, prob = _setup(1)
    score = OracleScore(prob, BASIS, "score")
    z = _states(4, 0.5, np.random.default_rng(2))
    g1 = tweedie_guidance(z, 0.5, score, _cfg(obs, 1.3, mode), C)
    g2 = tweedie_guidance(z, 0.5, score, _cfg(obs, 2.6, mode), C)
    assert np.array_equal(g2, 2 * g1)


def test_full_mode_agrees_in_direction_with_oracle_guidance():
    obs, prob = _setup(2)
    score = OracleScore(prob, BASIS, "score")
    oracle = OracleScore(prob, BASIS, "guidance")
    rng = np.random.default_rng(3)
    agree, total = 0, 0
    for t in np.linspace(0.1, 2.0, 8):
        z = _states(200, t, rng)
        g = tweedie_guidance(z, t, score, _cfg(obs), C)
        ref = oracle(z, t)
        agree += np.sum(np.sum(W * g * ref, axis=1) >= 0)
        total += len(z)
    assert agree >= 0.95 * total


def test_full_mode_jacobian_matches_finite_differences():
    # with an affine score the pulled-back gradient is the gradient of Phi(x_hat(z))
    obs, prob = _setup(3)
    score = OracleScore(prob, BASIS, "score")
    t = 0.7
    z = _states(1, t, np.random.default_rng(4))
    g = tweedie_guidance(z, t, score, _cfg(obs), C)
    # undo -C: g = -C v with v the Euclidean gradient of z -> Phi(x_hat(z))
    v = -C.apply_power(g, -1.0)
    d = np.random.default_rng(5).standard_normal((1, 32))
    h = 1e-6

    def pot(zz):
        return TASK.phi(tweedie(zz, t, score(zz, t)), obs)[0]

    fd = (pot(z + h * d) - pot(z - h * d)) / (2 * h)
    assert float(np.sum(v * d)) == pytest.approx(float(fd[0]), rel=1e-6)


def test_riesz_convention_differs_by_the_grid_spacing():
    obs, prob = _setup(4)
    score = OracleScore(prob, BASIS, "score")
    z = _states(3, 1.0, np.random.default_rng(6))
    e = tweedie_guidance(z, 1.0, score, _cfg(obs), C)
    r = tweedie_guidance(z, 1.0, score, _cfg(obs, gradient="riesz"), C)
    assert np.allclose(e, GRID.spacing * r, rtol=1e-12, atol=1e-14)


def test_identity_mode_uses_gradient_at_tweedie_point():
    obs, prob = _setup(5)
    score = OracleScore(prob, BASIS, "score")
    z, t = _states(2, 0.4, np.random.default_rng(7)), 0.4
    g = tweedie_guidance(z, t, score, _cfg(obs, 2.0, "identity"), C)
    x_hat = tweedie(z, t, score(z, t))
    assert np.allclose(g, -2.0 * C.apply_power(TASK.state_gradient(x_hat, obs), 1.0), rtol=1e-12)


def test_non_finite_gradient_aborts():
    obs, prob = _setup()
    cfg = TweedieGuidanceConfig(1.0, lambda f: np.full_like(f, np.inf), "identity")
    with pytest.raises(GuidanceBlowUp):
        tweedie_guidance(np.zeros((1, 32)), 1.0, OracleScore(prob, BASIS), cfg, C)


def test_tweedie_spec_metadata():
    obs, _ = _setup()
    spec = tweedie_spec(_cfg(obs, 1.3), C, obs)
    assert spec.kind == "tweedie" and spec.gamma == 1.3 and spec.meta["jacobian_mode"] == "full"


# -- learned guidance ----------------------------------------------------------------------


def _param(k, seed=0, grad_phi=None):
    net = FNO(width=8, layers=2, modes=8, cond_channels=1)
    grad_phi = grad_phi or (lambda f, o: TASK.phi(f, o)[1])
    return GuidanceParametrisation.initialise(net, k, grad_phi, TASK.cond_features, seed=seed)


@pytest.mark.parametrize("k", [0, 0.5, 1])
def test_fresh_parametrisation_is_scaled_likelihood_gradient(k):
    obs, prob = _setup(6)
    frozen = OracleScore(prob, BASIS, "score")
    z, t = _states(3, 0.8, np.random.default_rng(8)), 0.8
    obs3 = obs.repeat(3)
    g = learned_guidance(z, t, obs3, _param(k), frozen, C)
    x_hat = tweedie(z, t, frozen(z, t))
    expect = C.apply_power(0.01 * TASK.phi(x_hat, obs3)[1], k)
    assert np.allclose(g, expect, rtol=1e-10, atol=1e-14)


def test_preconditioning_k1_scales_mode_four_by_a_quarter():
    e4 = BASIS.inverse(np.eye(32)[3])[None]
    assert BASIS.mode_index[3] == 4
    p0 = _param(0, grad_phi=lambda f, o: np.broadcast_to(e4, f.shape))
    p1 = _param(1, grad_phi=lambda f, o: np.broadcast_to(e4, f.shape))
    obs, prob = _setup(7)
    z = np.zeros((1, 32))
    frozen = OracleScore(prob, BASIS, "score")
    g0 = learned_guidance(z, 1.0, obs, p0, frozen, C)
    g1 = learned_guidance(z, 1.0, obs, p1, frozen, C)
    assert np.allclose(g1, 0.25 * g0, rtol=1e-12, atol=1e-15)
    assert np.allclose(g0, 0.01 * e4, rtol=1e-12)


def test_learned_spec_and_shape_errors():
    obs, prob = _setup()
    param = _param(0.5)
    spec = learned_spec(param, C, obs)
    assert spec.kind == "learned" and spec.k_exp == 0.5
    with pytest.raises(ValueError):
        GuidanceParametrisation(param.u1, param.u2, 2, param.grad_phi, param.cond_fn)
    with pytest.raises(ValueError):
        learned_guidance(np.zeros((2, 31)), 1.0, obs.repeat(2), param, lambda z, t: -z, C)


def test_learned_guidance_with_network_score():
    # the score network parametrisation feeds the Tweedie point: a zero net gives x_hat = e^{-t/2} z
    obs, _ = _setup(8)
    net = FNO(width=4, layers=1, modes=4)
    frozen = ScoreModel(net.init(0), net=net)
    z, t = _states(2, 0.3, np.random.default_rng(9)), 0.3
    g = learned_guidance(z, t, obs.repeat(2), _param(0), frozen, C)
    expect = 0.01 * TASK.phi(np.exp(-t / 2) * z, obs.repeat(2))[1]
    assert np.allclose(g, expect, rtol=1e-10)


def test_oracle_guidance_norm_decays_toward_terminal_time():
    rng = np.random.default_rng(10)
    norms = {}
    for t in (1e-3, 10.0):
        vals = []
        for _ in range(20):
            obs, prob = _setup(int(rng.integers(1 << 30)))
            z = _states(50, t, rng)
            g = OracleScore(prob, BASIS, "guidance")(z, t)
            vals.append(np.sqrt(np.sum(W * g**2, axis=1)).mean())
        norms[t] = np.mean(vals)
    assert norms[10.0] <= norms[1e-3]
