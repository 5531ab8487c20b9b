import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from funcdiff.diffusion import forward_marginal, tweedie
from funcdiff.funcspace import CovarianceOp, FourierBasis, Grid1D
from funcdiff.oracle import (
    GaussianLinearProblem,
    OracleScore,
    alpha_t,
    beta_t,
    conditional_mean,
    conditional_mean_given_y,
    decomposition_rhs,
    identity_suite,
    likelihood_gradient,
    oracle_conditional_score,
    oracle_guidance,
    oracle_posterior,
    oracle_score,
    oracle_transition,
    regression_check,
    residual_floor,
    stein_guidance,
)

K = np.arange(1, 33, dtype=float)
LAM = 1 / K


def problem(seed=0, n_obs=8, s2=0.01):
    rng = np.random.default_rng(seed)
    c = LAM * rng.uniform(0.5, 1.5, 32)
    a = np.where(K <= n_obs, rng.uniform(0.5, 2.0, 32), 0.0)
    return GaussianLinearProblem(c, LAM, a, s2, rng.standard_normal(32))


def scalar(c=1.0, lam=1.0, a=1.0, s2=1.0, y=0.0):
    return GaussianLinearProblem([c], [lam], a, s2, [y])


def test_problem_invariants():
    with pytest.raises(ValueError):
        scalar(c=0.0)
    with pytest.raises(ValueError):
        scalar(s2=-1.0)
    with pytest.raises(ValueError):
        GaussianLinearProblem(np.ones(3), np.ones(2), 1.0, 1.0, np.ones(3))


def test_transition_examples():
    prob = problem()
    Ct, Kt, Pt = oracle_transition(prob, 0.0)
    assert np.allclose(Ct, prob.c_prior, rtol=0, atol=1e-15) and np.all(Kt == 1) and np.max(np.abs(Pt)) < 1e-15
    Ct, Kt, Pt = oracle_transition(scalar(), np.log(2))
    assert Ct[0] == pytest.approx(1.0, abs=1e-15)
    assert Kt[0] == pytest.approx(1 / np.sqrt(2), abs=1e-15)
    assert Pt[0] == pytest.approx(0.5, abs=1e-15)
    _, Kt, Pt = oracle_transition(prob, 60.0)
    assert np.max(Kt) < 1e-12 and np.allclose(Pt, prob.c_prior, rtol=1e-12)
    with pytest.raises(ValueError):
        oracle_transition(prob, -1.0)


def test_transition_monte_carlo_regression():
    # c = lam = 1, t = ln 2: regress x0 on x_t, slope K_t = 1/sqrt2 and residual variance P_t = 1/2
    rng = np.random.default_rng(1)
    n = 400_000
    x0 = rng.standard_normal(n)
    xt = np.sqrt(0.5) * x0 + np.sqrt(0.5) * rng.standard_normal(n)
    slope = (xt @ x0) / (xt @ xt)
    resid = x0 - slope * xt
    se = np.sqrt(resid.var() / (xt @ xt))
    assert abs(slope - 1 / np.sqrt(2)) < 3 * se
    assert abs(resid.var() - 0.5) < 0.01


def test_score_examples():
    stat = GaussianLinearProblem(LAM, LAM, 0.0, 1.0, np.zeros(32))
    x = np.random.default_rng(2).standard_normal((3, 32))
    for t in (0.01, 0.5, 3.0):
        assert np.max(np.abs(oracle_score(stat, t, x) + x)) < 1e-12
    assert np.all(oracle_score(problem(), 0.5, np.zeros(32)) == 0)
    with pytest.raises(ValueError):
        oracle_score(stat, 0.0, x)
    with pytest.raises(ValueError):
        oracle_conditional_score(stat, -1.0, x)


def test_stationary_score_monte_carlo():
    # the score is E[-sigma^-2 (x_t - e^{-t/2} x0) | x_t]; regress that target on x_t for one mode
    rng = np.random.default_rng(3)
    t, lam, n = 0.4, 0.5, 400_000
    x0 = np.sqrt(lam) * rng.standard_normal(n)
    e = np.exp(-t)
    xt = np.sqrt(e) * x0 + np.sqrt((1 - e) * lam) * rng.standard_normal(n)
    target = -(xt - np.sqrt(e) * x0) / (1 - e)
    slope = (xt @ target) / (xt @ xt)
    se = np.sqrt((target - slope * xt).var() / (xt @ xt))
    assert abs(slope + 1) < 3 * se


def test_posterior_examples():
    m, v = oracle_posterior(scalar(y=2.0))
    assert m[0] == pytest.approx(1.0, abs=1e-15) and v[0] == pytest.approx(0.5, abs=1e-15)
    # 1-D numerical integration of prior x likelihood
    dens = lambda x: np.exp(-0.5 * x**2 - 0.5 * (2.0 - x) ** 2)
    Z = quad(dens, -np.inf, np.inf)[0]
    mean = quad(lambda x: x * dens(x), -np.inf, np.inf)[0] / Z
    var = quad(lambda x: (x - mean) ** 2 * dens(x), -np.inf, np.inf)[0] / Z
    assert abs(mean - 1) < 1e-9 and abs(var - 0.5) < 1e-9
    prob = problem()
    m, v = oracle_posterior(prob)
    off = prob.a == 0
    assert np.all(m[off] == 0) and np.allclose(v[off], prob.c_prior[off], rtol=1e-15, atol=0)
    sharp = GaussianLinearProblem(prob.c_prior, LAM, prob.a, 1e-14, prob.y)
    m, v = oracle_posterior(sharp)
    assert np.allclose(m[~off], prob.y[~off] / prob.a[~off], rtol=1e-10) and np.max(v[~off]) < 1e-13


def test_uninformative_observation():
    prob = GaussianLinearProblem(problem().c_prior, LAM, 0.0, 0.01, np.ones(32))
    x = np.random.default_rng(4).standard_normal((2, 32))
    assert np.max(np.abs(oracle_conditional_score(prob, 0.3, x) - oracle_score(prob, 0.3, x))) < 1e-14
    assert np.max(np.abs(oracle_guidance(prob, 0.3, x))) < 1e-14


@pytest.mark.parametrize("t", [0.01, 0.1, 0.5, 1.0, 2.0, 5.0])
def test_decomposition_and_stein_identities(t):
    prob = problem(5)
    x = np.random.default_rng(6).standard_normal((4, 32)) * np.sqrt(LAM)
    g = oracle_guidance(prob, t, x)
    assert np.max(np.abs(g - decomposition_rhs(prob, t, x))) < 1e-12
    assert np.max(np.abs(g - stein_guidance(prob, t, x))) < 1e-12 * max(1.0, np.max(np.abs(g)))


def test_stein_form_uses_beta_t_p_t():
    # C K_t^* = lam K_t = beta_t P_t per mode
    prob = problem(7)
    for t in (0.05, 0.7, 4.0):
        _, Kt, Pt = oracle_transition(prob, t)
        assert np.max(np.abs(LAM * Kt - beta_t(t) * Pt)) < 1e-12


def test_guidance_affine_in_y():
    prob = problem(8)
    x = np.random.default_rng(9).standard_normal(32)
    g0 = oracle_guidance(prob.with_observation(np.zeros(32)), 0.6, x)
    g1 = oracle_guidance(prob.with_observation(prob.y), 0.6, x)
    g2 = oracle_guidance(prob.with_observation(2 * prob.y), 0.6, x)
    assert np.max(np.abs((g2 - g0) - 2 * (g1 - g0))) < 1e-12


def test_likelihood_gradient():
    prob = problem(10)
    f = np.random.default_rng(11).standard_normal(32)
    phi = lambda f: np.sum((prob.a * f - prob.y) ** 2 * (prob.a != 0) / (2 * prob.s2))
    h = 1e-6
    fd = np.array([(phi(f + h * e) - phi(f - h * e)) / (2 * h) for e in np.eye(32)])
    assert np.max(np.abs(fd - likelihood_gradient(prob, f))) < 1e-4


def test_conditional_regression_monte_carlo():
    prob = problem(12)
    coef, exact, se = regression_check(prob, 0.5, 0, 1_000_000, np.random.default_rng(13))
    assert np.all(np.abs(coef - exact) <= 3 * se)


def test_tweedie_exactness():
    prob = problem(14)
    x = np.random.default_rng(15).standard_normal((5, 32))
    for t in (0.01, 0.5, 5.0):
        out = tweedie(x, t, oracle_score(prob, t, x))
        assert np.max(np.abs(out - conditional_mean(prob, t, x))) < 1e-14 * max(1.0, np.exp(t / 2) / (1 - np.exp(-t))) * 10


def test_forward_marginal_covariance_matches_Ct():
    g = Grid1D(32)
    C = CovarianceOp(FourierBasis(g), 1.0)
    prob = problem(16)
    rng = np.random.default_rng(17)
    M, t = 100_000, 0.8
    x0 = C.basis.inverse(rng.standard_normal((M, 32)) * np.sqrt(prob.c_prior))
    xt, _, _ = forward_marginal(x0, t, C, rng)
    var = C.basis.forward(xt).var(axis=0)
    Ct, _, _ = oracle_transition(prob, t)
    assert np.all(np.abs(var - Ct) <= 3 * Ct * np.sqrt(2 / M))


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-3, 10.0), st.floats(-1e3, 1e3))
def test_guidance_finite_off_zero(t, scale):
    prob = problem(18)
    x = scale * np.linspace(-1, 1, 32)
    assert np.all(np.isfinite(oracle_guidance(prob, t, x)))


def test_oracle_score_wrapper_and_vjp():
    g = Grid1D(32)
    B = FourierBasis(g)
    prob = problem(19)
    z = np.random.default_rng(20).standard_normal((2, 32))
    for which in ("score", "conditional", "guidance"):
        f = OracleScore(prob, B, which)
        s, pull = f.vjp(z, 0.4)
        v, d = np.random.default_rng(21).standard_normal((2, 2, 32))
        h = 1e-6
        fd = np.sum(v * (f(z + h * d, 0.4) - f(z - h * d, 0.4))) / (2 * h)
        assert abs(fd - np.sum(pull(v) * d)) < 1e-6 * max(1.0, abs(fd))
    with pytest.raises(ValueError):
        OracleScore(prob, FourierBasis(Grid1D(16)))
    with pytest.raises(ValueError):
        OracleScore(prob, B, "flux")


def test_residual_floor_matches_monte_carlo():
    # E|s*(x_t) + sigma^-1 C^{1/2} eps|^2 with the oracle score, per-mode coordinates
    prob = problem(22)
    rng = np.random.default_rng(23)
    t, n = 0.3, 200_000
    e = np.exp(-t)
    x0 = rng.standard_normal((n, 32)) * np.sqrt(prob.c_prior)
    eps = rng.standard_normal((n, 32))
    xt = np.sqrt(e) * x0 + np.sqrt((1 - e) * LAM) * eps
    r = oracle_score(prob, t, xt) + np.sqrt(LAM) * eps / np.sqrt(1 - e)
    assert np.mean(np.sum(r**2, -1)) == pytest.approx(residual_floor(prob.c_prior, LAM, t), rel=0.01)
    cm = np.mean(np.sum(r**2 / LAM, -1))
    assert cm == pytest.approx(residual_floor(prob.c_prior, LAM, t, "cameron_martin"), rel=0.01)


def test_alpha_beta():
    t = 0.9
    assert alpha_t(t) == pytest.approx(1 / (1 - np.exp(-t)))
    assert beta_t(t) == pytest.approx(np.exp(-t / 2) / (1 - np.exp(-t)))


def test_conditional_mean_given_y_limits():
    prob = problem(24)
    x = np.random.default_rng(25).standard_normal(32)
    m, _ = oracle_posterior(prob)
    assert np.allclose(conditional_mean_given_y(prob, 80.0, x), m, atol=1e-12)


def test_identity_suite_default_and_negative_control():
    report = identity_suite(mc_draws=200_000)
    assert all(r["passed"] for r in report), report
    keys = {r["key"] for r in report}
    assert {"decomposition", "tweedie", "transition", "stein", "monte_carlo"} == keys
    bad = identity_suite(perturb_gain=1e-3)
    failed = {r["key"] for r in bad if not r["passed"]}
    assert {"decomposition", "tweedie", "stein"} <= failed
