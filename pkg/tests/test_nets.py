import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funcdiff.funcspace import FourierBasis, Grid1D
from funcdiff.io import FormatError, read_manifest
from funcdiff.nets import tape as T
from funcdiff.nets.models import FNO, CoefficientMLP, TimeScalar, build_network, time_features
from funcdiff.nets.params import ModelParams, load_checkpoint, save_checkpoint
from funcdiff.nets.score import ScoreModel


def _randomise(params, seed=0, scale=0.3):
    # give zero-initialised heads nonzero values so every path is exercised
    rng = np.random.default_rng(seed)
    p = params.copy()
    for k, v in p.tensors.items():
        if not np.any(v):
            p.tensors[k] = scale * rng.standard_normal(v.shape)
    return p


def _loss(net, params, x, t, cond, w):
    return float(np.sum(w * net(params, x, t, cond)))


def _grad(net, params, x, t, cond, w):
    pv = params.as_vars(True)
    out = net.forward(pv, x, t, cond)
    T.backward(T.total(T.mul(out, w)))
    return {k: v.grad for k, v in pv.items()}


def _fd(net, params, name, idx, x, t, cond, w, h=1e-5):
    plus, minus = params.copy(), params.copy()
    plus.tensors[name][idx] += h
    minus.tensors[name][idx] -= h
    return (_loss(net, plus, x, t, cond, w) - _loss(net, minus, x, t, cond, w)) / (2 * h)


# -- primitive adjoints -------------------------------------------------------


def _vjp(fn, x, w):
    xv = T.parameter(x)
    out = fn(xv)
    T.backward(out, w)
    return out.value, xv.grad


def _inner(a, b):
    return float(np.real(np.sum(np.conj(a) * b)))


LINEAR_PRIMITIVES = {
    "scale": (lambda x: T.scale(x, -1.7), (4, 6)),
    "linear_x": (lambda x: T.linear(x, np.random.default_rng(9).standard_normal((6, 5))), (4, 6)),
    "linear_W": (lambda W: T.linear(np.random.default_rng(9).standard_normal((4, 6)), W), (6, 5)),
    "mul_const": (lambda x: T.mul(x, np.random.default_rng(9).standard_normal((1, 6))), (4, 6)),
    "concat": (lambda x: T.concat([x, T.scale(x, 2.0)], axis=-1), (4, 6)),
    "split": (lambda x: T.concat(T.split(x, [2, 4])[::-1], axis=-1), (4, 6)),
    "reshape": (lambda x: T.reshape(x, (6, 4)), (4, 6)),
    "rfft_modes": (lambda x: T.rfft_modes(x, 5, axis=1), (3, 16, 2)),
    "irfft_modes": (lambda x: T.irfft_modes(T.mul(x, 1.0 + 0.5j), 16, axis=1), (3, 5, 2)),
    "spectral_multiply_X": (
        lambda x: T.spectral_multiply(T.mul(x, 1.0 - 2.0j), np.random.default_rng(9).standard_normal((5, 2, 3, 2)),
                                      np.random.default_rng(8).standard_normal((3, 1, 3))),
        (3, 5, 2)),
    "spectral_multiply_R": (
        lambda R: T.spectral_multiply(np.random.default_rng(9).standard_normal((3, 5, 2)) * (1 + 1j), R),
        (5, 2, 3, 2)),
    "basis_op": (lambda x: T.basis_op(x, FourierBasis(Grid1D(16)).forward, FourierBasis(Grid1D(16)).forward_adjoint),
                 (3, 16)),
    "add_broadcast": (lambda x: T.add(x, T.scale(T.reshape(T.total(x), (1, 1)), 0.5)), (4, 6)),
    "mean": (lambda x: T.mean(x), (4, 6)),
}


@pytest.mark.parametrize("name", sorted(LINEAR_PRIMITIVES))
def test_primitive_adjoint_dot_product(name):
    fn, shape = LINEAR_PRIMITIVES[name]
    rng = np.random.default_rng(1)
    u = rng.standard_normal(shape)
    Ju = fn(T.constant(u)).value
    w = rng.standard_normal(Ju.shape) + (1j * rng.standard_normal(Ju.shape) if np.iscomplexobj(Ju) else 0)
    _, JTw = _vjp(fn, u, w)
    assert abs(_inner(w, Ju) - _inner(JTw, u)) < 1e-10 * max(1.0, abs(_inner(w, Ju)))


def test_nonlinear_primitive_derivatives():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    _, g = _vjp(T.silu, x, w)
    s = 1 / (1 + np.exp(-x))
    assert np.max(np.abs(g - w * (s + x * s * (1 - s)))) < 1e-14
    weights, cot = rng.uniform(0.5, 2, 5), rng.standard_normal(3)
    _, g = _vjp(lambda v: T.weighted_sqnorm(v, weights), x, cot)
    assert np.max(np.abs(g - 2 * cot[:, None] * weights * x)) < 1e-14
    # product rule on a product of two variables
    a, b = T.parameter(rng.standard_normal(4)), T.parameter(rng.standard_normal(4))
    T.backward(T.total(T.mul(a, b)))
    assert np.allclose(a.grad, b.value) and np.allclose(b.grad, a.value)


def test_rfft_modes_matches_numpy():
    x = np.random.default_rng(3).standard_normal((2, 16, 3))
    out = T.rfft_modes(x, 6, axis=1).value
    assert np.max(np.abs(out - np.fft.rfft(x, axis=1)[:, :6])) < 1e-12
    back = T.irfft_modes(np.fft.rfft(x, axis=1)[:, :6], 16, axis=1).value
    ref = np.fft.irfft(np.concatenate([np.fft.rfft(x, axis=1)[:, :6], np.zeros((2, 3, 3))], axis=1), 16, axis=1)
    assert np.max(np.abs(back - ref)) < 1e-12


def test_backward_contracts():
    x = T.parameter(np.ones(3))
    out = T.scale(x, 0.0)
    T.backward(T.total(T.mul(out, out)))
    assert np.all(x.grad == 0)
    with pytest.raises(ValueError):
        T.backward(T.scale(T.parameter(np.ones(3)), 2.0))
    orphan = T.Var(np.ones(2), requires_grad=True, parents=(T.parameter(np.ones(2)),))
    with pytest.raises(T.UnrecordedPrimitive):
        T.backward(T.total(orphan))
    # constants build no graph
    assert T.backward(T.total(T.scale(T.constant(np.ones(2)), 3.0))) == []


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3))
def test_gradient_scales_linearly(alpha):
    net = CoefficientMLP(dim=8, hidden=16, blocks=2)
    p = _randomise(net.init(0))
    x = np.random.default_rng(4).standard_normal((3, 8))
    w = np.random.default_rng(5).standard_normal((3, 8))
    g1 = _grad(net, p, x, 0.3, None, w)
    g2 = _grad(net, p, x, 0.3, None, alpha * w)
    for k in g1:
        assert np.allclose(g2[k], alpha * g1[k], rtol=1e-12, atol=1e-14)


# -- FNO ---------------------------------------------------------------------


def small_fno(cond_channels=0, **kw):
    return FNO(width=8, layers=2, modes=4, cond_channels=cond_channels, hidden_time=8, **kw)


def test_fno_zero_init_output_and_shapes():
    net = small_fno()
    p = net.init(0)
    x = np.random.default_rng(0).standard_normal((3, 16))
    out = net(p, x, np.array([0.1, 1.0, 5.0]))
    assert out.shape == (3, 16) and np.all(out == 0)
    assert p.n_params == sum(v.size for v in p.tensors.values())
    with pytest.raises(ValueError):
        net(p, x, 0.5, cond=np.zeros((3, 1, 16)))
    cnet = small_fno(cond_channels=2)
    with pytest.raises(ValueError):
        cnet(cnet.init(0), x, 0.5, cond=np.zeros((3, 1, 16)))
    with pytest.raises(ValueError):
        cnet(cnet.init(0), x, 0.5)


def test_fno_modulation_starts_at_identity():
    net = small_fno()
    p = net.init(0)
    temb = time_features(np.geomspace(1e-3, 10, 7))
    assert np.all(np.isfinite(temb)) and temb.shape == (7, 64)
    for l in range(2):
        assert np.all(p.tensors[f"layer{l}.time2.W"] == 0) and np.all(p.tensors[f"layer{l}.time2.b"] == 0)


def test_fno_layers_off_gives_zero():
    # W_l = 0, R_l = 0, beta_l = 0: every layer outputs silu(0) = 0, so only the projection biases survive
    net = small_fno()
    p = _randomise(net.init(0))
    for l in range(2):
        p.tensors[f"layer{l}.W"][:] = 0
        p.tensors[f"layer{l}.R"][:] = 0
        p.tensors[f"layer{l}.time2.W"][:] = 0
        p.tensors[f"layer{l}.time2.b"][:] = 0
    p.tensors["proj1.b"][:] = 0
    p.tensors["proj2.b"][:] = 0
    x = np.random.default_rng(1).standard_normal((2, 16))
    assert np.max(np.abs(net(p, x, 0.4))) == 0


def test_fno_without_spectral_path_is_pointwise():
    net = small_fno()
    p = _randomise(net.init(0))
    for l in range(2):
        p.tensors[f"layer{l}.R"][:] = 0
    x = np.random.default_rng(2).standard_normal((1, 16))
    y = x.copy()
    y[0, 5] += 1.0
    diff = net(p, y, 0.7) - net(p, x, 0.7)
    assert diff[0, 5] != 0
    assert np.all(np.delete(diff[0], 5) == 0)


def test_fno_deterministic():
    net = small_fno(cond_channels=1)
    p = _randomise(net.init(3))
    x = np.random.default_rng(3).standard_normal((2, 16))
    cond = np.random.default_rng(4).standard_normal((2, 1, 16))
    assert np.array_equal(net(p, x, 0.2, cond), net(p, x, 0.2, cond))


def test_fno_resolution_invariance():
    net = FNO(width=16, layers=2, modes=8, hidden_time=16, zero_init_output=False)
    p = _randomise(net.init(0), scale=0.1)
    c = np.random.default_rng(1).standard_normal(9) * 0.5
    outs = []
    for n in (128, 256):
        b = FourierBasis(Grid1D(n))
        cc = np.zeros(n)
        cc[:9] = c
        outs.append(b.forward(net(p, b.inverse(cc)[None], 0.5))[0][:17])
    assert np.linalg.norm(outs[0] - outs[1]) / np.linalg.norm(outs[0]) < 1e-6


def test_fno_spectral_weight_gradient_per_layer():
    net = small_fno()
    p = _randomise(net.init(1))
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 16)), rng.standard_normal((2, 16))
    g = _grad(net, p, x, 0.3, None, w)
    for l in range(2):
        name = f"layer{l}.R"
        for _ in range(4):
            idx = tuple(rng.integers(0, s) for s in p.tensors[name].shape)
            fd = _fd(net, p, name, idx, x, 0.3, None, w)
            assert abs(fd - g[name][idx]) <= 1e-4 * max(abs(fd), 1e-8)


@pytest.mark.parametrize("kind", ["fno", "fno_cond", "mlp", "mlp_cond"])
def test_full_model_gradient_check(kind):
    rng = np.random.default_rng(6)
    if kind.startswith("fno"):
        net = small_fno(cond_channels=1 if kind == "fno_cond" else 0)
        x = rng.standard_normal((2, 16))
        cond = rng.standard_normal((2, 1, 16)) if kind == "fno_cond" else None
    else:
        net = CoefficientMLP(dim=8, hidden=16, blocks=2, cond_dim=4 if kind == "mlp_cond" else 0)
        x = rng.standard_normal((2, 8))
        cond = rng.standard_normal((2, 4)) if kind == "mlp_cond" else None
    p = _randomise(net.init(2))
    t = np.array([0.05, 2.0])
    w = rng.standard_normal(x.shape)
    g = _grad(net, p, x, t, cond, w)
    names = sorted(p.tensors)
    for _ in range(10):
        name = names[rng.integers(len(names))]
        idx = tuple(rng.integers(0, s) for s in p.tensors[name].shape)
        fd = _fd(net, p, name, idx, x, t, cond, w)
        assert abs(fd - g[name][idx]) <= 1e-3 * max(abs(fd), 1e-7), name


def test_input_vjp_matches_finite_differences():
    net = small_fno()
    p = _randomise(net.init(4))
    rng = np.random.default_rng(7)
    x, v, d = rng.standard_normal((2, 16)), rng.standard_normal((2, 16)), rng.standard_normal((2, 16))
    _, pull = net.vjp(p, x, 0.5)
    h = 1e-6
    fd = np.sum(v * (net(p, x + h * d, 0.5) - net(p, x - h * d, 0.5))) / (2 * h)
    assert abs(fd - np.sum(pull(v) * d)) < 1e-6 * max(1.0, abs(fd))


# -- MLP and time scalar -------------------------------------------------------


def test_mlp_examples():
    net = CoefficientMLP(dim=64, hidden=32, blocks=3)
    p = net.init(0)
    x = np.random.default_rng(0).standard_normal((4, 64))
    assert np.all(net(p, x, 0.5) == 0)
    q = _randomise(p)
    for k in q.tensors:
        if k != "out.W":
            q.tensors[k][:] = 0
    assert np.all(net(q, x, 0.5) == 0)
    with pytest.raises(ValueError):
        net(p, np.zeros((4, 60)), 0.5)


def test_time_scalar_starts_constant():
    ts = TimeScalar(init=0.01)
    p = ts.init(0)
    assert np.allclose(ts(p, np.array([0.01, 1.0, 9.0])), 0.01)


def test_build_network_round_trip():
    for net in (small_fno(), CoefficientMLP(dim=8, hidden=8, blocks=1), TimeScalar()):
        assert build_network(net.arch).arch == net.arch
    with pytest.raises(ValueError):
        build_network({"kind": "transformer"})


def test_params_reject_non_finite():
    with pytest.raises(ValueError):
        ModelParams({"kind": "mlp"}, {"w": np.array([np.inf])})


def test_checkpoint_round_trip(tmp_path):
    net = small_fno()
    p = _randomise(net.init(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"score": p, "u2": TimeScalar().init(1)}, {"mode": "test"})
    models, meta = load_checkpoint(path)
    assert meta == {"mode": "test"} and set(models) == {"score", "u2"}
    for k, v in p.tensors.items():
        assert np.array_equal(models["score"].tensors[k], v)
    man = read_manifest(path)
    assert man["format"] == "funcdiff-ckpt-v1"
    entry = man["arrays"][0]
    assert {"name", "shape", "offset", "nbytes"} <= set(entry)
    x = np.random.default_rng(0).standard_normal((2, 16))
    assert np.array_equal(ScoreModel(models["score"])(x, 0.5), ScoreModel(p)(x, 0.5))


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_fno().init(0))
    raw = path.read_bytes().replace(b"funcdiff-ckpt-v1", b"funcdiff-ckpt-v9")
    path.write_bytes(raw)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_score_model_parametrisation():
    # s = -x + e^{-t/2} o / sigma_t; a zero network gives the reference-law score -x
    net = small_fno()
    p = net.init(0)
    x = np.random.default_rng(8).standard_normal((2, 16))
    assert np.array_equal(ScoreModel(p)(x, 0.3), -x)
    q = _randomise(p)
    t = 0.3
    o = net(q, x, t)
    s = ScoreModel(q)(x, t)
    assert np.max(np.abs(s - (-x + np.exp(-t / 2) * o / np.sqrt(1 - np.exp(-t))))) < 1e-12
    v = np.random.default_rng(9).standard_normal((2, 16))
    s2, pull = ScoreModel(q).vjp(x, t)
    _, pn = net.vjp(q, x, t)
    assert np.array_equal(s2, s)
    assert np.max(np.abs(pull(v) - (-v + np.exp(-t / 2) / np.sqrt(1 - np.exp(-t)) * pn(v)))) < 1e-12
