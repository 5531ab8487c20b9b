"""A minimal reverse-mode tape over a closed set of array primitives.

Every primitive returns a :class:`Var`.  A node is recorded only when one of
its inputs requires a gradient, so evaluating a network on constant
parameters (sampling, frozen score models) builds no graph and allocates no
gradient buffers.

Complex intermediate values (Fourier modes) carry gradients in the
convention ``dL/dRe z + 1j * dL/dIm z``.
"""

from __future__ import annotations

import functools
from collections import Counter

import numpy as np

#: gradient buffers allocated per leaf name, for auditing stop-gradient contracts
grad_buffers: Counter = Counter()


class UnrecordedPrimitive(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(as_var(other), -1.0))


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def constant(x) -> Var:
    return Var(np.asarray(x))


def parameter(x, name=None) -> Var:
    return Var(np.asarray(x, dtype=float), requires_grad=True, name=name)


def _node(value, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Var(value, True, None, parents, backward_fn)
    return Var(value)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- primitives -------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def back(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _node(a.value + b.value, (a, b), back)


def mul(a, b) -> Var:
    """Elementwise product with broadcasting (real or complex-by-real)."""
    a, b = as_var(a), as_var(b)

    def back(g):
        ga = g * np.conj(b.value)
        gb = g * np.conj(a.value)
        if not np.iscomplexobj(a.value):
            ga = ga.real
        if not np.iscomplexobj(b.value):
            gb = gb.real
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return _node(a.value * b.value, (a, b), back)


def scale(a, alpha: float) -> Var:
    a = as_var(a)
    return _node(a.value * alpha, (a,), lambda g: (g * alpha,))


def linear(x, W, b=None) -> Var:
    """Affine map over the last axis: ``x @ W + b`` with ``W`` of shape (in, out)."""
    x, W = as_var(x), as_var(W)
    y = x.value @ W.value
    parents = (x, W)
    if b is not None:
        b = as_var(b)
        y = y + b.value
        parents = (x, W, b)

    def back(g):
        gx = g @ W.value.T if x.requires_grad else None
        gW = None
        if W.requires_grad:
            gW = x.value.reshape(-1, x.value.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gW
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _node(y, parents, back)


def silu(x) -> Var:
    x = as_var(x)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.value))

    def back(g):
        return (g * s * (1.0 + x.value * (1.0 - s)),)

    return _node(x.value * s, (x,), back)


def concat(parts, axis=-1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)


def split(x, sizes, axis=-1):
    """Split along ``axis``; returns a list of Vars."""
    x = as_var(x)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index = [slice(None)] * x.value.ndim
        index[axis] = slice(lo, hi)
        index = tuple(index)

        def back(g, index=index):
            full = np.zeros_like(x.value)
            full[index] = g
            return (full,)

        out.append(_node(x.value[index], (x,), back))
    return out


def reshape(x, shape) -> Var:
    x = as_var(x)
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.value.shape),))


@functools.lru_cache(maxsize=32)
def _dft_matrices(n: int, modes: int):
    """Real truncated DFT pieces: analysis (2m, n) and synthesis (n, 2m).

    Analysis rows hold ``cos`` and ``-sin`` so that ``A @ x`` stacks the real and
    imaginary parts of ``rfft(x)[:m]``; synthesis reproduces ``irfft`` of a
    spectrum that is zero beyond the first ``m`` modes.
    """
    j = np.arange(n)
    arg = 2 * np.pi * np.outer(np.arange(modes), j) / n
    analysis = np.concatenate([np.cos(arg), -np.sin(arg)], axis=0)
    c = np.full(modes, 2.0 / n)
    c[0] = 1.0 / n
    synthesis = np.concatenate([np.cos(arg).T * c, -np.sin(arg).T * c], axis=1)
    for a in (analysis, synthesis):
        a.setflags(write=False)
    return analysis, synthesis


def _apply_along(matrix, x, axis):
    """``matrix @ x`` contracting ``x`` along ``axis``."""
    xm = np.moveaxis(x, axis, -2) if x.ndim > 1 else x[:, None]
    y = np.matmul(matrix, xm)
    return np.moveaxis(y, -2, axis) if x.ndim > 1 else y[:, 0]


def rfft_modes(x, modes: int, axis: int = 1) -> Var:
    """First ``modes`` coefficients of the real FFT along ``axis``."""
    x = as_var(x)
    n = x.value.shape[axis]
    if modes > n // 2:
        raise ValueError(f"cannot keep {modes} modes of a length-{n} signal")
    A, _ = _dft_matrices(n, modes)
    parts = _apply_along(A, x.value, axis)
    re, im = np.split(parts, 2, axis=axis)

    def back(G):
        stacked = np.concatenate([G.real, G.imag], axis=axis)
        return (_apply_along(A.T, stacked, axis),)

    return _node(re + 1j * im, (x,), back)


def irfft_modes(X, n: int, axis: int = 1) -> Var:
    """Real signal of length ``n`` from its lowest Fourier modes."""
    X = as_var(X)
    modes = X.value.shape[axis]
    if modes > n // 2:
        raise ValueError(f"cannot synthesise {modes} modes on a length-{n} grid")
    _, S = _dft_matrices(n, modes)
    y = _apply_along(S, np.concatenate([X.value.real, X.value.imag], axis=axis), axis)

    def back(g):
        re, im = np.split(_apply_along(S.T, g, axis), 2, axis=axis)
        return (re + 1j * im,)

    return _node(y, (X,), back)


def spectral_multiply(X, R, mode_scale=None) -> Var:
    """Per-mode channel mixing ``Y[b, m, o] = sum_i X[b, m, i] R[m, i, o]``.

    ``R`` is real with a trailing axis of size 2 holding (real, imag) parts;
    ``mode_scale`` is an optional real factor broadcast against ``Y``.
    """
    X, R = as_var(X), as_var(R)
    Rc = R.value[..., 0] + 1j * R.value[..., 1]
    Y = np.matmul(X.value.transpose(1, 0, 2), Rc).transpose(1, 0, 2)
    parents = (X, R)
    if mode_scale is not None:
        mode_scale = as_var(mode_scale)
        parents = (X, R, mode_scale)
        out = Y * mode_scale.value
    else:
        out = Y

    def back(G):
        gs = None
        if mode_scale is not None:
            if mode_scale.requires_grad:
                gs = _unbroadcast(np.real(np.conj(G) * Y), mode_scale.value.shape)
            G = G * mode_scale.value
        Gt = G.transpose(1, 0, 2)
        gX = None
        if X.requires_grad:
            gX = np.matmul(Gt, np.conj(Rc).transpose(0, 2, 1)).transpose(1, 0, 2)
        gR = None
        if R.requires_grad:
            gRc = np.matmul(np.conj(X.value).transpose(1, 2, 0), Gt)
            gR = np.stack([gRc.real, gRc.imag], axis=-1)
        return (gX, gR) if mode_scale is None else (gX, gR, gs)

    return _node(out, parents, back)


def basis_op(x, matrix_fn, adjoint_fn) -> Var:
    """Generic linear map along the last axis given forward and adjoint callables."""
    x = as_var(x)
    return _node(matrix_fn(x.value), (x,), lambda g: (adjoint_fn(g),))


def weighted_sqnorm(c, weights) -> Var:
    """``sum(weights * c**2)`` over the last axis, keeping leading axes."""
    c = as_var(c)
    w = np.asarray(weights)

    def back(g):
        return (2.0 * g[..., None] * w * c.value,)

    return _node(np.sum(w * c.value**2, axis=-1), (c,), back)


def mean(x) -> Var:
    x = as_var(x)
    size = x.value.size
    return _node(np.asarray(x.value.mean()), (x,), lambda g: (np.full(x.value.shape, g / size),))


def total(x) -> Var:
    x = as_var(x)
    return _node(np.asarray(x.value.sum()), (x,), lambda g: (np.full(x.value.shape, g),))


# -- backward ---------------------------------------------------------------


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, cotangent=None):
    """Accumulate ``d<root, cotangent>/d leaf`` into ``leaf.grad`` for every leaf needing it.

    Returns the list of leaves that received gradients.
    """
    if not root.requires_grad:
        return []
    if cotangent is None:
        if root.value.size != 1:
            raise ValueError("a cotangent is required for non-scalar outputs")
        cotangent = np.ones_like(root.value)
    grads = {id(root): np.asarray(cotangent)}
    leaves = []
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.parents:
                raise UnrecordedPrimitive("interior node without a backward rule")
            if node.grad is None:
                grad_buffers[node.name] += 1
                node.grad = np.zeros_like(node.value)
            node.grad = node.grad + g
            leaves.append(node)
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    return leaves
