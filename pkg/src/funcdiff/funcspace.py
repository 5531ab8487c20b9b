"""Discretised Hilbert-space primitives.

Functions on [0, 1] are stored as grid values with the grid on the last
axis; any leading axes are batch or channel axes.  Each grid layout carries
one orthonormal basis:

* ``periodic`` grids (x_j = j/n) use the real Fourier basis
  ``1, sqrt2 cos(2 pi x), sqrt2 sin(2 pi x), ..., cos(pi n x)``;
* ``endpoint`` grids (x_j = j/(n-1)) use the sine basis ``sqrt2 sin(k pi x)``,
  which matches zero Dirichlet boundary values.

Basis slots are numbered by a mode index ``k >= 1``.  For the Fourier basis
the cosine/sine pair at frequency m occupies k = 2m and k = 2m + 1, so a
covariance ``lambda_k = k**(-nu)`` decays monotonically along the slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.fft

Layout = Literal["periodic", "endpoint"]


def _check_finite(a, what="input"):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite values in {what}")


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [0, 1].

    ``periodic`` grids omit the right endpoint (spacing 1/n); ``endpoint``
    grids include both ends (spacing 1/(n-1)).
    """

    n: int
    layout: Layout = "periodic"

    def __post_init__(self):
        if self.n < 4 or self.n % 2:
            raise ValueError(f"grid size must be even and >= 4, got {self.n}")
        if self.layout not in ("periodic", "endpoint"):
            raise ValueError(f"unknown grid layout {self.layout!r}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.n if self.layout == "periodic" else 1.0 / (self.n - 1)

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n) * self.spacing

    def quadrature_weights(self) -> np.ndarray:
        """Rectangle rule on periodic grids, trapezoid rule on endpoint grids."""
        w = np.full(self.n, self.spacing)
        if self.layout == "endpoint":
            w[0] = w[-1] = 0.5 * self.spacing
        return w

    def inner(self, f, g) -> np.ndarray:
        return np.sum(np.asarray(f) * np.asarray(g) * self.quadrature_weights(), axis=-1)


class Basis:
    """Orthonormal basis of a discretised function space.

    Subclasses provide ``forward`` (grid values -> coefficients) and
    ``inverse`` (coefficients -> grid values), both acting on the last axis.
    """

    tag: str = ""
    grid: Grid1D | None = None
    size: int = 0

    @property
    def mode_index(self) -> np.ndarray:
        return np.arange(1, self.size + 1, dtype=float)

    def forward(self, values):
        raise NotImplementedError

    def inverse(self, coeffs):
        raise NotImplementedError

    def forward_adjoint(self, g):
        """Transpose of ``forward`` with respect to the Euclidean product on grid values."""
        raise NotImplementedError

    def inverse_adjoint(self, g):
        """Transpose of ``inverse`` with respect to the Euclidean product on grid values."""
        raise NotImplementedError

    def project(self, values):
        """Orthogonal projection onto the span of the basis."""
        return self.inverse(self.forward(values))

    def quadrature_weights(self) -> np.ndarray:
        return self.grid.quadrature_weights()

    def function(self, k: int) -> np.ndarray:
        """Grid values of the basis function with mode index ``k`` (1-based)."""
        c = np.zeros(self.size)
        c[k - 1] = 1.0
        return self.inverse(c)


class FourierBasis(Basis):
    """Real orthonormal Fourier basis on a periodic grid, ``size == n``."""

    tag = "fourier"

    def __init__(self, grid: Grid1D):
        if grid.layout != "periodic":
            raise ValueError("the Fourier basis needs a periodic grid")
        self.grid = grid
        self.size = grid.n

    def forward(self, values):
        values = np.asarray(values, dtype=float)
        n = self.grid.n
        F = np.fft.rfft(values, axis=-1) / n
        out = np.empty(values.shape[:-1] + (n,))
        out[..., 0] = F[..., 0].real
        out[..., 1:-1:2] = np.sqrt(2.0) * F[..., 1:-1].real
        out[..., 2:-1:2] = -np.sqrt(2.0) * F[..., 1:-1].imag
        out[..., -1] = F[..., -1].real
        return out

    def inverse(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        n = self.grid.n
        F = np.empty(coeffs.shape[:-1] + (n // 2 + 1,), dtype=complex)
        F[..., 0] = coeffs[..., 0]
        F[..., 1:-1] = (coeffs[..., 1:-1:2] - 1j * coeffs[..., 2:-1:2]) / np.sqrt(2.0)
        F[..., -1] = coeffs[..., -1]
        return np.fft.irfft(F * n, n=n, axis=-1)

    def forward_adjoint(self, g):
        # forward = Phi^T / n with Phi the synthesis matrix, so its transpose is inverse / n
        return self.inverse(g) / self.grid.n

    def inverse_adjoint(self, g):
        return self.forward(g) * self.grid.n


class SineBasis(Basis):
    """Orthonormal sine basis on an endpoint grid.

    Only the ``n - 2`` interior values carry information; the boundary
    values of every basis function vanish.
    """

    tag = "sine"

    def __init__(self, grid: Grid1D):
        if grid.layout != "endpoint":
            raise ValueError("the sine basis needs an endpoint grid")
        self.grid = grid
        self.size = grid.n - 2

    def forward(self, values):
        values = np.asarray(values, dtype=float)
        h = self.grid.spacing
        return scipy.fft.dst(values[..., 1:-1], type=1, axis=-1) * (h / np.sqrt(2.0))

    def inverse(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        out = np.zeros(coeffs.shape[:-1] + (self.grid.n,))
        out[..., 1:-1] = scipy.fft.dst(coeffs, type=1, axis=-1) / np.sqrt(2.0)
        return out

    def forward_adjoint(self, g):
        return self.inverse(g) * self.grid.spacing

    def inverse_adjoint(self, g):
        return self.forward(g) / self.grid.spacing


class CoefficientBasis(Basis):
    """Identity basis for states that already are coefficient vectors.

    ``mode_index`` assigns each slot its covariance index; the elliptic
    Fourier shape state uses this with indices 2n, 2n+1, 2n, 2n+1 for the
    coefficients (a_n, b_n, c_n, d_n).
    """

    tag = "coefficient"

    def __init__(self, mode_index):
        self._mode_index = np.asarray(mode_index, dtype=float)
        self.size = len(self._mode_index)
        self.grid = None

    @property
    def mode_index(self) -> np.ndarray:
        return self._mode_index

    def forward(self, values):
        return np.asarray(values, dtype=float)

    def inverse(self, coeffs):
        return np.asarray(coeffs, dtype=float)

    def forward_adjoint(self, g):
        return np.asarray(g, dtype=float)

    def inverse_adjoint(self, g):
        return np.asarray(g, dtype=float)

    def project(self, values):
        return np.asarray(values, dtype=float)

    def quadrature_weights(self) -> np.ndarray:
        return np.ones(self.size)


def basis_for(grid: Grid1D) -> Basis:
    return FourierBasis(grid) if grid.layout == "periodic" else SineBasis(grid)


@dataclass
class FunctionSample:
    """Grid values of one function (or a batch, on leading axes)."""

    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-1] != self.grid.n:
            raise ValueError(
                f"values have trailing length {self.values.shape[-1]}, grid has {self.grid.n} points"
            )

    @property
    def channels(self) -> int:
        return int(np.prod(self.values.shape[:-1], dtype=int))


@dataclass
class SpectralField:
    coeffs: np.ndarray
    basis: str


@dataclass
class CovarianceOp:
    """Diagonal trace-class operator with eigenvalues ``k**(-nu)``.

    Modes beyond ``k_max`` are dropped: positive powers map them to zero and
    negative powers are only defined after this band-limiting.
    """

    basis: Basis
    nu: float = 1.0
    k_max: int | None = None
    eigenvalues: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.k_max is None:
            self.k_max = self.basis.size
        if not 1 <= self.k_max <= self.basis.size:
            raise ValueError(f"k_max must lie in [1, {self.basis.size}]")
        self.eigenvalues = self.basis.mode_index ** (-float(self.nu))
        self._mask = np.arange(self.basis.size) < self.k_max

    @property
    def trace(self) -> float:
        return float(self.eigenvalues[self._mask].sum())

    def spectral_power(self, k_exp: float) -> np.ndarray:
        """Per-slot multipliers ``lambda**k_exp`` with truncated slots set to 0."""
        return np.where(self._mask, self.eigenvalues ** float(k_exp), 0.0)

    def apply_power(self, values, k_exp: float):
        """Apply ``C**k_exp`` to grid values (array level)."""
        return self.basis.inverse(self.basis.forward(values) * self.spectral_power(k_exp))

    def sample(self, rng: np.random.Generator, size=()):
        """Draw grid values of N(0, C)."""
        size = (size,) if np.isscalar(size) else tuple(size)
        eps = rng.standard_normal(size + (self.basis.size,))
        return self.basis.inverse(eps * self.spectral_power(0.5))


def to_spectral(f: FunctionSample, basis: Basis | None = None) -> SpectralField:
    _check_finite(f.values, "function values")
    basis = basis or basis_for(f.grid)
    return SpectralField(basis.forward(f.values), basis.tag)


def to_physical(s: SpectralField, grid: Grid1D) -> FunctionSample:
    _check_finite(s.coeffs, "spectral coefficients")
    basis = basis_for(grid)
    if s.basis != basis.tag:
        raise ValueError(f"coefficients are in the {s.basis} basis, grid uses {basis.tag}")
    return FunctionSample(grid, basis.inverse(s.coeffs))


def apply_cov_power(C: CovarianceOp, k_exp: float, f: FunctionSample) -> FunctionSample:
    """Spectral multiplication by ``lambda_k**k_exp``."""
    _check_finite(f.values, "function values")
    return FunctionSample(f.grid, C.apply_power(f.values, k_exp))


def sample_gaussian(C: CovarianceOp, grid: Grid1D, rng: np.random.Generator, size=()) -> FunctionSample:
    """Return ``C**0.5 eps`` with white spectral noise ``eps``."""
    if C.basis.grid is not None and C.basis.grid != grid:
        raise ValueError("covariance basis lives on a different grid")
    return FunctionSample(grid, C.sample(rng, size))


def norm(f: FunctionSample, which: str = "L2", C: CovarianceOp | None = None):
    """L2 norm by grid quadrature, or the Cameron-Martin norm ``|C^{-1/2} f|``."""
    _check_finite(f.values, "function values")
    if which == "L2":
        return np.sqrt(np.maximum(f.grid.inner(f.values, f.values), 0.0))
    if which == "cameron_martin":
        if C is None:
            raise ValueError("the Cameron-Martin norm needs a covariance operator")
        c = C.basis.forward(f.values) * C.spectral_power(-0.5)
        return np.sqrt(np.sum(c**2, axis=-1))
    raise ValueError(f"unknown norm {which!r}")
