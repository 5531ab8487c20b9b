"""Shape inpainting in elliptic Fourier descriptor space.

A closed contour is expanded as ``x(p) = A0 + sum_n a_n cos(n p) + b_n sin(n p)``
and ``y(p) = C0 + sum_n c_n cos(n p) + d_n sin(n p)`` for ``p`` in [0, 2 pi).
The state is the flat vector ``(a_1, b_1, c_1, d_1, a_2, ...)`` with the
centroid ``(A0, C0)`` removed.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..funcspace import CoefficientBasis
from . import Observation, Task

N_EFD = 16


class DegenerateContour(ValueError):
    pass


def efd_encode(landmarks, n_modes: int = N_EFD, method: str = "kuhl_giardina") -> np.ndarray:
    """Elliptic Fourier coefficients of a closed polygon, shape (4 * n_modes,).

    Parameters
    ----------
    landmarks : array, shape (K, 2)
        Ordered contour points; the polygon is closed implicitly.
    method : {"kuhl_giardina", "dft"}
        ``kuhl_giardina`` integrates the piecewise-linear contour in
        arc-length parameter.  ``dft`` treats the landmarks as equispaced
        in parameter, which makes decode-then-encode an exact round trip.
    """
    pts = np.asarray(landmarks, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 8:
        raise ValueError("need at least 8 landmarks of shape (K, 2)")
    n = np.arange(1, n_modes + 1)[:, None]
    if method == "dft":
        K = len(pts)
        if n_modes >= K / 2:
            raise ValueError("dft encoding needs more than 2 * n_modes landmarks")
        p = 2 * np.pi * np.arange(K) / K
        cos, sin = np.cos(n * p), np.sin(n * p)
        a, b = 2 / K * cos @ pts[:, 0], 2 / K * sin @ pts[:, 0]
        c, d = 2 / K * cos @ pts[:, 1], 2 / K * sin @ pts[:, 1]
    elif method == "kuhl_giardina":
        dxy = np.diff(np.vstack([pts, pts[:1]]), axis=0)
        dt = np.hypot(dxy[:, 0], dxy[:, 1])
        keep = dt > 0
        dxy, dt = dxy[keep], dt[keep]
        perimeter = dt.sum()
        if perimeter <= 0:
            raise DegenerateContour("contour has zero perimeter")
        t = np.concatenate([[0.0], np.cumsum(dt)])
        phase = 2 * np.pi * n * t / perimeter
        dcos = np.cos(phase[:, 1:]) - np.cos(phase[:, :-1])
        dsin = np.sin(phase[:, 1:]) - np.sin(phase[:, :-1])
        scale = perimeter / (2 * n[:, 0] ** 2 * np.pi**2)
        rate = dxy / dt[:, None]
        a, b = scale * (dcos @ rate[:, 0]), scale * (dsin @ rate[:, 0])
        c, d = scale * (dcos @ rate[:, 1]), scale * (dsin @ rate[:, 1])
    else:
        raise ValueError(f"unknown encoding {method!r}")
    return np.stack([a, b, c, d], axis=1).ravel()


def efd_decode(coeffs, n_points: int = 64, centroid=(0.0, 0.0)) -> np.ndarray:
    """Landmarks ``(n_points, 2)`` of the truncated series at uniform parameters.

    Accepts a batch of coefficient vectors and then returns (B, n_points, 2).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    c = coeffs.reshape(coeffs.shape[:-1] + (-1, 4))
    n = np.arange(1, c.shape[-2] + 1)
    p = 2 * np.pi * np.arange(n_points) / n_points
    cos, sin = np.cos(np.outer(p, n)), np.sin(np.outer(p, n))
    x = cos @ c[..., 0, None] + sin @ c[..., 1, None]
    y = cos @ c[..., 2, None] + sin @ c[..., 3, None]
    return np.concatenate([x, y], axis=-1) + np.asarray(centroid, dtype=float)


def decode_matrix(n_modes: int = N_EFD, n_points: int = 64) -> np.ndarray:
    """Linear map from coefficients to flattened landmarks ``(x_1, y_1, x_2, ...)``."""
    return efd_decode(np.eye(4 * n_modes), n_points).reshape(4 * n_modes, -1).T


def efd_mode_index(n_modes: int = N_EFD) -> np.ndarray:
    """Covariance index per slot: ``(2n, 2n+1, 2n, 2n+1)`` for ``(a_n, b_n, c_n, d_n)``."""
    n = np.arange(1, n_modes + 1)[:, None]
    return np.hstack([2 * n, 2 * n + 1, 2 * n, 2 * n + 1]).ravel().astype(float)


def read_landmarks(path) -> np.ndarray:
    """Read one contour from a CSV file with rows ``x,y`` (an ``x,y`` header is allowed)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "x":
                continue
            rows.append([float(row[0]), float(row[1])])
    pts = np.array(rows)
    if pts.ndim != 2 or len(pts) < 8:
        raise ValueError(f"{path}: need at least 8 landmark rows")
    return pts


def write_landmarks(path, landmarks) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        w.writerows(np.asarray(landmarks).tolist())


def synthetic_contour(rng: np.random.Generator, n_points: int = 64) -> np.ndarray:
    """A noisy superellipse or a three-lobed curve, randomly scaled and rotated."""
    p = 2 * np.pi * np.arange(n_points) / n_points
    if rng.random() < 0.5:
        ax, ay = rng.uniform(0.8, 1.2), rng.uniform(0.5, 0.9)
        e = 2.0 / rng.uniform(2.0, 4.0)
        x = ax * np.sign(np.cos(p)) * np.abs(np.cos(p)) ** e
        y = ay * np.sign(np.sin(p)) * np.abs(np.sin(p)) ** e
    else:
        r = rng.uniform(0.8, 1.1) * (1 + rng.uniform(0.15, 0.3) * np.cos(3 * p + rng.uniform(0, 2 * np.pi)))
        x, y = r * np.cos(p), r * np.sin(p)
    wobble = 1 + sum(rng.normal(0, 0.02) * np.cos(j * p + rng.uniform(0, 2 * np.pi)) for j in range(2, 6))
    rot = rng.uniform(0, 2 * np.pi)
    x, y = wobble * x, wobble * y
    pts = np.stack([np.cos(rot) * x - np.sin(rot) * y, np.sin(rot) * x + np.cos(rot) * y], axis=1)
    return pts + rng.normal(0, 0.5, size=2)


def gen_shape_dataset(n_samples: int, rng: np.random.Generator, n_modes: int = N_EFD,
                      n_points: int = 64) -> np.ndarray:
    """EFD coefficient vectors of synthetic contours, shape (n_samples, 4 * n_modes)."""
    return np.stack([efd_encode(synthetic_contour(rng, n_points), n_modes) for _ in range(n_samples)])


def observe_modes(alpha, m: int) -> np.ndarray:
    """The projector ``P_m`` onto the lowest ``m`` modes (as a truncation)."""
    alpha = np.asarray(alpha, dtype=float)
    if not 1 <= m <= alpha.shape[-1] // 4:
        raise ValueError(f"m must lie in [1, {alpha.shape[-1] // 4}]")
    return alpha[..., : 4 * m]


def shape_forward(alpha, m: int, noise: float = 0.01, rng: np.random.Generator | None = None) -> Observation:
    y = observe_modes(alpha, m)
    if rng is not None:
        y = y + noise * rng.standard_normal(y.shape)
    return Observation("shape", y, noise, m=m)


class ShapeTask(Task):
    """Shape inpainting from the lowest ``m`` EFD modes."""

    name = "shape"

    def __init__(self, m: int = 6, n_modes: int = N_EFD, noise: float = 0.01, nu: float = 1.0,
                 n_points: int = 64, landmark_dir: str | None = None):
        self.grid = None
        self.n_modes, self.m, self.noise, self.nu = n_modes, m, noise, nu
        self.n_points = n_points
        self.landmark_dir = landmark_dir
        self.basis = CoefficientBasis(efd_mode_index(n_modes))
        self._decode = decode_matrix(n_modes, n_points)

    def generate(self, n, rng):
        if self.landmark_dir:
            files = sorted(Path(self.landmark_dir).glob("*.csv"))
            if not files:
                raise FileNotFoundError(f"no landmark CSV files in {self.landmark_dir}")
            picks = rng.choice(len(files), size=n, replace=n > len(files))
            shapes = [efd_encode(read_landmarks(files[i]), self.n_modes) for i in picks]
            return np.stack(shapes)
        return gen_shape_dataset(n, rng, self.n_modes, self.n_points)

    def observe(self, x0, rng, noisy=True):
        return shape_forward(np.atleast_2d(x0), self.m, self.noise, rng if noisy else None)

    def apply_forward(self, f, obs):
        return observe_modes(f, obs.m)

    def apply_adjoint(self, r, obs):
        r = np.asarray(r, dtype=float)
        out = np.zeros(r.shape[:-1] + (4 * self.n_modes,))
        out[..., : r.shape[-1]] = r
        return out

    def cond_features(self, obs):
        return obs.values

    @property
    def cond_shape(self):
        return (4 * self.m,)

    def metric_embedding(self, x):
        """Landmark coordinates at ``n_points`` uniform parameters, rectangle weights."""
        pts = np.asarray(x, dtype=float) @ self._decode.T
        return pts, np.full(pts.shape[-1], 1.0 / self.n_points)
