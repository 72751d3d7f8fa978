"""Shared numerical primitives: spectral norms, finite differences, fixtures.

Everything here operates on flat float64 vectors and dense matrices. The
finite-difference helpers are test oracles and bound machinery, never a
production gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np


class ScalarFunction(Protocol):
    """Twice-differentiable scalar function of a flat parameter vector."""

    dim: int

    def value(self, theta: np.ndarray) -> float: ...

    def grad(self, theta: np.ndarray) -> np.ndarray: ...


@dataclass
class LinearScalarFunction:
    """f(theta) = c . theta + d; Hessian identically zero."""

    c: np.ndarray
    d: float = 0.0

    def __post_init__(self) -> None:
        self.c = np.asarray(self.c, dtype=np.float64)
        self.dim = self.c.size

    def value(self, theta: np.ndarray) -> float:
        return float(self.c @ theta + self.d)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.c.copy()


@dataclass
class QuadraticScalarFunction:
    """f(theta) = 0.5 theta^T A theta + b . theta with constant Hessian A."""

    a: np.ndarray
    b: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.b is None:
            self.b = np.zeros(self.a.shape[0])
        self.b = np.asarray(self.b, dtype=np.float64)
        self.dim = self.a.shape[0]

    def value(self, theta: np.ndarray) -> float:
        return float(0.5 * theta @ self.a @ theta + self.b @ theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.a @ theta + self.b


def fd_gradient(value_fn: Callable[[np.ndarray], float], theta: np.ndarray,
                coords: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function at selected coordinates."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty(len(coords), dtype=np.float64)
    for i, j in enumerate(coords):
        e = np.zeros_like(theta)
        e[j] = h
        out[i] = (value_fn(theta + e) - value_fn(theta - e)) / (2.0 * h)
    return out


def fd_hessian_from_grad(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                         coords: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Dense Hessian block over ``coords`` from central differences of gradients.

    The raw block is checked for Schwarz symmetry (relative Frobenius
    asymmetry below 1e-6, with an absolute floor for near-zero Hessians)
    and the symmetrized matrix is returned.
    """
    theta = np.asarray(theta, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.int64)
    s = len(coords)
    raw = np.empty((s, s), dtype=np.float64)
    for col, j in enumerate(coords):
        e = np.zeros_like(theta)
        e[j] = h
        g_plus = grad_fn(theta + e)
        g_minus = grad_fn(theta - e)
        raw[:, col] = (g_plus[coords] - g_minus[coords]) / (2.0 * h)
    asym = np.linalg.norm(raw - raw.T)
    scale = np.linalg.norm(raw)
    if asym > 1e-6 * scale + 1e-10:
        raise ValueError(
            f"finite-difference Hessian asymmetry {asym:.3e} exceeds tolerance "
            f"(norm {scale:.3e}); step size h={h} is likely unsuitable"
        )
    return 0.5 * (raw + raw.T)


def _dominant_eigenvalue_psd(matrix: np.ndarray, tol: float, max_iter: int) -> float:
    """Rayleigh-quotient power iteration for a (shifted) PSD matrix."""
    n = matrix.shape[0]
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    sigma_prev = 0.0
    stable = 0
    for _ in range(max_iter):
        w = matrix @ v
        sigma = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(sigma - sigma_prev) <= tol * max(abs(sigma), 1e-300):
            stable += 1
            if stable >= 4:
                break
        else:
            stable = 0
        sigma_prev = sigma
    # polish: a few extra steps sharpen the Rayleigh quotient
    for _ in range(8):
        w = matrix @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(v @ (matrix @ v))


def spectral_norm(matrix: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Largest absolute eigenvalue of a symmetric matrix.

    Power iteration applied to the two shifted PSD operators A + cI and
    cI - A (c = Frobenius norm, an upper bound on the spectral radius).
    The shift sidesteps the classic sign-oscillation failure when the
    extreme eigenvalues have nearly equal magnitude and opposite sign.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    fro = float(np.linalg.norm(a))
    if fro == 0.0:
        return 0.0
    if np.linalg.norm(a - a.T) > 1e-6 * fro + 1e-12:
        raise ValueError("matrix is not symmetric")
    if a.shape[0] == 1:
        return abs(float(a[0, 0]))
    shift = fro
    eye = np.eye(a.shape[0])
    lam_max = _dominant_eigenvalue_psd(a + shift * eye, tol, max_iter) - shift
    lam_min = shift - _dominant_eigenvalue_psd(shift * eye - a, tol, max_iter)
    return max(abs(lam_max), abs(lam_min))


def pearson(xs, ys) -> float:
    """Pearson correlation coefficient of two equal-length sequences."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson expects two 1-D sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.linalg.norm(xc) * np.linalg.norm(yc)
    if denom == 0.0:
        raise ValueError("pearson undefined for a constant sequence")
    return float(np.clip(xc @ yc / denom, -1.0, 1.0))


def spearman(xs, ys) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    return pearson(_ranks(x), _ranks(y))


def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = np.arange(1, len(values) + 1, dtype=np.float64)
    # average ranks over tied groups
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = ranks[order[i : j + 1]].mean()
        i = j + 1
    return ranks
