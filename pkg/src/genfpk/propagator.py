"""State-transition matrices of time-varying linear systems.

Four routes to Phi[A](t; s), the solution of Y' = A(t) Y, Y(s) = I:
truncated iterated-integral (Picard) series, truncated exponential-series
with nested commutators, closed-form/general matrix exponentials, and a
classical RK4 reference integrator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm as _scipy_expm

__all__ = [
    "MatrixTrajectory",
    "TransitionMatrix",
    "peano_baker",
    "magnus",
    "matrix_exp",
    "expm2",
    "expm2_stack",
    "rk4_transition",
]

_MIN_SUBINTERVALS = 64


@dataclass(frozen=True)
class MatrixTrajectory:
    """Samples of a system matrix A(t) with piecewise-linear interpolation."""

    times: np.ndarray  # (M,), strictly increasing
    matrices: np.ndarray  # (M, N, N)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        a = np.asarray(self.matrices, dtype=float)
        if t.ndim != 1 or len(t) < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("trajectory grid must be 1-D, length >= 2, strictly increasing")
        if a.shape[0] != len(t) or a.ndim != 3 or a.shape[1] != a.shape[2]:
            raise ValueError(f"matrix samples must have shape (M, N, N), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("trajectory contains non-finite entries")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "matrices", a)

    @classmethod
    def from_function(cls, fn: Callable[[float], np.ndarray], times) -> "MatrixTrajectory":
        times = np.asarray(times, dtype=float)
        mats = np.stack([np.asarray(fn(t), dtype=float) for t in times])
        return cls(times=times, matrices=mats)

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    def at(self, u):
        """Interpolated A(u); u may be scalar or array, clamped to the grid."""
        u = np.asarray(u, dtype=float)
        scalar = u.ndim == 0
        uu = np.clip(np.atleast_1d(u), self.times[0], self.times[-1])
        idx = np.clip(np.searchsorted(self.times, uu, side="right") - 1, 0, len(self.times) - 2)
        t0, t1 = self.times[idx], self.times[idx + 1]
        w = ((uu - t0) / (t1 - t0))[:, None, None]
        out = (1.0 - w) * self.matrices[idx] + w * self.matrices[idx + 1]
        return out[0] if scalar else out

    def _check_domain(self, t, s):
        lo, hi = self.times[0], self.times[-1]
        tol = 1e-9 * max(1.0, abs(hi - lo))
        if s < lo - tol or t > hi + tol:
            raise ValueError(
                f"interval [{s:g}, {t:g}] outside trajectory domain [{lo:g}, {hi:g}]"
            )


@dataclass(frozen=True)
class TransitionMatrix:
    """Propagator value with the method that produced it."""

    value: np.ndarray
    method: str
    interval: tuple

    def __matmul__(self, other):
        if isinstance(other, TransitionMatrix):
            return self.value @ other.value
        return self.value @ other


def _quad_grid(A: MatrixTrajectory, s: float, t: float):
    """Uniform refinement of [s, t]: at least _MIN_SUBINTERVALS subintervals
    and at least four per trajectory sample interval."""
    inside = np.count_nonzero((A.times > s) & (A.times < t))
    n = max(_MIN_SUBINTERVALS, 4 * (inside + 1))
    return np.linspace(s, t, n + 1)


def _comm(x, y):
    return x @ y - y @ x


def _cumtrapz(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid along axis 0 for stacked matrices."""
    out = np.zeros_like(values)
    dt = np.diff(grid)
    increments = 0.5 * dt[:, None, None] * (values[:-1] + values[1:])
    np.cumsum(increments, axis=0, out=out[1:])
    return out


def peano_baker(A: MatrixTrajectory, t: float, s: float, n_terms: int = 4) -> TransitionMatrix:
    """Truncated iterated-integral series I + int A + int A int A + ...

    Each nesting level is a cumulative composite trapezoid on the refined
    grid. ``n_terms`` counts the integral terms kept (<= 4).
    """
    if not 1 <= n_terms <= 4:
        raise ValueError(f"n_terms must be in 1..4, got {n_terms}")
    if t < s:
        raise ValueError(f"require s <= t, got s={s}, t={t}")
    A._check_domain(t, s)
    n = A.dim
    if t == s:
        return TransitionMatrix(np.eye(n), f"peano({n_terms})", (s, t))
    grid = _quad_grid(A, s, t)
    samples = A.at(grid)
    phi = np.eye(n)
    nested = np.broadcast_to(np.eye(n), samples.shape).copy()
    for _ in range(n_terms):
        nested = _cumtrapz(samples @ nested, grid)
        phi = phi + nested[-1]
    return TransitionMatrix(phi, f"peano({n_terms})", (s, t))


def magnus(A: MatrixTrajectory, t: float, s: float, n_terms: int = 2) -> TransitionMatrix:
    """Exponential of the truncated commutator series (up to three terms).

    Term 1 is the plain integral of A; term 2 the half-weighted double
    integral of [A(u1), A(u2)]; term 3 the sixth-weighted triple integral of
    [A1, [A2, A3]] + [A3, [A2, A1]]. A fourth term is not supported.
    """
    if n_terms not in (1, 2, 3):
        raise ValueError(f"unsupported truncation order {n_terms}; supported orders are 1..3")
    if t < s:
        raise ValueError(f"require s <= t, got s={s}, t={t}")
    A._check_domain(t, s)
    n = A.dim
    if t == s:
        return TransitionMatrix(np.eye(n), f"magnus({n_terms})", (s, t))

    grid = _quad_grid(A, s, t)
    samples = A.at(grid)
    ia = _cumtrapz(samples, grid)  # ia[k] = int_s^{u_k} A
    omega = ia[-1].copy()
    if n_terms >= 2:
        w2 = _comm(samples, ia)  # [A(u), int_s^u A]
        omega += 0.5 * _cumtrapz(w2, grid)[-1]
    if n_terms >= 3:
        # piece 1: int du1 [A(u1), int_s^{u1} [A(u2), IA(u2)] du2]
        h = _cumtrapz(w2, grid)
        piece1 = _cumtrapz(_comm(samples, h), grid)[-1]
        # piece 2: int du1 int_s^{u1} [IA(u2), [A(u2), A(u1)]] du2
        inner = np.zeros_like(samples)
        for k in range(1, len(grid)):
            cka = _comm(samples[: k + 1], samples[k][None])  # [A(u2), A(u1)]
            vals = _comm(ia[: k + 1], cka)
            dt = np.diff(grid[: k + 1])
            inner[k] = np.tensordot(
                0.5 * dt, vals[:-1] + vals[1:], axes=(0, 0)
            )
        piece2 = _cumtrapz(inner, grid)[-1]
        omega += (piece1 + piece2) / 6.0
    return TransitionMatrix(matrix_exp(omega), f"magnus({n_terms})", (s, t))


def expm2(M: np.ndarray) -> np.ndarray:
    """Closed-form exponential of a real 2x2 matrix.

    Splits M = mu I + B with trace-free B; B^2 = q I with
    q = B11^2 + B12 B21, which classifies the hyperbolic (q > 0),
    oscillatory (q < 0), and defective (q = 0) branches.
    """
    return expm2_stack(np.asarray(M, dtype=float)[None])[0]


def expm2_stack(M: np.ndarray) -> np.ndarray:
    """Vectorized :func:`expm2` for an array of shape (..., 2, 2)."""
    M = np.asarray(M, dtype=float)
    mu = 0.5 * (M[..., 0, 0] + M[..., 1, 1])
    B = M.copy()
    B[..., 0, 0] -= mu
    B[..., 1, 1] -= mu
    q = B[..., 0, 0] ** 2 + B[..., 0, 1] * B[..., 1, 0]
    aq = np.abs(q)
    small = aq < 1e-12
    r = np.sqrt(np.where(small, 1.0, aq))  # dummy 1.0 avoids sqrt warnings

    # cosh/cos and sinh/sin branches share the series near q = 0
    c = np.where(q > 0, np.cosh(r), np.cos(r))
    sc = np.where(q > 0, np.sinh(r) / r, np.sin(r) / r)
    c_series = 1.0 + q / 2.0 + q * q / 24.0
    sc_series = 1.0 + q / 6.0 + q * q / 120.0
    c = np.where(small, c_series, c)
    sc = np.where(small, sc_series, sc)

    out = sc[..., None, None] * B
    out[..., 0, 0] += c
    out[..., 1, 1] += c
    return np.exp(mu)[..., None, None] * out


def matrix_exp(M: np.ndarray) -> np.ndarray:
    """Matrix exponential: closed form for 2x2, scaling-and-squaring otherwise."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix exponential requires finite entries")
    if M.shape == (2, 2):
        return expm2(M)
    return _scipy_expm(M)


def rk4_transition(A: MatrixTrajectory, t: float, s: float, steps: int) -> TransitionMatrix:
    """Classical RK4 integration of Y' = A(u) Y, Y(s) = I over uniform substeps.

    Backward intervals (t < s) integrate with a negative step, which realizes
    the inverse propagator.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    A._check_domain(max(t, s), min(t, s))
    n = A.dim
    h = (t - s) / steps
    y = np.eye(n)
    u = s
    for _ in range(steps):
        k1 = A.at(u) @ y
        k2 = A.at(u + 0.5 * h) @ (y + 0.5 * h * k1)
        k3 = A.at(u + 0.5 * h) @ (y + 0.5 * h * k2)
        k4 = A.at(u + h) @ (y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        u += h
    return TransitionMatrix(y, "rk4", (s, t))
