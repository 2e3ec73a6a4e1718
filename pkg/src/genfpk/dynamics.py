"""Dynamical system registry: drift/Jacobian interface, the bistable Duffing
oscillator in nondimensional form, and the underdamped linear oscillator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Tuple

import numpy as np

__all__ = [
    "SystemModel",
    "DuffingParams",
    "duffing_model",
    "linear_oscillator_model",
    "nondimensionalize_duffing",
    "mean_jacobian",
    "mean_jacobian_from_density",
]


@dataclass(frozen=True)
class SystemModel:
    """Drift h(x, t), its Jacobian, and the moment functionals that close
    the mean Jacobian.

    ``drift`` and ``jacobian`` are vectorized over leading axes of x:
    x with shape (..., dim) maps to (..., dim) and (..., dim, dim).
    ``moment_basis`` names the scalar monomials whose expectations determine
    the mean Jacobian; ``basis_fns[name]`` evaluates the monomial pointwise.
    ``mean_jacobian_fn(moments, t)`` builds the expected Jacobian from those
    moment values (exact for polynomial drifts).
    """

    dim: int
    drift: Callable
    jacobian: Callable
    moment_basis: Tuple[str, ...] = ()
    basis_fns: Mapping[str, Callable] = field(default_factory=dict)
    mean_jacobian_fn: Callable = None
    name: str = "custom"


@dataclass(frozen=True)
class DuffingParams:
    """Dimensional parameters of the bistable oscillator
    ``m x'' + b x' + eta1 x + eta3 x^3 = xi0 * forcing``."""

    mass: float
    damping: float
    eta1: float
    eta3: float
    xi0: float


def duffing_model(zeta: float) -> SystemModel:
    """Nondimensional bistable Duffing oscillator ``x'' + 2 zeta x' - x + x^3 = f``.

    State (x1, x2) = (position, velocity); potential minima at x1 = +-1.
    """
    if zeta <= 0:
        raise ValueError(f"damping ratio must be positive, got {zeta}")

    def drift(x, t=0.0):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, -x1**3 + x1 - 2.0 * zeta * x2], axis=-1)

    def jacobian(x, t=0.0):
        x = np.asarray(x, dtype=float)
        x1 = x[..., 0]
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = 1.0 - 3.0 * x1**2
        J[..., 1, 1] = -2.0 * zeta
        return J

    def mean_jac(moments, t=0.0):
        m = moments["x1_sq"]
        return np.array([[0.0, 1.0], [1.0 - 3.0 * m, -2.0 * zeta]])

    return SystemModel(
        dim=2,
        drift=drift,
        jacobian=jacobian,
        moment_basis=("x1_sq",),
        basis_fns={"x1_sq": lambda x: np.asarray(x)[..., 0] ** 2},
        mean_jacobian_fn=mean_jac,
        name="duffing",
    )


def linear_oscillator_model(zeta: float, omega0: float) -> SystemModel:
    """Underdamped oscillator ``x'' + 2 zeta omega0 x' + omega0^2 x = f``."""
    if not (0.0 < zeta < 1.0):
        raise ValueError(f"underdamped oscillator requires 0 < zeta < 1, got {zeta}")
    if omega0 <= 0:
        raise ValueError(f"natural frequency must be positive, got {omega0}")

    J = np.array([[0.0, 1.0], [-(omega0**2), -2.0 * zeta * omega0]])

    def drift(x, t=0.0):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, -(omega0**2) * x1 - 2.0 * zeta * omega0 * x2], axis=-1)

    def jacobian(x, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(J, x.shape[:-1] + (2, 2)).copy()

    def mean_jac(moments, t=0.0):
        return J.copy()

    return SystemModel(
        dim=2,
        drift=drift,
        jacobian=jacobian,
        moment_basis=(),
        basis_fns={},
        mean_jacobian_fn=mean_jac,
        name="linear_oscillator",
    )


def nondimensionalize_duffing(params: DuffingParams):
    """Damping ratio, dimensionless forcing coefficient, and scale factors.

    Returns ``(zeta, forcing_coeff, time_scale, state_scale)`` where
    nondimensional time is ``t * time_scale`` and nondimensional position is
    ``x * state_scale``.
    """
    m, b, e1, e3, xi0 = params.mass, params.damping, params.eta1, params.eta3, params.xi0
    if m <= 0 or b <= 0:
        raise ValueError("mass and damping must be positive")
    if e1 >= 0:
        raise ValueError(f"bistable oscillator requires eta1 < 0, got {e1}")
    if e3 <= 0:
        raise ValueError(f"global stability requires eta3 > 0, got {e3}")
    if xi0 < 0:
        raise ValueError(f"forcing amplitude must be >= 0, got {xi0}")
    zeta = b / (2.0 * np.sqrt(m * abs(e1)))
    forcing_coeff = xi0 * np.sqrt(e3 / abs(e1) ** 3)
    time_scale = np.sqrt(abs(e1) / m)
    state_scale = np.sqrt(e3 / abs(e1))
    return zeta, forcing_coeff, time_scale, state_scale


def mean_jacobian(model: SystemModel, moments: Mapping[str, float], t: float = 0.0):
    """Expected Jacobian E[J(x, t)] from the values of the moment basis."""
    missing = [name for name in model.moment_basis if name not in moments]
    if missing:
        raise KeyError(f"missing moment functionals for mean Jacobian: {missing}")
    return model.mean_jacobian_fn(moments, t)


def mean_jacobian_from_density(model: SystemModel, axes, density, t: float = 0.0):
    """Quadrature fallback: trapezoid integral of J(x, t) * f(x) over a tensor grid.

    ``axes`` is a sequence of 1-D coordinate arrays, ``density`` the matching
    pdf values. Exact route for non-polynomial drifts; polynomial models
    should use :func:`mean_jacobian` with precomputed moments.
    """
    axes = [np.asarray(a, dtype=float) for a in axes]
    density = np.asarray(density, dtype=float)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    J = model.jacobian(mesh, t)  # (*grid, dim, dim)
    w = 1.0
    for k, a in enumerate(axes):
        wk = np.gradient(a)
        wk[0] = (a[1] - a[0]) / 2.0
        wk[-1] = (a[-1] - a[-2]) / 2.0
        shape = [1] * len(axes)
        shape[k] = len(a)
        w = w * wk.reshape(shape)
    weights = (w * density)[..., None, None]
    return np.sum(J * weights, axis=tuple(range(len(axes))))
