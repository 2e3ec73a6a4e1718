"""Closed-form oracles.

* Exact Gaussian solution of the linear-oscillator pdf-evolution equation:
  the mean propagates through the closed-form transition matrix, the
  covariance through a double convolution of that matrix against the
  excitation autocovariance.
* Stationary density of the bistable oscillator under white noise, with a
  residual self-check before it is handed out as an oracle.
"""

from __future__ import annotations

import math

import numpy as np

from .excitation import ExcitationSpec, KernelError, TAIL_RELTOL
from .solver import GridSpec, PdfField

__all__ = [
    "oscillator_transition",
    "linear_gaussian_solution",
    "duffing_white_noise_stationary",
]


def oscillator_transition(zeta: float, omega0: float, u) -> np.ndarray:
    """Closed-form transition matrix of the underdamped oscillator at lag u.

    Implemented directly from the trigonometric form (decay rate
    a = zeta * omega0, damped frequency g = omega0 sqrt(1 - zeta^2)), kept
    independent of the generic matrix-exponential routine so the two can
    cross-check each other.
    """
    if not (0.0 < zeta < 1.0):
        raise ValueError(f"underdamped transition requires 0 < zeta < 1, got {zeta}")
    a = zeta * omega0
    g = omega0 * math.sqrt(1.0 - zeta * zeta)
    u = np.asarray(u, dtype=float)
    decay = np.exp(-a * u)
    s, c = np.sin(g * u), np.cos(g * u)
    out = np.empty(u.shape + (2, 2))
    out[..., 0, 0] = decay * (c + (a / g) * s)
    out[..., 0, 1] = decay * s / g
    out[..., 1, 0] = -decay * (omega0**2 / g) * s
    out[..., 1, 1] = decay * (c - (a / g) * s)
    return out


def _simpson_weights(n: int, h: float) -> np.ndarray:
    """Composite Simpson weights on n+1 uniform points (n even)."""
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


def linear_gaussian_solution(
    zeta: float,
    omega0: float,
    spec: ExcitationSpec,
    mean0,
    cov0,
    t: float,
    t0: float = 0.0,
    step: float = 0.005,
):
    """Exact Gaussian law (mean, covariance) of the oscillator response at t.

    mean(t) = Phi(t - t0) m0 + int Phi(t - s) e2 m(s) ds and
    cov(t) = Phi C0 Phi^T + int int C(s1, s2) phi(t - s1) phi(t - s2)^T,
    with phi the forced column of the transition matrix. Integrals use
    composite Simpson at ``step`` resolution (refined when the kernel is
    narrower); the covariance is symmetrized with eigenvalues floored at 0.
    """
    if spec.is_white:
        raise KernelError("white-noise law has no pointwise covariance; "
                          "use a delta-family kernel instead")
    if not np.array_equal(spec.mask_vector, np.asarray([0.0, 1.0])):
        raise ValueError("oscillator solution assumes forcing on the velocity equation")
    mean0 = np.asarray(mean0, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    span = t - t0
    phi_full = oscillator_transition(zeta, omega0, span)
    if span <= 0:
        return mean0.copy(), cov0.copy()

    # resolve both the kernel and the oscillator period
    scale = spec.kernel.decay_scale
    h_target = min(step, scale / 40.0 if np.isfinite(scale) else step,
                   2.0 * math.pi / omega0 / 200.0)
    n = max(2, int(math.ceil(span / h_target)))
    n += n % 2
    h = span / n
    s_grid = t0 + h * np.arange(n + 1)
    w = _simpson_weights(n, h)

    phi_col = oscillator_transition(zeta, omega0, t - s_grid)[..., :, 1]  # (M, 2)
    m_vals = spec.mean_at(s_grid)
    mean = phi_full @ mean0 + np.einsum("k,ki,k->i", w, phi_col, m_vals)

    cov = phi_full @ cov0 @ phi_full.T
    vw = phi_col * w[:, None]  # (M, 2)
    chunk = 1024
    acc = np.zeros((2, 2))
    for k0 in range(0, n + 1, chunk):
        k1 = min(k0 + chunk, n + 1)
        ckl = spec.kernel.at_lag(s_grid[k0:k1, None] - s_grid[None, :])
        inner = ckl @ vw  # (chunk, 2)
        acc += vw[k0:k1].T @ inner
    cov = cov + acc

    cross = spec.cross_cov_at(t, 2)
    if np.any(cross):
        # joint Gaussian data add Phi C0X phi^T terms to the covariance
        c_rows = np.stack([spec.cross_cov_at(s, 2) for s in s_grid])  # (M, 2)
        mix = np.einsum("k,ki,kj->ij", w, phi_col, c_rows)  # phi(t-s) c(s)^T
        cov = cov + phi_full @ mix.T + mix @ phi_full.T

    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    cov = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return mean, cov


def duffing_white_noise_stationary(zeta: float, intensity: float,
                                   grid: GridSpec) -> PdfField:
    """Stationary density exp(-(2 zeta / D) (x2^2/2 + x1^4/4 - x1^2/2)),
    normalized on the grid.

    Before returning, the closed form is substituted into the stationary
    white-noise equation using analytic derivatives evaluated at the nodes;
    the max-norm residual (relative to the density scale) must not exceed
    1e-8, otherwise the oracle refuses to hand out the field.
    """
    if zeta <= 0 or intensity <= 0:
        raise ValueError("damping ratio and noise intensity must be positive")
    beta = 2.0 * zeta / intensity
    mesh = grid.mesh()
    x1, x2 = mesh[..., 0], mesh[..., 1]
    pot = x1**4 / 4.0 - x1**2 / 2.0
    log_f = -beta * (x2**2 / 2.0 + pot)
    values = np.exp(log_f - log_f.max())

    # residual of the stationary equation with analytic derivatives:
    #   -d1(x2 f) - d2((-V' - 2 zeta x2) f) + D d22 f
    vprime = x1**3 - x1
    d1f = -beta * vprime * values
    d2f = -beta * x2 * values
    d22f = (beta**2 * x2**2 - beta) * values
    residual = (
        -x2 * d1f
        + 2.0 * zeta * values
        - (-vprime - 2.0 * zeta * x2) * d2f
        + intensity * d22f
    )
    rel = np.max(np.abs(residual)) / np.max(values)
    if rel > 1e-8:
        raise RuntimeError(
            f"stationary-density self-check failed: residual {rel:.3e} > 1e-8"
        )

    field = PdfField(values=values, grid=grid)
    return field.normalized()
