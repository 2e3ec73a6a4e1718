"""Drift/diffusion coefficient assembly for the pdf-evolution models.

Four diffusion laws share the integral form
``D(x, t) = int_{t0}^t C(t, s) K(x, t, s) ds`` over the excitation
autocovariance C and a model-specific matrix kernel K:

* small-correlation-time (SCT): ``K = I + J(x, t) (t - s)``, state-local;
* history kernel: ``K = exp(Delta(x,t)(t-s)) @ Phi[R](t; s)`` where R(t) is
  the mean Jacobian under the evolving pdf, Phi[R] its transition matrix,
  and ``Delta = J - R`` the pointwise fluctuation;
* exact linear: K is the closed-form oscillator exponential (time-only);
* white noise: the delta-covariance limit, no quadrature.

Component masking: excitation components are independent copies of the
scalar law on the masked state equations, so the covariance matrix is
``C_{n n2} = C(t,s) * delta_{n n2} * mask_n`` and each diffusion column n
is active iff component n is forced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np
from scipy.integrate import quad

from .dynamics import SystemModel
from .excitation import ExcitationSpec, KernelError, TAIL_RELTOL
from .propagator import MatrixTrajectory, expm2_stack, magnus, matrix_exp

__all__ = [
    "MomentHistory",
    "DiffusionField",
    "HistoryGapError",
    "sct_kernel",
    "ngfpk_kernel",
    "convolve_diffusion",
    "linear_exact_coefficients",
    "white_noise_coefficients",
    "x0xi_coefficient",
    "TransitionFamily",
    "diffusion_field",
]


class HistoryGapError(RuntimeError):
    """Requested interval not covered by the recorded moment history."""


class MomentHistory:
    """Time-stamped mean-Jacobian matrices and the moments that build them."""

    def __init__(self, moment_names=()):
        self.moment_names = tuple(moment_names)
        self._times: List[float] = []
        self._R: List[np.ndarray] = []
        self._moments: Dict[str, List[float]] = {name: [] for name in self.moment_names}

    def append(self, t: float, R: np.ndarray, moments=None):
        if self._times and t <= self._times[-1]:
            raise ValueError(f"history times must increase, got {t} after {self._times[-1]}")
        self._times.append(float(t))
        self._R.append(np.asarray(R, dtype=float))
        for name in self.moment_names:
            self._moments[name].append(float(moments[name]))

    def __len__(self):
        return len(self._times)

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self._times)

    @property
    def R_stack(self) -> np.ndarray:
        return np.asarray(self._R)

    def moments(self, name: str) -> np.ndarray:
        return np.asarray(self._moments[name])

    def covers(self, s: float, t: float, tol: float = 1e-9) -> bool:
        if not self._times:
            return False
        return self._times[0] <= s + tol and self._times[-1] >= t - tol

    def require_cover(self, s: float, t: float):
        if not self.covers(s, t):
            have = f"[{self._times[0]:g}, {self._times[-1]:g}]" if self._times else "(empty)"
            raise HistoryGapError(f"history covers {have} but [{s:g}, {t:g}] is required")

    def as_trajectory(self) -> MatrixTrajectory:
        return MatrixTrajectory(times=self.times, matrices=self.R_stack)

    def R_at(self, u: float) -> np.ndarray:
        if len(self._times) == 1:
            return self._R[0]
        return self.as_trajectory().at(u)


@dataclass(frozen=True)
class DiffusionField:
    """Per-node diffusion coefficient matrices, shape (*grid_shape, N, N)."""

    values: np.ndarray
    t: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("diffusion field contains non-finite entries")


def sct_kernel(model: SystemModel, x, t: float, s: float) -> np.ndarray:
    """State-local kernel ``I + J(x, t) (t - s)``."""
    if s > t:
        raise ValueError(f"require s <= t, got s={s}, t={t}")
    J = model.jacobian(np.asarray(x, dtype=float), t)
    return np.eye(model.dim) + J * (t - s)


def ngfpk_kernel(model: SystemModel, x, t: float, s: float, history: MomentHistory):
    """History kernel ``exp(Delta(x,t)(t-s)) @ Phi[R](t; s)``.

    Phi[R] is the two-term exponential-series propagator on the recorded
    mean-Jacobian trajectory; Delta is the Jacobian fluctuation about R(t).
    """
    if s > t:
        raise ValueError(f"require s <= t, got s={s}, t={t}")
    history.require_cover(s, t)
    R_t = history.R_at(t)
    delta = model.jacobian(np.asarray(x, dtype=float), t) - R_t
    if t == s:
        return np.eye(model.dim)
    phi = magnus(history.as_trajectory(), t, s, n_terms=2).value
    return matrix_exp(delta * (t - s)) @ phi


def _window_grid(times: np.ndarray, t: float, t0: float, cutoff: float) -> np.ndarray:
    """Quadrature grid over s in [max(t0, t - cutoff), t].

    Takes the supplied grid points inside the window and subdivides the last
    four intervals (next to s = t, where the covariance is largest) by four.
    """
    lo = t0 if not np.isfinite(cutoff) else max(t0, t - cutoff)
    if t - lo <= 0:
        return np.asarray([t])
    pts = np.asarray(times, dtype=float)
    pts = pts[(pts > lo) & (pts < t)]
    pts = np.unique(np.concatenate([[lo], pts, [t]]))
    n_ref = min(4, len(pts) - 1)
    head, tail = pts[: len(pts) - n_ref], pts[len(pts) - n_ref - 1:]
    fine = [head]
    for a, b in zip(tail[:-1], tail[1:]):
        fine.append(np.linspace(a, b, 5)[1:])
    return np.unique(np.concatenate(fine))


def _trapz_weights(grid: np.ndarray) -> np.ndarray:
    w = np.zeros_like(grid)
    if len(grid) > 1:
        d = np.diff(grid)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
    return w


def convolve_diffusion(kernel_fn, spec: ExcitationSpec, x, t: float, history_grid):
    """Composite-trapezoid convolution ``int C(t, s) K(x, t, s) ds``.

    ``kernel_fn(x, t, s) -> (N, N)``. The integrand is truncated where
    |C(t,s)| falls below ``TAIL_RELTOL * C(t,t)``; diffusion columns follow
    the component mask.
    """
    if spec.is_white:
        raise KernelError(
            "white-noise excitation has no pointwise covariance; "
            "use white_noise_coefficients"
        )
    history_grid = np.asarray(history_grid, dtype=float)
    t0 = history_grid[0]
    grid = _window_grid(history_grid, t, t0, spec.kernel.lag_cutoff(TAIL_RELTOL))
    g = spec.mask_vector
    dim = len(g)
    if len(grid) < 2:
        return np.zeros((dim, dim))
    w = _trapz_weights(grid)
    c = spec.kernel.at_lag(t - grid)
    total = np.zeros((dim, dim))
    for wk, ck, sk in zip(w, c, grid):
        total += wk * ck * np.asarray(kernel_fn(x, t, sk), dtype=float)
    return total * g[None, :]


def linear_exact_coefficients(zeta: float, omega0: float, spec: ExcitationSpec,
                              t: float, t0: float = 0.0):
    """Exact oscillator diffusion entries (D12, D22) at time t.

    Quadrature of the closed-form exponential kernel of the underdamped
    oscillator against the excitation covariance:
    ``D12 = (1/g) int C(t,s) e^{-a u} sin(g u) ds`` and
    ``D22 = (1/g) int C(t,s) e^{-a u} (g cos(g u) - a sin(g u)) ds``
    with u = t - s, a = zeta * omega0, g = omega0 * sqrt(1 - zeta^2).
    """
    if not (0.0 < zeta < 1.0):
        raise ValueError(f"exact linear coefficients require 0 < zeta < 1, got {zeta}")
    if spec.is_white:
        raise KernelError("use white_noise_coefficients for white-noise excitation")
    a = zeta * omega0
    gam = omega0 * np.sqrt(1.0 - zeta**2)
    span = t - t0
    if span <= 0:
        return 0.0, 0.0
    cutoff = spec.kernel.lag_cutoff(TAIL_RELTOL)
    hi = min(span, cutoff) if np.isfinite(cutoff) else span

    def f12(u):
        return spec.kernel.at_lag(u) * np.exp(-a * u) * np.sin(gam * u) / gam

    def f22(u):
        return spec.kernel.at_lag(u) * np.exp(-a * u) * (
            gam * np.cos(gam * u) - a * np.sin(gam * u)
        ) / gam

    d12, _ = quad(f12, 0.0, hi, epsabs=1e-12, epsrel=1e-10, limit=400)
    d22, _ = quad(f22, 0.0, hi, epsabs=1e-12, epsrel=1e-10, limit=400)
    return d12, d22


def white_noise_coefficients(spec: ExcitationSpec, dim: int, t: float = 0.0) -> np.ndarray:
    """Diffusion matrix of the delta-correlated limit: ``diag(mask) * D(t)``.

    The covariance ``2 D(t) delta(t - s)`` contributes half its mass at the
    interval endpoint s = t, so the resulting coefficient is D(t) itself;
    evaluated analytically, no quadrature.
    """
    if not spec.is_white:
        raise KernelError("white_noise_coefficients requires a white-noise kernel")
    g = spec.mask_vector
    if len(g) != dim:
        raise ValueError(f"mask length {len(g)} does not match dimension {dim}")
    return np.diag(g * float(spec.kernel.intensity(t)))


def x0xi_coefficient(model: SystemModel, spec: ExcitationSpec, x, t: float,
                     history, mode: str, t0: float = 0.0) -> np.ndarray:
    """Initial-value/excitation cross diffusion term.

    SCT mode uses the state-local kernel at (t; t0); the history mode uses
    ``exp(Delta (t - t0)) @ Phi[R](t; t0)``. Zero cross-covariance yields the
    zero matrix.
    """
    dim = model.dim
    c = spec.cross_cov_at(t, dim)
    if not np.any(c):
        return np.zeros((dim, dim))
    if mode == "sct":
        K = sct_kernel(model, x, t, t0)
    elif mode == "ngfpk":
        K = ngfpk_kernel(model, x, t, t0, history)
    else:
        raise ValueError(f"unknown cross-term mode {mode!r}")
    return np.outer(K @ c, spec.mask_vector)


def _comm(x, y):
    return x @ y - y @ x


def _cumtrapz_stack(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    dt = np.diff(grid)
    np.cumsum(0.5 * dt[:, None, None] * (values[:-1] + values[1:]), axis=0, out=out[1:])
    return out


class TransitionFamily:
    """Two-term exponential-series propagators Phi(t_end; s_k) for every grid
    point s_k at once.

    Uses the cumulative identities
    ``Omega1(t; s) = P(t) - P(s)`` and
    ``Omega2(t; s) = ((Q(t) - Q(s)) - [P(t) - P(s), P(s)]) / 2``
    where ``P(u) = int R`` and ``Q(u) = int [R, P]`` are cumulative
    trapezoid integrals, so the whole family costs one sweep of the grid.
    """

    def __init__(self, times: np.ndarray, R: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.R = np.asarray(R, dtype=float)
        if len(self.times) < 2:
            raise ValueError("transition family needs at least two grid points")
        self.P = _cumtrapz_stack(self.R, self.times)
        self.Q = _cumtrapz_stack(_comm(self.R, self.P), self.times)

    def phi_from(self) -> np.ndarray:
        """Phi(t_end; s_k) stacked over the grid, shape (M, N, N)."""
        Pt, Qt = self.P[-1], self.Q[-1]
        dP = Pt[None] - self.P
        omega = dP + 0.5 * (Qt[None] - self.Q - _comm(dP, self.P))
        if self.R.shape[1] == 2:
            return expm2_stack(omega)
        return np.stack([matrix_exp(om) for om in omega])


def _interp_stack(times: np.ndarray, stack: np.ndarray, new_times: np.ndarray) -> np.ndarray:
    traj = MatrixTrajectory(times=times, matrices=stack)
    return traj.at(new_times)


def diffusion_field(model: SystemModel, spec: ExcitationSpec, mesh, t: float,
                    t0: float, method: str, hist_times=None, hist_R=None,
                    zeta: float = None, omega0: float = None) -> DiffusionField:
    """Vectorized per-node diffusion assembly for the grid solver.

    ``mesh`` is the stacked coordinate array of shape (*grid_shape, N).
    For the history method, ``hist_times``/``hist_R`` must span [t0, t]
    including the (possibly provisional) value at t.
    """
    mesh = np.asarray(mesh, dtype=float)
    grid_shape = mesh.shape[:-1]
    dim = model.dim
    g = spec.mask_vector

    if method == "fpk":
        D = white_noise_coefficients(spec, dim, t)
        values = np.broadcast_to(D, grid_shape + (dim, dim)).copy()
        return DiffusionField(values=values, t=t)

    if method == "linear_exact":
        if not np.array_equal(g, np.asarray([0.0, 1.0])):
            raise ValueError("exact linear coefficients assume forcing on the velocity equation")
        d12, d22 = linear_exact_coefficients(zeta, omega0, spec, t, t0)
        values = np.zeros(grid_shape + (dim, dim))
        values[..., 0, 1] = d12
        values[..., 1, 1] = d22
        return _with_cross_term(model, spec, mesh, t, t0, "exact_exp", None, values)

    if hist_times is None:
        raise ValueError(f"method {method!r} requires a history grid")
    hist_times = np.asarray(hist_times, dtype=float)
    cutoff = spec.kernel.lag_cutoff(TAIL_RELTOL)
    s_grid = _window_grid(hist_times, t, t0, cutoff)
    w = _trapz_weights(s_grid)
    c = spec.kernel.at_lag(t - s_grid)

    if method == "sct":
        c0 = float(np.sum(w * c))
        c1 = float(np.sum(w * c * (t - s_grid)))
        J = model.jacobian(mesh, t)
        values = c1 * J
        idx = np.arange(dim)
        values[..., idx, idx] += c0
        values = values * g[None, :]
        return _with_cross_term(model, spec, mesh, t, t0, "sct", None, values)

    if method != "ngfpk":
        raise ValueError(f"unknown diffusion method {method!r}")

    if len(s_grid) < 2:
        values = np.zeros(grid_shape + (dim, dim))
        return _with_cross_term(model, spec, mesh, t, t0, "ngfpk",
                                (hist_times, hist_R), values)

    R_on_grid = _interp_stack(hist_times, np.asarray(hist_R, dtype=float), s_grid)
    family = TransitionFamily(s_grid, R_on_grid)
    phi = family.phi_from()  # (M, N, N)
    R_t = R_on_grid[-1]
    delta = model.jacobian(mesh, t) - R_t  # (*grid, N, N)
    values = _contract_exp_phi(delta, phi, t - s_grid, w * c, dim, grid_shape)
    values = values * g[None, :]
    return _with_cross_term(model, spec, mesh, t, t0, "ngfpk",
                            (hist_times, hist_R), values)


def _contract_exp_phi(delta, phi, lags, coef, dim, grid_shape):
    """sum_k coef_k exp(delta(x) * lag_k) @ phi_k, vectorized over nodes.

    For 2x2 fluctuations the exponential has the scalar closed form
    ``exp(mu u) (c(q u^2) I + sc(q u^2) u B)`` with trace-free B and
    discriminant q, so the s-contraction reduces to two node-by-lag GEMMs.
    Trace-free nilpotent fluctuations (mu = q = 0, e.g. position-only
    nonlinearity) skip the node-by-lag arrays entirely.
    """
    if dim != 2:
        values = np.zeros(grid_shape + (dim, dim))
        for k in range(len(lags)):
            E = _expm_field(delta * lags[k], dim)
            values += coef[k] * (E @ phi[k])
        return values

    mu = 0.5 * (delta[..., 0, 0] + delta[..., 1, 1])
    B = delta.copy()
    B[..., 0, 0] -= mu
    B[..., 1, 1] -= mu
    q = B[..., 0, 0] ** 2 + B[..., 0, 1] * B[..., 1, 0]

    phi_flat = phi.reshape(len(lags), dim * dim)
    if np.all(mu == 0.0) and np.all(q == 0.0):
        # exp(delta u) = I + delta u exactly
        s0 = (coef @ phi_flat).reshape(dim, dim)
        s1 = ((coef * lags) @ phi_flat).reshape(dim, dim)
        return s0 + B @ s1

    nx = int(np.prod(grid_shape)) if grid_shape else 1
    mu_f = mu.reshape(nx)
    q_f = q.reshape(nx)
    B_f = B.reshape(nx, dim, dim)
    z = np.outer(q_f, lags**2)
    az = np.abs(z)
    small = az < 1e-12
    r = np.sqrt(np.where(small, 1.0, az))
    cosv = np.where(z > 0, np.cosh(r), np.cos(r))
    sincv = np.where(z > 0, np.sinh(r) / r, np.sin(r) / r)
    cosv = np.where(small, 1.0 + z / 2.0 + z * z / 24.0, cosv)
    sincv = np.where(small, 1.0 + z / 6.0 + z * z / 120.0, sincv)
    growth = np.exp(np.outer(mu_f, lags)) * coef[None, :]
    alpha = growth * cosv
    beta = growth * sincv * lags[None, :]
    s0 = (alpha @ phi_flat).reshape(nx, dim, dim)
    s1 = (beta @ phi_flat).reshape(nx, dim, dim)
    out = s0 + B_f @ s1
    return out.reshape(grid_shape + (dim, dim))


def _with_cross_term(model, spec, mesh, t, t0, mode, hist, values) -> DiffusionField:
    """Add the initial-value/excitation cross contribution when present."""
    dim = model.dim
    c = spec.cross_cov_at(t, dim)
    if np.any(c):
        g = spec.mask_vector
        if mode == "sct":
            K = np.eye(dim) + model.jacobian(mesh, t) * (t - t0)
        elif mode == "exact_exp":
            K = _expm_field(model.jacobian(mesh, t) * (t - t0), dim)
        else:
            hist_times, hist_R = hist
            if t <= t0 or len(np.atleast_1d(hist_times)) < 2:
                phi0 = np.eye(dim)
                R_t = np.asarray(hist_R)[-1]
            else:
                R_traj = MatrixTrajectory(times=hist_times, matrices=np.asarray(hist_R))
                phi0 = magnus(R_traj, t, t0, n_terms=2).value
                R_t = R_traj.at(t)
            E0 = _expm_field(
                (model.jacobian(mesh, t) - R_t) * (t - t0), dim)
            K = E0 @ phi0
        values = values + (K @ c)[..., :, None] * g[None, :]
    return DiffusionField(values=values, t=t)


def _expm_field(stack: np.ndarray, dim: int) -> np.ndarray:
    """Exponential of every matrix in a (*grid, N, N) stack."""
    if dim == 2:
        return expm2_stack(stack)
    flat = stack.reshape(-1, dim, dim)
    return np.stack([matrix_exp(m) for m in flat]).reshape(stack.shape)
