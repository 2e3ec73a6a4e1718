"""Gaussian excitation laws: covariance kernels, correlation time, calibration,
and exact path sampling for Monte Carlo.

An excitation is a scalar Gaussian process ``xi(t)`` applied to the state
equations selected by a component mask, so the vector forcing is
``Xi_n(t) = mask_n * xi(t)``.  The law is fixed by a mean function, a
stationary covariance kernel, and (optionally) a cross-covariance with the
Gaussian initial state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "GaussianFilterKernel",
    "OrnsteinUhlenbeckKernel",
    "WhiteNoiseKernel",
    "ExcitationSpec",
    "PathEnsemble",
    "KernelError",
    "CalibrationError",
    "NotPositiveSemidefiniteError",
    "kernel_eval",
    "correlation_time",
    "calibrate_shape",
    "gaussian_filter_family",
    "sample_paths",
    "constant_mean",
    "logistic_mean",
]

# Relative level below which a covariance tail is treated as zero.
TAIL_RELTOL = 1e-8
# Diagonal jitter, relative to the kernel variance, allowed before a
# factorization failure is reported.
PSD_JITTER = 1e-12

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


class KernelError(ValueError):
    """Operation not defined for this covariance kernel."""


class CalibrationError(RuntimeError):
    """Shape-parameter calibration failed on the search bracket."""


class NotPositiveSemidefiniteError(RuntimeError):
    """Joint covariance could not be factorized even after jitter."""


@dataclass(frozen=True)
class GaussianFilterKernel:
    """Stationary kernel ``variance * exp(-(shape*u)**2) * cos(peak_freq*u)``.

    ``shape`` (units 1/time) controls the correlation time, ``peak_freq``
    (rad/time) is the peak frequency of the excitation spectrum.
    """

    variance: float
    shape: float
    peak_freq: float = 0.0

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"kernel variance must be >= 0, got {self.variance}")
        if self.shape < 0:
            raise ValueError(f"kernel shape must be >= 0, got {self.shape}")

    def at_lag(self, u):
        u = np.asarray(u, dtype=float)
        return self.variance * np.exp(-((self.shape * u) ** 2)) * np.cos(self.peak_freq * u)

    def lag_cutoff(self, reltol: float = TAIL_RELTOL) -> float:
        """Lag beyond which |C(u)| < reltol * C(0) (envelope bound)."""
        if self.shape == 0.0:
            return math.inf
        return math.sqrt(-math.log(reltol)) / self.shape

    @property
    def decay_scale(self) -> float:
        return math.inf if self.shape == 0.0 else 1.0 / self.shape

    def sign_breakpoints(self, horizon: float):
        """Zeros of the cosine factor in (0, horizon)."""
        if self.peak_freq == 0.0:
            return np.empty(0)
        k_max = int(math.floor((horizon * self.peak_freq / math.pi) - 0.5))
        if k_max < 0:
            return np.empty(0)
        return (np.arange(k_max + 1) + 0.5) * math.pi / self.peak_freq


@dataclass(frozen=True)
class OrnsteinUhlenbeckKernel:
    """Stationary exponential kernel ``variance * exp(-|u| / timescale)``."""

    variance: float
    timescale: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"kernel variance must be >= 0, got {self.variance}")
        if self.timescale <= 0:
            raise ValueError(f"kernel timescale must be > 0, got {self.timescale}")

    def at_lag(self, u):
        u = np.asarray(u, dtype=float)
        return self.variance * np.exp(-np.abs(u) / self.timescale)

    def lag_cutoff(self, reltol: float = TAIL_RELTOL) -> float:
        return -self.timescale * math.log(reltol)

    @property
    def decay_scale(self) -> float:
        return self.timescale

    def sign_breakpoints(self, horizon: float):
        return np.empty(0)


@dataclass(frozen=True)
class WhiteNoiseKernel:
    """Delta-correlated excitation with covariance ``2 * intensity(t) * delta(t-s)``.

    ``intensity`` maps time to the (scalar) noise intensity D(t), so the
    stationary diffusion contributed to a pdf-evolution equation is D(t)
    itself (half the mass of the delta at the interval endpoint).
    """

    intensity: Callable[[float], float]

    @property
    def variance(self) -> float:
        raise KernelError("white-noise kernel has no pointwise variance")


def constant_mean(value: float) -> Callable[[np.ndarray], np.ndarray]:
    def mean(t):
        return np.full_like(np.asarray(t, dtype=float), value)

    return mean


def logistic_mean(amplitude: float, rate: float, center: float):
    """Smooth ramp ``amplitude * exp(rate*(t-center)) / (1 + exp(rate*(t-center)))``."""

    def mean(t):
        t = np.asarray(t, dtype=float)
        z = rate * (t - center)
        # exp written via the stable sigmoid form
        return amplitude / (1.0 + np.exp(-z))

    return mean


@dataclass(frozen=True)
class ExcitationSpec:
    """Scalar Gaussian forcing law applied to the masked state components."""

    kernel: object
    mean_fn: Callable = field(default_factory=lambda: constant_mean(0.0))
    cross_cov_fn: Optional[Callable] = None
    component_mask: Sequence[bool] = (False, True)

    @property
    def mask_vector(self) -> np.ndarray:
        return np.asarray(self.component_mask, dtype=float)

    @property
    def is_white(self) -> bool:
        return isinstance(self.kernel, WhiteNoiseKernel)

    def mean_at(self, t):
        return np.asarray(self.mean_fn(np.asarray(t, dtype=float)), dtype=float)

    def cross_cov_at(self, t, dim: int) -> np.ndarray:
        if self.cross_cov_fn is None:
            return np.zeros(dim)
        return np.asarray(self.cross_cov_fn(t), dtype=float)


@dataclass(frozen=True)
class PathEnsemble:
    """Sampled excitation paths on a common time grid."""

    times: np.ndarray  # (M,), strictly increasing
    values: np.ndarray  # (n_paths, M)
    seed: object  # int or tuple of ints

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("path ensemble time grid must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("path ensemble contains non-finite values")


def kernel_eval(spec: ExcitationSpec, t: float, s: float) -> float:
    """Pointwise covariance C(t, s) of the scalar excitation."""
    if spec.is_white:
        raise KernelError("pointwise evaluation undefined for white-noise kernel")
    return float(spec.kernel.at_lag(t - s))


def _abs_integral(kernel, lo: float, hi: float) -> float:
    """integral of |C(u)| over [lo, hi] by Gauss-Legendre panels.

    Panels are split at the kernel's sign changes (the integrand is smooth on
    each) and further chopped so no panel exceeds half a decay scale.
    """
    if hi <= lo:
        return 0.0
    pts = [lo, hi]
    pts.extend(b for b in kernel.sign_breakpoints(hi) if lo < b < hi)
    pts = np.unique(np.asarray(pts, dtype=float))
    max_len = kernel.decay_scale / 2.0
    if not math.isfinite(max_len):
        max_len = (hi - lo) / 64.0
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        n_chunks = max(1, int(math.ceil((b - a) / max_len)))
        edges = np.linspace(a, b, n_chunks + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        u = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        vals = np.abs(kernel.at_lag(u))
        total += float(np.sum(half[:, None] * _GL_WEIGHTS[None, :] * vals))
    return total


def _tau_of_kernel(kernel) -> float:
    if isinstance(kernel, WhiteNoiseKernel):
        raise KernelError("correlation time undefined for white-noise kernel")
    c0 = float(kernel.at_lag(0.0))
    if c0 <= 0.0:
        raise KernelError("correlation time requires positive lag-zero covariance")
    cutoff = kernel.lag_cutoff(TAIL_RELTOL)
    horizon = 1e3 * kernel.decay_scale
    if not math.isfinite(cutoff) or cutoff > horizon:
        raise KernelError(
            "covariance does not decay below %.1e * C(0) within the cutoff horizon "
            "1e3 * decay scale; correlation time diverges" % TAIL_RELTOL
        )
    return _abs_integral(kernel, 0.0, cutoff) / c0


def correlation_time(spec: ExcitationSpec) -> float:
    """Correlation time ``C(0)**-1 * integral_0^inf |C(u)| du``."""
    return _tau_of_kernel(spec.kernel)


def gaussian_filter_family(variance: float, peak_freq: float):
    """Family ``a -> GaussianFilterKernel(variance, a, peak_freq)`` for calibration."""

    def make(a: float) -> GaussianFilterKernel:
        return GaussianFilterKernel(variance=variance, shape=a, peak_freq=peak_freq)

    return make


def calibrate_shape(
    kernel_family: Callable[[float], object],
    target_tau: float,
    bracket=(1e-3, 1e3),
    reltol: float = 1e-6,
) -> float:
    """Shape parameter whose correlation time matches ``target_tau``.

    Bisection on ``bracket``; the correlation time must be monotone
    (decreasing) in the shape parameter over the bracket.
    """
    if target_tau <= 0:
        raise ValueError("target correlation time must be positive")
    lo, hi = bracket
    tau_lo = _tau_of_kernel(kernel_family(lo))
    tau_hi = _tau_of_kernel(kernel_family(hi))
    # tau decreases with the shape parameter, so tau(lo) > tau(hi)
    if not (tau_hi <= target_tau <= tau_lo):
        raise CalibrationError(
            f"target tau={target_tau:g} outside bracket range: "
            f"tau({lo:g})={tau_lo:g}, tau({hi:g})={tau_hi:g}"
        )
    a = 0.5 * (lo + hi)
    for _ in range(200):
        a = 0.5 * (lo + hi)
        tau = _tau_of_kernel(kernel_family(a))
        if abs(tau - target_tau) <= reltol * target_tau:
            return a
        if tau > target_tau:
            lo = a
        else:
            hi = a
    raise CalibrationError(
        f"bisection did not reach relative tolerance {reltol:g}; last shape {a:g}"
    )


def _covariance_matrix(kernel, times: np.ndarray) -> np.ndarray:
    return kernel.at_lag(times[:, None] - times[None, :])


def _factor_psd(cov: np.ndarray, jitter: float) -> np.ndarray:
    """Lower-triangular-like factor L with L @ L.T = cov (up to jitter)."""
    if cov.size == 0:
        return cov.reshape(0, 0)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    if jitter > 0.0:
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            pass
    # Degenerate but genuinely PSD matrices (e.g. zero variance directions)
    # are factored through the symmetric eigendecomposition.
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    scale = max(abs(w[-1]), 1.0)
    if w[0] < -1e-8 * scale:
        raise NotPositiveSemidefiniteError(
            f"joint covariance is not PSD after jitter {jitter:.1e}: "
            f"min eigenvalue {w[0]:.3e}"
        )
    return v * np.sqrt(np.clip(w, 0.0, None))


_BLOCK_PATHS = 4096


def _block_rng(seed, block: int) -> np.random.Generator:
    """Deterministic per-block substream; ``seed`` may be an int or a tuple."""
    if isinstance(seed, (tuple, list)):
        key = tuple(int(s) for s in seed) + (int(block),)
    else:
        key = (int(seed), int(block))
    return np.random.default_rng(key)


def _sample_dense(spec, times, n_paths, seed, initial_law):
    m = len(times)
    dim = 0
    mean0 = cov0 = None
    if initial_law is not None:
        mean0, cov0 = initial_law
        mean0 = np.asarray(mean0, dtype=float)
        cov0 = np.asarray(cov0, dtype=float)
        dim = mean0.shape[0]

    kernel = spec.kernel
    joint = np.zeros((dim + m, dim + m))
    if dim:
        joint[:dim, :dim] = cov0
        cross = np.stack([spec.cross_cov_at(t, dim) for t in times], axis=1)  # (dim, m)
        joint[:dim, dim:] = cross
        joint[dim:, :dim] = cross.T
    joint[dim:, dim:] = _covariance_matrix(kernel, times)

    factor = _factor_psd(joint, PSD_JITTER * kernel.variance)
    mean = np.concatenate([mean0 if dim else np.empty(0), spec.mean_at(times)])

    out = np.empty((n_paths, dim + m))
    start = 0
    block = 0
    while start < n_paths:
        stop = min(start + _BLOCK_PATHS, n_paths)
        z = _block_rng(seed, block).standard_normal((dim + m, stop - start))
        out[start:stop] = (factor @ z).T + mean
        start = stop
        block += 1
    x0 = out[:, :dim] if dim else None
    return out[:, dim:], x0


def _sample_circulant(spec, times, n_paths, seed):
    """FFT sampling via circulant embedding (stationary kernel, uniform grid)."""
    m = len(times)
    dt = times[1] - times[0]
    kernel = spec.kernel
    size = 1 << max(1, int(math.ceil(math.log2(2 * (m - 1)))))
    lags = np.minimum(np.arange(size), size - np.arange(size)) * dt
    eig = np.fft.fft(kernel.at_lag(lags)).real
    floor = -1e-8 * max(eig.max(), 1e-300)
    if eig.min() < floor:
        return None  # embedding not PSD; caller falls back to dense
    eig = np.clip(eig, 0.0, None)
    amp = np.sqrt(eig / size)

    mean = spec.mean_at(times)
    out = np.empty((n_paths, m))
    start = 0
    block = 0
    while start < n_paths:
        stop = min(start + _BLOCK_PATHS, n_paths)
        n_cplx = (stop - start + 1) // 2
        rng = _block_rng(seed, block)
        z = rng.standard_normal((n_cplx, size)) + 1j * rng.standard_normal((n_cplx, size))
        fields = np.fft.fft(amp * z, axis=1)
        pair = np.empty((2 * n_cplx, m))
        pair[0::2] = fields.real[:, :m]
        pair[1::2] = fields.imag[:, :m]
        out[start:stop] = pair[: stop - start] + mean
        start = stop
        block += 1
    return out


def sample_paths(
    spec: ExcitationSpec,
    grid,
    n_paths: int,
    seed: int,
    initial_law=None,
    method: str = "auto",
):
    """Draw exact Gaussian paths of the scalar excitation on ``grid``.

    When ``initial_law = (mean, cov)`` is given, the initial state is drawn
    jointly with the excitation (honoring the cross-covariance function) and
    returned alongside the ensemble as an ``(n_paths, N)`` array.

    ``method``: 'dense' factorizes the joint covariance (robust, any kernel);
    'circulant' uses FFT embedding (stationary kernel, uniform grid, no
    cross-covariance); 'auto' picks circulant for long grids when eligible.
    """
    times = np.asarray(grid, dtype=float)
    if times.ndim != 1 or len(times) < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be 1-D and strictly increasing")
    if spec.is_white:
        raise KernelError("white-noise excitation has no pointwise paths to sample")

    # Degenerate law: paths collapse to the mean function.
    if spec.kernel.variance == 0.0:
        values = np.broadcast_to(spec.mean_at(times), (n_paths, len(times))).copy()
        ensemble = PathEnsemble(times=times, values=values, seed=seed)
        if initial_law is not None:
            mean0, cov0 = initial_law
            factor = _factor_psd(np.asarray(cov0, dtype=float), 0.0)
            x0 = np.empty((n_paths, len(mean0)))
            start, block = 0, 0
            while start < n_paths:
                stop = min(start + _BLOCK_PATHS, n_paths)
                z = _block_rng(seed, block).standard_normal((len(mean0), stop - start))
                x0[start:stop] = (factor @ z).T + np.asarray(mean0, dtype=float)
                start, block = stop, block + 1
            return ensemble, x0
        return ensemble

    uniform = len(times) > 2 and np.allclose(
        np.diff(times), times[1] - times[0], rtol=1e-9, atol=0.0
    )
    use_circulant = (
        method == "circulant"
        or (method == "auto" and uniform and len(times) > 600 and initial_law is None
            and spec.cross_cov_fn is None)
    )
    if use_circulant:
        if not uniform:
            raise ValueError("circulant sampling requires a uniform time grid")
        values = _sample_circulant(spec, times, n_paths, seed)
        if values is not None:
            return PathEnsemble(times=times, values=values, seed=seed)
        # fall through to dense on embedding failure

    values, x0 = _sample_dense(spec, times, n_paths, seed, initial_law)
    ensemble = PathEnsemble(times=times, values=values, seed=seed)
    if initial_law is not None:
        return ensemble, x0
    return ensemble
