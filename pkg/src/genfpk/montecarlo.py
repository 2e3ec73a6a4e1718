"""Monte Carlo ground truth: pathwise integration under sampled colored-noise
excitations, histogram density estimates, and moment estimates with error
bars.

Smooth (colored) excitations are drawn exactly on a fine grid and treated as
known forcing inside a classical RK4 integrator (linear interpolation between
samples). White noise uses Euler-Maruyama with sqrt(dt) increments.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .dynamics import SystemModel
from .excitation import ExcitationSpec, sample_paths
from .solver import GridSpec, PdfField

__all__ = [
    "McConfig",
    "SimulationResult",
    "DensityEstimate",
    "simulate",
    "density_estimate",
    "moment_estimate",
]

_DIVERGENCE_NORM = 1e3


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 100_000
    dt: float = 0.005
    output_times: Tuple[float, ...] = ()
    seed: int = 0
    substeps: int = 1
    block_size: int = 8192

    def __post_init__(self):
        if self.n_paths < 1000:
            raise ValueError("Monte Carlo needs at least 1e3 paths")
        if self.dt <= 0:
            raise ValueError("integration step must be positive")
        if not self.output_times:
            raise ValueError("at least one output time is required")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


@dataclass
class SimulationResult:
    output_times: np.ndarray
    samples: np.ndarray  # (n_out, n_paths, dim)
    n_excluded: int
    seed: int

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.output_times - t)))
        if abs(self.output_times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} not among output times {self.output_times}")
        return self.samples[k]


def _rk4_sweep(model, x, forcing, mask, times, substeps):
    """Advance all paths over one sample interval with RK4 substeps.

    ``forcing`` holds the excitation at the interval endpoints; values
    between samples are linear interpolants.
    """
    t_a, t_b = times
    f_a, f_b = forcing
    h = (t_b - t_a) / substeps

    def force_at(tau):
        w = (tau - t_a) / (t_b - t_a)
        return (1.0 - w) * f_a + w * f_b

    for j in range(substeps):
        t_loc = t_a + j * h
        xi0 = force_at(t_loc)
        xi_half = force_at(t_loc + 0.5 * h)
        xi1 = force_at(t_loc + h)
        k1 = model.drift(x, t_loc) + xi0[:, None] * mask
        k2 = model.drift(x + 0.5 * h * k1, t_loc + 0.5 * h) + xi_half[:, None] * mask
        k3 = model.drift(x + 0.5 * h * k2, t_loc + 0.5 * h) + xi_half[:, None] * mask
        k4 = model.drift(x + h * k3, t_loc + h) + xi1[:, None] * mask
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def simulate(model: SystemModel, spec: ExcitationSpec, mc: McConfig,
             initial_law=None, t0: float = 0.0) -> SimulationResult:
    """Integrate response paths and record states at the output times.

    ``initial_law = (mean, cov)`` fixes the Gaussian initial state; it is
    drawn jointly with the excitation so a nonzero cross-covariance is
    honored. Paths exceeding norm 1e3 are excluded and counted.
    """
    if initial_law is None:
        raise ValueError("an initial law (mean, cov) is required")
    mask = spec.mask_vector
    active = np.nonzero(mask)[0]
    if len(active) != 1:
        raise ValueError("path simulation supports exactly one forced component")

    out_times = np.asarray(sorted(mc.output_times), dtype=float)
    t_end = out_times[-1]
    n_fine = int(round((t_end - t0) / mc.dt))
    if abs(t0 + n_fine * mc.dt - t_end) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError("final output time must be a multiple of the integration step")
    fine = t0 + mc.dt * np.arange(n_fine + 1)
    out_idx = []
    for ot in out_times:
        k = int(round((ot - t0) / mc.dt))
        if abs(fine[k] - ot) > 1e-9 * max(1.0, abs(ot)):
            raise ValueError(f"output time {ot} is not on the integration grid")
        out_idx.append(k)

    if spec.is_white:
        return _simulate_white(model, spec, mc, initial_law, fine, out_idx, t0)

    samples = np.empty((len(out_idx), mc.n_paths, model.dim))
    excluded = 0
    start = 0
    block_id = 0
    while start < mc.n_paths:
        stop = min(start + mc.block_size, mc.n_paths)
        n_blk = stop - start
        ens, x0 = sample_paths(
            spec, fine, n_blk, seed=(mc.seed, block_id), initial_law=initial_law
        )
        x = x0.copy()
        paths = ens.values  # (n_blk, n_fine+1)
        bad = np.zeros(n_blk, dtype=bool)
        rec = 0
        if out_idx[rec] == 0:
            samples[rec, start:stop] = x
            rec += 1
        for k in range(n_fine):
            x = _rk4_sweep(
                model, x, (paths[:, k], paths[:, k + 1]), mask,
                (fine[k], fine[k + 1]), mc.substeps,
            )
            bad |= ~np.all(np.isfinite(x), axis=1)
            safe = np.where(bad[:, None], 0.0, x)
            bad |= np.linalg.norm(safe, axis=1) > _DIVERGENCE_NORM
            if rec < len(out_idx) and out_idx[rec] == k + 1:
                samples[rec, start:stop] = x
                rec += 1
        if np.any(bad):
            excluded += int(np.sum(bad))
            samples[:, start:stop][:, bad] = np.nan
        start = stop
        block_id += 1

    if excluded:
        warnings.warn(f"{excluded} divergent paths excluded from the ensemble")
        keep = ~np.any(np.isnan(samples[..., 0]), axis=0)
        samples = samples[:, keep]
    return SimulationResult(
        output_times=out_times, samples=samples, n_excluded=excluded, seed=mc.seed
    )


def _simulate_white(model, spec, mc, initial_law, fine, out_idx, t0):
    """Euler-Maruyama for delta-correlated forcing with covariance 2 D(t) delta."""
    mask = spec.mask_vector
    mean0, cov0 = initial_law
    mean0 = np.asarray(mean0, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    try:
        chol0 = np.linalg.cholesky(cov0)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov0)
        chol0 = v * np.sqrt(np.clip(w, 0.0, None))
    h = fine[1] - fine[0]
    samples = np.empty((len(out_idx), mc.n_paths, model.dim))
    excluded = 0
    start = 0
    block_id = 0
    while start < mc.n_paths:
        stop = min(start + mc.block_size, mc.n_paths)
        n_blk = stop - start
        rng = np.random.default_rng((int(mc.seed), int(block_id)))
        x = mean0 + rng.standard_normal((n_blk, model.dim)) @ chol0.T
        bad = np.zeros(n_blk, dtype=bool)
        rec = 0
        if out_idx[rec] == 0:
            samples[rec, start:stop] = x
            rec += 1
        for k in range(len(fine) - 1):
            t = fine[k]
            amp = math.sqrt(2.0 * float(spec.kernel.intensity(t)) * h)
            kick = amp * rng.standard_normal(n_blk)
            x = x + h * (model.drift(x, t) + float(spec.mean_at(t)) * mask)
            x = x + kick[:, None] * mask
            bad |= ~np.all(np.isfinite(x), axis=1)
            safe = np.where(bad[:, None], 0.0, x)
            bad |= np.linalg.norm(safe, axis=1) > _DIVERGENCE_NORM
            if rec < len(out_idx) and out_idx[rec] == k + 1:
                samples[rec, start:stop] = x
                rec += 1
        if np.any(bad):
            excluded += int(np.sum(bad))
            samples[:, start:stop][:, bad] = np.nan
        start = stop
        block_id += 1
    out_times = fine[np.asarray(out_idx)]
    if excluded:
        warnings.warn(f"{excluded} divergent paths excluded from the ensemble")
        keep = ~np.any(np.isnan(samples[..., 0]), axis=0)
        samples = samples[:, keep]
    return SimulationResult(
        output_times=out_times, samples=samples, n_excluded=excluded, seed=mc.seed
    )


@dataclass
class DensityEstimate:
    field: PdfField
    n_outside: int
    smoothing: Optional[str] = None
    bandwidth: Optional[Tuple[float, ...]] = None


def density_estimate(samples: np.ndarray, grid: GridSpec,
                     smoothing: Optional[str] = None) -> DensityEstimate:
    """Histogram density on the grid's node-centered cells (unit mass).

    Cells are centered on grid nodes (half cells at the walls), so the
    estimate integrates to one under the same trapezoid rule used by the
    grid solver. Optional Gaussian smoothing uses Silverman's bandwidth and
    is tagged in the returned metadata.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 1000:
        raise ValueError("density estimation needs >= 1e3 samples of shape (n, dim)")
    if samples.shape[1] != grid.ndim:
        raise ValueError("sample dimension does not match grid dimension")

    edges = []
    for a, b, d in zip(grid.lo, grid.hi, grid.spacing()):
        inner = np.arange(a + d / 2.0, b, d)
        edges.append(np.concatenate([[a], inner, [b]]))
    counts, _ = np.histogramdd(samples, bins=edges)
    n_total = samples.shape[0]
    n_inside = int(counts.sum())
    n_outside = n_total - n_inside
    if n_outside > 1e-3 * n_total:
        warnings.warn(
            f"{n_outside} of {n_total} samples fall outside the grid "
            f"({100.0 * n_outside / n_total:.2f}% of mass)"
        )
    area = grid.weights()
    values = counts / (n_total * area)

    bandwidth = None
    if smoothing == "silverman":
        from scipy.ndimage import gaussian_filter

        sd = samples.std(axis=0, ddof=1)
        bw = sd * samples.shape[0] ** (-1.0 / 6.0)  # d = 2 Silverman rate
        sigma_cells = [b / d for b, d in zip(bw, grid.spacing())]
        values = gaussian_filter(values, sigma=sigma_cells, mode="constant")
        total = float(np.sum(values * area))
        if total > 0:
            values = values / total
        bandwidth = tuple(bw)
    elif smoothing is not None:
        raise ValueError(f"unknown smoothing {smoothing!r}")

    field = PdfField(values=values, grid=grid)
    return DensityEstimate(field=field, n_outside=n_outside,
                           smoothing=smoothing, bandwidth=bandwidth)


def moment_estimate(samples: np.ndarray, functional) -> Tuple[float, float]:
    """Sample mean and standard error of a scalar functional of the state."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        raise ValueError("moment estimation needs at least two samples")
    vals = np.asarray(functional(samples), dtype=float)
    mean = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(len(vals)))
    return mean, stderr
