"""Grid evolution of the response pdf.

The pdf-evolution equation

    df/dt + sum_n d/dx_n [(h_n + m_n(t)) f] = sum_{n,v} d2/dx_n dx_v [D_vn f]

is discretized in conservative finite-volume form on a uniform tensor grid:
advective and diffusive fluxes live on cell faces and telescope exactly, so
trapezoid-rule mass is conserved to solver precision under zero-flux
boundaries. Time stepping is Crank-Nicolson; the history-dependent diffusion
law closes a per-step fixed-point iteration on the moments that define the
mean Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import coefficients as coeffs
from .coefficients import DiffusionField, MomentHistory
from .dynamics import SystemModel, mean_jacobian
from .excitation import ExcitationSpec

__all__ = [
    "GridSpec",
    "PdfField",
    "SolverConfig",
    "ClosureError",
    "StepError",
    "gaussian_field",
    "assemble_operator",
    "step",
    "moment",
    "marginal",
    "evolve",
    "EvolveResult",
]


class ClosureError(RuntimeError):
    """Moment fixed-point iteration did not converge."""


class StepError(RuntimeError):
    """Linear solve of a Crank-Nicolson step failed to reach tolerance."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid: per-dimension extent and node count."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    num: Tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.num)):
            raise ValueError("grid extents and node counts must have equal length")
        for a, b, n in zip(self.lo, self.hi, self.num):
            if b <= a:
                raise ValueError(f"empty grid extent [{a}, {b}]")
            if n < 2:
                raise ValueError(f"grid needs at least 2 nodes per dimension, got {n}")

    @property
    def ndim(self) -> int:
        return len(self.num)

    def axes(self) -> List[np.ndarray]:
        return [np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, self.num)]

    def spacing(self) -> List[float]:
        return [(b - a) / (n - 1) for a, b, n in zip(self.lo, self.hi, self.num)]

    def cell_widths(self) -> List[np.ndarray]:
        """Control-volume widths: interior nodes own a full cell, boundary
        nodes a half cell (matches trapezoid-rule quadrature weights)."""
        out = []
        for d, n in zip(self.spacing(), self.num):
            w = np.full(n, d)
            w[0] = w[-1] = d / 2.0
            out.append(w)
        return out

    def mesh(self) -> np.ndarray:
        """Stacked coordinates, shape (*num, ndim)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def weights(self) -> np.ndarray:
        w = self.cell_widths()
        out = w[0]
        for wk in w[1:]:
            out = np.multiply.outer(out, wk)
        return out


@dataclass
class PdfField:
    """Nonnegative density values on a grid at one time instant."""

    values: np.ndarray
    grid: GridSpec
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != tuple(self.grid.num):
            raise ValueError(
                f"field shape {self.values.shape} does not match grid {self.grid.num}"
            )

    def mass(self) -> float:
        return float(np.sum(self.grid.weights() * self.values))

    def normalized(self) -> "PdfField":
        return PdfField(values=self.values / self.mass(), grid=self.grid, time=self.time)

    def copy(self) -> "PdfField":
        return PdfField(values=self.values.copy(), grid=self.grid, time=self.time)


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    closure_tol: float = 1e-6
    closure_max_iter: int = 10
    extrapolation_order: int = 2
    boundary: str = "zero_flux"
    renormalize: str = "never"  # or "each_step"
    upwind_blending: bool = True
    diffusion_floor: bool = True
    degenerate_stabilization: bool = True
    scheme: str = "crank_nicolson"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("time step must be positive")
        if self.closure_tol <= 0:
            raise ValueError("closure tolerance must be positive")
        if self.boundary != "zero_flux":
            raise ValueError(f"unsupported boundary condition {self.boundary!r}")
        if self.renormalize not in ("never", "each_step"):
            raise ValueError(f"unknown renormalization policy {self.renormalize!r}")


def gaussian_field(grid: GridSpec, mean, cov, time: float = 0.0) -> PdfField:
    """Gaussian density sampled at the nodes and renormalized on the grid."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    mesh = grid.mesh()
    diff = mesh - mean
    prec = np.linalg.inv(cov)
    quad_form = np.einsum("...i,ij,...j->...", diff, prec, diff)
    det = np.linalg.det(2.0 * np.pi * cov)
    values = np.exp(-0.5 * quad_form) / np.sqrt(det)
    f = PdfField(values=values, grid=grid, time=time)
    return f.normalized()


def moment(f: PdfField, functional: Callable) -> float:
    """Trapezoid-rule expectation of a scalar functional of the state."""
    mesh = f.grid.mesh()
    return float(np.sum(f.grid.weights() * np.asarray(functional(mesh)) * f.values))


def marginal(f: PdfField, axis: int):
    """Integrate out all other axes; returns (coordinates, density)."""
    w = f.grid.cell_widths()
    values = f.values
    for k in reversed(range(f.grid.ndim)):
        if k == axis:
            continue
        values = np.tensordot(values, w[k], axes=([k], [0]))
    return f.grid.axes()[axis], values


def _advection_entries(grid, q_face, axis, widths, spacing, d_face, blend):
    """COO entries of -d/dx_axis[q f] with face-centered hybrid fluxes.

    ``q_face`` holds face velocities (shape with axis reduced by one),
    ``d_face`` the same-direction diffusion at the faces, used for the cell
    Peclet number: faces with Pe > 2 blend toward first-order upwind.
    ``blend`` is False for globally degenerate directions (no diffusion
    anywhere along the axis): there advection is the entire physics and a
    Peclet-triggered full upwind would cut the scheme to first order.
    """
    n = grid.num
    shape = tuple(n)
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    lo_nodes = np.take(idx, np.arange(n[axis] - 1), axis=axis)
    hi_nodes = np.take(idx, np.arange(1, n[axis]), axis=axis)

    if blend:
        with np.errstate(divide="ignore"):
            pe = np.abs(q_face) * spacing[axis] / np.where(d_face > 0, d_face, 0.0)
        pe = np.where(d_face > 0, pe, np.inf)
        wgt = np.where(pe > 2.0, 1.0 - 2.0 / np.maximum(pe, 2.0), 0.0)
    else:
        wgt = np.zeros_like(q_face)
    theta_lo = (1.0 - wgt) / 2.0 + wgt * (q_face > 0)
    theta_hi = (1.0 - wgt) / 2.0 + wgt * (q_face <= 0)

    flux_lo = q_face * theta_lo  # coefficient of f at the lower node
    flux_hi = q_face * theta_hi

    w_ax = widths[axis]
    w_lo = np.take(w_ax, np.arange(n[axis] - 1))
    w_hi = np.take(w_ax, np.arange(1, n[axis]))
    bshape = [1] * len(n)
    bshape[axis] = n[axis] - 1
    w_lo = w_lo.reshape(bshape)
    w_hi = w_hi.reshape(bshape)

    rows, cols, vals = [], [], []
    # lower node loses the face flux, upper node gains it
    for node_rows, sign, wcell in ((lo_nodes, -1.0, w_lo), (hi_nodes, +1.0, w_hi)):
        rows.append(node_rows.ravel())
        cols.append(lo_nodes.ravel())
        vals.append((sign * flux_lo / wcell).ravel())
        rows.append(node_rows.ravel())
        cols.append(hi_nodes.ravel())
        vals.append((sign * flux_hi / wcell).ravel())
    return rows, cols, vals


def _diffusion_same_entries(grid, d_node, axis, widths, spacing):
    """COO entries of +d/dx_axis[ d/dx_axis (D f) ] in face-flux form."""
    n = grid.num
    idx = np.arange(int(np.prod(n))).reshape(n)
    lo_nodes = np.take(idx, np.arange(n[axis] - 1), axis=axis)
    hi_nodes = np.take(idx, np.arange(1, n[axis]), axis=axis)
    d_lo = np.take(d_node, np.arange(n[axis] - 1), axis=axis)
    d_hi = np.take(d_node, np.arange(1, n[axis]), axis=axis)

    w_ax = widths[axis]
    bshape = [1] * len(n)
    bshape[axis] = n[axis] - 1
    w_lo = np.take(w_ax, np.arange(n[axis] - 1)).reshape(bshape)
    w_hi = np.take(w_ax, np.arange(1, n[axis])).reshape(bshape)
    h = spacing[axis]

    rows, cols, vals = [], [], []
    # face flux G = (D_hi f_hi - D_lo f_lo) / h enters row_lo with +G/w and
    # row_hi with -G/w
    for node_rows, sign, wcell in ((lo_nodes, +1.0, w_lo), (hi_nodes, -1.0, w_hi)):
        rows.append(node_rows.ravel())
        cols.append(hi_nodes.ravel())
        vals.append((sign * d_hi / (h * wcell)).ravel())
        rows.append(node_rows.ravel())
        cols.append(lo_nodes.ravel())
        vals.append((-sign * d_lo / (h * wcell)).ravel())
    return rows, cols, vals


def _cross_derivative_matrix(grid, axis, spacing):
    """Sparse first-derivative along ``axis``: central in the interior,
    one-sided two-point at the walls."""
    n = grid.num
    size = int(np.prod(n))
    idx = np.arange(size).reshape(n)
    h = spacing[axis]
    rows, cols, vals = [], [], []

    interior = np.arange(1, n[axis] - 1)
    if len(interior):
        center = np.take(idx, interior, axis=axis).ravel()
        lo = np.take(idx, interior - 1, axis=axis).ravel()
        hi = np.take(idx, interior + 1, axis=axis).ravel()
        rows += [center, center]
        cols += [hi, lo]
        vals += [np.full(center.shape, 0.5 / h), np.full(center.shape, -0.5 / h)]
    first = np.take(idx, [0], axis=axis).ravel()
    second = np.take(idx, [1], axis=axis).ravel()
    rows += [first, first]
    cols += [second, first]
    vals += [np.full(first.shape, 1.0 / h), np.full(first.shape, -1.0 / h)]
    last = np.take(idx, [n[axis] - 1], axis=axis).ravel()
    prev = np.take(idx, [n[axis] - 2], axis=axis).ravel()
    rows += [last, last]
    cols += [last, prev]
    vals += [np.full(last.shape, 1.0 / h), np.full(last.shape, -1.0 / h)]
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
    ).tocsr()


def _mixed_entries(grid, d_node, flux_axis, deriv_axis, widths, spacing):
    """COO matrix of +d/dx_flux [ d/dx_deriv (D f) ] with face-averaged
    cross-derivatives; returns a CSR matrix directly."""
    n = grid.num
    size = int(np.prod(n))
    deriv = _cross_derivative_matrix(grid, deriv_axis, spacing)
    scale = sp.diags(d_node.ravel())
    G = deriv @ scale  # nodal values of d/dx_deriv (D f)

    idx = np.arange(size).reshape(n)
    lo_nodes = np.take(idx, np.arange(n[flux_axis] - 1), axis=flux_axis).ravel()
    hi_nodes = np.take(idx, np.arange(1, n[flux_axis]), axis=flux_axis).ravel()
    face_shape = tuple(
        n[k] - 1 if k == flux_axis else n[k] for k in range(len(n))
    )
    w_ax = widths[flux_axis]
    bshape = [1] * len(n)
    bshape[flux_axis] = n[flux_axis] - 1
    w_lo = np.broadcast_to(
        np.take(w_ax, np.arange(n[flux_axis] - 1)).reshape(bshape), face_shape
    ).ravel()
    w_hi = np.broadcast_to(
        np.take(w_ax, np.arange(1, n[flux_axis])).reshape(bshape), face_shape
    ).ravel()

    # face value = average of the two adjacent nodal cross-derivatives
    nfaces = len(lo_nodes)
    avg = sp.coo_matrix(
        (np.full(2 * nfaces, 0.5),
         (np.concatenate([np.arange(nfaces), np.arange(nfaces)]),
          np.concatenate([lo_nodes, hi_nodes]))),
        shape=(nfaces, size),
    ).tocsr()
    face_vals = avg @ G  # (nfaces, size) operator: f -> face cross-derivative

    take_lo = sp.coo_matrix(
        (1.0 / w_lo, (lo_nodes, np.arange(nfaces))), shape=(size, nfaces)
    ).tocsr()
    take_hi = sp.coo_matrix(
        (1.0 / w_hi, (hi_nodes, np.arange(nfaces))), shape=(size, nfaces)
    ).tocsr()
    return (take_lo - take_hi) @ face_vals


def _hyperviscosity_entries(grid, axis, widths, spacing, nu):
    """Conservative fourth-difference damping along ``axis``.

    A mixed second derivative paired with zero same-direction diffusion
    makes the second-order symbol indefinite: node-scale components along
    the degenerate axis grow like nu_bad = S_mix^2 / S_same * k^2 while the
    physical spectrum is untouched. The face flux
    ``nu (f_{i+2} - 3 f_{i+1} + 3 f_i - f_{i-1}) / h^3`` realizes -nu d4/dx4,
    damping those grid-scale components without changing conserved mass.
    """
    n = grid.num
    idx = np.arange(int(np.prod(n))).reshape(n)
    h = spacing[axis]
    m = n[axis]
    # faces i+1/2 with full stencils: i in [1, m-3]
    inner = np.arange(1, m - 2)
    if len(inner) == 0 or nu == 0.0:
        return [], [], []
    stencil = {
        -1: -1.0,
        0: +3.0,
        1: -3.0,
        2: +1.0,
    }
    face_lo = np.take(idx, inner, axis=axis)      # node i of face i+1/2
    face_hi = np.take(idx, inner + 1, axis=axis)  # node i+1
    w_ax = widths[axis]
    bshape = [1] * len(n)
    bshape[axis] = len(inner)
    w_lo = np.broadcast_to(np.take(w_ax, inner).reshape(bshape), face_lo.shape)
    w_hi = np.broadcast_to(np.take(w_ax, inner + 1).reshape(bshape), face_lo.shape)

    rows, cols, vals = [], [], []
    for off, coef in stencil.items():
        col_nodes = np.take(idx, inner + off, axis=axis)
        flux_coef = nu * coef / h**3
        # L -= div(F): node i gets -F/w_i, node i+1 gets +F/w_{i+1}
        rows.append(face_lo.ravel())
        cols.append(col_nodes.ravel())
        vals.append((-flux_coef / w_lo).ravel())
        rows.append(face_hi.ravel())
        cols.append(col_nodes.ravel())
        vals.append((+flux_coef / w_hi).ravel())
    return rows, cols, vals


def _degenerate_damping(D, grid, spacing, axis):
    """Damping coefficient for a globally degenerate direction.

    Uses the worst static growth rate of the indefinite symbol,
    lam* = max_x (sym off-diagonal)^2 / (same-direction diffusion), placed
    at a cutoff wavenumber one third of Nyquist, so damping exceeds growth
    for every representable node-scale component.
    """
    ndim = grid.ndim
    lam = 0.0
    for other in range(ndim):
        if other == axis:
            continue
        s_mix = 0.5 * (D[..., axis, other] + D[..., other, axis])
        s_same = D[..., other, other]
        mask = s_same > 0
        if np.any(mask):
            lam = max(lam, float(np.max(s_mix[mask] ** 2 / s_same[mask])))
    if lam == 0.0:
        return 0.0
    k_cut = np.pi / (3.0 * spacing[axis])
    return lam / k_cut**2


def assemble_operator(
    model: SystemModel,
    mean_force: np.ndarray,
    D_field: DiffusionField,
    grid: GridSpec,
    t: float,
    upwind_blending: bool = True,
    diffusion_floor: bool = True,
    degenerate_stabilization: bool = True,
) -> sp.csr_matrix:
    """Sparse spatial operator L with df/dt = L f in flux-conservative form.

    ``mean_force`` is the N-vector of excitation means added to the drift;
    ``D_field.values`` has shape (*grid.num, N, N) with entry (v, n)
    multiplying d2/dx_n dx_v.

    ``diffusion_floor`` clamps same-direction diagonal coefficients at zero.
    The history closure can turn those entries slightly negative in far-tail
    cells during early transients; the continuous equation tolerates this,
    but on a grid the locally anti-diffusive stencil amplifies node-scale
    noise without bound. The floor engages only where the density is
    negligible for the supported scenarios.
    """
    D = np.asarray(D_field.values)
    if not np.all(np.isfinite(D)):
        bad = np.argwhere(~np.isfinite(D))
        raise ValueError(f"non-finite diffusion coefficient at node index {bad[0][:grid.ndim]}")
    ndim = grid.ndim
    axes = grid.axes()
    widths = grid.cell_widths()
    spacing = grid.spacing()
    size = int(np.prod(grid.num))

    rows, cols, vals = [], [], []
    extra = None

    for n_ax in range(ndim):
        # face coordinates along n_ax, node coordinates elsewhere
        face_axes = list(axes)
        face_axes[n_ax] = 0.5 * (axes[n_ax][:-1] + axes[n_ax][1:])
        mesh_f = np.stack(np.meshgrid(*face_axes, indexing="ij"), axis=-1)
        q_face = model.drift(mesh_f, t)[..., n_ax] + mean_force[n_ax]

        d_same = D[..., n_ax, n_ax]
        if diffusion_floor:
            d_same = np.maximum(d_same, 0.0)
        d_lo = np.take(d_same, np.arange(grid.num[n_ax] - 1), axis=n_ax)
        d_hi = np.take(d_same, np.arange(1, grid.num[n_ax]), axis=n_ax)
        d_face = 0.5 * (d_lo + d_hi)

        diffusive_direction = bool(np.any(d_same > 0))
        r, c, v = _advection_entries(
            grid, q_face, n_ax, widths, spacing, d_face,
            upwind_blending and diffusive_direction,
        )
        rows += r
        cols += c
        vals += v

        if np.any(d_same):
            r, c, v = _diffusion_same_entries(grid, d_same, n_ax, widths, spacing)
            rows += r
            cols += c
            vals += v

        if degenerate_stabilization and not diffusive_direction:
            nu = _degenerate_damping(D, grid, spacing, n_ax)
            r, c, v = _hyperviscosity_entries(grid, n_ax, widths, spacing, nu)
            rows += r
            cols += c
            vals += v

        for v_ax in range(ndim):
            if v_ax == n_ax:
                continue
            d_mix = D[..., v_ax, n_ax]
            if not np.any(d_mix):
                continue
            m = _mixed_entries(grid, d_mix, n_ax, v_ax, widths, spacing)
            extra = m if extra is None else extra + m

    L = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
    ).tocsr()
    if extra is not None:
        L = L + extra
    return L


class _CachedLU:
    """Sparse LU factorization reused while the matrix content is unchanged
    (time-independent operators factorize once for the whole run)."""

    def __init__(self):
        self._fingerprint = None
        self._lu = None

    def solve(self, A_csc: sp.csc_matrix, rhs: np.ndarray) -> np.ndarray:
        fp = (A_csc.nnz, A_csc.data, A_csc.indices)
        hit = (
            self._fingerprint is not None
            and self._fingerprint[0] == fp[0]
            and np.array_equal(self._fingerprint[1], fp[1])
            and np.array_equal(self._fingerprint[2], fp[2])
        )
        if not hit:
            try:
                self._lu = splu(A_csc)
            except RuntimeError as exc:
                raise StepError(f"sparse factorization failed: {exc}") from exc
            self._fingerprint = (A_csc.nnz, A_csc.data.copy(), A_csc.indices.copy())
        return self._lu.solve(rhs)


def step(f: PdfField, L_now: sp.csr_matrix, L_next: sp.csr_matrix, dt: float,
         lu_cache: Optional[_CachedLU] = None):
    """One Crank-Nicolson step; returns (new field, clipped mass)."""
    size = f.values.size
    eye = sp.identity(size, format="csr")
    A = (eye - 0.5 * dt * L_next).tocsc()
    rhs = f.values.ravel() + 0.5 * dt * (L_now @ f.values.ravel())
    cache = lu_cache if lu_cache is not None else _CachedLU()
    sol = cache.solve(A, rhs)
    resid = np.max(np.abs(A @ sol - rhs))
    if resid > 1e-10 * max(1.0, np.max(np.abs(rhs))):
        raise StepError(f"linear solve residual {resid:.2e} above tolerance")
    new = sol.reshape(f.values.shape)
    neg = new < 0
    clipped = -float(np.sum(new[neg] * f.grid.weights()[neg])) if np.any(neg) else 0.0
    new = np.where(neg, 0.0, new)
    return PdfField(values=new, grid=f.grid, time=f.time + dt), clipped


@dataclass
class EvolveResult:
    fields: List[PdfField]
    history: MomentHistory
    diagnostics: Dict[str, object] = field(default_factory=dict)


def _predict(values: List[float], order: int) -> float:
    """Extrapolate the next moment: constant, then linear, then quadratic
    through the last three committed values (uniform steps)."""
    k = len(values)
    if k == 1 or order == 0:
        return values[-1]
    if k == 2 or order == 1:
        return 2.0 * values[-1] - values[-2]
    return 3.0 * values[-1] - 3.0 * values[-2] + values[-3]


def evolve(
    model: SystemModel,
    spec: ExcitationSpec,
    f0: PdfField,
    config: SolverConfig,
    method: str,
    t_end: float,
    output_times: Optional[Sequence[float]] = None,
    zeta: float = None,
    omega0: float = None,
) -> EvolveResult:
    """March the pdf from f0.time to t_end under the chosen diffusion law.

    ``method`` is one of 'fpk', 'sct', 'ngfpk', 'linear_exact'. Only the
    history method requires the per-step moment fixed point; the others have
    pdf-independent diffusion and take a single Crank-Nicolson solve per
    step.
    """
    method = method.replace("-", "_")
    if method not in ("fpk", "sct", "ngfpk", "linear_exact"):
        raise ValueError(f"unknown method {method!r}")
    grid = f0.grid
    mesh = grid.mesh()
    t0 = f0.time
    n_steps = int(round((t_end - t0) / config.dt))
    if abs(t0 + n_steps * config.dt - t_end) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError("t_end must be an integer number of steps from the start time")

    out_times = sorted(output_times) if output_times else [t_end]
    for ot in out_times:
        k = (ot - t0) / config.dt
        if abs(k - round(k)) > 1e-6:
            raise ValueError(f"output time {ot} is not aligned with the step size")

    history = MomentHistory(model.moment_basis)
    f = f0.copy()
    moments0 = {name: moment(f, model.basis_fns[name]) for name in model.moment_basis}
    R0 = mean_jacobian(model, moments0, t0)
    history.append(t0, R0, moments0)

    needs_closure = method == "ngfpk" and len(model.moment_basis) > 0
    mask = spec.mask_vector

    def build_field(t, hist_times, hist_R):
        return coeffs.diffusion_field(
            model, spec, mesh, t, t0, method,
            hist_times=hist_times, hist_R=hist_R, zeta=zeta, omega0=omega0,
        )

    def build_operator(t, D_field):
        m_force = mask * float(spec.mean_at(t))
        return assemble_operator(
            model, m_force, D_field, grid, t,
            config.upwind_blending, config.diffusion_floor,
            config.degenerate_stabilization,
        )

    D_now = build_field(t0, history.times, history.R_stack)
    L_now = build_operator(t0, D_now)

    fields: List[PdfField] = []
    out_queue = list(out_times)
    if out_queue and abs(out_queue[0] - t0) < 1e-12:
        fields.append(f.copy())
        out_queue.pop(0)

    series = {name: [moments0[name]] for name in model.moment_basis}
    diag = {
        "times": [t0],
        "mass": [f.mass()],
        "min_f": [float(f.values.min())],
        "clipped_mass": [0.0],
        "iterations": [0],
    }

    committed = {name: [moments0[name]] for name in model.moment_basis}
    lu_cache = _CachedLU()

    for k in range(n_steps):
        t_next = t0 + (k + 1) * config.dt
        preds = {
            name: _predict(committed[name], config.extrapolation_order)
            for name in model.moment_basis
        }
        hist_times = np.append(history.times, t_next)

        iterations = 0
        while True:
            R_next = mean_jacobian(model, preds, t_next)
            hist_R = np.concatenate([history.R_stack, R_next[None]], axis=0)
            D_next = build_field(t_next, hist_times, hist_R)
            L_next = build_operator(t_next, D_next)
            f_new, clipped = step(f, L_now, L_next, config.dt, lu_cache)
            iterations += 1
            if not needs_closure:
                new_moments = {
                    name: moment(f_new, model.basis_fns[name])
                    for name in model.moment_basis
                }
                break
            new_moments = {
                name: moment(f_new, model.basis_fns[name])
                for name in model.moment_basis
            }
            delta = max(abs(new_moments[n] - preds[n]) for n in model.moment_basis)
            if delta < config.closure_tol:
                break
            if iterations >= config.closure_max_iter:
                raise ClosureError(
                    f"moment closure did not converge at t={t_next:g}: "
                    f"last delta {delta:.3e} after {iterations} iterations"
                )
            preds = new_moments

        if config.renormalize == "each_step":
            f_new = f_new.normalized()

        R_commit = mean_jacobian(model, new_moments, t_next)
        history.append(t_next, R_commit, new_moments)
        for name in model.moment_basis:
            committed[name].append(new_moments[name])
            series[name].append(new_moments[name])

        f = f_new
        # the converged operator at t_next becomes next step's "now" side;
        # for the history method it differs from the committed moment by
        # less than the closure tolerance
        L_now = L_next

        diag["times"].append(t_next)
        diag["mass"].append(f.mass())
        diag["min_f"].append(float(f.values.min()))
        diag["clipped_mass"].append(clipped)
        diag["iterations"].append(iterations)

        if out_queue and abs(out_queue[0] - t_next) < 1e-9:
            fields.append(f.copy())
            out_queue.pop(0)

    diag["moment_series"] = {name: np.asarray(vals) for name, vals in series.items()}
    return EvolveResult(fields=fields, history=history, diagnostics=diag)
