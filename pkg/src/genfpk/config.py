"""Run configuration: flat key-value sections, parsed and validated into a
typed structure, with builders for the model/excitation/grid/solver objects.

The format is INI (stdlib configparser): one documented schema, all Duffing
quantities nondimensional, linear-oscillator quantities in SI. Example::

    [system]
    type = duffing
    zeta = 0.5

    [excitation]
    kernel = gaussian_filter
    variance = 0.36
    peak_freq = 2.5
    tau_rel = 0.3
    mean_type = constant
    mean_value = 0.0

    [initial]
    mean = 0.0 0.0
    cov = 0.3 0.0 0.0 0.3

    [grid]
    x1 = -3.0 3.0 121
    x2 = -3.0 3.0 121

    [solver]
    dt = 0.01
    t_end = 15.0

    [mc]
    n_paths = 100000
    dt = 0.005

    [output]
    times = 2.0 15.0

    [run]
    seed = 12345

``tau_rel`` (correlation time relative to the oscillator relaxation time
1/(zeta*omega0), overridable via ``tau_relax``) and ``shape`` are mutually
exclusive ways to fix the gaussian_filter kernel width; ``tau_rel`` is
converted at load time by calibrating the kernel's correlation time.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .dynamics import SystemModel, duffing_model, linear_oscillator_model
from .excitation import (
    ExcitationSpec,
    GaussianFilterKernel,
    OrnsteinUhlenbeckKernel,
    WhiteNoiseKernel,
    calibrate_shape,
    constant_mean,
    gaussian_filter_family,
    logistic_mean,
)
from .montecarlo import McConfig
from .solver import GridSpec, SolverConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "dump_config",
           "build_model", "build_excitation", "build_grid", "build_solver_config",
           "build_mc_config"]


class ConfigError(ValueError):
    """Invalid or missing configuration value; message names the key."""


@dataclass(frozen=True)
class SystemBlock:
    type: str
    zeta: float
    omega0: float = 1.0


@dataclass(frozen=True)
class ExcitationBlock:
    kernel: str
    variance: float = 0.0
    peak_freq: float = 0.0
    shape: Optional[float] = None
    tau_rel: Optional[float] = None
    tau_relax: Optional[float] = None
    timescale: Optional[float] = None
    intensity: Optional[float] = None
    mean_type: str = "constant"
    mean_value: float = 0.0
    mean_amplitude: float = 0.0
    mean_rate: float = 1.0
    mean_center: float = 0.0
    mask: Tuple[int, ...] = (0, 1)


@dataclass(frozen=True)
class InitialBlock:
    mean: Tuple[float, ...]
    cov: Tuple[float, ...]
    cross_cov: Optional[Tuple[float, ...]] = None


@dataclass(frozen=True)
class GridBlock:
    x1: Tuple[float, float, int]
    x2: Tuple[float, float, int]


@dataclass(frozen=True)
class SolverBlock:
    dt: float
    t_end: float
    closure_tol: float = 1e-6
    closure_max_iter: int = 10
    renormalize: str = "never"
    upwind_blending: bool = True


@dataclass(frozen=True)
class McBlock:
    n_paths: int = 100_000
    dt: float = 0.005
    substeps: int = 1


@dataclass(frozen=True)
class OutputBlock:
    times: Tuple[float, ...]


@dataclass(frozen=True)
class RunConfig:
    system: SystemBlock
    excitation: ExcitationBlock
    initial: InitialBlock
    grid: GridBlock
    solver: SolverBlock
    mc: McBlock
    output: OutputBlock
    seed: int = 0


def _get(parser, section, key, conv, default=None, required=False):
    if not parser.has_option(section, key):
        if required:
            raise ConfigError(f"missing required key {section}.{key}")
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {section}.{key}: {raw!r}") from exc


def _floats(raw: str) -> Tuple[float, ...]:
    return tuple(float(tok) for tok in raw.split())


def _ints(raw: str) -> Tuple[int, ...]:
    return tuple(int(tok) for tok in raw.split())


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(raw)


def _axis(raw: str) -> Tuple[float, float, int]:
    toks = raw.split()
    if len(toks) != 3:
        raise ValueError(raw)
    return float(toks[0]), float(toks[1]), int(toks[2])


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read_string(text)
    for section in ("system", "excitation", "initial", "grid", "solver", "output"):
        if not parser.has_section(section):
            raise ConfigError(f"missing required section [{section}]")

    system = SystemBlock(
        type=_get(parser, "system", "type", str, required=True).strip(),
        zeta=_get(parser, "system", "zeta", float, required=True),
        omega0=_get(parser, "system", "omega0", float, default=1.0),
    )
    if system.type not in ("duffing", "linear_oscillator"):
        raise ConfigError(f"system.type must be duffing or linear_oscillator, "
                          f"got {system.type!r}")
    if system.zeta <= 0:
        raise ConfigError("system.zeta must be positive")

    exc = ExcitationBlock(
        kernel=_get(parser, "excitation", "kernel", str, required=True).strip(),
        variance=_get(parser, "excitation", "variance", float, default=0.0),
        peak_freq=_get(parser, "excitation", "peak_freq", float, default=0.0),
        shape=_get(parser, "excitation", "shape", float),
        tau_rel=_get(parser, "excitation", "tau_rel", float),
        tau_relax=_get(parser, "excitation", "tau_relax", float),
        timescale=_get(parser, "excitation", "timescale", float),
        intensity=_get(parser, "excitation", "intensity", float),
        mean_type=_get(parser, "excitation", "mean_type", str, default="constant").strip(),
        mean_value=_get(parser, "excitation", "mean_value", float, default=0.0),
        mean_amplitude=_get(parser, "excitation", "mean_amplitude", float, default=0.0),
        mean_rate=_get(parser, "excitation", "mean_rate", float, default=1.0),
        mean_center=_get(parser, "excitation", "mean_center", float, default=0.0),
        mask=_get(parser, "excitation", "mask", _ints, default=(0, 1)),
    )
    if exc.kernel not in ("gaussian_filter", "ornstein_uhlenbeck", "white_noise"):
        raise ConfigError(f"excitation.kernel {exc.kernel!r} unknown")
    if exc.variance < 0:
        raise ConfigError("excitation.variance must be >= 0")
    if exc.kernel == "gaussian_filter":
        if (exc.shape is None) == (exc.tau_rel is None):
            raise ConfigError(
                "exactly one of excitation.shape and excitation.tau_rel is required"
            )
    if exc.kernel == "ornstein_uhlenbeck" and (exc.timescale is None or exc.timescale <= 0):
        raise ConfigError("excitation.timescale must be positive for ornstein_uhlenbeck")
    if exc.kernel == "white_noise" and (exc.intensity is None or exc.intensity < 0):
        raise ConfigError("excitation.intensity must be >= 0 for white_noise")
    if exc.mean_type not in ("constant", "logistic"):
        raise ConfigError(f"excitation.mean_type {exc.mean_type!r} unknown")

    initial = InitialBlock(
        mean=_get(parser, "initial", "mean", _floats, required=True),
        cov=_get(parser, "initial", "cov", _floats, required=True),
        cross_cov=_get(parser, "initial", "cross_cov", _floats),
    )
    dim = len(initial.mean)
    if len(initial.cov) != dim * dim:
        raise ConfigError(
            f"initial.cov needs {dim * dim} row-major entries, got {len(initial.cov)}"
        )

    grid = GridBlock(
        x1=_get(parser, "grid", "x1", _axis, required=True),
        x2=_get(parser, "grid", "x2", _axis, required=True),
    )

    solver = SolverBlock(
        dt=_get(parser, "solver", "dt", float, required=True),
        t_end=_get(parser, "solver", "t_end", float, required=True),
        closure_tol=_get(parser, "solver", "closure_tol", float, default=1e-6),
        closure_max_iter=_get(parser, "solver", "closure_max_iter", int, default=10),
        renormalize=_get(parser, "solver", "renormalize", str, default="never").strip(),
        upwind_blending=_get(parser, "solver", "upwind_blending", _bool, default=True),
    )
    if solver.dt <= 0:
        raise ConfigError("solver.dt must be positive")

    mc = McBlock(
        n_paths=_get(parser, "mc", "n_paths", int, default=100_000)
        if parser.has_section("mc") else 100_000,
        dt=_get(parser, "mc", "dt", float, default=0.005)
        if parser.has_section("mc") else 0.005,
        substeps=_get(parser, "mc", "substeps", int, default=1)
        if parser.has_section("mc") else 1,
    )

    output = OutputBlock(times=_get(parser, "output", "times", _floats, required=True))
    seed = _get(parser, "run", "seed", int, default=0) if parser.has_section("run") else 0
    return RunConfig(system=system, excitation=exc, initial=initial, grid=grid,
                     solver=solver, mc=mc, output=output, seed=seed)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Serialize back to the INI schema (drops unset optional keys)."""
    out = io.StringIO()

    def write(section, pairs):
        out.write(f"[{section}]\n")
        for key, val in pairs:
            if val is None:
                continue
            out.write(f"{key} = {_fmt(val)}\n")
        out.write("\n")

    write("system", [("type", cfg.system.type), ("zeta", cfg.system.zeta),
                     ("omega0", cfg.system.omega0)])
    e = cfg.excitation
    write("excitation", [
        ("kernel", e.kernel), ("variance", e.variance), ("peak_freq", e.peak_freq),
        ("shape", e.shape), ("tau_rel", e.tau_rel), ("tau_relax", e.tau_relax),
        ("timescale", e.timescale), ("intensity", e.intensity),
        ("mean_type", e.mean_type), ("mean_value", e.mean_value),
        ("mean_amplitude", e.mean_amplitude), ("mean_rate", e.mean_rate),
        ("mean_center", e.mean_center), ("mask", e.mask),
    ])
    write("initial", [("mean", cfg.initial.mean), ("cov", cfg.initial.cov),
                      ("cross_cov", cfg.initial.cross_cov)])
    write("grid", [("x1", cfg.grid.x1), ("x2", cfg.grid.x2)])
    s = cfg.solver
    write("solver", [("dt", s.dt), ("t_end", s.t_end), ("closure_tol", s.closure_tol),
                     ("closure_max_iter", s.closure_max_iter),
                     ("renormalize", s.renormalize),
                     ("upwind_blending", s.upwind_blending)])
    write("mc", [("n_paths", cfg.mc.n_paths), ("dt", cfg.mc.dt),
                 ("substeps", cfg.mc.substeps)])
    write("output", [("times", cfg.output.times)])
    write("run", [("seed", cfg.seed)])
    return out.getvalue()


def build_model(cfg: RunConfig) -> SystemModel:
    if cfg.system.type == "duffing":
        return duffing_model(cfg.system.zeta)
    return linear_oscillator_model(cfg.system.zeta, cfg.system.omega0)


def _mean_fn(e: ExcitationBlock):
    if e.mean_type == "constant":
        return constant_mean(e.mean_value)
    return logistic_mean(e.mean_amplitude, e.mean_rate, e.mean_center)


def build_excitation(cfg: RunConfig) -> ExcitationSpec:
    e = cfg.excitation
    if e.kernel == "white_noise":
        level = float(e.intensity)
        kernel = WhiteNoiseKernel(intensity=lambda t: level)
    elif e.kernel == "ornstein_uhlenbeck":
        kernel = OrnsteinUhlenbeckKernel(variance=e.variance, timescale=e.timescale)
    else:
        shape = e.shape
        if shape is None:
            tau_relax = e.tau_relax
            if tau_relax is None:
                tau_relax = 1.0 / (cfg.system.zeta * cfg.system.omega0)
            target = e.tau_rel * tau_relax
            shape = calibrate_shape(
                gaussian_filter_family(e.variance, e.peak_freq), target
            )
        kernel = GaussianFilterKernel(variance=e.variance, shape=shape,
                                      peak_freq=e.peak_freq)
    cross = None
    if cfg.initial.cross_cov is not None and any(cfg.initial.cross_cov):
        vec = np.asarray(cfg.initial.cross_cov, dtype=float)
        cross = lambda t: vec  # noqa: E731 - constant cross-covariance
    return ExcitationSpec(
        kernel=kernel,
        mean_fn=_mean_fn(e),
        cross_cov_fn=cross,
        component_mask=tuple(bool(m) for m in e.mask),
    )


def build_grid(cfg: RunConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec(lo=(g.x1[0], g.x2[0]), hi=(g.x1[1], g.x2[1]),
                    num=(g.x1[2], g.x2[2]))


def build_solver_config(cfg: RunConfig) -> SolverConfig:
    s = cfg.solver
    return SolverConfig(dt=s.dt, closure_tol=s.closure_tol,
                        closure_max_iter=s.closure_max_iter,
                        renormalize=s.renormalize,
                        upwind_blending=s.upwind_blending)


def build_mc_config(cfg: RunConfig, seed: Optional[int] = None) -> McConfig:
    return McConfig(
        n_paths=cfg.mc.n_paths,
        dt=cfg.mc.dt,
        output_times=tuple(cfg.output.times),
        seed=cfg.seed if seed is None else seed,
        substeps=cfg.mc.substeps,
    )
