"""Command-line entry point.

Subcommands:

* ``solve``  -- evolve the response pdf under a chosen diffusion law and
  write pdf/marginal/moment CSV artifacts plus a JSON run summary.
* ``mc``     -- Monte Carlo reference run with the same artifact schemas
  (moment rows gain a stderr column).
* ``compare``-- metric JSON (joint/marginal L1, peaks, mean/cov differences)
  between two artifact directories on matching grids and times.
* ``propagator-bench`` -- accuracy of the truncated propagator series
  against an RK4 reference on a mean-Jacobian trajectory rebuilt from a
  prior Monte Carlo moment history.

Exit codes: 0 success, 1 configuration/input error, 2 solver non-convergence.
CSV bodies are deterministic for a fixed config and seed; wall-clock
metadata is confined to the JSON summary.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, load_config
from .coefficients import MomentHistory
from .montecarlo import density_estimate, moment_estimate, simulate
from .propagator import MatrixTrajectory, magnus, peano_baker, rk4_transition
from .solver import (
    ClosureError,
    GridSpec,
    PdfField,
    StepError,
    evolve,
    gaussian_field,
    marginal,
)

CSV_VERSION = "genfpk-csv v1"
METHODS = ("fpk", "sct", "ngfpk", "linear-exact")


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def write_pdf_csv(path: Path, f: PdfField):
    axes = f.grid.axes()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {CSV_VERSION} pdf\n# t = {_fmt(f.time)}\n")
        fh.write("x1,x2,f\n")
        for i, x1 in enumerate(axes[0]):
            for j, x2 in enumerate(axes[1]):
                fh.write(f"{_fmt(x1)},{_fmt(x2)},{_fmt(f.values[i, j])}\n")


def write_marginal_csv(path: Path, f: PdfField):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {CSV_VERSION} marginal\n# t = {_fmt(f.time)}\n")
        fh.write("axis,x,f\n")
        for axis in range(f.grid.ndim):
            x, vals = marginal(f, axis)
            name = f"x{axis + 1}"
            for xi, vi in zip(x, vals):
                fh.write(f"{name},{_fmt(xi)},{_fmt(vi)}\n")


def write_moments_csv(path: Path, rows, with_stderr: bool):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {CSV_VERSION} moments\n")
        fh.write("t,name,value,stderr\n" if with_stderr else "t,name,value\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def write_bench_csv(path: Path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {CSV_VERSION} bench\n")
        fh.write("t,method,order,phi12,phi22,frob_err\n")
        for t, method, order, p12, p22, err in rows:
            fh.write(f"{_fmt(t)},{method},{order},{_fmt(p12)},{_fmt(p22)},{_fmt(err)}\n")


def read_csv(path: Path):
    """Returns (kind, header_time_or_None, column dict of arrays)."""
    meta_t = None
    kind = None
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            if CSV_VERSION in line:
                kind = line.split()[-1]
            elif "t =" in line:
                meta_t = float(line.split("=")[1])
            continue
        body.append(line)
    header = body[0].split(",")
    cols = {h: [] for h in header}
    for line in body[1:]:
        for h, tok in zip(header, line.split(",")):
            cols[h].append(tok)
    out = {}
    for h, toks in cols.items():
        try:
            out[h] = np.asarray([float(t) for t in toks])
        except ValueError:
            out[h] = np.asarray(toks)
    return kind, meta_t, out


def _field_from_pdf_csv(path: Path) -> PdfField:
    _, t, cols = read_csv(path)
    x1 = np.unique(cols["x1"])
    x2 = np.unique(cols["x2"])
    values = cols["f"].reshape(len(x1), len(x2))
    grid = GridSpec(lo=(x1[0], x2[0]), hi=(x1[-1], x2[-1]), num=(len(x1), len(x2)))
    return PdfField(values=values, grid=grid, time=t if t is not None else 0.0)


def _moment_rows_from_history(history: MomentHistory, names):
    rows = []
    times = history.times
    R = history.R_stack
    for k, t in enumerate(times):
        for name in names:
            rows.append((float(t), name, float(history.moments(name)[k])))
        for i in range(R.shape[1]):
            for j in range(R.shape[2]):
                rows.append((float(t), f"r{i + 1}{j + 1}", float(R[k, i, j])))
    return rows


def run_solve(config_path, out_dir, method, seed=None) -> int:
    t_start = time.time()
    cfg = load_config(config_path)
    method_norm = method.replace("-", "_")
    model = cfgmod.build_model(cfg)
    spec = cfgmod.build_excitation(cfg)
    grid = cfgmod.build_grid(cfg)
    solver_cfg = cfgmod.build_solver_config(cfg)
    mean0 = np.asarray(cfg.initial.mean)
    cov0 = np.asarray(cfg.initial.cov).reshape(model.dim, model.dim)
    f0 = gaussian_field(grid, mean0, cov0, time=0.0)

    result = evolve(
        model, spec, f0, solver_cfg, method_norm,
        t_end=cfg.solver.t_end, output_times=cfg.output.times,
        zeta=cfg.system.zeta, omega0=cfg.system.omega0,
    )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(result.fields):
        write_pdf_csv(out / f"pdf_{k:03d}.csv", f)
        write_marginal_csv(out / f"marginal_{k:03d}.csv", f)
    write_moments_csv(out / "moments.csv",
                      _moment_rows_from_history(result.history, model.moment_basis),
                      with_stderr=False)
    diag = result.diagnostics
    with open(out / "diagnostics.csv", "w", encoding="utf-8") as fh:
        fh.write(f"# {CSV_VERSION} diagnostics\n")
        fh.write("t,mass,min_f,clipped_mass,iterations\n")
        for k in range(len(diag["times"])):
            fh.write(",".join(_fmt(float(v)) for v in (
                diag["times"][k], diag["mass"][k], diag["min_f"][k],
                diag["clipped_mass"][k])) + f",{diag['iterations'][k]}\n")

    masses = np.asarray(diag["mass"])
    summary = {
        "command": "solve",
        "method": method,
        "config": str(config_path),
        "seed": cfg.seed if seed is None else seed,
        "output_times": list(map(float, cfg.output.times)),
        "mass_drift": float(np.max(np.abs(masses - masses[0]))),
        "max_closure_iterations": int(max(diag["iterations"])),
        "mean_closure_iterations": float(np.mean(diag["iterations"][1:]))
        if len(diag["iterations"]) > 1 else 0.0,
        "wall_time_s": time.time() - t_start,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return 0


def run_mc(config_path, out_dir, seed=None) -> int:
    t_start = time.time()
    cfg = load_config(config_path)
    model = cfgmod.build_model(cfg)
    spec = cfgmod.build_excitation(cfg)
    grid = cfgmod.build_grid(cfg)
    mc = cfgmod.build_mc_config(cfg, seed)
    mean0 = np.asarray(cfg.initial.mean)
    cov0 = np.asarray(cfg.initial.cov).reshape(model.dim, model.dim)

    sim = simulate(model, spec, mc, initial_law=(mean0, cov0))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, t in enumerate(sim.output_times):
        samples = sim.samples[k]
        est = density_estimate(samples, grid)
        est.field.time = float(t)
        write_pdf_csv(out / f"pdf_{k:03d}.csv", est.field)
        write_marginal_csv(out / f"marginal_{k:03d}.csv", est.field)
        for name, fn in (
            ("mean_x1", lambda s: s[:, 0]),
            ("mean_x2", lambda s: s[:, 1]),
            ("x1_sq", lambda s: s[:, 0] ** 2),
            ("x2_sq", lambda s: s[:, 1] ** 2),
        ):
            val, err = moment_estimate(samples, fn)
            rows.append((float(t), name, val, err))
    write_moments_csv(out / "moments.csv", rows, with_stderr=True)

    summary = {
        "command": "mc",
        "config": str(config_path),
        "seed": mc.seed,
        "n_paths": mc.n_paths,
        "n_excluded": sim.n_excluded,
        "output_times": list(map(float, sim.output_times)),
        "wall_time_s": time.time() - t_start,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return 0


def _l1(grid: GridSpec, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(grid.weights() * np.abs(a - b)))


def _marginal_metrics(f: PdfField, axis: int):
    x, vals = marginal(f, axis)
    k = int(np.argmax(vals))
    return x, vals, {"peak_value": float(vals[k]), "peak_location": float(x[k])}


def _mean_cov(f: PdfField):
    mesh = f.grid.mesh()
    w = f.grid.weights() * f.values
    total = float(w.sum())
    mean = np.einsum("ab,abi->i", w, mesh) / total
    diff = mesh - mean
    cov = np.einsum("ab,abi,abj->ij", w, diff, diff) / total
    return mean, cov


def run_compare(dir_a, dir_b, out_path=None) -> int:
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    pdfs_a = sorted(dir_a.glob("pdf_*.csv"))
    pdfs_b = sorted(dir_b.glob("pdf_*.csv"))
    if len(pdfs_a) != len(pdfs_b) or not pdfs_a:
        print(f"error: artifact directories hold {len(pdfs_a)} vs {len(pdfs_b)} pdf files",
              file=sys.stderr)
        return 1
    per_time = []
    for pa, pb in zip(pdfs_a, pdfs_b):
        fa = _field_from_pdf_csv(pa)
        fb = _field_from_pdf_csv(pb)
        if fa.grid != fb.grid:
            print(f"error: grid mismatch between {pa.name} and {pb.name}", file=sys.stderr)
            return 1
        if fa.time is not None and fb.time is not None and \
                abs(fa.time - fb.time) > 1e-9 * max(1.0, abs(fa.time)):
            print(f"error: output-time mismatch {fa.time} vs {fb.time}", file=sys.stderr)
            return 1
        entry = {"t": fa.time, "joint_l1": _l1(fa.grid, fa.values, fb.values)}
        for axis in (0, 1):
            name = f"x{axis + 1}"
            xa, va, peak_a = _marginal_metrics(fa, axis)
            _, vb, peak_b = _marginal_metrics(fb, axis)
            w = fa.grid.cell_widths()[axis]
            entry[f"marginal_l1_{name}"] = float(np.sum(w * np.abs(va - vb)))
            entry[f"peak_a_{name}"] = peak_a
            entry[f"peak_b_{name}"] = peak_b
            entry[f"peak_ratio_{name}"] = (
                peak_a["peak_value"] / peak_b["peak_value"]
                if peak_b["peak_value"] > 0 else float("inf")
            )
        mean_a, cov_a = _mean_cov(fa)
        mean_b, cov_b = _mean_cov(fb)
        entry["mean_diff"] = (mean_a - mean_b).tolist()
        entry["cov_diff"] = (cov_a - cov_b).tolist()
        entry["mean_a"] = mean_a.tolist()
        entry["mean_b"] = mean_b.tolist()
        per_time.append(entry)
    metrics = {"n_times": len(per_time), "per_time": per_time}
    text = json.dumps(metrics, indent=2)
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def run_propagator_bench(config_path, mc_dir, out_dir) -> int:
    """Truncation-error table of the propagator series on the recorded
    mean-Jacobian trajectory, RK4 as reference."""
    cfg = load_config(config_path)
    if cfg.system.type != "duffing":
        print("error: propagator bench expects the bistable system", file=sys.stderr)
        return 1
    zeta = cfg.system.zeta
    moments_path = Path(mc_dir) / "moments.csv"
    if not moments_path.exists():
        print(f"error: missing moment history {moments_path}", file=sys.stderr)
        return 1
    _, _, cols = read_csv(moments_path)
    sel = cols["name"] == "x1_sq"
    times = cols["t"][sel]
    m_vals = cols["value"][sel]
    order = np.argsort(times)
    times, m_vals = times[order], m_vals[order]
    if len(times) < 4:
        print("error: moment history too short for the bench", file=sys.stderr)
        return 1

    R = np.zeros((len(times), 2, 2))
    R[:, 0, 1] = 1.0
    R[:, 1, 0] = 1.0 - 3.0 * m_vals
    R[:, 1, 1] = -2.0 * zeta
    traj = MatrixTrajectory(times=times, matrices=R)

    s = float(times[0])
    rows = []
    for t in times[1:]:
        t = float(t)
        ref = rk4_transition(traj, t, s, steps=max(64, int((t - s) / 0.002))).value
        rows.append((t, "rk4", 0, ref[0, 1], ref[1, 1], 0.0))
        for n in (1, 2, 3, 4):
            ph = peano_baker(traj, t, s, n_terms=n).value
            err = float(np.linalg.norm(ph - ref))
            rows.append((t, "peano", n, ph[0, 1], ph[1, 1], err))
        for n in (1, 2, 3):
            ph = magnus(traj, t, s, n_terms=n).value
            err = float(np.linalg.norm(ph - ref))
            rows.append((t, "magnus", n, ph[0, 1], ph[1, 1], err))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out / "bench.csv", rows)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="genfpk",
        description="Response-pdf evolution under colored Gaussian noise",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="evolve the pdf under one diffusion law")
    p_solve.add_argument("--config", required=True)
    p_solve.add_argument("--out", required=True)
    p_solve.add_argument("--method", required=True, choices=METHODS)
    p_solve.add_argument("--seed", type=int, default=None)

    p_mc = sub.add_parser("mc", help="Monte Carlo reference run")
    p_mc.add_argument("--config", required=True)
    p_mc.add_argument("--out", required=True)
    p_mc.add_argument("--seed", type=int, default=None)

    p_cmp = sub.add_parser("compare", help="metric JSON between two artifact dirs")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--out", default=None)

    p_bench = sub.add_parser("propagator-bench",
                             help="propagator truncation errors vs RK4")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--mc-dir", required=True,
                         help="artifact dir of a prior mc run (moments.csv)")
    p_bench.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "solve":
            return run_solve(args.config, args.out, args.method, args.seed)
        if args.command == "mc":
            return run_mc(args.config, args.out, args.seed)
        if args.command == "compare":
            return run_compare(args.dir_a, args.dir_b, args.out)
        if args.command == "propagator-bench":
            return run_propagator_bench(args.config, args.mc_dir, args.out)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ClosureError, StepError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
