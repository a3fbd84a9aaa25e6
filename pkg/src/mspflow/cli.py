"""Command-line entry point: medium generation, single runs, reference
comparison, the three parameter sweeps, and the verification battery.

Exit codes: 0 success, 2 invalid configuration or unwritable output,
3 solver failure.  ``MSPFLOW_THREADS`` caps sweep parallelism (sequential
by default); all outputs are byte-reproducible for a fixed config and seed.
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import linalg, mssolver, pimpes, verify
from .config import ConfigError, RunConfig, parse_bases
from .mesh import GridHierarchy
from .msbasis import BasisError
from .physics import gen_high_contrast, save_medium

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _fmt(x) -> str:
    return "%.17g" % float(x)


def write_field(path, grid: GridHierarchy, values: np.ndarray):
    """Cell field as CSV rows ``x,y,value`` with cell-center coordinates."""
    values = np.asarray(values, dtype=float).ravel()
    with open(path, "w") as f:
        f.write("x,y,value\n")
        for c in range(grid.n_cells):
            f.write(f"{_fmt(grid.cell_x[c])},{_fmt(grid.cell_y[c])},{_fmt(values[c])}\n")


def write_field_vtk(path, grid: GridHierarchy, values: np.ndarray, name: str):
    """Legacy VTK structured points with one cell-data scalar."""
    values = np.asarray(values, dtype=float).ravel()
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{name}\n")
        f.write("ASCII\n")
        f.write("DATASET STRUCTURED_POINTS\n")
        f.write(f"DIMENSIONS {grid.nx + 1} {grid.ny + 1} 1\n")
        f.write("ORIGIN 0 0 0\n")
        f.write(f"SPACING {_fmt(grid.h)} {_fmt(grid.h)} 1\n")
        f.write(f"CELL_DATA {grid.n_cells}\n")
        f.write(f"SCALARS {name} double 1\n")
        f.write("LOOKUP_TABLE default\n")
        for v in values:
            f.write(_fmt(v) + "\n")


def write_timeseries(path, header, rows):
    """CSV with a ``t`` column first; floats carry 17 significant digits."""
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _ensure_outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_probe")
        with open(probe, "w") as f:
            f.write("")
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"cannot write to output directory {path}: {exc}")


def _dump_run(cfg: RunConfig, prob, traj, outdir, label):
    _ensure_outdir(outdir)
    rep = verify.build_report(cfg, traj, prob)
    write_timeseries(os.path.join(outdir, f"{label}_report.csv"),
                     rep.header(), rep.rows())
    grid = prob.grid
    fields = {
        "s_w": traj.s_w[-1],
        "s_n": traj.s_n[-1],
        "p_w": traj.p_w[-1],
        "log_kappa": np.log(prob.medium.kappa),
    }
    for name, vals in fields.items():
        write_field(os.path.join(outdir, f"{label}_{name}.csv"), grid, vals)
        write_field_vtk(os.path.join(outdir, f"{label}_{name}.vtk"), grid,
                        vals, name)


def _error_series(cfg_list, trajs, reference, labels):
    """Rows (t, e_s per run) at output times shared by every run."""
    common = None
    for traj in trajs + [reference]:
        ts = set(round(t, 9) for t in traj.times if t > 0)
        common = ts if common is None else (common & ts)
    times = sorted(common)
    rows = []
    for t in times:
        row = [t]
        j = reference.index_at(t)
        for traj in trajs:
            k = traj.index_at(t)
            row.append(verify.l2_error(traj.s_w[k], reference.s_w[j]))
        rows.append(row)
    return ["t"] + [f"e_s_{lab}" for lab in labels], rows


def _run_ms_job(cfg):
    return mssolver.run_ms(cfg)


def _map_runs(cfgs):
    threads = int(os.environ.get("MSPFLOW_THREADS", "1") or "1")
    if threads > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_run_ms_job, cfgs))
    return [_run_ms_job(c) for c in cfgs]


# -- subcommands -----------------------------------------------------------


def cmd_gen_medium(args) -> int:
    grid = GridHierarchy(args.nx, args.ny, 1, args.Lx, args.Ly)
    medium = gen_high_contrast(grid, args.contrast, args.pattern, args.seed)
    save_medium(medium, args.out, grid=grid)
    print(f"wrote {args.nx}x{args.ny} medium (contrast {args.contrast}, "
          f"pattern {args.pattern}, seed {args.seed}) to {args.out}")
    return EXIT_OK


def cmd_run_fine(args) -> int:
    cfg = RunConfig.from_toml(args.config)
    outdir = args.out or cfg.output_dir
    prob = pimpes.FineProblem.from_config(cfg)
    traj = pimpes.run_fine(cfg, prob)
    _dump_run(cfg, prob, traj, outdir, "fine")
    print(f"fine run finished: {len(traj.times) - 1} snapshots, "
          f"wall {traj.wall_time:.1f}s, cfl suggestion {traj.cfl_suggestion:.4g}")
    return EXIT_OK


def cmd_run_ms(args) -> int:
    cfg = RunConfig.from_toml(args.config)
    outdir = args.out or cfg.output_dir
    prob = pimpes.FineProblem.from_config(cfg)
    traj = mssolver.run_ms(cfg, prob)
    _dump_run(cfg, prob, traj, outdir, f"ms_{cfg.bases}")
    print(f"ms run ({cfg.bases} bases) finished: wall {traj.wall_time:.1f}s")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = RunConfig.from_toml(args.config)
    outdir = args.out or cfg.output_dir
    _ensure_outdir(outdir)
    ref_cfg = RunConfig.from_toml(args.config)
    ref_cfg.dt = args.ref_dt
    ref_cfg.output_every = max(1, int(round(cfg.dt * cfg.output_every / args.ref_dt)))
    ref_cfg.validate()
    prob = pimpes.FineProblem.from_config(cfg)
    reference = pimpes.run_fine(ref_cfg, prob)
    traj = mssolver.run_ms(cfg, prob)
    rep = verify.build_report(cfg, traj, prob, reference=reference)
    write_timeseries(os.path.join(outdir, "compare_report.csv"),
                     rep.header(), rep.rows())
    print(f"final e_s = {rep.e_s[-1]:.6g} "
          f"(ms {cfg.bases} vs fine reference dt={args.ref_dt})")
    return EXIT_OK


def _sweep(args, vary, values, labels) -> int:
    cfg = RunConfig.from_toml(args.config)
    outdir = args.out or cfg.output_dir
    _ensure_outdir(outdir)
    ref_cfg = RunConfig.from_toml(args.config)
    ref_cfg.dt = args.ref_dt
    ref_cfg.output_every = max(1, int(round(cfg.dt * cfg.output_every / args.ref_dt)))
    ref_cfg.validate()
    reference = pimpes.run_fine(ref_cfg)
    cfgs = []
    for v in values:
        c = RunConfig.from_toml(args.config)
        vary(c, v)
        c.validate()
        cfgs.append(c)
    trajs = _map_runs(cfgs)
    header, rows = _error_series(cfgs, trajs, reference, labels)
    out = os.path.join(outdir, f"{args.name}.csv")
    write_timeseries(out, header, rows)
    finals = ", ".join(f"{lab}: {row:.4g}" for lab, row in zip(labels, rows[-1][1:]))
    print(f"wrote {out}; final errors: {finals}")
    return EXIT_OK


def cmd_sweep_dt(args) -> int:
    dts = [float(x) for x in args.dts.split(",")]

    def vary(c, dt):
        c.output_every = max(1, int(round(c.dt * c.output_every / dt)))
        c.dt = dt

    args.name = "sweep_dt"
    return _sweep(args, vary, dts, [f"dt{int(d)}" for d in dts])


def cmd_sweep_h(args) -> int:
    blocks = [int(x) for x in args.blocks.split(",")]

    def vary(c, b):
        c.block = b

    args.name = "sweep_h"
    return _sweep(args, vary, blocks, [f"n{b}" for b in blocks])


def cmd_sweep_bases(args) -> int:
    labels = args.bases.split(",")

    def vary(c, lab):
        c.ms_offline, c.ms_online = parse_bases(lab)

    args.name = "sweep_bases"
    return _sweep(args, vary, labels, [lab.replace("+", "p") for lab in labels])


def cmd_verify(args) -> int:
    from . import acceptance
    battery = acceptance.AcceptanceBattery(progress=print)
    results = battery.run_all()
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: {r.detail}")
    if failed:
        print(f"{len(failed)} of {len(results)} criteria failed")
        return 1
    print(f"all {len(results)} criteria passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mspflow",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-medium", help="generate a synthetic medium file")
    g.add_argument("--nx", type=int, default=100)
    g.add_argument("--ny", type=int, default=100)
    g.add_argument("--Lx", type=float, default=1.0)
    g.add_argument("--Ly", type=float, default=1.0)
    g.add_argument("--contrast", type=float, default=2000.0)
    g.add_argument("--pattern", default="symmetric",
                   choices=["channels", "blobs", "symmetric"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_medium)

    for name, func in (("run-fine", cmd_run_fine), ("run-ms", cmd_run_ms)):
        r = sub.add_parser(name, help=f"single {name.split('-')[1]} run")
        r.add_argument("--config", required=True)
        r.add_argument("--out", default=None)
        r.set_defaults(func=func)

    c = sub.add_parser("compare", help="ms run against a fine reference")
    c.add_argument("--config", required=True)
    c.add_argument("--out", default=None)
    c.add_argument("--ref-dt", type=float, default=100.0)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep-dt", help="error curves over time step sizes")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--dts", default="100,200,400,800")
    s.add_argument("--ref-dt", type=float, default=100.0)
    s.set_defaults(func=cmd_sweep_dt)

    s = sub.add_parser("sweep-h", help="error curves over coarse block sizes")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--blocks", default="5,10,20")
    s.add_argument("--ref-dt", type=float, default=100.0)
    s.set_defaults(func=cmd_sweep_h)

    s = sub.add_parser("sweep-bases", help="error curves over basis labels")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--bases", default="3+0,6+0,3+1")
    s.add_argument("--ref-dt", type=float, default=100.0)
    s.set_defaults(func=cmd_sweep_bases)

    v = sub.add_parser("verify", help="run the acceptance battery")
    v.add_argument("--fast", action="store_true",
                   help="skip the slowest criteria (development aid)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (linalg.SolverError, BasisError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
