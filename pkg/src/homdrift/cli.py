"""Command line entry point: ``homdrift <command> [--config PATH] [--out DIR] [--eps LIST]``."""
from __future__ import annotations

import argparse
from dataclasses import replace
import logging
import os
import sys

import numpy as np

from .cell_solver import solve_corrector
from .coefficients import project_zero_mean_BC, sample_coefficients, verify_assumptions
from .effective import tabulate_Dstar, write_table_csv
from .geometry import build_cell_grid
from .gridio import write_grid
from .harness import RunConfig, _floats, _micro_job, build_effective_model, load_config, \
    run_convergence_study
from .macro_solver import macro_summary_rows, run_macro

logger = logging.getLogger("homdrift")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.eps:
        cfg = replace(cfg, eps_list=_floats(args.eps))
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")


def cmd_verify(cfg, args):
    grid = build_cell_grid(cfg.geometry, args.N or cfg.N_cell)
    disc, alpha = project_zero_mean_BC(sample_coefficients(cfg.coefficients, grid))
    rep = verify_assumptions(disc, grid, macro_halfwidth=cfg.L_macro)
    print(f"projection shift alpha = {alpha:.6e}")
    for line in rep.lines():
        print(line)
    return 0 if rep.passed else 1


def cmd_cell(cfg, args):
    grid = build_cell_grid(cfg.geometry, args.N or cfg.N_cell)
    disc, _ = project_zero_mean_BC(sample_coefficients(cfg.coefficients, grid))
    c = solve_corrector(grid, disc, args.u0)
    path = os.path.join(cfg.out_dir, "corrector.txt")
    write_grid(path, [c.w[0], c.w[1]], grid.fluid_mask)
    solv = float(np.abs(c.solvability).max())
    print(f"u0={args.u0} residual={c.residual_norm:.3e} solvability={solv:.3e} -> {path}")
    return 0


def cmd_effective(cfg, args):
    grid = build_cell_grid(cfg.geometry, args.N or cfg.N_cell)
    disc, _ = project_zero_mean_BC(sample_coefficients(cfg.coefficients, grid))
    table = tabulate_Dstar(disc, grid, cfg.u_max, cfg.n_samples, keep_correctors=False)
    path = os.path.join(cfg.out_dir, "effective.csv")
    write_table_csv(table, path)
    print(f"B* = {table.Bstar} -> {path}")
    return 0


def cmd_macro(cfg, args):
    _, _, table, _ = build_effective_model(cfg)
    cs = cfg.coefficients
    snaps = run_macro(table, cfg.L_macro, cfg.M_macro, cs.g, cfg.T, cfg.macro_dt,
                      cfg.snapshot_times, cs.f if cs.f.amplitude else None, cs.gN_kind, cs.k)
    path = os.path.join(cfg.out_dir, "macro_summary.csv")
    _write_rows(path, "t,mass,min,max,l2", macro_summary_rows(snaps))
    for t, st in snaps:
        write_grid(os.path.join(cfg.out_dir, f"macro_t{t:g}.txt"), [st.u])
    print(f"macro summary -> {path}")
    return 0


def cmd_micro(cfg, args):
    disc, _, table, _ = build_effective_model(cfg, cfg.cells_per_eps)
    for eps in cfg.eps_list:
        run = _micro_job(cfg, eps, disc, table.Bstar)
        tag = f"eps{eps:g}"
        path = os.path.join(cfg.out_dir, f"micro_{tag}_summary.csv")
        _write_rows(path, "t,mass,min,max,energy", run.rows)
        for t, st in run.snapshots:
            write_grid(os.path.join(cfg.out_dir, f"micro_{tag}_t{t:g}.txt"), [st.u],
                       st.domain.fluid_mask)
        print(f"eps={eps:g}: steps={run.n_steps} min={run.min_u:.3e} max={run.max_u:.4f} "
              f"M_bound={run.M_bound:.4f} energy={run.rows[-1][-1]:.4e} "
              f"(bound {run.energy_bound:.4e}) -> {path}")
    return 0


def cmd_converge(cfg, args):
    rep = run_convergence_study(cfg, write=True)
    for i, eps in enumerate(rep.eps_list):
        for j, t in enumerate(rep.times):
            print(f"eps={eps:<8g} t={t:<6g} l2_moving={rep.l2_moving[i, j]:.4e} "
                  f"h1_corrector={rep.h1_corrector[i, j]:.4e}")
    print(f"report -> {os.path.join(cfg.out_dir, 'report.csv')}")
    return 0


COMMANDS = {"verify": cmd_verify, "cell": cmd_cell, "effective": cmd_effective,
            "macro": cmd_macro, "micro": cmd_micro, "converge": cmd_converge}


def build_parser():
    p = argparse.ArgumentParser(prog="homdrift", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--eps", help="override eps list, e.g. '1/4 1/8 1/16'")
    p.add_argument("--N", type=int, default=None, help="cell resolution override")
    p.add_argument("--u0", type=float, default=0.0, help="macro value for 'cell'")
    p.add_argument("--seedless", action="store_true", default=True,
                   help="deterministic mode (always on; nothing is random)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _config(args)
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
