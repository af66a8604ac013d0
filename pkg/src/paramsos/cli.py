"""Command line entry point: ``paramsos {powerflow,certify,sweep,validate}``.

Exit statuses: 0 success, 1 counterexample or internal failure, 2 empty
region, 3 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .equilibrium import NewtonDivergence, SingularJacobian, newton_powerflow
from .network import NetworkError

EXIT_OK, EXIT_FAIL, EXIT_EMPTY, EXIT_CONFIG = 0, 1, 2, 3

logger = logging.getLogger("paramsos")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML configuration file")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers")
    common.add_argument("--seed", type=int, default=None, help="master seed, overrides the config")
    common.add_argument("--dump-trajectories", action="store_true",
                        help="write counterexample trajectories as CSV")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="paramsos", description="Certified droop-gain stability regions for inverter microgrids.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("powerflow", parents=[common], help="nominal power flow and nominal disturbances")
    c = sub.add_parser("certify", parents=[common], help="certified region for one (alpha, c)")
    c.add_argument("--alpha", type=float, default=None, help="disturbance width, overrides the config")
    c.add_argument("--c", type=float, default=None, help="equilibrium domain size, overrides the config")
    sub.add_parser("sweep", parents=[common], help="certify every (alpha, c) in the config grid")
    v = sub.add_parser("validate", parents=[common], help="Monte Carlo check of a stored result")
    v.add_argument("result", nargs="?", default=None, help="result file (default: OUT/result.json)")
    v.add_argument("--samples", type=int, default=None, help="number of samples, overrides the config")
    return p


def _settings(cfg, args):
    s = cfg.analysis
    if args.seed is not None:
        s = dataclasses.replace(s, seed=args.seed)
    if args.jobs < 1:
        raise ConfigError("--jobs", "must be at least 1")
    return s


def cmd_powerflow(cfg, args) -> int:
    from .report import atomic_write, dumps, powerflow_dict, powerflow_text

    pf = newton_powerflow(cfg.network)
    out = Path(args.out)
    atomic_write(out / "powerflow.json", dumps(powerflow_dict(cfg, pf)))
    text = powerflow_text(cfg, pf)
    atomic_write(out / "powerflow.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_certify(cfg, args) -> int:
    from .pipeline import certify_cell
    from .report import write_cell

    s = _settings(cfg, args)
    alpha = s.alpha if args.alpha is None else args.alpha
    c = s.c if args.c is None else args.c
    if alpha < 0:
        raise ConfigError("--alpha", "must be non-negative")
    if c <= 0:
        raise ConfigError("--c", "must be positive")
    cell = certify_cell(cfg, alpha, c, s)
    write_cell(args.out, cfg, cell, s)
    for t in cell.trace:
        print(t.line())
    if cell.status == "empty":
        print(f"empty region: {cell.message}", file=sys.stderr)
        return EXIT_EMPTY
    note = " (cap reached)" if cell.status == "cap" else ""
    print(f"beta* = {cell.beta_star:.6g}{note}")
    return EXIT_OK


def cmd_sweep(cfg, args) -> int:
    from .pipeline import build_cell, per_inverter_polygons, sweep
    from .report import atomic_write, dumps, polygon_name, polygon_text, sweep_dict, sweep_tsv, write_cell

    s = _settings(cfg, args)
    cells = sweep(cfg, s.alphas, s.cs, s, jobs=args.jobs)
    out = Path(args.out)
    for cell in cells:
        if cell.problem is None:
            cell.model, cell.problem = build_cell(cfg, cell.alpha, cell.c, s)
        cdir = out / f"cell_a{cell.alpha:g}_c{cell.c:g}"
        write_cell(cdir, cfg, cell, s)
        if cell.status != "error":
            for poly in per_inverter_polygons(cell, s):
                atomic_write(out / polygon_name(cell, poly), polygon_text(cfg, cell, poly))
    atomic_write(out / "sweep.json", dumps(sweep_dict(cfg, cells)))
    table = sweep_tsv(cfg, cells)
    atomic_write(out / "sweep.tsv", table)
    print(table, end="")
    return EXIT_FAIL if any(c.status == "error" for c in cells) else EXIT_OK


def cmd_validate(cfg, args) -> int:
    from .pipeline import build_cell
    from .report import atomic_write, check_spec_from_result, dumps, load_result, validation_dict
    from .validate import dump_trajectory, monte_carlo_check, replay_sample

    s = _settings(cfg, args)
    path = Path(args.result) if args.result else Path(args.out) / "result.json"
    data = load_result(path, cfg)
    if data["status"] == "empty":
        print("result is an empty region; nothing to validate", file=sys.stderr)
        return EXIT_EMPTY
    _, prob = build_cell(cfg, float(data["alpha"]), float(data["c"]), s)
    spec = check_spec_from_result(prob, data)
    n = s.mc_samples if args.samples is None else args.samples
    rep = monte_carlo_check(spec, n, s.seed, s.horizon, s.dt, s.dwell, jobs=args.jobs)
    out = Path(args.out)
    atomic_write(out / "validation.json", dumps(validation_dict(cfg, data, rep)))
    atomic_write(out / "validation.txt", rep.to_text())
    if args.dump_trajectories:
        names = list(spec.system.states)
        for cex in rep.counterexamples:
            if cex.index >= 0:
                traj = replay_sample(spec, cex.index, s.seed, s.horizon, s.dt, s.dwell)
                p = out / "trajectories" / f"sample_{cex.index:05d}.csv"
                p.parent.mkdir(parents=True, exist_ok=True)
                dump_trajectory(p, traj, 0, names)
    print(rep.to_text(), end="")
    return EXIT_OK if rep.passed else EXIT_FAIL


COMMANDS = {"powerflow": cmd_powerflow, "certify": cmd_certify, "sweep": cmd_sweep, "validate": cmd_validate}


def main(argv=None) -> int:
    from .report import FingerprintMismatch, ResultFileError

    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FingerprintMismatch, ResultFileError, NetworkError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NewtonDivergence, SingularJacobian) as exc:
        print(f"error: power flow failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
