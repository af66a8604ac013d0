"""Output files: JSON results, human-readable reports and polygon data.

Every machine-readable file carries the configuration fingerprint and the
tool version.  JSON is written with sorted keys and without timing data, so
an unchanged rerun reproduces it byte for byte.  All writes go through a
temporary file in the target directory followed by an atomic rename.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, settings_dict
from .polyring import parse
from .validate import CheckSpec

SCHEMA = 1


class FingerprintMismatch(ValueError):
    """A result file was produced from a different configuration."""


class ResultFileError(ValueError):
    """A result file is missing or unreadable."""


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def header(cfg: Config) -> dict:
    return {"fingerprint": cfg.fingerprint(), "version": __version__, "schema": SCHEMA}


def text_header(cfg: Config, title: str) -> str:
    return f"# {title}\n# fingerprint = {cfg.fingerprint()}\n# version = {__version__}\n"


# -- power flow ---------------------------------------------------------------


def powerflow_dict(cfg: Config, pf) -> dict:
    return {
        **header(cfg),
        "kind": "powerflow",
        "iterations": pf.iterations,
        "residual": pf.residual,
        "buses": [{"id": b, "v": pf.v[k], "theta": pf.theta[k], "p": pf.p[k], "q": pf.q[k]}
                  for k, b in enumerate(pf.bus_ids)],
        "delta_nominal": [{"inverter": i, "neighbor": n, "delta1": d1, "delta2": d2}
                          for (i, n), (d1, d2) in sorted(pf.delta_nominal.items())],
    }


def powerflow_text(cfg: Config, pf) -> str:
    out = [text_header(cfg, "nominal power flow"),
           f"converged in {pf.iterations} iterations, residual {pf.residual:.3e}\n\n",
           f"{'bus':<8}{'v':>12}{'theta':>12}{'p':>12}{'q':>12}\n"]
    for k, b in enumerate(pf.bus_ids):
        out.append(f"{b:<8}{pf.v[k]:12.6f}{pf.theta[k]:12.6f}{pf.p[k]:12.6f}{pf.q[k]:12.6f}\n")
    out.append(f"\n{'inverter':<10}{'neighbor':<10}{'delta1':>12}{'delta2':>12}\n")
    for (i, n), (d1, d2) in sorted(pf.delta_nominal.items()):
        out.append(f"{i:<10}{n:<10}{d1:12.6f}{d2:12.6f}\n")
    return "".join(out)


# -- certification --------------------------------------------------------------


def _trace(trace) -> list:
    return [{"beta": t.beta, "status": t.status, "residual": t.residual, "flagged": t.flagged,
             "message": t.message} for t in trace]


def cell_dict(cfg: Config, cell, settings=None) -> dict:
    """Machine-readable summary of one (alpha, c) cell."""
    from .pipeline import reported_delta

    d = {
        **header(cfg),
        "kind": "region",
        "alpha": cell.alpha,
        "c": cell.c,
        "status": cell.status,
        "beta_star": cell.beta_star,
        "cap_reached": cell.status == "cap",
        "message": cell.message,
        "trace": _trace(cell.trace),
        "blocks": [],
        "bounds": [],
    }
    if settings is not None:
        d["settings"] = settings_dict(settings)
    if cell.problem is not None:
        d["problem_fingerprint"] = cell.problem.fingerprint()
        d["delta"] = cell.problem.delta
        d["decrease_radius"] = cell.problem.template.decrease_radius
    if cell.result is not None:
        fz = cell.result.certificate
        d["residual"] = fz.residual
        for blk in fz.blocks:
            d["blocks"].append({
                "states": blk.states,
                "psi": blk.psi_text(),
                "eps_eq": blk.eps_eq,
                "reported_delta": reported_delta(cell.problem, blk),
                "residual": blk.certificate.residual_polynomial_norm,
                "min_gram_eigenvalue": blk.certificate.min_gram_eigenvalue,
                "dimensions": blk.dimensions,
            })
        d["bounds"] = [b.__dict__ for b in cell.bounds]
    return d


def cell_report(cfg: Config, cell) -> str:
    out = [text_header(cfg, f"region report alpha={cell.alpha:g} c={cell.c:g}")]
    if cell.status == "empty":
        out.append(f"status = empty\nmessage = {cell.message}\n")
    else:
        out.append(f"status = {cell.status}\nbeta_star = {cell.beta_star!r}\n")
        if cell.status == "cap":
            out.append("note = cap reached; the true region may be larger\n")
    out.append("\n[trace]\n")
    out += [t.line() + (f"  ({t.message})" if t.message else "") + "\n" for t in cell.trace]
    if cell.result is not None:
        from .pipeline import reported_delta

        for k, blk in enumerate(cell.result.certificate.blocks):
            out.append(f"\n[block {k}: {', '.join(blk.states)}]\n")
            out.append(f"residual = {blk.certificate.residual_polynomial_norm:.3e}\n")
            out.append(f"eps_eq = {blk.eps_eq!r}\nreported_delta = {reported_delta(cell.problem, blk)!r}\n")
            if k < len(cell.bounds):
                out.append(cell.bounds[k].to_text("bounds."))
    return "".join(out)


def certificate_text(cfg: Config, cell) -> str:
    """Psi and every Gram matrix, one row per line."""
    out = [text_header(cfg, f"certificate alpha={cell.alpha:g} c={cell.c:g} beta={cell.beta_star!r}")]
    if cell.result is None:
        out.append("no certificate (empty region)\n")
        return "".join(out)
    for k, blk in enumerate(cell.result.certificate.blocks):
        out.append(f"\n[block {k}: {', '.join(blk.states)}]\npsi = {blk.psi_text()}\n")
        for name in sorted(blk.certificate.gram_blocks):
            G = blk.certificate.gram_blocks[name]
            out.append(f"gram {name} ({G.shape[0]}x{G.shape[1]})\n")
            out += [" ".join(f"{v:.17g}" for v in row) + "\n" for row in G]
    return "".join(out)


def write_cell(outdir, cfg: Config, cell, settings=None, stem: str = "result") -> dict:
    outdir = Path(outdir)
    d = cell_dict(cfg, cell, settings)
    atomic_write(outdir / f"{stem}.json", dumps(d))
    atomic_write(outdir / f"{stem}_report.txt", cell_report(cfg, cell))
    atomic_write(outdir / f"{stem}_certificate.txt", certificate_text(cfg, cell))
    return d


def load_result(path, cfg: Config | None = None) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ResultFileError(f"result file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise ResultFileError(f"cannot read result file {path}: {e}") from None
    if not isinstance(data, dict) or data.get("kind") != "region":
        raise ResultFileError(f"{path} is not a region result")
    if cfg is not None and data.get("fingerprint") != cfg.fingerprint():
        raise FingerprintMismatch(f"{path} was produced from configuration {data.get('fingerprint')}, "
                                  f"current configuration is {cfg.fingerprint()}")
    return data


def check_spec_from_result(prob, data: dict) -> CheckSpec:
    """Rebuild the Monte Carlo inputs from a stored result, trusting its beta* and Psi."""
    from .bounds import largest_state_ball

    beta = float(data["beta_star"])
    sys = prob.system
    lo, hi = prob.design.box(beta)
    gammas = [largest_state_ball(sys.subsystem(b).state_domain, b) for b in prob.blocks]
    stored = {tuple(b["states"]): b for b in data.get("blocks", [])}
    r = data.get("decrease_radius")
    delta, psi, radius = {}, {}, {}
    for k, states in enumerate(prob.blocks):
        b = stored.get(tuple(states))
        delta[k] = float(b["reported_delta"]) if b else prob.delta
        psi[k] = parse(b["psi"], sys.space) if b else None
        radius[k] = prob.delta if r is None else float(r)
    return CheckSpec(sys, [list(b) for b in prob.blocks], lo, hi, lambda lam: prob.design.contains(lam, beta),
                     float(min(gammas)), delta, psi, radius, beta)


def validation_dict(cfg: Config, data: dict, rep) -> dict:
    return {
        **header(cfg),
        "kind": "validation",
        "alpha": data["alpha"],
        "c": data["c"],
        "beta": rep.beta,
        "samples": rep.n_samples,
        "seed": rep.seed,
        "passed": rep.passed,
        "hurwitz_checks": rep.n_hurwitz,
        "energy_checks": rep.n_energy,
        "max_abscissa": rep.max_abscissa,
        "max_energy_increase": rep.max_energy_increase,
        "max_peak_norm": rep.max_peak,
        "max_trailing_excess": rep.max_final_error,
        "counterexamples": [c.__dict__ for c in rep.counterexamples],
    }


# -- sweep ------------------------------------------------------------------------


def sweep_tsv(cfg: Config, cells) -> str:
    out = [text_header(cfg, "sweep"), "alpha\tc\tbeta_star\tstatus\twall_time_s\n"]
    for r in cells:
        out.append(f"{r.alpha:g}\t{r.c:g}\t{r.beta_star:.6g}\t{r.status}\t{r.wall_time:.1f}\n")
    return "".join(out)


def sweep_dict(cfg: Config, cells) -> dict:
    return {**header(cfg), "kind": "sweep",
            "cells": [{"alpha": r.alpha, "c": r.c, "beta_star": r.beta_star, "status": r.status,
                       "message": r.message, "trace": _trace(r.trace)} for r in cells]}


def polygon_text(cfg: Config, cell, poly) -> str:
    out = [text_header(cfg, f"region slice alpha={cell.alpha:g} c={cell.c:g} inverter={poly.bus}"),
           f"# beta = {poly.beta_star!r} status = {poly.status}\n",
           "# other inverters pinned at their minimum coefficients\n",
           f"{poly.variables[0]}\t{poly.variables[1]}\n"]
    out += [f"{p:.12g}\t{q:.12g}\n" for p, q in poly.vertices]
    return "".join(out)


def polygon_name(cell, poly) -> str:
    return f"polygon_a{cell.alpha:g}_c{cell.c:g}_{poly.bus}.tsv"


