"""Command line entry point: ``visco run | check | inspect``.

Exit codes: 0 success, 1 a run, invariant or diagnostic failed, 2 bad usage
or configuration.  Every outcome is printed to stdout as one JSON document.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import scenarios
from .ciarlet_necas import OverlapPenaltyParams, cn_report, contact_report
from .config import load_config
from .diagnostics import contact_step_report, korn_quotient
from .errors import (BarrierError, ConfigError, ConstraintInfeasibleError, DomainError,
                     NonConvergenceError, ResolutionError)
from .grid import DeformationField
from .stepper import RunAborted, read_frame

log = logging.getLogger("visco")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Usage(Exception):
    pass


def _emit(doc):
    json.dump(doc, sys.stdout, indent=1, default=_jsonable)
    sys.stdout.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


def _error_doc(exc):
    doc = {"status": "error", "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        doc["violations"] = list(exc.violations)
    elif isinstance(exc, NonConvergenceError):
        doc["grad_norm"] = exc.grad_norm
        doc["iterations"] = exc.iterations
    elif isinstance(exc, ConstraintInfeasibleError):
        doc["excess"] = exc.excess
        doc["kappa"] = exc.kappa
    elif isinstance(exc, BarrierError):
        doc["index"] = exc.index
        doc["det"] = exc.det
    return doc


def _load(args):
    if args.config and args.scenario:
        raise _Usage("give either a config file or --scenario, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.scenario:
        try:
            cfg = scenarios.scenario(args.scenario)
        except KeyError as exc:
            raise _Usage(exc.args[0]) from None
    else:
        return None
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _progress(k, row):
    log.info("step %d  t=%.4g  stored=%.6g  cn_excess=%.3g  contacts=%d  iters=%d  kappa=%g",
             k, row["t"], row["stored"], row["cn_excess"], row["contact_count"], row["iters"],
             row["kappa"])


# -- run -------------------------------------------------------------------------

def cmd_run(args):
    from .checks import run_and_record
    if args.config_pos:
        if args.config:
            raise _Usage("config given twice")
        args.config = args.config_pos
    cfg = _load(args)
    if cfg is None:
        raise _Usage("run needs a config file or --scenario")
    out = args.out or cfg.output.directory
    try:
        traj, report = run_and_record(cfg, out, progress=_progress)
    except RunAborted as exc:
        doc = _error_doc(exc.cause)
        doc["steps_completed"] = len(exc.trajectory) - 1
        doc["out"] = out
        with open(os.path.join(out, "error.json"), "w") as fh:
            json.dump(doc, fh, indent=1, default=_jsonable)
        _emit(doc)
        return EXIT_FAIL
    final = traj.ledger[-1]
    ok = final["cn_excess"] <= report["tol_cn"]
    doc = {"status": "ok" if ok else "error", "out": out, "steps": len(traj) - 1,
           "final": final, "tol_cn": report["tol_cn"],
           "contact_points": len(report["contact_points"])}
    if not ok:
        doc["error"] = "CnExcess"
        doc["message"] = f"final cn_excess {final['cn_excess']:.3g} exceeds tol_cn {report['tol_cn']:.3g}"
    _emit(doc)
    return EXIT_OK if ok else EXIT_FAIL


# -- check -----------------------------------------------------------------------

def cmd_check(args):
    from .checks import all_ok, property_suites, run_and_record, trajectory_invariants
    names = args.scenario or list(scenarios.NAMES)
    for n in names:
        if n not in scenarios.NAMES:
            raise _Usage(f"unknown scenario {n!r}; valid names: {', '.join(scenarios.NAMES)}")
    seed = 0 if args.seed is None else args.seed
    out = args.out or "check_out"
    os.makedirs(out, exist_ok=True)
    report = {"seed": seed, "presets": {}}
    for name in names:
        cfg = scenarios.scenario(name).replace(seed=seed)
        log.info("preset %s", name)
        try:
            traj, _ = run_and_record(cfg, os.path.join(out, name), progress=_progress)
        except RunAborted as exc:
            report["presets"][name] = {"run": dict(_error_doc(exc.cause), ok=False)}
            continue
        report["presets"][name] = trajectory_invariants(name, cfg, traj)
    if not args.skip_properties:
        log.info("property suites")
        report["properties"] = property_suites(seed=seed)
    report["ok"] = all_ok(report)
    report["status"] = "ok" if report["ok"] else "error"
    with open(os.path.join(out, "check_report.json"), "w") as fh:
        json.dump(report, fh, indent=1, default=_jsonable)
    _emit(report)
    return EXIT_OK if report["ok"] else EXIT_FAIL


# -- inspect -----------------------------------------------------------------------

def _ledger_row(directory, k):
    path = os.path.join(directory, "ledger.csv")
    if not os.path.exists(path):
        return None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["k"]) == k:
                return row
    return None


def cmd_inspect(args):
    k, t, fld = read_frame(args.frame)
    directory = os.path.dirname(os.path.abspath(args.frame))
    cfg = _load(args)
    if cfg is None and os.path.exists(os.path.join(directory, "config.toml")):
        cfg = load_config(os.path.join(directory, "config.toml"))
    grid = fld.grid
    params = cfg.penalty_params(grid) if cfg is not None else OverlapPenaltyParams.for_grid(grid)
    row = _ledger_row(directory, k)
    kappa = float(row["kappa"]) if row is not None else params.kappa
    doc = {"status": "ok", "frame": args.frame, "k": k, "t": t, "diag": args.diag}
    if args.diag == "cn":
        doc.update(cn_report(fld, params))
        doc["tol_cn"] = params.tol_cn
    elif args.diag == "contact":
        doc.update(contact_report(fld, params, kappa))
        tol_grad = cfg.solver.tol_grad if cfg is not None else 1e-8
        doc["reaction"] = contact_step_report(fld, params, kappa, tol_grad)
    elif args.diag == "korn":
        if not args.prev:
            raise _Usage("korn needs --prev FRAME (the earlier frame of the velocity pair)")
        kp, tp, prev = read_frame(args.prev)
        if prev.grid.describe() != grid.describe() or not t > tp:
            raise _Usage("--prev must be an earlier frame on the same grid")
        v = DeformationField(grid, (fld.coeffs - prev.coeffs) / (t - tp))
        doc["korn_quotient"] = korn_quotient(fld, v)
        doc["prev_k"] = kp
    elif args.diag == "energy":
        path = os.path.join(directory, "energy.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} not found (written by `visco run`)")
        with open(path, newline="") as fh:
            doc["energy"] = [{key: float(v) for key, v in r.items()} for r in csv.DictReader(fh)]
    _emit(doc)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="visco", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="no progress log on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="solve one configuration")
    r.add_argument("config_pos", nargs="?", metavar="CONFIG", help="TOML config file")
    r.add_argument("--config", help="TOML config file")
    r.add_argument("--scenario", help=f"built-in preset ({', '.join(scenarios.NAMES)})")
    r.add_argument("--out", help="output directory (default: output.directory of the config)")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="run the presets and the invariant suites")
    c.add_argument("--scenario", action="append", help="restrict to a preset (repeatable)")
    c.add_argument("--out", help="output directory (default: check_out)")
    c.add_argument("--seed", type=int)
    c.add_argument("--skip-properties", action="store_true",
                   help="only the preset runs and their invariants")
    c.set_defaults(func=cmd_check)

    i = sub.add_parser("inspect", help="diagnostics of a saved frame")
    i.add_argument("frame", help="frame_XXXX.json written by run")
    i.add_argument("--diag", required=True, choices=("cn", "contact", "korn", "energy"))
    i.add_argument("--prev", help="earlier frame for the korn velocity")
    i.add_argument("--config", help="config used for the run (default: config.toml next to the frame)")
    i.add_argument("--scenario")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        _emit({"status": "error", "error": "UsageError", "message": "invalid command line"})
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except _Usage as exc:
        _emit({"status": "error", "error": "UsageError", "message": str(exc)})
        return EXIT_USAGE
    except ConfigError as exc:
        _emit(_error_doc(exc))
        return EXIT_USAGE
    except (BarrierError, DomainError, ResolutionError, NonConvergenceError,
            ConstraintInfeasibleError) as exc:
        _emit(_error_doc(exc))
        return EXIT_FAIL
    except (OSError, ValueError, KeyError) as exc:
        _emit(_error_doc(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
