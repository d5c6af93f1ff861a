"""Command-line front end: reduce, simulate, estimate, validate, report."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import estimation as est
from . import measurements as ms
from . import network as nw
from . import pipeline
from . import powerflow as pf
from . import reporting
from . import solver
from . import validation as va
from .config import ConfigError, RunConfig

EXIT_OK = 0
EXIT_DATA = 2
EXIT_SOLVER = 3
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_feeder(path: Path) -> nw.Feeder:
    feeder = nw.load_feeder(path)
    problems = nw.validate(feeder)
    if problems:
        raise ValueError(f"{path}: " + "; ".join(str(p) for p in problems[:10]))
    return feeder


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=float), encoding="utf-8")


def cmd_reduce(args) -> int:
    feeder = nw.load_feeder(args.input)
    problems = nw.validate(feeder)
    if problems:
        for p in problems:
            print(f"invalid feeder: {p}", file=sys.stderr)
        return EXIT_DATA
    reduced = nw.reduce(feeder)
    nw.save_feeder(reduced, args.output)
    print(f"buses {len(feeder.buses)} -> {len(reduced.buses)}, branches {len(feeder.branches)} -> "
          f"{len(reduced.branches)}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    truth_path = cfg.path("truth_feeder") or cfg.path("feeder")
    if truth_path is None:
        raise ConfigError("simulate needs 'truth_feeder' or 'feeder'")
    cfg.require("truth_feeder" if cfg["truth_feeder"] else "feeder")
    truth = _load_feeder(truth_path)
    sim = pipeline.simulate(truth, cfg.simulation_settings())
    cfg.out.mkdir(parents=True, exist_ok=True)
    ms.save_csv(sim.train, cfg.path("train", "train.csv"))
    ms.save_csv(sim.validation, cfg.path("validation", "validation.csv"))
    pipeline.save_injections(sim.validation_injections, sim.validation_steps,
                             cfg.path("validation_injections", "validation_injections.csv"))
    _write_json(cfg.out / "simulation.json", {
        "settings": dataclasses.asdict(sim.settings),
        "train_steps": sim.train_steps,
        "validation_steps": sim.validation_steps,
        "voltage_drop_v": {str(t): sim.selection.drops[t] for t in sim.train_steps},
    })
    print(f"wrote {len(sim.train)} training and {len(sim.validation)} validation samples to {cfg.out}")
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, args) -> int:
    feeder_path, train_path = cfg.require("feeder", ("train", "train.csv"))
    feeder = _load_feeder(feeder_path)
    train = ms.load_csv(train_path)
    cfg.out.mkdir(parents=True, exist_ok=True)
    opts = cfg.solver_options()
    if args.verbose:
        opts = dataclasses.replace(opts, verbosity=args.verbose, log_path=str(cfg.out / "solver_log.csv"))
    problem = est.build(feeder, train, cfg.mode, cfg.build_options())
    outcome = solver.solve(problem, opts)
    result = est.recover_solution(problem, outcome.x, feeder, status=outcome.status)
    nw.save_feeder(result.feeder, cfg.path("feeder_est", "feeder_est.json"))
    summary = result.summary() | {
        "iterations": outcome.iterations,
        "wall_time_s": outcome.wall_time,
        "problem_size": est.problem_size(problem),
    }
    _write_json(cfg.out / "solution.json", summary)
    print(f"{cfg.mode}: {outcome.status}, objective {outcome.objective:.6g}, "
          f"{outcome.iterations} iterations, {outcome.wall_time:.1f} s")
    for m in result.messages:
        print(f"note: {m}")
    return EXIT_OK if outcome.success and not result.flagged else EXIT_SOLVER


def cmd_validate(cfg: RunConfig, args) -> int:
    truth_key = "truth_feeder" if cfg["truth_feeder"] else "feeder"
    truth_path, est_path, inj_path = cfg.require(
        truth_key, ("feeder_est", "feeder_est.json"), ("validation_injections", "validation_injections.csv"))
    truth = _load_feeder(truth_path)
    feeder_est = _load_feeder(est_path)
    inj, steps = pipeline.load_injections(inj_path)
    report = va.pf_validate(feeder_est, truth, inj, steps)
    if truth.is_radial():
        report.cumulative = va.cumulative_error(truth, feeder_est)
    if cfg["se_validation"]:
        (val_path,) = cfg.require(("validation", "validation.csv"))
        se = va.se_objective_validate(feeder_est, ms.load_csv(val_path), cfg.solver_options())
        report.se_objective = se.objective
        report.flagged_steps = tuple(sorted(set(report.flagged_steps) | set(se.flagged)))
    cfg.out.mkdir(parents=True, exist_ok=True)
    reporting.save_runs({cfg.mode: report}, cfg.out / "report.json")
    q = report.voltage_quantiles()
    print(f"|dV| p.u.: median {q.median:.3e}, p75 {q.p75:.3e}, max {q.max:.3e} over {q.count} entries")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.dir)
    runs = reporting.load_runs(out / "report.json")
    for extra in args.include or []:
        for label, rep in reporting.load_runs(extra).items():
            runs[f"{Path(extra).parent.name}:{label}"] = rep
    paths = reporting.write_tables(runs, out) + reporting.write_figures(runs, out)
    for p in paths:
        print(p)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="impest", description="Joint state and line impedance estimation from smart-meter data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("reduce", help="remove electrically superfluous buses")
    p.add_argument("input")
    p.add_argument("output")

    for name, helptext in (("simulate", "synthesise train/validation measurements"),
                           ("estimate", "build and solve the estimation problem"),
                           ("validate", "PF and SE validation of an estimated feeder")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("report", help="tables and boxplots from report.json")
    p.add_argument("dir")
    p.add_argument("--include", action="append", help="further report.json files to compare")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * getattr(args, "verbose", 0)
    logging.basicConfig(level=max(logging.DEBUG, level), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "reduce":
            return cmd_reduce(args)
        if args.command == "report":
            return cmd_report(args)
        overrides = list(args.set)
        if args.out:
            overrides.append(f"out={json.dumps(args.out)}")
        cfg = RunConfig.load(args.config, overrides)
        handler = {"simulate": cmd_simulate, "estimate": cmd_estimate, "validate": cmd_validate}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"impest: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"impest: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except pf.PowerFlowError as exc:
        print(f"impest: power flow failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    raise SystemExit(main())
