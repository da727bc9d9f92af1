"""Command-line entry point.

Every subcommand reads an optional flat ``key = value`` configuration file
(``--config``) and lets flags override individual keys.  Exit codes: 0 on
success, 1 for usage errors, 2 for data errors, 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import pipeline as pl
from . import simulator as sim
from . import stats
from .estimators import EstimationError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# flag spellings that differ from the configuration key
_ALIASES = {"lam": ["--lambda"], "resamples": ["--resamples", "-B"],
            "states_per_traj": ["--states-per-trajectory"]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration overrides")
    for f in fields(pl.RunConfig):
        names = _ALIASES.get(f.name, ["--" + f.name.replace("_", "-")])
        if str(f.type).startswith("bool"):
            g.add_argument(*names, dest=f.name, action="store_const", const="true", default=None)
        else:
            g.add_argument(*names, dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--force", action="store_true", help="rerun even if up to date")
    common.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(common)

    parser = _Parser(prog="ltvrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("ingest", parents=[common], help="parse, filter and persist an interaction log")

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic log and its truth file")
    p.add_argument("--world", choices=("tabular", "latent"), default="latent")
    p.add_argument("--scenario", choices=("self_preservation", "linear"), default="self_preservation")
    p.add_argument("--users", type=int, default=5000)
    p.add_argument("--out", required=True, help="interaction log to write")
    p.add_argument("--truth", help="sidecar truth file (default: <out>.truth.json)")

    sub.add_parser("factorize", parents=[common], help="cross-validate and fit the factorization")
    sub.add_parser("build-states", parents=[common], help="turn histories into state trajectories")
    sub.add_parser("fit-behavior", parents=[common], help="fit the softmax behavior policy")
    p = sub.add_parser("evaluate", parents=[common], help="run value estimators")
    p.add_argument("--kind", action="append", choices=("onpolicy", "q", "offpolicy", "mc"),
                   help="estimators to run (repeatable; default onpolicy, q and mc)")
    sub.add_parser("improve", parents=[common], help="build target and myopic policies")
    p = sub.add_parser("compare", parents=[common], help="bootstrap values and paired tests")
    p.add_argument("--policies", help="baseline,candidate pair to print")
    p = sub.add_parser("report", parents=[common], help="write the report files")
    p.add_argument("--out", help="output directory (default: <workdir>/report)")
    sub.add_parser("run-all", parents=[common], help="run every stage")
    return parser


def config_from_args(args) -> pl.RunConfig:
    cfg = pl.RunConfig.load(args.config) if args.config else pl.RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(pl.RunConfig)
                 if getattr(args, f.name, None) is not None}
    return cfg.updated(overrides)


def _simulate(args, cfg: pl.RunConfig) -> None:
    out = Path(args.out)
    truth_path = Path(args.truth) if args.truth else out.with_suffix(out.suffix + ".truth.json")
    if args.world == "tabular":
        gamma = 0.9 if cfg.gamma is None else cfg.gamma
        mdp = sim.TabularMDP.random(6, 3, gamma, seed=cfg.seed)
        behavior = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
        log = sim.generate_tabular_log(mdp, behavior, args.users, seed=cfg.seed)
        target = sim.greedy_policy(sim.exact_q(mdp, behavior))
        myopic = sim.greedy_policy(mdp.R)
        # soften the greedy tables so every action keeps positive probability
        soft = lambda pi: 0.9 * pi + 0.1 * behavior
        log.truth["J"] = {name: sim.exact_value(mdp, pi)[1] for name, pi in
                          (("behavior", behavior), ("target", soft(target)), ("myopic", soft(myopic)))}
    else:
        world = (sim.self_preservation_world(cfg.seed) if args.scenario == "self_preservation"
                 else sim.linear_world(cfg.seed))
        gamma = float(np.mean(world.continue_prob)) if cfg.gamma is None else cfg.gamma
        log = sim.generate_log(world, np.zeros(3 * world.k + 1), args.users, seed=cfg.seed)
        truth = sim.truth_for(world, gamma, seed=cfg.seed)
        log.truth["gamma"] = gamma
        log.truth["J"] = {"behavior": truth["behavior"], "myopic": truth["myopic"],
                          "target": truth["ltv"]}
    log.truth["behavior_probs"] = [float(x) for x in log.behavior_probs]
    log.save(out, truth_path)
    print(f"wrote {len(log.records)} interactions to {out} and truth to {truth_path}")


def _print_values(wd: pl.Workdir, pair=None) -> None:
    rec = wd.read_json("compare.json")
    for name, v in rec["values"].items():
        print(f"{name:12s} {v['mean']:.6g} +- {v['half_width']:.3g}  ({v['estimator']}, B={v['B']})")
    if pair is None:
        for p in rec["pairs"]:
            print(f"{p['baseline']} -> {p['candidate']}: p = {p['p_value']}")
        return
    a, b = rec["values"][pair[0]]["resamples"], rec["values"][pair[1]]["resamples"]
    test = stats.paired_test(a, b).test
    print(f"{pair[0]} -> {pair[1]}: p = {test.p_value:.6g} (W+ = {test.w_plus}, n = {test.n})")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    cmd = args.command
    wd = pl.Workdir(cfg.workdir)
    if cmd == "simulate":
        _simulate(args, cfg)
    elif cmd == "run-all":
        pl.run_all(cfg)
        print((wd.file("report") / "report.txt").read_text())
    elif cmd == "evaluate" and args.kind and "offpolicy" in args.kind:
        pl.evaluate_offpolicy(cfg, wd)
        other = tuple(k for k in args.kind if k != "offpolicy")
        if other:
            pl.stage_evaluate(cfg, wd, other)
    elif cmd == "evaluate" and args.kind:
        pl.stage_evaluate(cfg, wd, tuple(args.kind))
    elif cmd == "report":
        rep = pl.run_stage("report", cfg)
        if args.out:
            rep = pl.rpt.emit_report(pl.collect_records(wd, cfg), args.out)
        print(pl.rpt.render_text(rep))
    else:
        pl.run_stage(cmd, cfg, force=args.force)
        if cmd == "compare":
            _print_values(wd, args.policies.split(",") if args.policies else None)
    return EXIT_OK


def _exit_code(exc: BaseException) -> int:
    while isinstance(exc, pl.PipelineError) and exc.__cause__ is not None:
        exc = exc.__cause__
    if isinstance(exc, (ArithmeticError, np.linalg.LinAlgError, EstimationError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    try:
        return run(argv)
    except UsageError as exc:
        print(f"ltvrec: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pl.PipelineError, pl.rpt.MissingRecordError, OSError, ValueError, KeyError,
            ArithmeticError, np.linalg.LinAlgError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"ltvrec: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
