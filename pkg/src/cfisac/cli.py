"""Command line entry point: ``cfisac <subcommand> [flags]``.

Exit codes: 0 ok, 1 validation failure, 2 configuration error, 3 more solver
failures than the failure budget allows.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import experiments as ex
from . import sca
from .scenario import ScenarioDocument, SystemConfig, make_scenario

log = logging.getLogger("cfisac")

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def load_document(args) -> ScenarioDocument:
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
            doc = ScenarioDocument.from_dict(raw)
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as e:
            raise ConfigError(f"cannot load {args.config}: {e}") from e
    else:
        doc = ScenarioDocument()
    if args.paper_scale:
        full = SystemConfig.paper_scale()
        doc.system = doc.system.with_(M=full.M, N=full.N, K=full.K, L=full.L)
    if args.seed is not None:
        doc.seed = args.seed
    return doc


def _spec(args, kind: str, doc: ScenarioDocument) -> ex.ExperimentSpec:
    strategies = tuple(args.strategy) if args.strategy else ex.STRATEGIES
    kappa = tuple(args.kappa_db) if args.kappa_db else (0.0, 1.0, 2.0, 3.0, 4.0)
    try:
        return ex.ExperimentSpec(kind, trials=args.trials, seed=doc.seed, strategies=strategies,
                                 kappa_db=kappa, out=args.out, prelog=args.prelog, jobs=args.jobs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _kappa_list(text: str):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad kappa list {text!r}") from e
    if not vals:
        raise argparse.ArgumentTypeError("empty kappa list")
    return vals


def _out(args, name: str):
    return Path(args.out) / name if args.out else None


def _failure_exit(outcomes, budget: float) -> int:
    solved = [o for o in outcomes if o.strategy != "AVG"]
    if not solved:
        return EXIT_OK
    failed = sum(1 for o in solved if not o.ok)
    if failed / len(solved) > budget:
        log.error("solver failures %d/%d exceed budget %.0f%%", failed, len(solved), 100 * budget)
        return EXIT_SOLVER
    return EXIT_OK


# -- subcommands ------------------------------------------------------------

def cmd_gen(args, doc) -> int:
    geometry, stats = make_scenario(doc.system, doc.seed, doc.pathloss)
    payload = doc.to_dict()
    payload["derived"] = {
        "ap_pos": geometry.ap_pos.tolist(), "ue_pos": geometry.ue_pos.tolist(),
        "zone_pos": geometry.zone_pos.tolist(), "beta": stats.beta.tolist(),
        "gamma": stats.gamma.tolist(), "zeta": stats.zeta.tolist(), "theta": stats.theta.tolist(),
    }
    text = json.dumps(payload, indent=2)
    path = _out(args, "scenario.json")
    if path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_solve(args, doc) -> int:
    spec = _spec(args, "solve", doc)
    _, stats = make_scenario(doc.system, doc.seed, doc.pathloss)
    result = {}
    outcomes = []
    for s in spec.strategies:
        o = ex.run_strategy(stats, doc.system, s, doc.seed, prelog=spec.prelog)
        outcomes.append(o)
        entry = {"status": o.status, "iterations": o.iterations}
        if o.report is not None:
            r = o.report
            entry.update(sinr_user=r.sinr_user.tolist(), sinr_eav=r.sinr_eav.tolist(),
                         masr=[v if math.isfinite(v) else "inf" for v in r.masr.tolist()],
                         rate_user=r.rate_user.tolist(), rate_eav=r.rate_eav.tolist(),
                         secrecy=r.secrecy.tolist(), violations=len(r.violations))
        result[s] = entry
        if s != "AVG" and args.out:
            traj = sca.SCAResult(sca.Kind(s), sca.Status(o.status), o.trajectory, None, None)
            path = _out(args, f"trajectory_{s.lower()}.csv")
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(ex.provenance_line(doc, spec) + "\n" + traj.trajectory_csv())
    text = json.dumps({"seed": doc.seed, "config_hash": ex.config_hash(doc, spec), "strategies": result}, indent=2)
    if args.out:
        (Path(args.out) / "solve.json").write_text(text + "\n")
    print(text)
    return _failure_exit(outcomes, args.failure_budget)


def cmd_convergence(args, doc) -> int:
    spec = _spec(args, "convergence", doc)
    rows, outcomes = ex.run_convergence(spec, doc)
    text = ex.write_csv(_out(args, "convergence.csv"), rows, ex.CONVERGENCE_COLUMNS,
                        ex.provenance_line(doc, spec))
    if not args.out:
        sys.stdout.write(text)
    return _failure_exit(outcomes, args.failure_budget)


def cmd_sweep(args, doc) -> int:
    spec = _spec(args, "kappa_sweep", doc)
    rows, per_kappa = ex.run_kappa_sweep(spec, doc)
    text = ex.write_csv(_out(args, "kappa_sweep.csv"), rows, ex.SWEEP_COLUMNS, ex.provenance_line(doc, spec))
    if not args.out:
        sys.stdout.write(text)
    return _failure_exit([o for v in per_kappa.values() for o in v], args.failure_budget)


def cmd_cdf(args, doc) -> int:
    spec = _spec(args, "cdf", doc)
    rows, outcomes = ex.run_cdf(spec, doc)
    text = ex.write_csv(_out(args, "cdf.csv"), rows, ex.CDF_COLUMNS, ex.provenance_line(doc, spec))
    if not args.out:
        sys.stdout.write(text)
    return _failure_exit(outcomes, args.failure_budget)


def cmd_validate(args, doc) -> int:
    quick = args.quick
    report = ex.run_validate(
        doc, seed=doc.seed,
        mc_scenarios=5 if quick else 30, mc_trials=20_000 if quick else 100_000,
        audit_trials=1000 if quick else 10_000, cross_instances=10 if quick else 50,
        corrupt_gamma=args.corrupt_gamma,
    )
    print(report.text())
    if args.out:
        path = _out(args, "validate.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_VALIDATION


COMMANDS = {"gen": cmd_gen, "solve": cmd_solve, "convergence": cmd_convergence,
            "sweep-kappa": cmd_sweep, "cdf": cmd_cdf, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario JSON document")
    common.add_argument("--seed", type=int, help="base seed (overrides the document)")
    common.add_argument("--trials", type=int, default=20)
    common.add_argument("--strategy", action="append", type=str.upper, choices=list(ex.STRATEGIES),
                        help="repeatable; default all")
    common.add_argument("--kappa-db", type=_kappa_list, help="comma separated, e.g. 0,1,2,3,4")
    common.add_argument("--out", help="output directory")
    common.add_argument("--paper-scale", action="store_true", help="M=32, N=8, K=4, L=2")
    common.add_argument("--prelog", action="store_true", help="scale rates by 1 - tau_t/tau")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for trials")
    common.add_argument("--failure-budget", type=float, default=0.25,
                        help="largest tolerated fraction of failed optimizer runs")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="cfisac", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "validate":
            sp.add_argument("--quick", action="store_true", help="reduced sample counts")
            sp.add_argument("--corrupt-gamma", action="store_true",
                            help="negative control: break the closed form on purpose")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        doc = load_document(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, doc)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
