"""Command line: ``opalab {gen,train,eval,bench,solve,recount}``.

Exit codes: 0 success, 2 usage, 3 bad or missing input, 4 training failure,
5 oracle failure (budget exceeded with no bound fallback), 6 recount
disagreement, 7 policy/instance mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .baselines import BaselineError, ProportionTable
from .datagen import GenConfig, GenerationError, generate, generate_history
from .env import OnlineAssignmentEnv, write_rollout_log
from .experiment import (POLICIES, ExperimentConfig, ExperimentError, PolicyMismatch, PolicyRow, format_table,
                         read_report, run, run_policy, write_report)
from .model import InstanceError, load_instance, save_instance
from .nets import ActorNet
from .neural import TrainingError
from .oracle import OracleError, ip_gap, solve, write_solution
from .ppo import TrainConfig, train, train_ppo_pd
from .recount import RecountError, recount

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_TRAINING = 4
EXIT_ORACLE = 5
EXIT_RECOUNT = 6
EXIT_MISMATCH = 7

log = logging.getLogger("opalab")


class RecountMismatch(Exception):
    pass


def _train_overrides(args) -> dict:
    out = {}
    for flag, key in (("episodes", "episodes"), ("trajectories", "trajectories_per_episode"),
                      ("lambda_cap", "lambda_cap"), ("lambda_prop", "lambda_prop"), ("clip_eps", "clip_eps")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--episodes", type=int)
    p.add_argument("--trajectories", type=int, help="trajectories collected per episode")
    p.add_argument("--lambda-cap", type=float)
    p.add_argument("--lambda-prop", type=float)
    p.add_argument("--clip-eps", type=float)


# -- subcommands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = GenConfig.load(args.config) if args.config else GenConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    days = [generate(cfg)] if args.days is None else generate_history(cfg, args.days)
    for inst in days:
        save_instance(inst, out / f"{inst.label}.opa")
        print(f"{out / (inst.label + '.opa')}\t{inst.m} parcels\t{len(inst.constraints)} constraints")
    cfg.dump(out / "generator.json")
    return 0


def cmd_train(args) -> int:
    inst = load_instance(args.instance)
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    unknown = set(base) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ExperimentError(f"unknown training config fields {sorted(unknown)}")
    cfg = TrainConfig(**{"trajectories_per_episode": 4, **base, **_train_overrides(args)})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    if args.policy == "ppo-pd":
        res = train_ppo_pd(inst, cfg, out_dir=out)
    else:
        res = train(inst, cfg, out)
    last = res.metrics[-1] if res.metrics else None
    if last is not None:
        print(f"trained {args.policy} on {inst.label}: average cost {last.average_cost:.5g}, "
              f"violation rate {last.violation_rate:.4f} (final episode)")
    return 0


def cmd_eval(args) -> int:
    inst = load_instance(args.instance)
    actor = ActorNet.load(args.checkpoint) if args.checkpoint else None
    table = ProportionTable.load(args.table) if args.table else None
    seed = 0 if args.seed is None else args.seed
    report, slots = run_policy(args.policy, inst, seed, actor=actor, table=table, argmax=args.argmax)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rollout_log(out / f"{args.policy}.log", OnlineAssignmentEnv(inst), slots)
    if args.oracle_tier:
        reference = solve(inst, args.oracle_tier)
        row = PolicyRow(args.policy, report, ip_gap(report.average_cost, reference))
        write_report(out / "report.tsv", [row])
        text = format_table(inst.label, [row], reference)
        (out / "report.txt").write_text(text)
        print(text, end="")
    else:
        print(f"{args.policy}\taverage_cost {report.average_cost:.5g}\tviolation_rate {report.violation_rate:.4f}")
    return 0


def cmd_solve(args) -> int:
    inst = load_instance(args.instance)
    sol = solve(inst, args.oracle_tier)
    if args.out:
        write_solution(args.out, inst, sol)
    kind = "exact" if sol.exact else "bound"
    print(f"{inst.label}\t{kind}\tobjective {sol.objective!r}\tbound {sol.bound!r}\tfeasible {sol.feasible}")
    return 0


def cmd_bench(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.seed:
        updates["seeds"] = tuple(args.seed)
    if args.policy:
        updates["policies"] = tuple(p for item in args.policy for p in item.split(",") if p)
    if args.oracle_tier:
        updates["oracle_tier"] = args.oracle_tier
    if args.argmax:
        updates["argmax"] = True
    tr = _train_overrides(args)
    if tr:
        updates["train"] = replace(cfg.train, **tr)
    cfg = replace(cfg, **updates)
    summary = run(cfg, args.out)
    for seed in cfg.seeds:
        for table in sorted((Path(args.out) / f"seed-{seed}").glob("*/report.txt")):
            print(table.read_text())
    print(f"summary: {summary}")
    return 0


def _recount_day(day_dir: Path, instances: Path) -> int:
    rows = read_report(day_dir / "report.tsv")
    inst = load_instance(instances / f"{day_dir.name}.opa")
    bad = 0
    for name, expected in rows.items():
        rep = recount(inst, (day_dir / "logs" / f"{name}.log").read_text())
        got = {"average_cost": rep.average_cost, "violation_rate": rep.violation_rate,
               "total_cost": rep.total_cost, "violating_parcels": float(rep.violating_parcels),
               "parcels": float(rep.parcels_assigned)}
        diff = {k: (expected[k], v) for k, v in got.items() if expected[k] != v}
        status = "ok" if not diff else f"MISMATCH {diff}"
        bad += bool(diff)
        print(f"{day_dir}\t{name}\t{status}")
    return bad


def cmd_recount(args) -> int:
    if args.bench:
        root = Path(args.bench)
        day_dirs = sorted(p.parent for p in root.glob("seed-*/*/report.tsv"))
        if not day_dirs:
            raise FileNotFoundError(f"no report.tsv files under {root}")
        bad = sum(_recount_day(d, d.parent / "instances") for d in day_dirs)
    else:
        if not (args.instance and args.log):
            raise ExperimentError("recount needs --bench DIR, or --instance and --log")
        inst = load_instance(args.instance)
        rep = recount(inst, Path(args.log).read_text())
        print(f"average_cost\t{rep.average_cost!r}\nviolation_rate\t{rep.violation_rate!r}\n"
              f"total_cost\t{rep.total_cost!r}\nviolating_parcels\t{rep.violating_parcels}")
        bad = 0
        if args.report:
            expected = read_report(args.report)
            name = args.policy or Path(args.log).stem
            if name not in expected:
                raise ExperimentError(f"{args.report} has no row for {name!r}")
            row = expected[name]
            bad = int(row["average_cost"] != rep.average_cost or row["violation_rate"] != rep.violation_rate)
            print("ok" if not bad else "MISMATCH")
    if bad:
        raise RecountMismatch(f"{bad} report row(s) disagree with their rollout logs")
    return 0


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opalab", description="Online parcel assignment lab.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic instance files")
    p.add_argument("--config", help="generator config (JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--days", type=int, help="write a multi-day history instead of a single instance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a PPO policy on one instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--config", help="training config (JSON)")
    p.add_argument("--policy", choices=("ppo-opa", "ppo-pd"), default="ppo-opa")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out one policy on one instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--policy", choices=POLICIES, required=True)
    p.add_argument("--checkpoint", help="actor checkpoint for ppo policies")
    p.add_argument("--table", help="proportion table for the proportion policy")
    p.add_argument("--seed", type=int)
    p.add_argument("--oracle-tier", choices=("exact", "bound", "auto"))
    p.add_argument("--argmax", action="store_true", help="ppo policies take the most likely route")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="full protocol: train on day T, evaluate on the next days")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, action="append", help="repeat for several seeds")
    p.add_argument("--policy", action="append", help="policy name or comma-separated list")
    p.add_argument("--oracle-tier", choices=("exact", "bound", "auto"))
    p.add_argument("--argmax", action="store_true")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("solve", help="offline optimum or Lagrangian lower bound")
    p.add_argument("--instance", required=True)
    p.add_argument("--oracle-tier", choices=("exact", "bound", "auto"), default="auto")
    p.add_argument("--out", help="write the solution file here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("recount", help="recompute reports from rollout logs")
    p.add_argument("--bench", help="bench output directory: check every report row")
    p.add_argument("--instance")
    p.add_argument("--log")
    p.add_argument("--report", help="report.tsv to compare against")
    p.add_argument("--policy", help="row name in --report (default: log file stem)")
    p.set_defaults(func=cmd_recount)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PolicyMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (InstanceError, GenerationError, ExperimentError, BaselineError, RecountError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except OracleError as exc:
        print(f"error: oracle: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except RecountMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RECOUNT


if __name__ == "__main__":
    sys.exit(main())
