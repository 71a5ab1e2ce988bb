"""Evaluation protocol: train on day T, evaluate every policy on days T+1..T+3.

Per seed, the output directory holds the instance files, the fitted
proportion table, both PPO checkpoints, and for each evaluation day a
delimited report, a printable table, the oracle solution and one rollout log
per policy (``recount`` reproduces each report row from those logs).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import ProportionTable, fit_proportions, greedy_rollout, pdo_rollout, proportion_rollout
from .datagen import GenConfig, generate_history
from .env import OnlineAssignmentEnv, Report, evaluate_assignment, write_rollout_log
from .model import Instance, load_instance, save_instance
from .nets import ActorNet
from .oracle import OfflineSolution, ip_gap, solve, write_solution
from .ppo import TrainConfig, collect, train, train_ppo_pd

log = logging.getLogger(__name__)

POLICIES = ("ppo-opa", "ppo-pd", "proportion", "pdo", "greedy")
PPO_POLICIES = ("ppo-opa", "ppo-pd")


class ExperimentError(ValueError):
    pass


class PolicyMismatch(ExperimentError):
    """A trained policy or table does not fit the instance it is asked to act on."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Generator (or explicit instance files), day layout, policies and training knobs.

    With ``generator`` set, days ``0..history_days-1`` are generated, the last of
    them is the training day T and the next ``eval_days`` days are evaluated.
    Explicit ``train_instance`` / ``eval_instances`` / ``history_instances``
    paths replace generation.
    """

    generator: GenConfig = field(default_factory=GenConfig)
    history_days: int = 3
    eval_days: int = 3
    policies: tuple[str, ...] = POLICIES
    oracle_tier: str = "bound"
    seeds: tuple[int, ...] = (0,)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(trajectories_per_episode=4))
    argmax: bool = False
    write_logs: bool = True
    train_instance: str | None = None
    eval_instances: tuple[str, ...] = ()
    history_instances: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.policies:
            raise ExperimentError("at least one policy is required")
        unknown = [p for p in self.policies if p not in POLICIES]
        if unknown:
            raise ExperimentError(f"unknown policies {unknown}; choose from {list(POLICIES)}")
        if self.oracle_tier not in ("exact", "bound", "auto"):
            raise ExperimentError(f"unknown oracle tier {self.oracle_tier!r}")
        if self.train_instance is None:
            if self.eval_days < 1 or self.history_days < 1:
                raise ExperimentError("need at least one history day and one eval day")
        elif not self.eval_instances:
            raise ExperimentError("explicit instances need at least one eval instance")
        if not self.seeds:
            raise ExperimentError("at least one seed is required")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        gen = GenConfig.from_dict(data.pop("generator", {}))
        tr = data.pop("train", {})
        known = {f for f in TrainConfig.__dataclass_fields__}
        bad = set(tr) - known
        if bad:
            raise ExperimentError(f"unknown train fields {sorted(bad)}")
        train_cfg = TrainConfig(**{"trajectories_per_episode": 4, **tr})
        bad = set(data) - set(cls.__dataclass_fields__)
        if bad:
            raise ExperimentError(f"unknown experiment fields {sorted(bad)}")
        for key in ("policies", "seeds", "eval_instances", "history_instances"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(generator=gen, train=train_cfg, **data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        """JSON with optional ``generator`` and ``train`` sub-objects; a bare generator config is accepted too."""
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ExperimentError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ExperimentError(f"{path}: expected a JSON object")
        if not set(data) & {"generator", "train", "policies", "seeds", "train_instance"}:
            data = {"generator": data}
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"] = asdict(self.generator)
        d["train"] = asdict(self.train)
        return d


@dataclass
class PolicyRow:
    algorithm: str
    report: Report
    gap: float

    def cells(self) -> list[str]:
        r = self.report
        return [self.algorithm, repr(r.average_cost), repr(self.gap), repr(r.violation_rate),
                repr(r.total_cost), str(r.violating_parcels), str(r.parcels_assigned)]


REPORT_HEADER = ["algorithm", "average_cost", "ip_gap", "violation_rate", "total_cost",
                 "violating_parcels", "parcels"]


def _check_vocabulary(actor: ActorNet, instance: Instance) -> None:
    arr = instance.arrays
    if actor.config.n_locations != len(arr.locations) or actor.config.n_providers != len(arr.providers):
        raise PolicyMismatch(f"policy was trained on {actor.config.n_locations} locations / "
                             f"{actor.config.n_providers} providers, instance {instance.label!r} has "
                             f"{len(arr.locations)} / {len(arr.providers)}")


def run_policy(name: str, instance: Instance, seed: int, *, actor: ActorNet | None = None,
               table: ProportionTable | None = None, argmax: bool = False) -> tuple[Report, np.ndarray]:
    """One full rollout; PPO samples unless ``argmax``, greedy and PDO are deterministic."""
    if name == "greedy":
        slots = greedy_rollout(instance)
    elif name == "pdo":
        slots = pdo_rollout(instance)
    elif name == "proportion":
        if table is None:
            raise ExperimentError("proportion policy needs a fitted table")
        slots = proportion_rollout(table, instance, seed)
    elif name in PPO_POLICIES:
        if actor is None:
            raise ExperimentError(f"{name} needs a trained actor")
        _check_vocabulary(actor, instance)
        slots = collect(actor, instance, 1, seed, greedy=argmax).slots[0]
    else:
        raise ExperimentError(f"unknown policy {name!r}")
    return evaluate_assignment(instance, slots), slots


def format_table(label: str, rows: list[PolicyRow], reference: OfflineSolution) -> str:
    kind = "exact optimum" if reference.exact else "Lagrangian lower bound"
    head = ["Algorithm", "Average Cost", "IP Gap", "Violation Rate"]
    body = [[r.algorithm, f"{r.report.average_cost:.5g}", f"{100 * r.gap:.4f}%",
             f"{r.report.violation_rate:.4f}"] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [f"{label}  (gap reference: {kind}, {reference.reference_average:.5g} per parcel)",
             fmt(head), fmt(["-" * w for w in widths])]
    lines += [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def write_report(path: Path, rows: list[PolicyRow]) -> None:
    lines = ["\t".join(REPORT_HEADER)] + ["\t".join(r.cells()) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def read_report(path: str | Path) -> dict[str, dict[str, float]]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0].split("\t") != REPORT_HEADER:
        raise ExperimentError(f"{path}: not a report file")
    out = {}
    for line in rows[1:]:
        cells = line.split("\t")
        out[cells[0]] = {k: float(v) for k, v in zip(REPORT_HEADER[1:], cells[1:])}
    return out


@dataclass
class DayLayout:
    history: list[Instance]
    train: Instance
    evals: list[Instance]


def build_days(cfg: ExperimentConfig, seed: int) -> DayLayout:
    if cfg.train_instance is not None:
        train_day = load_instance(cfg.train_instance)
        evals = [load_instance(p) for p in cfg.eval_instances]
        history = [load_instance(p) for p in cfg.history_instances] or [train_day]
    else:
        gen = replace(cfg.generator, seed=seed)
        days = generate_history(gen, cfg.history_days + cfg.eval_days)
        history, evals = days[:cfg.history_days], days[cfg.history_days:]
        train_day = history[-1]
    if any(e.label == train_day.label for e in evals):
        raise ExperimentError(f"training day {train_day.label!r} is also an evaluation day")
    return DayLayout(history, train_day, evals)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> list[tuple[str, list[PolicyRow], OfflineSolution]]:
    out.mkdir(parents=True, exist_ok=True)
    days = build_days(cfg, seed)
    inst_dir = out / "instances"
    inst_dir.mkdir(exist_ok=True)
    for inst in {i.label: i for i in days.history + [days.train] + days.evals}.values():
        save_instance(inst, inst_dir / f"{inst.label}.opa")

    table = None
    if "proportion" in cfg.policies:
        table = fit_proportions(days.history, lambda d: solve(d, cfg.oracle_tier))
        table.save(out / "proportion.tsv")
    actors: dict[str, ActorNet] = {}
    tcfg = replace(cfg.train, seed=seed)
    if "ppo-opa" in cfg.policies:
        log.info("seed %d: training ppo-opa on %s", seed, days.train.label)
        actors["ppo-opa"] = train(days.train, tcfg, out / "ppo-opa").actor
    if "ppo-pd" in cfg.policies:
        log.info("seed %d: training ppo-pd on %s", seed, days.train.label)
        actors["ppo-pd"] = train_ppo_pd(days.train, tcfg, out_dir=out / "ppo-pd").actor

    results = []
    for day in days.evals:
        reference = solve(day, cfg.oracle_tier)
        day_dir = out / day.label
        (day_dir / "logs").mkdir(parents=True, exist_ok=True)
        write_solution(day_dir / "oracle.tsv", day, reference)
        rows = []
        for name in cfg.policies:
            report, slots = run_policy(name, day, seed, actor=actors.get(name), table=table, argmax=cfg.argmax)
            rows.append(PolicyRow(name, report, ip_gap(report.average_cost, reference)))
            if cfg.write_logs:
                write_rollout_log(day_dir / "logs" / f"{name}.log", OnlineAssignmentEnv(day), slots)
        write_report(day_dir / "report.tsv", rows)
        (day_dir / "report.txt").write_text(format_table(f"seed {seed}, {day.label}", rows, reference))
        results.append((day.label, rows, reference))
    return results


def run(cfg: ExperimentConfig, out: str | Path) -> Path:
    """Runs every seed; returns the path of the cross-seed summary file."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    summary = ["seed\tday\t" + "\t".join(REPORT_HEADER) + "\treference\treference_exact"]
    for seed in cfg.seeds:
        for label, rows, ref in run_seed(cfg, seed, out / f"seed-{seed}"):
            for r in rows:
                summary.append(f"{seed}\t{label}\t" + "\t".join(r.cells())
                               + f"\t{ref.reference_average!r}\t{int(ref.exact)}")
    path = out / "summary.tsv"
    path.write_text("\n".join(summary) + "\n")
    return path


def pareto_dominates_or_ties(a: Report, b: Report) -> bool:
    """``a`` is no worse than ``b`` in both average cost and violation rate."""
    return a.average_cost <= b.average_cost and a.violation_rate <= b.violation_rate

