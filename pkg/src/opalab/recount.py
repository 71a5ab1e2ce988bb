"""Independent recomputation of a Report from an instance and a rollout log.

Deliberately shares no metric code with :mod:`opalab.env`: routes are matched
to constraints through :func:`opalab.model.routes_touching_constraint`,
proportion thresholds are compared in exact rational arithmetic, and costs
are summed with :func:`math.fsum` from the logged decimal values.
"""

from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path

from .env import LOG_HEADER, Report
from .model import Instance, load_instance, routes_touching_constraint


class RecountError(ValueError):
    pass


def parse_rollout_log(text: str) -> dict:
    """``{"label", "lambda", "steps": [(t, parcel, route, cost, reward, shaping)]}``."""
    label, lambdas, steps = None, None, []
    header_seen = False
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("# instance\t"):
            label = line.split("\t", 1)[1]
            continue
        if line.startswith("# lambda\t"):
            lambdas = tuple(float(x) for x in line.split("\t")[1:3])
            continue
        if line == LOG_HEADER:
            header_seen = True
            continue
        if not header_seen:
            raise RecountError(f"line {n}: record before the column header")
        fields = line.split("\t")
        if len(fields) != 6:
            raise RecountError(f"line {n}: expected 6 fields, got {len(fields)}")
        try:
            shaping = {}
            for item in filter(None, fields[5].split(";")):
                k, v = item.split("=")
                shaping[k] = float(v)
            steps.append((int(fields[0]), int(fields[1]), fields[2], float(fields[3]), float(fields[4]), shaping))
        except ValueError:
            raise RecountError(f"line {n}: malformed record") from None
    if not header_seen:
        raise RecountError("missing column header")
    return {"label": label, "lambda": lambdas, "steps": steps}


def recount(instance: Instance, log_text: str, reward_tol: float = 1e-9) -> Report:
    """Rebuild the end-of-episode Report; raises on any inconsistency between log and instance."""
    log = parse_rollout_log(log_text)
    if log["label"] is not None and log["label"] != instance.label:
        raise RecountError(f"log is for instance {log['label']!r}, not {instance.label!r}")
    steps = log["steps"]
    m = instance.m
    if len(steps) != m:
        raise RecountError(f"log has {len(steps)} steps for {m} parcels")

    chosen: list[str] = []
    costs: list[float] = []
    for t, (step, pid, rid, cost, reward, shaping) in enumerate(steps):
        parcel = instance.parcels[t]
        if step != t or pid != parcel.id:
            raise RecountError(f"step {t}: out-of-order or duplicated parcel {pid}")
        offered = dict(parcel.candidates)
        if rid not in offered:
            raise RecountError(f"step {t}: route {rid!r} is not a candidate of parcel {pid}")
        if offered[rid] != cost:
            raise RecountError(f"step {t}: logged cost {cost!r} differs from the instance ({offered[rid]!r})")
        if log["lambda"] is not None:
            lam_cap, lam_prop = log["lambda"]
            weighted = sum((lam_cap if instance.constraint_by_id[k].is_capacity else lam_prop) * v
                           for k, v in shaping.items())
            if abs(reward - (-cost + weighted)) > reward_tol * max(1.0, abs(reward)):
                raise RecountError(f"step {t}: reward {reward!r} does not decompose into cost and shaping")
        chosen.append(rid)
        costs.append(cost)

    flagged: set[int] = set()
    utilization: dict[str, float] = {}
    proportion: dict[str, float] = {}
    for k in instance.constraints:
        if k.is_capacity:
            users = [t for t, p in enumerate(instance.parcels)
                     if chosen[t] in routes_touching_constraint(instance, k, p)]
            over = len(users) - k.upper_bound
            if over > 0:
                flagged.update(users[-over:])
            utilization[k.id] = len(users) / max(float(k.upper_bound), 1.0)
            continue
        of_od = [t for t, p in enumerate(instance.parcels) if p.od == k.od]
        hits = [t for t in of_od if chosen[t] in routes_touching_constraint(instance, k, instance.parcels[t])]
        hit_set = set(hits)
        misses = [t for t in of_od if t not in hit_set]
        n = len(of_od)
        proportion[k.id] = float(len(hits)) / max(n, 1)
        if n == 0:
            continue
        share = Fraction(len(hits), n)
        lo, hi = Fraction(str(k.p_lower)), Fraction(str(k.p_upper))
        if share > hi:
            flagged.update(hits[len(hits) - math.ceil((share - hi) * n):])
        elif share < lo:
            flagged.update(misses[len(misses) - math.ceil((lo - share) * n):])

    total = math.fsum(costs)
    return Report(average_cost=total / m, total_cost=total, violation_rate=len(flagged) / m,
                  violating_parcels=len(flagged), parcels_assigned=m, utilization=utilization,
                  proportion=proportion)


def recount_files(instance_path: str | Path, log_path: str | Path) -> Report:
    return recount(load_instance(instance_path), Path(log_path).read_text())
