"""Offline solvers for the parcel assignment integer program.

Every parcel takes exactly one candidate; every constraint row bounds how many
parcels use it. Capacity rows are ``0 <= count <= U``; proportion rows use the
known daily OD volume ``n``: ``p_lower * n <= count <= p_upper * n``.

* :func:`solve_exact` - depth-first enumeration with bound and feasibility pruning;
* :func:`solve_bound` - Lagrangian dual by projected subgradient ascent plus a
  repaired primal incumbent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Instance, routes_touching_constraint

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 10**6
_TOL = 1e-9


class OracleError(RuntimeError):
    pass


class BudgetExceeded(OracleError):
    pass


@dataclass
class OfflineSolution:
    slots: np.ndarray            # chosen candidate slot per parcel
    objective: float             # total cost of ``slots``
    feasible: bool
    bound: float                 # lower bound on the optimum
    exact: bool = False
    violated: list[str] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.slots)

    @property
    def reference_average(self) -> float:
        """Average cost used as the IP-gap reference (optimum if exact, else the lower bound)."""
        return (self.objective if self.exact else self.bound) / self.m

    def route_ids(self, instance: Instance) -> list[str]:
        return [p.candidates[int(s)][0] for p, s in zip(instance.parcels, self.slots)]


@dataclass(frozen=True)
class CouplingRows:
    """Constraint rows in dense form: ``lower <= sum_i inc[i, slot_i] <= upper``."""

    ids: tuple[str, ...]
    inc: np.ndarray      # (m, N_R, K) 0/1
    lower: np.ndarray    # (K,)
    upper: np.ndarray    # (K,)


def coupling_rows(instance: Instance) -> CouplingRows:
    arr = instance.arrays
    safe = np.where(arr.cand_mask, arr.cand_route, 0)
    mask = arr.cand_mask[..., None]
    inc_cap = arr.route_cap[safe] * mask
    inc_prop = arr.route_prop[safe] * mask
    n_od = np.bincount(arr.parcel_od, minlength=len(arr.od_list)).astype(float)
    n_k = n_od[arr.prop_od] if len(arr.prop_od) else np.zeros(0)
    ids = tuple(instance.constraints[i].id for i in arr.cap_index) + \
        tuple(instance.constraints[i].id for i in arr.prop_index)
    lower = np.concatenate([np.zeros(len(arr.cap_index)), arr.prop_lower * n_k])
    upper = np.concatenate([arr.cap_upper, arr.prop_upper * n_k])
    return CouplingRows(ids, np.concatenate([inc_cap, inc_prop], axis=2), lower, upper)


def check_feasible(instance: Instance, assignment: Sequence[int]) -> tuple[bool, list[str]]:
    """Recount every constraint from scratch; ``assignment`` holds one candidate slot per parcel."""
    if len(assignment) != instance.m:
        raise OracleError(f"assignment covers {len(assignment)} of {instance.m} parcels")
    chosen = []
    for p, s in zip(instance.parcels, assignment):
        s = int(s)
        if not 0 <= s < len(p.candidates):
            raise OracleError(f"parcel {p.id}: slot {s} is not a candidate")
        chosen.append(p.candidates[s][0])
    violated = []
    for k in instance.constraints:
        count = 0
        n_k = 0
        for p, rid in zip(instance.parcels, chosen):
            if not k.is_capacity and p.od == k.od:
                n_k += 1
            if rid in routes_touching_constraint(instance, k, p):
                count += 1
        if k.is_capacity:
            ok = count <= k.upper_bound
        else:
            ok = k.p_lower * n_k - _TOL <= count <= k.p_upper * n_k + _TOL
        if not ok:
            violated.append(k.id)
    return not violated, violated


def _objective(instance: Instance, slots: np.ndarray) -> float:
    arr = instance.arrays
    return math.fsum(arr.cand_cost[np.arange(instance.m), slots].tolist())   # same rounding as the env


# -- exact -------------------------------------------------------------------

def search_space(instance: Instance) -> int:
    return math.prod(len(p.candidates) for p in instance.parcels)


def solve_exact(instance: Instance, budget: int = DEFAULT_BUDGET) -> OfflineSolution:
    """Minimum-cost feasible assignment by pruned enumeration.

    Among equal-cost optima the lexicographically smallest slot vector wins.
    Raises :class:`BudgetExceeded` when the full search space exceeds ``budget``.
    """
    size = search_space(instance)
    if size > budget:
        raise BudgetExceeded(f"search space {size} exceeds budget {budget}; use solve_bound")
    rows = coupling_rows(instance)
    arr = instance.arrays
    m, n_rows = instance.m, len(rows.ids)
    costs = [list(arr.cand_cost[i, :arr.n_cand[i]]) for i in range(m)]
    touches = [[np.flatnonzero(rows.inc[i, j]).tolist() for j in range(arr.n_cand[i])] for i in range(m)]
    # max further contribution each row can still receive from parcels i..m-1
    can_add = np.zeros((m + 1, n_rows))
    for i in range(m - 1, -1, -1):
        can_add[i] = can_add[i + 1] + rows.inc[i].max(axis=0)
    min_rest = np.zeros(m + 1)
    for i in range(m - 1, -1, -1):
        min_rest[i] = min_rest[i + 1] + min(costs[i])
    lower = rows.lower - _TOL
    upper = rows.upper + _TOL
    usage = np.zeros(n_rows)
    current = [0] * m
    best_cost = math.inf
    best: list[int] | None = None

    def dfs(i: int, cost: float) -> None:
        nonlocal best_cost, best
        if i == m:
            if cost < best_cost:
                best_cost, best = cost, list(current)
            return
        for j, c in enumerate(costs[i]):
            new_cost = cost + c
            if new_cost + min_rest[i + 1] >= best_cost:
                continue
            rows_j = touches[i][j]
            ok = True
            for k in rows_j:
                usage[k] += 1
            for k in rows_j:
                if usage[k] > upper[k]:
                    ok = False
                    break
            if ok and n_rows:
                # lower bounds must stay reachable
                ok = bool(np.all(usage + can_add[i + 1] >= lower))
            if ok:
                current[i] = j
                dfs(i + 1, new_cost)
            for k in rows_j:
                usage[k] -= 1

    dfs(0, 0.0)
    if best is None:
        greedy = np.argmin(np.where(arr.cand_mask, arr.cand_cost, np.inf), axis=1)
        return OfflineSolution(greedy, _objective(instance, greedy), False, math.inf, exact=True,
                               violated=check_feasible(instance, greedy)[1])
    slots = np.array(best, dtype=np.int64)
    obj = _objective(instance, slots)
    return OfflineSolution(slots, obj, True, obj, exact=True)


# -- Lagrangian bound --------------------------------------------------------

def lagrangian_value(rows: CouplingRows, cost: np.ndarray, mask: np.ndarray,
                     mu_up: np.ndarray, mu_lo: np.ndarray) -> tuple[float, np.ndarray]:
    """Dual function value and the separable minimizer for multipliers ``mu_up, mu_lo >= 0``."""
    reduced = cost + rows.inc @ (mu_up - mu_lo)
    reduced = np.where(mask, reduced, np.inf)
    slots = np.argmin(reduced, axis=1)
    picked = math.fsum(reduced[np.arange(len(slots)), slots].tolist())
    return picked - float(mu_up @ rows.upper) + float(mu_lo @ rows.lower), slots


def solve_bound(instance: Instance, iterations: int = 300, step0: float | None = None) -> OfflineSolution:
    """Projected subgradient ascent on the Lagrangian dual.

    Step ``s`` (1-based) moves each multiplier by ``step0 / sqrt(s)`` times the
    row's relative violation (violation divided by ``max(bound, 1)``).
    ``step0`` defaults to the mean spread between a parcel's most and least
    expensive candidates, the scale on which multipliers trade off costs.
    """
    arr = instance.arrays
    rows = coupling_rows(instance)
    cost, mask = arr.cand_cost, arr.cand_mask
    if step0 is None:
        hi = np.where(mask, cost, -np.inf).max(axis=1)
        lo = np.where(mask, cost, np.inf).min(axis=1)
        step0 = float(np.mean(hi - lo)) or float(np.mean(lo)) or 1.0
    n_rows = len(rows.ids)
    mu_up = np.zeros(n_rows)
    mu_lo = np.zeros(n_rows)
    scale = np.maximum(rows.upper, 1.0)
    best_val, best_slots = lagrangian_value(rows, cost, mask, mu_up, mu_lo)
    m = instance.m
    for s in range(1, iterations + 1):
        if n_rows == 0:
            break
        val, slots = lagrangian_value(rows, cost, mask, mu_up, mu_lo)
        if val > best_val:
            best_val, best_slots = val, slots
        usage = rows.inc[np.arange(m), slots].sum(axis=0)
        g_up = (usage - rows.upper) / scale
        g_lo = (rows.lower - usage) / scale
        if not np.any(g_up > 0) and not np.any(g_lo > 0) and \
                np.all(mu_up * g_up == 0) and np.all(mu_lo * g_lo == 0):
            break  # complementary slackness: the relaxed minimizer is optimal
        eta = step0 / math.sqrt(s)
        mu_up = np.maximum(0.0, mu_up + eta * g_up)
        mu_lo = np.maximum(0.0, mu_lo + eta * g_lo)
    val, slots = lagrangian_value(rows, cost, mask, mu_up, mu_lo)
    if val > best_val:
        best_val, best_slots = val, slots

    # incumbent: repair the relaxed solution at the best multipliers, keep the cheaper feasible one
    incumbent = repair(instance, best_slots, rows)
    feasible, violated = _fast_feasible(rows, incumbent)
    obj = _objective(instance, incumbent)
    bound = min(best_val, obj) if feasible else best_val
    return OfflineSolution(incumbent, obj, feasible, bound, exact=False, violated=violated)


def _fast_feasible(rows: CouplingRows, slots: np.ndarray) -> tuple[bool, list[str]]:
    usage = rows.inc[np.arange(len(slots)), slots].sum(axis=0)
    bad = (usage > rows.upper + _TOL) | (usage < rows.lower - _TOL)
    return not bad.any(), [rows.ids[k] for k in np.flatnonzero(bad)]


def repair(instance: Instance, slots: np.ndarray, rows: CouplingRows | None = None,
           max_rounds: int = 50) -> np.ndarray:
    """Greedy feasibility repair.

    Each round lists every single-parcel move off a violated row, cheapest
    cost increase first, and applies a move when it lowers the total violation
    without pushing any row past its bounds.
    """
    rows = rows or coupling_rows(instance)
    arr = instance.arrays
    slots = np.array(slots, dtype=np.int64)
    m = instance.m
    touches = {}
    usage = rows.inc[np.arange(m), slots].sum(axis=0)
    lower = rows.lower - _TOL
    upper = rows.upper + _TOL

    def rows_of(i: int, j: int) -> list[int]:
        key = (i, j)
        if key not in touches:
            touches[key] = np.flatnonzero(rows.inc[i, j]).tolist()
        return touches[key]

    for _ in range(max_rounds):
        over = usage > upper
        under = usage < lower
        if not over.any() and not under.any():
            break
        cur_inc = rows.inc[np.arange(m), slots]                       # (m, K)
        # a move off the current slot helps if it leaves an over row or can enter an under row
        helps_off = (cur_inc[:, over].sum(axis=1) > 0)
        helps_on = (rows.inc[:, :, under].sum(axis=2) > 0).any(axis=1)
        cand = np.flatnonzero(helps_off | helps_on)
        if len(cand) == 0:
            break
        delta = arr.cand_cost[cand] - arr.cand_cost[cand, slots[cand]][:, None]
        delta = np.where(arr.cand_mask[cand], delta, np.inf)
        delta[np.arange(len(cand)), slots[cand]] = np.inf
        order = np.argsort(delta, axis=None, kind="stable")
        moved = False
        for flat in order:
            ci, j = divmod(int(flat), arr.cand_cost.shape[1])
            if not np.isfinite(delta[ci, j]):
                break
            i = int(cand[ci])
            old = rows_of(i, int(slots[i]))
            new = rows_of(i, j)
            gain = 0.0
            ok = True
            for k in old:
                if k in new:
                    continue
                if usage[k] - 1 < lower[k]:
                    ok = False
                    break
                if usage[k] > upper[k]:
                    gain += 1
            if not ok:
                continue
            for k in new:
                if k in old:
                    continue
                if usage[k] + 1 > upper[k]:
                    ok = False
                    break
                if usage[k] < lower[k]:
                    gain += 1
            if not ok or gain <= 0:
                continue
            for k in old:
                usage[k] -= 1
            for k in new:
                usage[k] += 1
            slots[i] = j
            moved = True
        if not moved:
            break
    return slots


def ip_gap(report_cost: float, reference: OfflineSolution) -> float:
    """Relative average-cost gap of a policy against the offline reference (may be negative)."""
    ref = reference.reference_average
    if not ref > 0:
        raise OracleError("reference average cost must be positive")
    return (report_cost - ref) / ref


def gap_label(reference: OfflineSolution) -> str:
    return "IP gap" if reference.exact else "gap vs lower bound"


def solve(instance: Instance, tier: str = "auto", budget: int = DEFAULT_BUDGET,
          iterations: int = 300) -> OfflineSolution:
    if tier == "exact" or (tier == "auto" and search_space(instance) <= budget):
        return solve_exact(instance, budget)
    if tier in ("bound", "auto"):
        return solve_bound(instance, iterations)
    raise OracleError(f"unknown oracle tier {tier!r}")


def write_solution(path: str | Path, instance: Instance, sol: OfflineSolution) -> None:
    lines = ["parcel\troute"]
    lines += [f"{p.id}\t{rid}" for p, rid in zip(instance.parcels, sol.route_ids(instance))]
    lines += ["# summary",
              f"objective\t{sol.objective!r}",
              f"bound\t{sol.bound!r}",
              f"feasible\t{int(sol.feasible)}",
              f"exact\t{int(sol.exact)}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_solution(path: str | Path, instance: Instance) -> OfflineSolution:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "parcel\troute":
        raise OracleError("not a solution file")
    split = text.index("# summary")
    slots = []
    for t, line in enumerate(text[1:split]):
        pid, rid = line.split("\t")
        parcel = instance.parcels[int(pid)]
        ids = parcel.route_ids
        if int(pid) != t or rid not in ids:
            raise OracleError(f"solution line {t + 2} does not match the instance")
        slots.append(ids.index(rid))
    summary = dict(line.split("\t") for line in text[split + 1:])
    return OfflineSolution(np.array(slots, dtype=np.int64), float(summary["objective"]),
                           summary["feasible"] == "1", float(summary["bound"]), summary["exact"] == "1")
