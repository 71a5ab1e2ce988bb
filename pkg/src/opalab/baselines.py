"""Non-learning comparison policies: greedy, historical proportions, primal-dual pacing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import EnvState, OnlineAssignmentEnv
from .model import Instance, Parcel
from .oracle import OfflineSolution

log = logging.getLogger(__name__)


class BaselineError(RuntimeError):
    pass


def greedy_assign(parcel: Parcel) -> int:
    """Cheapest candidate; ties go to the lexicographically smallest route id."""
    return min(range(len(parcel.candidates)), key=lambda j: (parcel.candidates[j][1], parcel.candidates[j][0]))


def greedy_rollout(instance: Instance) -> np.ndarray:
    return np.array([greedy_assign(p) for p in instance.parcels], dtype=np.int64)


# -- proportion ------------------------------------------------------------------

TypeKey = tuple[str, str, tuple[str, ...]]


def type_key(parcel: Parcel) -> TypeKey:
    return (parcel.origin, parcel.destination, tuple(sorted(parcel.route_ids)))


@dataclass
class ProportionTable:
    """Per parcel type, route frequencies from offline solutions of past days."""

    vectors: dict[TypeKey, np.ndarray] = field(default_factory=dict)  # aligned with the sorted route ids

    def probabilities(self, parcel: Parcel) -> np.ndarray:
        """Probability of each candidate in the parcel's own candidate order."""
        key = type_key(parcel)
        vec = self.vectors.get(key)
        if vec is None:
            return np.full(len(parcel.candidates), 1.0 / len(parcel.candidates))
        pos = {rid: i for i, rid in enumerate(key[2])}
        return np.array([vec[pos[rid]] for rid in parcel.route_ids])

    def save(self, path: str | Path) -> None:
        lines = ["origin\tdestination\troutes\tprobabilities"]
        for (o, d, routes), vec in sorted(self.vectors.items()):
            lines.append(f"{o}\t{d}\t{','.join(routes)}\t{','.join(repr(float(x)) for x in vec)}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ProportionTable":
        rows = Path(path).read_text().splitlines()
        if not rows or rows[0] != "origin\tdestination\troutes\tprobabilities":
            raise BaselineError("not a proportion table file")
        table = cls()
        for n, line in enumerate(rows[1:], start=2):
            try:
                o, d, routes, probs = line.split("\t")
                vec = np.array([float(x) for x in probs.split(",")])
                ids = tuple(routes.split(","))
            except ValueError:
                raise BaselineError(f"line {n}: malformed proportion record") from None
            if len(vec) != len(ids) or np.any(vec < 0) or abs(vec.sum() - 1.0) > 1e-9:
                raise BaselineError(f"line {n}: probabilities must be nonnegative and sum to 1")
            table.vectors[(o, d, ids)] = vec
        return table


def fit_proportions(history: Sequence[Instance],
                    solver: Callable[[Instance], OfflineSolution]) -> ProportionTable:
    """Solve each past day offline and pool the chosen routes into per-type frequencies."""
    if not history:
        raise BaselineError("empty history")
    counts: dict[TypeKey, dict[str, int]] = {}
    solved = 0
    for day in history:
        try:
            sol = solver(day)
        except Exception as exc:  # noqa: BLE001 - one bad day must not sink the fit
            log.warning("skipping day %s: %s", day.label, exc)
            continue
        if not sol.feasible:
            log.warning("day %s: offline solution is infeasible, using it anyway", day.label)
        solved += 1
        for parcel, slot in zip(day.parcels, sol.slots):
            key = type_key(parcel)
            per = counts.setdefault(key, {rid: 0 for rid in key[2]})
            per[parcel.candidates[int(slot)][0]] += 1
    if solved == 0:
        raise BaselineError("offline solver failed on every historical day")
    table = ProportionTable()
    for key, per in counts.items():
        vec = np.array([per[rid] for rid in key[2]], dtype=float)
        table.vectors[key] = vec / vec.sum()
    return table


def proportion_assign(table: ProportionTable, parcel: Parcel, rng: np.random.Generator) -> int:
    probs = table.probabilities(parcel)
    cum = np.cumsum(probs)
    j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    positive = np.flatnonzero(probs > 0)
    return int(min(j, positive[-1]))


def proportion_rollout(table: ProportionTable, instance: Instance, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.array([proportion_assign(table, p, rng) for p in instance.parcels], dtype=np.int64)


# -- primal-dual pacing ------------------------------------------------------------

@dataclass
class DualPrices:
    """Dual prices with linear pacing targets; requires the day's true volume ``m``."""

    m: int
    eta: np.ndarray            # per capacity row then per proportion row
    cap_upper: np.ndarray
    mu_cap: np.ndarray
    mu_prop_up: np.ndarray
    mu_prop_lo: np.ndarray

    @classmethod
    def init(cls, instance: Instance, m: int | None = None, eta: float | None = None) -> "DualPrices":
        """Zero duals. Default step ``1 / (mean candidate cost * m)`` for every row."""
        m = instance.m if m is None else m
        if m <= 0:
            raise BaselineError("known volume m must be positive")
        arr = instance.arrays
        if eta is None:
            mean_cost = float(arr.cand_cost[arr.cand_mask].mean())
            eta = 1.0 / (mean_cost * m)
        n_cap, n_prop = len(arr.cap_index), len(arr.prop_index)
        return cls(m, np.full(n_cap + n_prop, float(eta)), arr.cap_upper.copy(),
                   np.zeros(n_cap), np.zeros(n_prop), np.zeros(n_prop))


def pdo_reduced_costs(duals: DualPrices, parcel: Parcel, instance: Instance) -> np.ndarray:
    arr = instance.arrays
    routes = arr.cand_route[parcel.id, :len(parcel.candidates)]
    price = arr.route_cap[routes] @ duals.mu_cap
    if len(duals.mu_prop_up):
        price = price + arr.route_prop[routes] @ (duals.mu_prop_up - duals.mu_prop_lo)
    return np.asarray(parcel.costs) + price


def pdo_assign(duals: DualPrices, parcel: Parcel, state: EnvState) -> int:
    """Minimum reduced cost; ties by raw cost, then route id."""
    reduced = pdo_reduced_costs(duals, parcel, state.instance)
    return min(range(len(parcel.candidates)),
               key=lambda j: (reduced[j], parcel.candidates[j][1], parcel.candidates[j][0]))


def pdo_update(duals: DualPrices, state: EnvState, t: int) -> DualPrices:
    """Subgradient step after ``t`` parcels have been assigned (in place; returns ``duals``)."""
    arr = state.instance.arrays
    n_cap = len(duals.mu_cap)
    used = state.hub_used[arr.cap_hub].astype(float)
    duals.mu_cap = np.maximum(0.0, duals.mu_cap + duals.eta[:n_cap] * (used - duals.cap_upper * t / duals.m))
    if len(duals.mu_prop_up):
        seen = state.prop_seen.astype(float)
        target = state.prop_target.astype(float)
        eta_p = duals.eta[n_cap:]
        duals.mu_prop_up = np.maximum(0.0, duals.mu_prop_up + eta_p * (target - arr.prop_upper * seen))
        duals.mu_prop_lo = np.maximum(0.0, duals.mu_prop_lo + eta_p * (arr.prop_lower * seen - target))
    return duals


def pdo_rollout(instance: Instance, eta: float | None = None, m: int | None = None) -> np.ndarray:
    env = OnlineAssignmentEnv(instance)
    state, _ = env.reset()
    duals = DualPrices.init(instance, m, eta)
    for parcel in instance.parcels:
        a = pdo_assign(duals, parcel, state)
        _, state, _ = env.step(state, a)
        pdo_update(duals, state, state.t)
    return np.asarray(state.assignment_log, dtype=np.int64)
