"""Online assignment MDP: constraint-state tracking, shaped rewards, observations, metrics.

The state is the live constraint status: cumulative parcels through every hub
and, per proportion constraint, how many parcels of its OD have been seen and
how many of those went to its provider. The observation is the featurized
incoming parcel. Shaping terms are always evaluated on the state *before* the
chosen assignment is applied.

Two front ends share the numeric core:

* :class:`OnlineAssignmentEnv` - one trajectory, explicit :class:`EnvState`;
* :class:`BatchEnv` - ``B`` trajectories over the same instance advanced in
  lockstep, used for training rollouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ConstraintSpec, Instance, InstanceArrays, Parcel

LAMBDA_CAPACITY = 10.0
LAMBDA_PROPORTION = 300.0

PARCEL_DIM = 4   # normalized weight, origin index, destination index, candidates / N_R
ROUTE_DIM = 5    # normalized cost, max util, mean util, proportion deviation, provider index + 1
_EPS_COUNT = 1e-9


class EnvError(RuntimeError):
    pass


class InvalidAction(EnvError):
    pass


@dataclass
class Observation:
    """Featurized parcel; arrays may carry a leading batch axis."""

    parcel_feat: np.ndarray
    route_feats: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return 1 if self.parcel_feat.ndim == 1 else self.parcel_feat.shape[0]


@dataclass
class EnvState:
    """Constraint status at step ``t``; mutated in place by :meth:`OnlineAssignmentEnv.step`."""

    instance: Instance
    t: int
    hub_used: np.ndarray      # (n_hubs,) int, cumulative parcels through each hub
    prop_seen: np.ndarray     # (n_prop,) int, parcels of the constraint's OD so far
    prop_target: np.ndarray   # (n_prop,) int, of those, parcels routed to the constraint's provider
    assignment_log: list[int] = field(default_factory=list)  # chosen candidate slot per parcel

    def copy(self) -> "EnvState":
        return EnvState(self.instance, self.t, self.hub_used.copy(), self.prop_seen.copy(),
                        self.prop_target.copy(), list(self.assignment_log))

    @property
    def done(self) -> bool:
        return self.t >= self.instance.m

    def hub_usage(self) -> dict[str, int]:
        return dict(zip(self.instance.arrays.hubs, (int(x) for x in self.hub_used)))

    def prop_counters(self) -> dict[str, tuple[int, int]]:
        arr = self.instance.arrays
        return {self.instance.constraints[ci].id: (int(s), int(g))
                for ci, s, g in zip(arr.prop_index, self.prop_seen, self.prop_target)}

    def chosen_routes(self) -> list[str]:
        return [self.instance.parcels[t].candidates[a][0] for t, a in enumerate(self.assignment_log)]


@dataclass
class Report:
    average_cost: float
    total_cost: float
    violation_rate: float
    violating_parcels: int
    parcels_assigned: int
    utilization: dict[str, float]   # capacity constraint id -> final count / U
    proportion: dict[str, float]    # proportion constraint id -> final share

    def row(self) -> dict[str, float]:
        return {"average_cost": self.average_cost, "violation_rate": self.violation_rate}


# -- numeric core ------------------------------------------------------------

def _cap_utilization(arr: InstanceArrays, hub_used: np.ndarray) -> np.ndarray:
    return hub_used[..., arr.cap_hub] / np.maximum(arr.cap_upper, 1.0)


def _prop_share(seen: np.ndarray, target: np.ndarray) -> np.ndarray:
    return target / np.maximum(seen, 1)


def proportion_shaping(p: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Positive below the band, negative above it, zero inside."""
    return np.where(p < lower, lower - p, 0.0) - np.where(p > upper, p - upper, 0.0)


def capacity_shaping(util: np.ndarray) -> np.ndarray:
    return np.exp(-util)


def slot_incidence(arr: InstanceArrays, t) -> tuple[np.ndarray, np.ndarray]:
    """Constraint incidence of the candidate slots of parcel(s) ``t``: ``(... N_R, n_cap)``, ``(... N_R, n_prop)``."""
    mask = arr.cand_mask[t]
    safe = np.where(mask, arr.cand_route[t], 0)
    return arr.route_cap[safe] * mask[..., None], arr.route_prop[safe] * mask[..., None]


def slot_terms(arr: InstanceArrays, t: int, hub_used: np.ndarray, prop_seen: np.ndarray,
               prop_target: np.ndarray, incidence: tuple[np.ndarray, np.ndarray] | None = None):
    """Per-candidate-slot shaping sums and state features for parcel ``t``.

    Returns ``(cap_sum, prop_sum, max_util, mean_util, prop_dev)``, each with
    shape ``batch + (N_R,)``; padded slots are 0. ``incidence`` may pass a
    precomputed :func:`slot_incidence` for ``t``.
    """
    mask = arr.cand_mask[t]
    inc_cap, inc_prop = slot_incidence(arr, t) if incidence is None else incidence

    util = _cap_utilization(arr, hub_used)                  # batch + (n_cap,)
    cap_sum = capacity_shaping(util) @ inc_cap.T
    n_touch = inc_cap.sum(axis=1)
    mean_util = (util @ inc_cap.T) / np.maximum(n_touch, 1.0)
    if inc_cap.shape[1]:
        masked_util = np.where(inc_cap.astype(bool), util[..., None, :], -np.inf)
        max_util = np.max(masked_util, axis=-1)
        max_util = np.where(np.isfinite(max_util), max_util, 0.0)
    else:
        max_util = np.zeros(util.shape[:-1] + (len(mask),))

    if inc_prop.shape[1]:
        f_prop = proportion_shaping(_prop_share(prop_seen, prop_target), arr.prop_lower, arr.prop_upper)
        prop_sum = f_prop @ inc_prop.T
    else:
        prop_sum = np.zeros_like(cap_sum)
    return cap_sum, prop_sum, max_util, mean_util, prop_sum


def static_features(arr: InstanceArrays, n_r: int, t=slice(None)) -> tuple[np.ndarray, np.ndarray]:
    """State-independent features of parcel(s) ``t``: parcel rows and route rows with the state columns zeroed."""
    max_weight = float(arr.weight.max())
    mask = arr.cand_mask[t]
    parcel = np.stack([arr.weight[t] / max_weight if max_weight > 0 else arr.weight[t] * 0.0,
                       arr.parcel_origin[t].astype(float), arr.parcel_dest[t].astype(float),
                       arr.n_cand[t] / n_r], axis=-1)
    prov = np.where(mask, arr.route_provider[np.where(mask, arr.cand_route[t], 0)] + 1, 0)
    routes = np.zeros(mask.shape + (ROUTE_DIM,))
    routes[..., 0] = np.where(mask, arr.cand_cost[t] / arr.max_cost if arr.max_cost > 0 else arr.cand_cost[t], 0.0)
    routes[..., 4] = prov
    return parcel, routes


def _observation(parcel: np.ndarray, routes: np.ndarray, mask: np.ndarray, terms, batch: tuple) -> Observation:
    _, _, max_util, mean_util, prop_dev = terms
    feats = np.empty(batch + routes.shape)
    feats[...] = routes
    feats[..., 1] = max_util * mask
    feats[..., 2] = mean_util * mask
    feats[..., 3] = prop_dev * mask
    return Observation(np.broadcast_to(parcel, batch + parcel.shape).copy(), feats,
                       np.broadcast_to(mask, batch + mask.shape).copy())


def featurize(arr: InstanceArrays, n_r: int, t: int, hub_used: np.ndarray, prop_seen: np.ndarray,
              prop_target: np.ndarray) -> Observation:
    parcel, routes = static_features(arr, n_r, t)
    terms = slot_terms(arr, t, hub_used, prop_seen, prop_target)
    return _observation(parcel, routes, arr.cand_mask[t], terms, hub_used.shape[:-1])


def apply_assignment(arr: InstanceArrays, t: int, slot, hub_used, prop_seen, prop_target) -> None:
    """Increment counters in place; ``slot`` is an int or an int array matching the batch axis."""
    route = arr.cand_route[t, slot]
    hub_used += arr.route_hub[route].astype(hub_used.dtype)
    if prop_seen.shape[-1]:
        prop_seen += arr.od_prop[arr.parcel_od[t]].astype(prop_seen.dtype)
        prop_target += arr.route_prop[route].astype(prop_target.dtype)


# -- single trajectory -------------------------------------------------------

class OnlineAssignmentEnv:
    """One rollout over an instance. ``m`` is never exposed through observations."""

    def __init__(self, instance: Instance, lambda_cap: float = LAMBDA_CAPACITY,
                 lambda_prop: float = LAMBDA_PROPORTION):
        self.instance = instance
        self.arr = instance.arrays
        self.lambda_cap = lambda_cap
        self.lambda_prop = lambda_prop

    def reset(self) -> tuple[EnvState, Observation]:
        arr = self.arr
        state = EnvState(self.instance, 0, np.zeros(len(arr.hubs), dtype=np.int64),
                         np.zeros(len(arr.prop_index), dtype=np.int64),
                         np.zeros(len(arr.prop_index), dtype=np.int64))
        return state, self.observe(state)

    def observe(self, state: EnvState) -> Observation:
        return featurize(self.arr, self.instance.n_r_max, state.t, state.hub_used, state.prop_seen,
                         state.prop_target)

    def shaping(self, state: EnvState, k: ConstraintSpec) -> float:
        return shaping(state, k)

    def shaping_terms(self, state: EnvState, slot: int) -> dict[str, float]:
        """Unweighted shaping value of every constraint touched by ``slot`` of the current parcel."""
        inst = self.instance
        parcel = inst.parcels[state.t]
        route = inst.route_by_id[parcel.candidates[slot][0]]
        out = {}
        for k in inst.constraints:
            if k.is_capacity:
                if k.hub_id in route.hub_ids:
                    out[k.id] = shaping(state, k)
            elif k.od == parcel.od and k.provider_id == route.provider_id:
                out[k.id] = shaping(state, k)
        return out

    def reward(self, state: EnvState, parcel: Parcel, action: int) -> float:
        if not 0 <= action < len(parcel.candidates):
            raise InvalidAction(f"slot {action} is not a real candidate of parcel {parcel.id}")
        cap_sum, prop_sum, *_ = slot_terms(self.arr, parcel.id, state.hub_used, state.prop_seen,
                                           state.prop_target)
        return float(-parcel.candidates[action][1] + self.lambda_cap * cap_sum[action]
                     + self.lambda_prop * prop_sum[action])

    def step(self, state: EnvState, action: int) -> tuple[float, EnvState, Observation | None]:
        """Apply ``action`` to ``state`` (in place); the next observation is None at episode end."""
        if state.done:
            raise EnvError("step after episode end")
        parcel = self.instance.parcels[state.t]
        r = self.reward(state, parcel, action)
        apply_assignment(self.arr, state.t, action, state.hub_used, state.prop_seen, state.prop_target)
        state.assignment_log.append(int(action))
        state.t += 1
        return r, state, (None if state.done else self.observe(state))

    def finalize(self, state: EnvState) -> Report:
        if not state.done:
            raise EnvError("finalize called mid-episode")
        return evaluate_assignment(self.instance, np.asarray(state.assignment_log))


def shaping(state: EnvState, k: ConstraintSpec) -> float:
    """Shaping value of constraint ``k`` at ``state``."""
    inst = state.instance
    if k.is_capacity:
        used = int(state.hub_used[inst.arrays.hubs.index(k.hub_id)])
        return math.exp(-used / max(k.upper_bound, 1))
    pos = [inst.constraints[i].id for i in inst.arrays.prop_index].index(k.id)
    seen, target = int(state.prop_seen[pos]), int(state.prop_target[pos])
    p = target / max(seen, 1)
    if p < k.p_lower:
        return k.p_lower - p
    if p > k.p_upper:
        return -(p - k.p_upper)
    return 0.0


# -- metrics -----------------------------------------------------------------

def _excess_count(x: float) -> int:
    return max(0, math.ceil(x - _EPS_COUNT))


def violating_parcels(instance: Instance, slots: np.ndarray) -> np.ndarray:
    """Boolean flag per parcel under the end-of-horizon recount rule.

    Capacity: the chronologically last ``count - U`` parcels through the hub.
    Proportion above the band: the last ``ceil((p - p_upper) n)`` parcels of the
    OD sent to the provider; below the band: the last ``ceil((p_lower - p) n)``
    parcels of the OD sent elsewhere.
    """
    arr = instance.arrays
    m = instance.m
    routes = arr.cand_route[np.arange(m), slots]
    flags = np.zeros(m, dtype=bool)
    through = arr.route_cap[routes]                         # (m, n_cap)
    for c in range(len(arr.cap_index)):
        users = np.flatnonzero(through[:, c])
        over = len(users) - int(arr.cap_upper[c])
        if over > 0:
            flags[users[-over:]] = True
    for c in range(len(arr.prop_index)):
        of_od = np.flatnonzero(arr.parcel_od == arr.prop_od[c])
        n = len(of_od)
        if n == 0:
            continue
        hit = arr.route_prop[routes[of_od], c] > 0
        target = int(hit.sum())
        lo, hi = arr.prop_lower[c], arr.prop_upper[c]
        if target / n > hi:
            k = _excess_count(target - hi * n)
            if k:
                flags[of_od[hit][-k:]] = True
        elif target / n < lo:
            k = _excess_count(lo * n - target)
            if k:
                flags[of_od[~hit][-k:]] = True
    return flags


def evaluate_assignment(instance: Instance, slots: Sequence[int] | np.ndarray) -> Report:
    arr = instance.arrays
    slots = np.asarray(slots, dtype=np.int64)
    if slots.shape != (instance.m,):
        raise EnvError("assignment must cover every parcel exactly once")
    if np.any(slots < 0) or np.any(slots >= arr.n_cand):
        raise InvalidAction("assignment uses a padded candidate slot")
    m = instance.m
    costs = arr.cand_cost[np.arange(m), slots]
    total = math.fsum(costs.tolist())   # exactly rounded, independent of summation order
    flags = violating_parcels(instance, slots)
    routes = arr.cand_route[np.arange(m), slots]
    counts = arr.route_cap[routes].sum(axis=0)
    util = {instance.constraints[ci].id: float(counts[c] / max(arr.cap_upper[c], 1.0))
            for c, ci in enumerate(arr.cap_index)}
    share = {}
    for c, ci in enumerate(arr.prop_index):
        of_od = arr.parcel_od == arr.prop_od[c]
        n = int(of_od.sum())
        share[instance.constraints[ci].id] = float(arr.route_prop[routes[of_od], c].sum() / max(n, 1))
    n_viol = int(flags.sum())
    return Report(average_cost=total / m, total_cost=total, violation_rate=n_viol / m,
                  violating_parcels=n_viol, parcels_assigned=m, utilization=util, proportion=share)


# -- batched rollouts --------------------------------------------------------

class BatchEnv:
    """``batch`` trajectories over one instance advanced together, one parcel per step."""

    def __init__(self, instance: Instance, batch: int, lambda_cap: float = LAMBDA_CAPACITY,
                 lambda_prop: float = LAMBDA_PROPORTION):
        self.instance = instance
        self.arr = instance.arrays
        self.batch = batch
        self.lambda_cap = lambda_cap
        self.lambda_prop = lambda_prop
        self.parcel_static, self.route_static = static_features(self.arr, instance.n_r_max)
        self.inc_cap, self.inc_prop = slot_incidence(self.arr, slice(None))
        self.reset()

    def reset(self) -> Observation:
        arr, b = self.arr, self.batch
        self.t = 0
        self.hub_used = np.zeros((b, len(arr.hubs)), dtype=np.int64)
        self.prop_seen = np.zeros((b, len(arr.prop_index)), dtype=np.int64)
        self.prop_target = np.zeros((b, len(arr.prop_index)), dtype=np.int64)
        self.slots = np.zeros((b, self.instance.m), dtype=np.int64)
        self._terms = None
        return self.observe()

    @property
    def done(self) -> bool:
        return self.t >= self.instance.m

    def _current_terms(self):
        if self._terms is None:
            t = self.t
            self._terms = slot_terms(self.arr, t, self.hub_used, self.prop_seen, self.prop_target,
                                     (self.inc_cap[t], self.inc_prop[t]))
        return self._terms

    def observe(self) -> Observation:
        t = self.t
        return _observation(self.parcel_static[t], self.route_static[t], self.arr.cand_mask[t],
                            self._current_terms(), (self.batch,))

    def slot_rewards(self):
        """``(cost, cap_sum, prop_sum)`` for every slot, each ``(batch, N_R)``."""
        cap_sum, prop_sum, *_ = self._current_terms()
        cost = np.broadcast_to(self.arr.cand_cost[self.t], cap_sum.shape)
        return cost, cap_sum, prop_sum

    def step(self, actions: np.ndarray):
        """Returns ``(reward, cost, cap_sum, prop_sum, next_obs | None)`` for the chosen slots."""
        if self.done:
            raise EnvError("step after episode end")
        actions = np.asarray(actions, dtype=np.int64)
        if np.any(actions < 0) or np.any(actions >= self.arr.n_cand[self.t]):
            raise InvalidAction(f"masked action at step {self.t}")
        cost, cap_sum, prop_sum = self.slot_rewards()
        rows = np.arange(self.batch)
        c, fc, fp = cost[rows, actions], cap_sum[rows, actions], prop_sum[rows, actions]
        reward = -c + self.lambda_cap * fc + self.lambda_prop * fp
        apply_assignment(self.arr, self.t, actions, self.hub_used, self.prop_seen, self.prop_target)
        self.slots[:, self.t] = actions
        self.t += 1
        self._terms = None
        return reward, c, fc, fp, (None if self.done else self.observe())

    def reports(self) -> list[Report]:
        if not self.done:
            raise EnvError("finalize called mid-episode")
        return [evaluate_assignment(self.instance, self.slots[b]) for b in range(self.batch)]


# -- rollout logs --------------------------------------------------------------

LOG_HEADER = "t\tparcel\troute\tcost\treward\tshaping"


def rollout_log_lines(env: OnlineAssignmentEnv, slots: Sequence[int]) -> list[str]:
    """Replay ``slots`` and emit one delimited record per step (unweighted shaping per constraint)."""
    state, _ = env.reset()
    lines = [f"# instance\t{env.instance.label}",
             f"# lambda\t{env.lambda_cap!r}\t{env.lambda_prop!r}",
             LOG_HEADER]
    for slot in slots:
        terms = env.shaping_terms(state, int(slot))
        parcel = env.instance.parcels[state.t]
        rid, cost = parcel.candidates[int(slot)]
        t = state.t
        r, state, _ = env.step(state, int(slot))
        shp = ";".join(f"{k}={v!r}" for k, v in terms.items())
        lines.append(f"{t}\t{parcel.id}\t{rid}\t{cost!r}\t{r!r}\t{shp}")
    return lines


def write_rollout_log(path: str | Path, env: OnlineAssignmentEnv, slots: Sequence[int]) -> None:
    Path(path).write_text("\n".join(rollout_log_lines(env, slots)) + "\n")
