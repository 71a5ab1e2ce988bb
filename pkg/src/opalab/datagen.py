"""Synthetic OPA instances with controllable constraint tightness.

Structure of a generated day:

* every OD pair owns a small catalog of routes (provider + a fixed number of
  hubs) and a pool of candidate sets drawn from that catalog; a parcel of
  that OD gets one of the pooled sets as its candidates;
* a route's cost for a parcel is ``sum(leg costs) * (1 + weight_factor * w)``
  plus lognormal noise, so the cheapest candidate varies between parcels;
* every hub gets a capacity constraint. Hubs are ranked by leg cost and the
  cheapest ``tight_hub_fraction`` of them get ``capacity_tightness``; the rest
  get ``min(capacity_tightness, slack_tightness)``. Tightness is the expected
  uniform-assignment load divided by the upper bound.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .model import ConstraintSpec, Instance, Parcel, Route


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_parcels: int = 10_000
    n_hubs: int = 20
    n_od_pairs: int = 40
    n_providers: int = 4
    routes_per_parcel: tuple[int, int] = (2, 4)
    hubs_per_route: int = 2
    routes_per_od: int = 5
    candidate_sets_per_od: int = 3
    leg_cost: tuple[float, float] = (20.0, 22.0)
    provider_fee: tuple[float, float] = (0.0, 1.0)
    weight_factor: float = 0.05
    weight_median: float = 2.0
    noise_scale: float = 0.5
    capacity_tightness: float = 1.2
    slack_tightness: float = 0.6
    tight_hub_fraction: float = 0.5
    proportion_fraction: float = 0.0
    p_lower: tuple[float, float] = (0.2, 0.4)
    p_upper: tuple[float, float] = (0.6, 0.8)
    label: str = "synthetic"

    def validate(self) -> None:
        for name in ("n_parcels", "n_hubs", "n_od_pairs", "n_providers", "hubs_per_route",
                     "routes_per_od", "candidate_sets_per_od"):
            if getattr(self, name) < 1:
                raise GenerationError(f"{name} must be >= 1")
        lo, hi = self.routes_per_parcel
        if not 1 <= lo <= hi:
            raise GenerationError("routes_per_parcel must satisfy 1 <= min <= max")
        if self.hubs_per_route > self.n_hubs:
            raise GenerationError("hubs_per_route exceeds n_hubs")
        constructible = self.n_providers * math.comb(self.n_hubs, self.hubs_per_route)
        if hi > constructible:
            raise GenerationError(
                f"routes_per_parcel max {hi} exceeds the {constructible} constructible routes per OD")
        if self.capacity_tightness <= 0 or self.slack_tightness <= 0:
            raise GenerationError("tightness must be > 0")
        if not 0.0 <= self.tight_hub_fraction <= 1.0 or not 0.0 <= self.proportion_fraction <= 1.0:
            raise GenerationError("fractions must lie in [0, 1]")
        for a, b in (self.p_lower, self.p_upper):
            if not 0.0 <= a <= b <= 1.0:
                raise GenerationError("p bound ranges must lie within [0, 1]")
        if self.p_lower[1] > self.p_upper[0]:
            raise GenerationError("p_lower range must not overlap p_upper range")

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise GenerationError(f"unknown config keys: {sorted(unknown)}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "GenConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


@dataclass(frozen=True)
class Catalog:
    """Day-independent part of a generated world."""

    routes: tuple[Route, ...]
    constraints: tuple[ConstraintSpec, ...]
    od_pairs: tuple[tuple[str, str], ...]
    od_prob: np.ndarray
    candidate_sets: tuple[tuple[tuple[int, ...], ...], ...]  # per OD: pool of route-index tuples
    route_base: np.ndarray
    n_r_max: int


def _loc(i: int) -> str:
    return f"L{i:03d}"


def build_catalog(config: GenConfig) -> Catalog:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    hubs = [f"H{i:03d}" for i in range(config.n_hubs)]
    providers = [f"P{i}" for i in range(config.n_providers)]
    leg = rng.uniform(*config.leg_cost, size=config.n_hubs)
    fee = rng.uniform(*config.provider_fee, size=config.n_providers)

    n_loc = 2
    while n_loc * (n_loc - 1) < config.n_od_pairs:
        n_loc += 1
    all_pairs = [(a, b) for a in range(n_loc) for b in range(n_loc) if a != b]
    picked = sorted(rng.choice(len(all_pairs), size=config.n_od_pairs, replace=False))
    od_pairs = tuple((_loc(all_pairs[i][0]), _loc(all_pairs[i][1])) for i in picked)
    # skewed OD popularity
    od_prob = rng.dirichlet(np.full(config.n_od_pairs, 2.0))

    lo, hi = config.routes_per_parcel
    per_od = max(config.routes_per_od, hi)
    routes: list[Route] = []
    route_base: list[float] = []
    candidate_sets = []
    hub_combos = list(itertools.combinations(range(config.n_hubs), config.hubs_per_route))
    for o, od in enumerate(od_pairs):
        combos = rng.permutation(len(hub_combos) * config.n_providers)[:per_od]
        first = len(routes)
        for j, c in enumerate(combos):
            prov, hub_combo = divmod(int(c), len(hub_combos))
            hub_idx = hub_combos[hub_combo]
            routes.append(Route(f"R{o:03d}_{j}", tuple(hubs[h] for h in hub_idx), providers[prov], od))
            route_base.append(float(leg[list(hub_idx)].sum() + fee[prov]))
        pool = []
        for _ in range(config.candidate_sets_per_od):
            size = int(rng.integers(lo, hi + 1))
            members = sorted(rng.choice(per_od, size=size, replace=False))
            pool.append(tuple(first + int(x) for x in members))
        candidate_sets.append(tuple(pool))

    route_base_arr = np.array(route_base)
    hub_pos = {h: i for i, h in enumerate(hubs)}
    # expected uniform-assignment load per parcel for every hub
    load = np.zeros(config.n_hubs)
    for o, pool in enumerate(candidate_sets):
        for cset in pool:
            share = od_prob[o] / len(pool) / len(cset)
            for r in cset:
                for h in routes[r].hub_ids:
                    load[hub_pos[h]] += share
    load *= config.n_parcels

    order = np.argsort(leg, kind="stable")
    n_tight = int(round(config.tight_hub_fraction * config.n_hubs))
    tight = np.full(config.n_hubs, min(config.capacity_tightness, config.slack_tightness))
    tight[order[:n_tight]] = config.capacity_tightness
    constraints = [ConstraintSpec.capacity(f"cap_{h}", h, max(1, int(round(load[i] / tight[i]))))
                   for i, h in enumerate(hubs)]

    n_prop = int(round(config.proportion_fraction * config.n_od_pairs))
    for o in sorted(rng.choice(config.n_od_pairs, size=n_prop, replace=False)):
        od_routes = [r for cset in candidate_sets[o] for r in cset]
        prov = routes[int(rng.choice(sorted(set(od_routes))))].provider_id
        pl = float(rng.uniform(*config.p_lower))
        pu = float(rng.uniform(*config.p_upper))
        constraints.append(ConstraintSpec.proportion(f"prop_{o:03d}_{prov}", od_pairs[o], prov, pl, pu))

    n_r_max = max(len(c) for pool in candidate_sets for c in pool)
    return Catalog(tuple(routes), tuple(constraints), od_pairs, od_prob, tuple(candidate_sets),
                   route_base_arr, n_r_max)


def sample_day(catalog: Catalog, config: GenConfig, n_parcels: int, rng: np.random.Generator,
               label: str) -> Instance:
    ods = rng.choice(len(catalog.od_pairs), size=n_parcels, p=catalog.od_prob)
    set_pick = rng.random(n_parcels)
    weights = config.weight_median * rng.lognormal(0.0, 0.5, size=n_parcels)
    parcels = []
    for t in range(n_parcels):
        o = int(ods[t])
        pool = catalog.candidate_sets[o]
        cset = pool[min(int(set_pick[t] * len(pool)), len(pool) - 1)]
        noise = config.noise_scale * rng.lognormal(0.0, 0.5, size=len(cset))
        base = catalog.route_base[list(cset)] * (1.0 + config.weight_factor * weights[t])
        costs = base + noise
        cands = tuple((catalog.routes[r].id, float(c)) for r, c in zip(cset, costs))
        origin, dest = catalog.od_pairs[o]
        parcels.append(Parcel(t, origin, dest, float(weights[t]), cands))
    return Instance(label, tuple(parcels), catalog.routes, catalog.constraints, catalog.n_r_max)


def generate(config: GenConfig) -> Instance:
    catalog = build_catalog(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    return sample_day(catalog, config, config.n_parcels, rng, config.label)


def generate_history(config: GenConfig, n_days: int, first_day: int = 0) -> list[Instance]:
    """``n_days`` days over one catalog; per-day volume varies within +-20% of ``n_parcels``.

    Day ``d`` is seeded from ``(config.seed, 2, first_day + d)`` so histories
    with different ``first_day`` never share a day.
    """
    if n_days < 1:
        raise GenerationError("n_days must be >= 1")
    catalog = build_catalog(config)
    days = []
    for d in range(first_day, first_day + n_days):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, d]))
        volume = max(1, int(round(config.n_parcels * rng.uniform(0.8, 1.2))))
        days.append(sample_day(catalog, config, volume, rng, f"{config.label}-d{d}"))
    return days


def with_overrides(config: GenConfig, **kw) -> GenConfig:
    return replace(config, **kw)
