"""Core domain types for online parcel assignment and the instance text format.

An :class:`Instance` is one day of parcels in arrival order together with the
route catalog and the business constraints. Instances are immutable once
built; the dense array view used by the simulator and solvers is computed on
first access and cached.

Instance file layout (tab separated, one record per line)::

    opa-instance<TAB>1
    label<TAB><label>
    n_r<TAB><N_R>
    routes<TAB><count>
    <route id><TAB><origin><TAB><destination><TAB><provider><TAB><hub,hub,...>
    constraints<TAB><count>
    capacity<TAB><id><TAB><hub><TAB><upper bound>
    proportion<TAB><id><TAB><origin><TAB><destination><TAB><provider><TAB><p_lower><TAB><p_upper>
    parcels<TAB><count>
    <t><TAB><origin><TAB><destination><TAB><weight><TAB><route>:<cost>;<route>:<cost>...

Identifiers are opaque strings that must not contain tabs, newlines, ``,``,
``:`` or ``;``. Reals are written with ``repr`` so a save/load round trip is
exact.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_TAG = "opa-instance"
FORMAT_VERSION = "1"
_FORBIDDEN = set("\t\n\r,:;")


class InstanceError(ValueError):
    """Structural-integrity violation inside an instance."""


class InstanceParseError(InstanceError):
    """Malformed instance file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class ConstraintKind(str, enum.Enum):
    CAPACITY = "capacity"
    PROPORTION = "proportion"


@dataclass(frozen=True)
class Route:
    id: str
    hub_ids: tuple[str, ...]
    provider_id: str
    od: tuple[str, str]

    def __post_init__(self):
        if not self.hub_ids:
            raise InstanceError(f"route {self.id!r} traverses no hub")


@dataclass(frozen=True)
class Parcel:
    id: int
    origin: str
    destination: str
    weight: float
    candidates: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.candidates:
            raise InstanceError(f"parcel {self.id} has no candidate route")
        if self.weight < 0:
            raise InstanceError(f"parcel {self.id} has negative weight")
        for rid, cost in self.candidates:
            if cost < 0:
                raise InstanceError(f"parcel {self.id}: negative cost on route {rid!r}")

    @property
    def od(self) -> tuple[str, str]:
        return (self.origin, self.destination)

    @property
    def route_ids(self) -> tuple[str, ...]:
        return tuple(r for r, _ in self.candidates)

    @property
    def costs(self) -> tuple[float, ...]:
        return tuple(c for _, c in self.candidates)


@dataclass(frozen=True)
class ConstraintSpec:
    """Capacity (hub upper bound, lower bound 0) or proportion (per-OD provider share band)."""

    id: str
    kind: ConstraintKind
    hub_id: str | None = None
    upper_bound: int | None = None
    od: tuple[str, str] | None = None
    provider_id: str | None = None
    p_lower: float | None = None
    p_upper: float | None = None

    def __post_init__(self):
        if self.kind is ConstraintKind.CAPACITY:
            if self.hub_id is None or self.upper_bound is None:
                raise InstanceError(f"capacity constraint {self.id!r} needs hub_id and upper_bound")
            if self.upper_bound < 0:
                raise InstanceError(f"capacity constraint {self.id!r}: negative upper bound")
        else:
            if self.od is None or self.provider_id is None or self.p_lower is None or self.p_upper is None:
                raise InstanceError(f"proportion constraint {self.id!r} is incomplete")
            if not 0.0 <= self.p_lower <= self.p_upper <= 1.0:
                raise InstanceError(f"proportion constraint {self.id!r}: need 0 <= p_lower <= p_upper <= 1")

    @classmethod
    def capacity(cls, id: str, hub_id: str, upper_bound: int) -> "ConstraintSpec":
        return cls(id=id, kind=ConstraintKind.CAPACITY, hub_id=hub_id, upper_bound=int(upper_bound))

    @classmethod
    def proportion(cls, id: str, od: tuple[str, str], provider_id: str,
                   p_lower: float, p_upper: float) -> "ConstraintSpec":
        return cls(id=id, kind=ConstraintKind.PROPORTION, od=tuple(od), provider_id=provider_id,
                   p_lower=float(p_lower), p_upper=float(p_upper))

    @property
    def is_capacity(self) -> bool:
        return self.kind is ConstraintKind.CAPACITY


@dataclass(frozen=True)
class InstanceArrays:
    """Dense, index-based view of an instance.

    Candidate slots beyond a parcel's candidate count hold route index -1,
    cost 0 and mask False.
    """

    route_index: dict[str, int]
    cand_route: np.ndarray      # (m, N_R) int, -1 for padding
    cand_cost: np.ndarray       # (m, N_R) float
    cand_mask: np.ndarray       # (m, N_R) bool
    n_cand: np.ndarray          # (m,) int
    parcel_od: np.ndarray       # (m,) int index into od_list
    parcel_origin: np.ndarray   # (m,) int index into locations
    parcel_dest: np.ndarray     # (m,) int index into locations
    weight: np.ndarray          # (m,) float
    route_provider: np.ndarray  # (n_routes,) int index into providers
    route_hub: np.ndarray       # (n_routes, n_hubs) 0/1 float hub traversal
    route_cap: np.ndarray       # (n_routes, n_cap) 0/1 float incidence with capacity constraints
    cap_hub: np.ndarray         # (n_cap,) hub index of each capacity constraint
    cap_index: np.ndarray       # (n_cap,) positions of capacity constraints in instance.constraints
    cap_upper: np.ndarray       # (n_cap,) float
    prop_index: np.ndarray      # (n_prop,) positions of proportion constraints
    prop_od: np.ndarray         # (n_prop,) int index into od_list
    prop_provider: np.ndarray   # (n_prop,) int index into providers
    prop_lower: np.ndarray      # (n_prop,) float
    prop_upper: np.ndarray      # (n_prop,) float
    route_prop: np.ndarray      # (n_routes, n_prop) 0/1: route's provider and OD match the constraint
    od_prop: np.ndarray         # (n_od, n_prop) 0/1: OD matches the constraint
    od_list: tuple[tuple[str, str], ...]
    hubs: tuple[str, ...]
    locations: tuple[str, ...]
    providers: tuple[str, ...]
    max_cost: float


@dataclass(frozen=True)
class Instance:
    label: str
    parcels: tuple[Parcel, ...]
    routes: tuple[Route, ...]
    constraints: tuple[ConstraintSpec, ...]
    n_r_max: int = field(default=0)

    def __post_init__(self):
        object.__setattr__(self, "parcels", tuple(self.parcels))
        object.__setattr__(self, "routes", tuple(self.routes))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.parcels:
            raise InstanceError("m >= 1 required (instance has no parcels)")
        actual = max(len(p.candidates) for p in self.parcels)
        if self.n_r_max == 0:
            object.__setattr__(self, "n_r_max", actual)
        elif actual > self.n_r_max:
            raise InstanceError(f"a parcel has {actual} candidates but N_R is {self.n_r_max}")
        self.validate()

    @property
    def m(self) -> int:
        return len(self.parcels)

    @cached_property
    def route_by_id(self) -> dict[str, Route]:
        return {r.id: r for r in self.routes}

    @cached_property
    def constraint_by_id(self) -> dict[str, ConstraintSpec]:
        return {k.id: k for k in self.constraints}

    def validate(self) -> None:
        routes = {}
        for r in self.routes:
            if r.id in routes:
                raise InstanceError(f"duplicate route id {r.id!r}")
            routes[r.id] = r
        seen = set()
        for k in self.constraints:
            if k.id in seen:
                raise InstanceError(f"duplicate constraint id {k.id!r}")
            seen.add(k.id)
        for t, p in enumerate(self.parcels):
            if p.id != t:
                raise InstanceError(f"parcel at position {t} has id {p.id}; ids must equal arrival order")
            ids = p.route_ids
            if len(set(ids)) != len(ids):
                raise InstanceError(f"parcel {t} lists a candidate route twice")
            for rid in ids:
                r = routes.get(rid)
                if r is None:
                    raise InstanceError(f"parcel {t} references unknown route {rid!r}")
                if r.od != p.od:
                    raise InstanceError(f"parcel {t} with OD {p.od} lists route {rid!r} serving {r.od}")

    @cached_property
    def arrays(self) -> InstanceArrays:
        return _build_arrays(self)


def routes_touching_constraint(instance: Instance, k: ConstraintSpec, parcel: Parcel) -> set[str]:
    """Candidate routes of ``parcel`` that count towards constraint ``k``."""
    out = set()
    for rid in parcel.route_ids:
        route = instance.route_by_id.get(rid)
        if route is None:
            raise InstanceError(f"parcel {parcel.id} references unknown route {rid!r}")
        if k.is_capacity:
            if k.hub_id in route.hub_ids:
                out.add(rid)
        elif parcel.od == k.od and route.provider_id == k.provider_id:
            out.add(rid)
    return out


def _build_arrays(inst: Instance) -> InstanceArrays:
    m, nr = inst.m, inst.n_r_max
    route_index = {r.id: i for i, r in enumerate(inst.routes)}
    locations = tuple(sorted({x for r in inst.routes for x in r.od} | {x for p in inst.parcels for x in p.od}))
    loc_index = {x: i for i, x in enumerate(locations)}
    providers = tuple(sorted({r.provider_id for r in inst.routes}
                             | {k.provider_id for k in inst.constraints if not k.is_capacity}))
    prov_index = {x: i for i, x in enumerate(providers)}
    od_list = tuple(sorted({r.od for r in inst.routes} | {p.od for p in inst.parcels}
                           | {k.od for k in inst.constraints if not k.is_capacity}))
    od_index = {x: i for i, x in enumerate(od_list)}
    hubs = tuple(sorted({h for r in inst.routes for h in r.hub_ids}
                        | {k.hub_id for k in inst.constraints if k.is_capacity}))
    hub_index = {x: i for i, x in enumerate(hubs)}

    cand_route = np.full((m, nr), -1, dtype=np.int64)
    cand_cost = np.zeros((m, nr))
    for t, p in enumerate(inst.parcels):
        for j, (rid, cost) in enumerate(p.candidates):
            cand_route[t, j] = route_index[rid]
            cand_cost[t, j] = cost
    cand_mask = cand_route >= 0
    n_cand = cand_mask.sum(axis=1)

    caps = [(i, k) for i, k in enumerate(inst.constraints) if k.is_capacity]
    props = [(i, k) for i, k in enumerate(inst.constraints) if not k.is_capacity]
    route_hub = np.zeros((len(inst.routes), len(hubs)))
    route_cap = np.zeros((len(inst.routes), len(caps)))
    route_prop = np.zeros((len(inst.routes), len(props)))
    for ri, r in enumerate(inst.routes):
        on_route = set(r.hub_ids)
        for h in on_route:
            route_hub[ri, hub_index[h]] = 1.0
        for c, (_, k) in enumerate(caps):
            if k.hub_id in on_route:
                route_cap[ri, c] = 1.0
        for c, (_, k) in enumerate(props):
            if r.od == k.od and r.provider_id == k.provider_id:
                route_prop[ri, c] = 1.0
    od_prop = np.zeros((len(od_list), len(props)))
    for c, (_, k) in enumerate(props):
        od_prop[od_index[k.od], c] = 1.0

    return InstanceArrays(
        route_index=route_index,
        cand_route=cand_route,
        cand_cost=cand_cost,
        cand_mask=cand_mask,
        n_cand=n_cand,
        parcel_od=np.array([od_index[p.od] for p in inst.parcels], dtype=np.int64),
        parcel_origin=np.array([loc_index[p.origin] for p in inst.parcels], dtype=np.int64),
        parcel_dest=np.array([loc_index[p.destination] for p in inst.parcels], dtype=np.int64),
        weight=np.array([p.weight for p in inst.parcels], dtype=float),
        route_provider=np.array([prov_index[r.provider_id] for r in inst.routes], dtype=np.int64),
        route_hub=route_hub,
        route_cap=route_cap,
        cap_hub=np.array([hub_index[k.hub_id] for _, k in caps], dtype=np.int64),
        cap_index=np.array([i for i, _ in caps], dtype=np.int64),
        cap_upper=np.array([k.upper_bound for _, k in caps], dtype=float),
        prop_index=np.array([i for i, _ in props], dtype=np.int64),
        prop_od=np.array([od_index[k.od] for _, k in props], dtype=np.int64),
        prop_provider=np.array([prov_index[k.provider_id] for _, k in props], dtype=np.int64),
        prop_lower=np.array([k.p_lower for _, k in props], dtype=float),
        prop_upper=np.array([k.p_upper for _, k in props], dtype=float),
        route_prop=route_prop,
        od_prop=od_prop,
        od_list=od_list,
        hubs=hubs,
        locations=locations,
        providers=providers,
        max_cost=float(cand_cost.max()) if cand_cost.size else 0.0,
    )


# -- serialization -----------------------------------------------------------

def _check_ident(value: str, what: str) -> str:
    if not value or _FORBIDDEN & set(value):
        raise InstanceError(f"{what} {value!r} is empty or contains a reserved character")
    return value


def dumps_instance(inst: Instance) -> str:
    lines = [f"{FORMAT_TAG}\t{FORMAT_VERSION}",
             f"label\t{_check_ident(inst.label, 'label')}",
             f"n_r\t{inst.n_r_max}",
             f"routes\t{len(inst.routes)}"]
    for r in inst.routes:
        hubs = ",".join(_check_ident(h, "hub id") for h in r.hub_ids)
        lines.append("\t".join([_check_ident(r.id, "route id"), _check_ident(r.od[0], "location"),
                                _check_ident(r.od[1], "location"), _check_ident(r.provider_id, "provider"), hubs]))
    lines.append(f"constraints\t{len(inst.constraints)}")
    for k in inst.constraints:
        _check_ident(k.id, "constraint id")
        if k.is_capacity:
            lines.append(f"capacity\t{k.id}\t{_check_ident(k.hub_id, 'hub id')}\t{k.upper_bound}")
        else:
            lines.append("\t".join(["proportion", k.id, k.od[0], k.od[1], k.provider_id,
                                    repr(k.p_lower), repr(k.p_upper)]))
    lines.append(f"parcels\t{len(inst.parcels)}")
    for p in inst.parcels:
        cands = ";".join(f"{rid}:{cost!r}" for rid, cost in p.candidates)
        lines.append(f"{p.id}\t{_check_ident(p.origin, 'location')}\t"
                     f"{_check_ident(p.destination, 'location')}\t{p.weight!r}\t{cands}")
    return "\n".join(lines) + "\n"


def save_instance(inst: Instance, path: str | Path) -> None:
    Path(path).write_text(dumps_instance(inst))


def loads_instance(text: str) -> Instance:
    rows = text.split("\n")
    if rows and rows[-1] == "":
        rows.pop()
    pos = 0

    def take(expected_key: str) -> tuple[list[str], int]:
        nonlocal pos
        if pos >= len(rows):
            raise InstanceParseError(f"unexpected end of file, expected {expected_key!r}", pos + 1)
        fields = rows[pos].split("\t")
        pos += 1
        if expected_key and fields[0] != expected_key:
            raise InstanceParseError(f"expected {expected_key!r} record, got {fields[0]!r}", pos)
        return fields, pos

    def as_int(raw: str, lineno: int) -> int:
        try:
            return int(raw)
        except ValueError:
            raise InstanceParseError(f"not an integer: {raw!r}", lineno) from None

    def as_float(raw: str, lineno: int) -> float:
        try:
            return float(raw)
        except ValueError:
            raise InstanceParseError(f"not a number: {raw!r}", lineno) from None

    head, ln = take(FORMAT_TAG)
    if len(head) != 2 or head[1] != FORMAT_VERSION:
        raise InstanceParseError(f"unsupported format version {head[1:]!r}", ln)
    (_, label), ln = take("label")
    (_, n_r_raw), ln = take("n_r")
    n_r = as_int(n_r_raw, ln)
    (_, n_routes_raw), ln = take("routes")

    routes: list[Route] = []
    route_ids: set[str] = set()
    for _ in range(as_int(n_routes_raw, ln)):
        fields, ln = take("")
        if len(fields) != 5:
            raise InstanceParseError("route record needs 5 fields", ln)
        rid, o, d, prov, hubs = fields
        if rid in route_ids:
            raise InstanceParseError(f"duplicate route id {rid!r}", ln)
        try:
            routes.append(Route(rid, tuple(h for h in hubs.split(",") if h), prov, (o, d)))
        except InstanceError as exc:
            raise InstanceParseError(str(exc), ln) from None
        route_ids.add(rid)

    (_, n_cons_raw), ln = take("constraints")
    constraints: list[ConstraintSpec] = []
    for _ in range(as_int(n_cons_raw, ln)):
        fields, ln = take("")
        try:
            if fields[0] == "capacity" and len(fields) == 4:
                constraints.append(ConstraintSpec.capacity(fields[1], fields[2], as_int(fields[3], ln)))
            elif fields[0] == "proportion" and len(fields) == 7:
                constraints.append(ConstraintSpec.proportion(
                    fields[1], (fields[2], fields[3]), fields[4], as_float(fields[5], ln), as_float(fields[6], ln)))
            else:
                raise InstanceParseError(f"malformed constraint record {fields[0]!r}", ln)
        except InstanceError as exc:
            if isinstance(exc, InstanceParseError):
                raise
            raise InstanceParseError(str(exc), ln) from None

    (_, n_parcels_raw), ln = take("parcels")
    n_parcels = as_int(n_parcels_raw, ln)
    if n_parcels < 1:
        raise InstanceParseError("m >= 1 required", ln)
    parcels: list[Parcel] = []
    for t in range(n_parcels):
        fields, ln = take("")
        if len(fields) != 5:
            raise InstanceParseError("parcel record needs 5 fields", ln)
        pid = as_int(fields[0], ln)
        if pid != t:
            raise InstanceParseError(f"parcel id {pid} out of arrival order (expected {t})", ln)
        cands = []
        for item in fields[4].split(";"):
            rid, sep, cost = item.rpartition(":")
            if not sep:
                raise InstanceParseError(f"malformed candidate {item!r}", ln)
            if rid not in route_ids:
                raise InstanceParseError(f"unknown route {rid!r}", ln)
            cands.append((rid, as_float(cost, ln)))
        if len(cands) > n_r:
            raise InstanceParseError(f"{len(cands)} candidates exceed declared N_R={n_r}", ln)
        try:
            parcels.append(Parcel(pid, fields[1], fields[2], as_float(fields[3], ln), tuple(cands)))
        except InstanceError as exc:
            raise InstanceParseError(str(exc), ln) from None
    if pos != len(rows):
        raise InstanceParseError("trailing content after parcel records", pos + 1)
    try:
        return Instance(label, tuple(parcels), tuple(routes), tuple(constraints), n_r)
    except InstanceError as exc:
        raise InstanceParseError(str(exc)) from None


def load_instance(path: str | Path) -> Instance:
    return loads_instance(Path(path).read_text())


def with_parcels(inst: Instance, parcels: Sequence[Parcel], label: str | None = None) -> Instance:
    """Copy of ``inst`` over a different parcel stream (ids are renumbered to arrival order)."""
    renum = [Parcel(t, p.origin, p.destination, p.weight, p.candidates) for t, p in enumerate(parcels)]
    return Instance(label or inst.label, tuple(renum), inst.routes, inst.constraints, inst.n_r_max)
