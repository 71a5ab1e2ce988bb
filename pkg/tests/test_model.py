import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opalab.model import (ConstraintSpec, Instance, InstanceError, InstanceParseError, Parcel, Route,
                          dumps_instance, load_instance, loads_instance, routes_touching_constraint,
                          save_instance)

from conftest import hand_instance, random_tiny_instance


def _mixed_instance() -> Instance:
    routes = (Route("r1", ("H",), "P", ("A", "B")), Route("r2", ("G",), "Q", ("A", "B")),
              Route("r3", ("H", "G"), "P", ("A", "B")), Route("c1", ("H",), "P", ("A", "C")))
    parcels = (Parcel(0, "A", "B", 1.5, (("r1", 2.0), ("r2", 3.0))),
               Parcel(1, "A", "C", 0.25, (("c1", 1.0),)),
               Parcel(2, "A", "B", 4.0, (("r1", 1.0), ("r2", 1.0), ("r3", 0.1 + 0.2))))
    cons = (ConstraintSpec.capacity("capH", "H", 2),
            ConstraintSpec.proportion("pAB", ("A", "B"), "P", 0.3, 0.7))
    return Instance("mixed", parcels, routes, cons)


def test_routes_touching_capacity_subset():
    inst = _mixed_instance()
    cap = inst.constraint_by_id["capH"]
    assert routes_touching_constraint(inst, cap, inst.parcels[0]) == {"r1"}
    assert routes_touching_constraint(inst, cap, inst.parcels[2]) == {"r1", "r3"}


def test_routes_touching_all_via_hub():
    routes = tuple(Route(f"r{i}", ("H",), "P", ("A", "B")) for i in range(3))
    p = Parcel(0, "A", "B", 1.0, tuple((r.id, 1.0) for r in routes))
    inst = Instance("x", (p,), routes, (ConstraintSpec.capacity("c", "H", 5),))
    assert routes_touching_constraint(inst, inst.constraints[0], p) == {"r0", "r1", "r2"}


def test_routes_touching_proportion_od_mismatch_is_empty():
    inst = _mixed_instance()
    prop = inst.constraint_by_id["pAB"]
    assert routes_touching_constraint(inst, prop, inst.parcels[1]) == set()
    assert routes_touching_constraint(inst, prop, inst.parcels[2]) == {"r1", "r3"}


def test_routes_touching_subset_of_candidates():
    rng = np.random.default_rng(1)
    for _ in range(20):
        inst = random_tiny_instance(rng)
        for p in inst.parcels:
            for k in inst.constraints:
                assert routes_touching_constraint(inst, k, p) <= set(p.route_ids)


def test_proportion_rows_partition_by_od():
    rng = np.random.default_rng(2)
    inst = random_tiny_instance(rng)
    for p in inst.parcels:
        for k in inst.constraints:
            if not k.is_capacity and k.od != p.od:
                assert not routes_touching_constraint(inst, k, p)


def test_unresolved_route_rejected():
    routes = (Route("r1", ("H",), "P", ("A", "B")),)
    with pytest.raises(InstanceError):
        Instance("x", (Parcel(0, "A", "B", 1.0, (("nope", 1.0),)),), routes, ())


def test_invariants_enforced():
    with pytest.raises(InstanceError):
        Route("r", (), "P", ("A", "B"))
    with pytest.raises(InstanceError):
        Parcel(0, "A", "B", 1.0, ())
    with pytest.raises(InstanceError):
        ConstraintSpec.proportion("p", ("A", "B"), "P", 0.8, 0.2)
    with pytest.raises(InstanceError):
        Instance("empty", (), (Route("r", ("H",), "P", ("A", "B")),), ())


def test_n_r_max_computed():
    assert _mixed_instance().n_r_max == 3
    assert hand_instance().n_r_max == 2


def test_round_trip_file(tmp_path):
    inst = _mixed_instance()
    save_instance(inst, tmp_path / "x.opa")
    back = load_instance(tmp_path / "x.opa")
    assert back == inst
    assert back.parcels[2].candidates[2][1] == 0.1 + 0.2  # full precision survives


def test_parse_unknown_route_reports_line():
    text = dumps_instance(_mixed_instance()).replace("c1:1.0", "zz:1.0")
    with pytest.raises(InstanceParseError) as err:
        loads_instance(text)
    line_no = text.splitlines().index(next(l for l in text.splitlines() if "zz:1.0" in l)) + 1
    assert err.value.line == line_no
    assert "zz" in str(err.value)


def test_parse_empty_parcel_list():
    text = dumps_instance(_mixed_instance())
    head = text[:text.index("parcels\t")] + "parcels\t0\n"
    with pytest.raises(InstanceParseError, match="m >= 1 required"):
        loads_instance(head)


def test_parse_candidates_beyond_declared_n_r():
    text = dumps_instance(_mixed_instance()).replace("n_r\t3", "n_r\t2")
    with pytest.raises(InstanceParseError, match="exceed declared N_R"):
        loads_instance(text)


def test_parse_malformed_record():
    lines = dumps_instance(_mixed_instance()).splitlines()
    lines[-1] = "2\tA\tB"
    with pytest.raises(InstanceParseError) as err:
        loads_instance("\n".join(lines))
    assert err.value.line == len(lines)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_round_trip_property(seed, with_prop):
    inst = random_tiny_instance(np.random.default_rng(seed), with_proportion=with_prop)
    assert loads_instance(dumps_instance(inst)) == inst


def test_arrays_padding():
    arr = _mixed_instance().arrays
    assert arr.cand_route[1].tolist() == [arr.route_index["c1"], -1, -1]
    assert arr.cand_mask[1].tolist() == [True, False, False]
    assert arr.cand_cost[1, 1:].tolist() == [0.0, 0.0]
