import itertools
import math

import numpy as np
import pytest

from opalab.baselines import greedy_rollout
from opalab.env import evaluate_assignment
from opalab.model import ConstraintSpec, Instance, Parcel, Route, routes_touching_constraint
from opalab.oracle import (BudgetExceeded, OfflineSolution, OracleError, check_feasible, ip_gap, read_solution,
                           solve, solve_bound, solve_exact, write_solution)

from conftest import hand_instance, random_tiny_instance


def brute_force(inst: Instance) -> tuple[float, np.ndarray | None]:
    """Unpruned enumeration of every slot vector; returns (optimum, lexicographically first argmin)."""
    sizes = [len(p.candidates) for p in inst.parcels]
    combos = np.array(list(itertools.product(*[range(s) for s in sizes])), dtype=np.int64)
    cost = np.zeros(len(combos))
    for i, p in enumerate(inst.parcels):
        cost += np.array(p.costs)[combos[:, i]]
    ok = np.ones(len(combos), dtype=bool)
    for k in inst.constraints:
        count = np.zeros(len(combos))
        for i, p in enumerate(inst.parcels):
            touch = routes_touching_constraint(inst, k, p)
            count += np.array([rid in touch for rid in p.route_ids])[combos[:, i]]
        if k.is_capacity:
            ok &= count <= k.upper_bound
        else:
            n = sum(p.od == k.od for p in inst.parcels)
            ok &= (count >= k.p_lower * n - 1e-9) & (count <= k.p_upper * n + 1e-9)
    if not ok.any():
        return math.inf, None
    best = cost[ok].min()
    first = np.flatnonzero(ok & (cost <= best + 1e-9))[0]
    return float(best), combos[first]


def test_hand_instance_optimum():
    inst = hand_instance(capacity=1)
    sol = solve_exact(inst)
    assert sol.objective == 3.0 and sol.slots.tolist() == [0, 1] and sol.feasible and sol.exact
    assert sol.route_ids(inst) == ["r1", "s2"] and sol.bound == sol.objective


def test_no_constraints_equals_greedy():
    rng = np.random.default_rng(3)
    for _ in range(10):
        base = random_tiny_instance(rng)
        inst = Instance(base.label, base.parcels, base.routes, ())
        g = evaluate_assignment(inst, greedy_rollout(inst)).total_cost
        assert solve_exact(inst).objective == g
        b = solve_bound(inst)
        assert b.objective == g and abs(b.bound - g) <= 1e-9 * g


def test_forced_infeasibility():
    routes = (Route("r", ("H",), "P", ("A", "B")),)
    inst = Instance("inf", (Parcel(0, "A", "B", 1.0, (("r", 1.0),)),), routes,
                    (ConstraintSpec.capacity("k", "H", 0),))
    sol = solve_exact(inst)
    assert not sol.feasible and sol.violated == ["k"]
    assert not solve_bound(inst).feasible


def test_zero_iterations_bound_is_greedy_cost():
    inst = hand_instance(capacity=1)
    assert solve_bound(inst, iterations=0).bound == 2.0


def test_budget_exceeded():
    with pytest.raises(BudgetExceeded):
        solve_exact(hand_instance(), budget=3)
    assert solve(hand_instance(), tier="auto", budget=3).exact is False
    with pytest.raises(OracleError):
        solve(hand_instance(), tier="nope")


def test_exact_matches_unpruned_enumeration_and_weak_duality():
    rng = np.random.default_rng(7)
    for _ in range(30):
        inst = random_tiny_instance(rng, max_parcels=8)
        best, first = brute_force(inst)
        sol = solve_exact(inst)
        b = solve_bound(inst)
        if first is None:
            assert not sol.feasible
            continue
        assert sol.feasible and abs(sol.objective - best) < 1e-9
        assert sol.slots.tolist() == first.tolist()
        assert check_feasible(inst, sol.slots)[0]
        assert b.bound <= sol.objective + 1e-9


def test_check_feasible_examples():
    inst = hand_instance(capacity=1)
    assert check_feasible(inst, [0, 0]) == (False, ["capH"])
    assert check_feasible(inst, [0, 1]) == (True, [])
    free = Instance("f", inst.parcels, inst.routes, ())
    assert check_feasible(free, [0, 0]) == (True, [])
    with pytest.raises(OracleError):
        check_feasible(inst, [0])


def test_ip_gap_examples():
    def ref(avg):
        return OfflineSolution(np.zeros(1, dtype=int), avg, True, avg, exact=True)

    assert round(100 * ip_gap(101.05, ref(100.66)), 4) == 0.3874
    # printed averages are rounded to 3 decimals, so the table's -0.1276% is recoverable only to ~1e-3 points
    assert abs(100 * ip_gap(81.193, ref(81.297)) - (-0.1276)) < 1e-3
    assert ip_gap(5.0, ref(5.0)) == 0.0
    with pytest.raises(OracleError):
        ip_gap(1.0, ref(0.0))


def test_ip_gap_uses_bound_when_not_exact():
    sol = OfflineSolution(np.zeros(2, dtype=int), 10.0, True, 8.0, exact=False)
    assert ip_gap(5.0, sol) == 0.25


def test_solution_file_round_trip(tmp_path):
    inst = hand_instance(capacity=1)
    sol = solve_exact(inst)
    write_solution(tmp_path / "s.tsv", inst, sol)
    back = read_solution(tmp_path / "s.tsv", inst)
    assert back.slots.tolist() == sol.slots.tolist() and back.objective == sol.objective
    assert back.feasible and back.exact and back.bound == sol.bound


def test_bound_repair_produces_feasible_incumbent(small_config):
    from opalab.datagen import generate
    inst = generate(small_config)
    sol = solve_bound(inst)
    assert sol.bound <= sol.objective
    if sol.feasible:
        assert check_feasible(inst, sol.slots)[0]
