import numpy as np
import pytest

from opalab.baselines import (BaselineError, DualPrices, ProportionTable, fit_proportions, greedy_assign,
                              greedy_rollout, pdo_assign, pdo_rollout, pdo_update, proportion_assign,
                              proportion_rollout, type_key)
from opalab.datagen import GenConfig, generate
from opalab.env import OnlineAssignmentEnv, evaluate_assignment
from opalab.model import ConstraintSpec, Instance, Parcel, Route
from opalab.oracle import OfflineSolution, OracleError

from conftest import hand_instance, random_tiny_instance


def _parcel(costs, ids=None):
    ids = ids or [f"r{i}" for i in range(len(costs))]
    return Parcel(0, "A", "B", 1.0, tuple(zip(ids, map(float, costs))))


def test_greedy_examples():
    assert greedy_assign(_parcel([3, 1, 2])) == 1
    assert greedy_assign(_parcel([2, 2], ["zz", "aa"])) == 1
    assert greedy_assign(_parcel([5])) == 0


def test_greedy_optimal_without_constraints():
    rng = np.random.default_rng(0)
    for _ in range(20):
        base = random_tiny_instance(rng)
        inst = Instance(base.label, base.parcels, base.routes, ())
        g = evaluate_assignment(inst, greedy_rollout(inst)).total_cost
        for _ in range(10):
            rand = (rng.random(inst.m) * inst.arrays.n_cand).astype(int)
            assert g <= evaluate_assignment(inst, rand).total_cost


# -- proportion ----------------------------------------------------------------------

def _fixed_solver(choices):
    """Solver stub returning pre-set slot vectors day by day."""
    it = iter(choices)

    def solve(day):
        slots = np.asarray(next(it))
        return OfflineSolution(slots, 0.0, True, 0.0)
    return solve


def _day(label, n, ids=("r1", "r2")):
    routes = tuple(Route(r, ("H",), "P", ("A", "B")) for r in ("r1", "r2", "r3"))
    parcels = tuple(Parcel(t, "A", "B", 1.0, tuple((r, 1.0) for r in ids)) for t in range(n))
    return Instance(label, parcels, routes, ())


def test_fit_degenerate_and_even_frequencies():
    table = fit_proportions([_day("d0", 3)], _fixed_solver([[0, 0, 0]]))
    assert table.probabilities(_day("x", 1).parcels[0]).tolist() == [1.0, 0.0]
    table = fit_proportions([_day("d0", 2), _day("d1", 2)], _fixed_solver([[0, 0], [1, 1]]))
    assert table.probabilities(_day("x", 1).parcels[0]).tolist() == [0.5, 0.5]


def test_unseen_type_is_uniform():
    table = fit_proportions([_day("d0", 2)], _fixed_solver([[0, 0]]))
    other = _day("x", 1, ids=("r1", "r2", "r3")).parcels[0]
    assert np.allclose(table.probabilities(other), [1 / 3] * 3)


def test_fit_skips_failing_days():
    def solver(day):
        if day.label == "bad":
            raise OracleError("boom")
        return OfflineSolution(np.zeros(day.m, dtype=int), 0.0, True, 0.0)

    table = fit_proportions([_day("bad", 2), _day("ok", 2)], solver)
    assert len(table.vectors) == 1
    with pytest.raises(BaselineError):
        fit_proportions([_day("bad", 2)], solver)
    with pytest.raises(BaselineError):
        fit_proportions([], solver)


def test_type_key_uses_candidate_signature():
    a = _parcel([1, 2], ["r2", "r1"])
    assert type_key(a) == ("A", "B", ("r1", "r2"))
    table = ProportionTable({("A", "B", ("r1", "r2")): np.array([0.25, 0.75])})
    assert table.probabilities(a).tolist() == [0.75, 0.25]   # returned in the parcel's own order


def test_proportion_sampling():
    p = _parcel([1, 1])
    rng = np.random.default_rng(0)
    table = ProportionTable({type_key(p): np.array([1.0, 0.0])})
    assert all(proportion_assign(table, p, rng) == 0 for _ in range(1000))
    table = ProportionTable({type_key(p): np.array([0.0, 1.0])})
    assert all(proportion_assign(table, p, rng) == 1 for _ in range(1000))
    table = ProportionTable({type_key(p): np.array([0.5, 0.5])})
    draws = [proportion_assign(table, p, rng) for _ in range(10_000)]
    assert abs(np.mean(draws) - 0.5) <= 0.02


def test_proportion_rollout_reproducible(small_config):
    inst = generate(small_config)
    table = fit_proportions([inst], _fixed_solver([np.zeros(inst.m, dtype=int)]))
    assert np.array_equal(proportion_rollout(table, inst, 3), proportion_rollout(table, inst, 3))


def test_table_file_round_trip(tmp_path):
    table = ProportionTable({("A", "B", ("r1", "r2")): np.array([0.1 + 0.2, 1 - (0.1 + 0.2)])})
    table.save(tmp_path / "p.tsv")
    back = ProportionTable.load(tmp_path / "p.tsv")
    assert back.vectors.keys() == table.vectors.keys()
    assert np.array_equal(back.vectors[("A", "B", ("r1", "r2"))], table.vectors[("A", "B", ("r1", "r2"))])
    (tmp_path / "bad.tsv").write_text("origin\tdestination\troutes\tprobabilities\nA\tB\tr1,r2\t0.5,0.6\n")
    with pytest.raises(BaselineError, match="line 2"):
        ProportionTable.load(tmp_path / "bad.tsv")


# -- PDO -------------------------------------------------------------------------------

def test_pdo_zero_duals_equals_greedy(small_config):
    inst = generate(small_config)
    assert np.array_equal(pdo_rollout(inst, eta=0.0), greedy_rollout(inst))
    duals = DualPrices.init(inst)
    state, _ = OnlineAssignmentEnv(inst).reset()
    assert all(pdo_assign(duals, p, state) == greedy_assign(p) for p in inst.parcels)


def test_pdo_overpaced_hub_dual_increases():
    inst = hand_instance(capacity=1)
    env = OnlineAssignmentEnv(inst)
    duals = DualPrices.init(inst, m=100, eta=0.5)
    state, _ = env.reset()
    _, state, _ = env.step(state, 0)     # one parcel through H, pacing target 1 * 1/100
    pdo_update(duals, state, 1)
    assert duals.mu_cap[0] > 0
    before = duals.mu_cap[0]
    _, state, _ = env.step(state, 0)
    pdo_update(duals, state, 2)
    assert duals.mu_cap[0] > before


def test_pdo_hand_instance_avoids_double_load():
    inst = hand_instance(capacity=1)
    slots = pdo_rollout(inst, eta=10.0)
    rep = evaluate_assignment(inst, slots)
    assert rep.total_cost == 3.0 and rep.violating_parcels == 0
    assert evaluate_assignment(inst, pdo_rollout(inst, eta=0.0)).violating_parcels == 1


def test_pdo_requires_positive_volume(hand):
    with pytest.raises(BaselineError):
        DualPrices.init(hand, m=0)


def test_pdo_duals_nonnegative_with_proportions():
    rng = np.random.default_rng(5)
    for _ in range(10):
        inst = random_tiny_instance(rng)
        env = OnlineAssignmentEnv(inst)
        duals = DualPrices.init(inst, eta=1.0)
        state, _ = env.reset()
        for p in inst.parcels:
            _, state, _ = env.step(state, pdo_assign(duals, p, state))
            pdo_update(duals, state, state.t)
            assert np.all(duals.mu_cap >= 0) and np.all(duals.mu_prop_up >= 0) and np.all(duals.mu_prop_lo >= 0)


def test_pdo_steers_away_from_proportion_excess():
    routes = (Route("p", ("Z",), "P", ("A", "B")), Route("q", ("Y",), "Q", ("A", "B")))
    parcels = tuple(Parcel(t, "A", "B", 1.0, (("p", 1.0), ("q", 1.2))) for t in range(200))
    inst = Instance("pp", parcels, routes, (ConstraintSpec.proportion("k", ("A", "B"), "P", 0.0, 0.5),))
    greedy = evaluate_assignment(inst, greedy_rollout(inst))
    pdo = evaluate_assignment(inst, pdo_rollout(inst, eta=0.05))
    assert greedy.proportion["k"] == 1.0 and pdo.proportion["k"] < 0.6


def test_pdo_default_eta_scale():
    inst = generate(GenConfig(seed=1, n_parcels=500))
    duals = DualPrices.init(inst)
    arr = inst.arrays
    assert np.allclose(duals.eta, 1.0 / (arr.cand_cost[arr.cand_mask].mean() * inst.m))
