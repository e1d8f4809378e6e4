import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gemq.allocator import (
    MODES, AllocationPlan, AllocationProblem, budget_for, bpe_of, objective_of, solve, uniform_plan,
)
from gemq.errors import InfeasibleError

BITS = (1, 2, 3)
EX_COSTS = np.array([[0.9, 0.5, 0.1], [0.4, 0.2, 0.05]])


def layer_ok(mode, layer_bits, bits):
    hi, second = bits[-1], bits[-2] if len(bits) > 1 else None
    has_hi, has_second = hi in layer_bits, second in layer_bits
    return {
        "none": True,
        "highest_and_second": has_hi and has_second,
        "only_highest": has_hi,
        "only_second": has_second,
        "highest_every_2_layers": True,
    }[mode]


def brute_force(costs, bits, budget, layer_of, mode, weights=None):
    """Exhaustive enumeration; returns (objective, assignment) or None if infeasible.

    Ties resolve to more total bits, then the lexicographically smaller vector.
    """
    n = len(layer_of)
    weights = np.ones(n, dtype=int) if weights is None else np.asarray(weights)
    idx = np.array(list(itertools.product(range(len(bits)), repeat=n)))
    assign = np.asarray(bits)[idx]
    spend = (assign * weights).sum(axis=1)
    ok = spend <= budget
    layers = sorted(set(layer_of))
    lay = np.asarray(layer_of)
    for l in layers:
        cols = assign[:, lay == l]
        if mode == "highest_and_second":
            ok &= (cols == bits[-1]).any(axis=1) & (cols == bits[-2]).any(axis=1)
        elif mode == "only_highest":
            ok &= (cols == bits[-1]).any(axis=1)
        elif mode == "only_second":
            ok &= (cols == bits[-2]).any(axis=1)
    if mode == "highest_every_2_layers":
        for p in range(0, len(layers), 2):
            group = np.isin(lay, layers[p : p + 2])
            ok &= (assign[:, group] == bits[-1]).any(axis=1)
    if not ok.any():
        return None
    obj = costs[np.arange(n)[None, :], idx].sum(axis=1)
    cand = np.nonzero(ok)[0]
    best = min(cand, key=lambda r: (obj[r], -spend[r], tuple(assign[r])))
    return obj[best], tuple(int(b) for b in assign[best])


def random_instance(rng, integer_costs):
    n_layers = int(rng.integers(1, 4))
    sizes = rng.integers(1, 5, size=n_layers)
    layer_of = tuple(l for l, s in enumerate(sizes) for _ in range(s))
    n = len(layer_of)
    if integer_costs:
        costs = rng.integers(0, 4, size=(n, 3)).astype(float)
    else:
        costs = np.sort(rng.exponential(size=(n, 3)), axis=1)[:, ::-1] * rng.exponential(size=(n, 1))
        if rng.random() < 0.3:
            costs = rng.random((n, 3))
    budget = int(rng.integers(n, 3 * n + 1))
    if rng.random() < 0.15:
        budget = n - 1  # below the all-minimum spend
    return costs, budget, layer_of


def test_dp_matches_brute_force_on_200_instances():
    rng = np.random.default_rng(2024)
    checked = infeasible = 0
    for k in range(200):
        costs, budget, layer_of = random_instance(rng, integer_costs=k % 4 == 0)
        for mode in MODES:
            problem = AllocationProblem(costs, BITS, budget, layer_of, mode)
            oracle = brute_force(costs, BITS, budget, layer_of, mode)
            if oracle is None:
                with pytest.raises(InfeasibleError):
                    solve(problem)
                infeasible += 1
                continue
            plan = solve(problem)
            assert plan.objective == pytest.approx(oracle[0], rel=1e-12, abs=1e-12)
            assert objective_of(costs, BITS, plan.bits) == pytest.approx(oracle[0], rel=1e-12, abs=1e-12)
            assert sum(plan.bits) <= budget
            if k % 4 == 0:  # exact arithmetic: the tie-break must agree too
                assert plan.bits == oracle[1]
            checked += 1
    assert checked > 500 and infeasible > 20


def test_weighted_budget_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(30):
        costs, _, layer_of = random_instance(rng, integer_costs=False)
        weights = tuple(int(w) for w in rng.integers(1, 4, size=len(layer_of)))
        budget = int(rng.integers(sum(weights), 3 * sum(weights) + 1))
        oracle = brute_force(costs, BITS, budget, layer_of, "none", weights)
        plan = solve(AllocationProblem(costs, BITS, budget, layer_of, "none", weights))
        assert plan.objective == pytest.approx(oracle[0], rel=1e-12, abs=1e-12)
        assert sum(b * w for b, w in zip(plan.bits, weights)) <= budget


def test_reference_examples():
    lay = (0, 0)
    plan = solve(AllocationProblem(EX_COSTS, BITS, 3, lay, "none"))
    assert plan.bits == (2, 1) and plan.objective == pytest.approx(0.9)
    plan = solve(AllocationProblem(EX_COSTS, BITS, 5, lay, "highest_and_second"))
    assert plan.bits == (3, 2) and plan.objective == pytest.approx(0.30)
    assert objective_of(EX_COSTS, BITS, (2, 3)) == pytest.approx(0.55)
    with pytest.raises(InfeasibleError) as info:
        solve(AllocationProblem(EX_COSTS, BITS, 4, lay, "highest_and_second"))
    assert info.value.constraint == "highest_and_second"


def test_budget_below_minimum_names_the_budget():
    with pytest.raises(InfeasibleError) as info:
        solve(AllocationProblem(EX_COSTS, BITS, 1, (0, 0), "none"))
    assert info.value.constraint == "budget"


def test_odd_trailing_layer_needs_its_own_high_bit_expert():
    costs = np.tile([0.0, 0.0, 1.0], (3, 1))
    plan = solve(AllocationProblem(costs, BITS, 9, (0, 1, 2), "highest_every_2_layers"))
    assert plan.bits[2] == 3 and 3 in plan.bits[:2]


cost_arrays = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).exponential(size=(6, 3)))


@settings(max_examples=40)
@given(cost_arrays, st.integers(6, 17), st.sampled_from(MODES))
def test_larger_budget_never_costs_more(costs, budget, mode):
    lay = (0, 0, 0, 1, 1, 1)
    try:
        a = solve(AllocationProblem(costs, BITS, budget, lay, mode))
    except InfeasibleError:
        return
    b = solve(AllocationProblem(costs, BITS, budget + 1, lay, mode))
    assert b.objective <= a.objective + 1e-12


@settings(max_examples=40)
@given(cost_arrays, st.integers(6, 18), st.sampled_from(MODES), st.sampled_from([0.5, 3.0, 1e3, 1e-4]))
def test_scaling_costs_keeps_the_plan(costs, budget, mode, c):
    lay = (0, 0, 0, 1, 1, 1)
    try:
        a = solve(AllocationProblem(costs, BITS, budget, lay, mode))
    except InfeasibleError:
        return
    assert solve(AllocationProblem(costs * c, BITS, budget, lay, mode)).bits == a.bits


def test_uniform_plans():
    p = uniform_plan(4, 8, 2.0)
    assert p.bits == (2,) * 32
    p = uniform_plan(4, 8, 2.5)
    assert p.bits == (3,) * 16 + (2,) * 16
    p = uniform_plan(2, 2, 1.5)
    assert p.bits == (2, 2, 1, 1) and p.bpe == Fraction(3, 2)
    with pytest.raises(ValueError):
        uniform_plan(4, 8, 2.25)
    with pytest.raises(ValueError):
        uniform_plan(3, 8, 2.5)
    with pytest.raises(ValueError):
        uniform_plan(4, 8, 3.5)


def test_bpe_of():
    assert bpe_of([3, 2, 1, 2]) == 2
    assert bpe_of([3] * 5) == 3
    assert bpe_of([3, 3, 1, 1, 1, 1, 1, 1]) == Fraction(3, 2)
    with pytest.raises(ValueError):
        bpe_of([])


def test_budget_is_floored_in_exact_arithmetic():
    assert budget_for(1.5, 32) == 48
    assert budget_for(2.1, 10) == 21  # 2.1 * 10 would be 21.000000000000004 in floats
    assert budget_for(1.55, 3) == 4


def test_plan_json_round_trip():
    plan = solve(AllocationProblem(EX_COSTS, BITS, 5, (0, 0), "highest_and_second"))
    d = json.loads(plan.to_json())
    assert set(d) >= {"budget_bpe", "constraint_mode", "objective", "bits", "per_layer_histogram"}
    assert d["per_layer_histogram"] == [{"2": 1, "3": 1}]
    back = AllocationPlan.from_json(plan.to_json())
    assert back.bits == plan.bits and back.objective == plan.objective


def test_problem_validation():
    with pytest.raises(ValueError):
        AllocationProblem(EX_COSTS, BITS, 5, (1, 0))
    with pytest.raises(ValueError):
        AllocationProblem(EX_COSTS[:, :1], (1,), 5, (0, 0), "highest_and_second")
    with pytest.raises(ValueError):
        AllocationProblem(EX_COSTS, BITS, 5, (0, 0), "bogus")
    with pytest.raises(ValueError):
        AllocationProblem(EX_COSTS, (3, 1, 2), 5, (0, 0))
