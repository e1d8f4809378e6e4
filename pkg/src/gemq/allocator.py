"""Exact global bit allocation over all experts.

Chooses one bit-width per expert minimising the summed importance cost under
a total bit budget, optionally requiring per-layer high-bit experts.  This is
a multiple-choice knapsack with a few flags per layer, solved exactly by a
per-layer dynamic program whose cost curves are combined by an outer knapsack
over layers.

Ties between equal-cost plans go to the plan spending more bits, then to the
lexicographically smaller bit vector.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InfeasibleError

MODES = ("none", "highest_and_second", "only_highest", "only_second", "highest_every_2_layers")

_HIGH, _SECOND = 1, 2


@dataclass(frozen=True)
class AllocationProblem:
    costs: np.ndarray               # (n_experts_total, len(bits))
    bits: tuple[int, ...]           # ascending candidate bit-widths
    budget: int                     # total weighted bits
    layer_of: tuple[int, ...]       # non-decreasing layer index per expert
    constraint_mode: str = "highest_and_second"
    expert_weight: tuple[int, ...] | None = None

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=np.float64)
        object.__setattr__(self, "costs", costs)
        if not self.bits or list(self.bits) != sorted(set(self.bits)):
            raise ValueError("bit candidates must be a non-empty ascending set")
        if costs.shape != (len(self.layer_of), len(self.bits)):
            raise ValueError("costs must be (n_experts, n_bits)")
        if any(b < a for a, b in zip(self.layer_of, self.layer_of[1:])):
            raise ValueError("experts must be ordered by layer")
        if self.constraint_mode not in MODES:
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}; choose from {MODES}")
        if self.constraint_mode in ("highest_and_second", "only_second") and len(self.bits) < 2:
            raise ValueError(f"{self.constraint_mode} needs at least two candidate bit-widths")
        if self.weights and any(int(w) != w or w < 1 for w in self.weights):
            raise ValueError("expert weights must be positive integers")

    @property
    def weights(self) -> tuple[int, ...]:
        return self.expert_weight or (1,) * len(self.layer_of)

    @classmethod
    def from_table(cls, table, bpe, constraint_mode="highest_and_second", expert_weight=None):
        n = len(table.observed)
        layer_of = tuple(i // table.n_experts for i in range(n))
        weights = expert_weight or (1,) * n
        return cls(table.entries, tuple(table.bits), budget_for(bpe, sum(weights)), layer_of,
                   constraint_mode, expert_weight)


def budget_for(bpe, total_weight: int) -> int:
    """Whole-bit budget: ``floor(bpe * total_weight)`` in exact arithmetic."""
    return int(Fraction(str(bpe)) * total_weight)


@dataclass(frozen=True)
class AllocationPlan:
    bits: tuple[int, ...]
    objective: float
    layer_of: tuple[int, ...]
    budget_bpe: float | None = None
    constraint_mode: str = "none"

    @property
    def bpe(self) -> Fraction:
        return bpe_of(self.bits)

    def histogram(self) -> list[dict[str, int]]:
        n_layers = max(self.layer_of) + 1
        counts = [Counter() for _ in range(n_layers)]
        for b, l in zip(self.bits, self.layer_of):
            counts[l][b] += 1
        return [{str(k): v for k, v in sorted(c.items())} for c in counts]

    def to_json(self) -> str:
        return json.dumps({
            "budget_bpe": self.budget_bpe,
            "constraint_mode": self.constraint_mode,
            "objective": self.objective,
            "bpe": float(self.bpe),
            "bits": list(self.bits),
            "layer_of": list(self.layer_of),
            "per_layer_histogram": self.histogram(),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AllocationPlan":
        d = json.loads(text)
        return cls(tuple(d["bits"]), float(d["objective"]), tuple(d["layer_of"]),
                   d.get("budget_bpe"), d.get("constraint_mode", "none"))


def bpe_of(bits) -> Fraction:
    """Bits per expert: total assigned bits over expert count."""
    bits = list(getattr(bits, "bits", bits))
    if not bits:
        raise ValueError("empty plan")
    return Fraction(sum(int(b) for b in bits), len(bits))


def _flag(bits: tuple[int, ...], j: int) -> int:
    f = 0
    if j == len(bits) - 1:
        f |= _HIGH
    if len(bits) >= 2 and j == len(bits) - 2:
        f |= _SECOND
    return f


def _better(cand, cur) -> bool:
    return cur is None or cand[0] < cur[0] or (cand[0] == cur[0] and cand[1] < cur[1])


def _layer_curves(costs, bits, weights, cap):
    """Best ``(cost, assignment)`` for every reachable ``(spent, flags)`` of one layer."""
    states = {(0, 0): (0.0, ())}
    for c_row, w in zip(costs, weights):
        nxt = {}
        for (spent, f), (cost, assign) in states.items():
            for j, b in enumerate(bits):
                s = spent + b * w
                if s > cap:
                    continue
                key = (s, f | _flag(bits, j))
                cand = (cost + c_row[j], assign + (b,))
                if _better(cand, nxt.get(key)):
                    nxt[key] = cand
        states = nxt
    return states


def _layer_ok(mode: str, f: int) -> bool:
    if mode == "highest_and_second":
        return f == _HIGH | _SECOND
    if mode == "only_highest":
        return bool(f & _HIGH)
    if mode == "only_second":
        return bool(f & _SECOND)
    return True


def solve(problem: AllocationProblem) -> AllocationPlan:
    """Provably optimal allocation for ``problem``."""
    bits, mode, weights = problem.bits, problem.constraint_mode, problem.weights
    layer_of = problem.layer_of
    if not layer_of:
        raise ValueError("no experts to allocate")
    layers = sorted(set(layer_of))
    members = {l: [i for i, li in enumerate(layer_of) if li == l] for l in layers}
    min_spend = sum(bits[0] * w for w in weights)
    if min_spend > problem.budget:
        raise InfeasibleError(
            f"budget {problem.budget} below the minimum spend {min_spend} at {bits[0]} bits", "budget")

    # outer state: (spent, pair_has_high) -> (cost, assignment)
    outer = {(0, False): (0.0, ())}
    for pos, l in enumerate(layers):
        idx = members[l]
        curves = _layer_curves(problem.costs[idx], bits, [weights[i] for i in idx], problem.budget)
        pair_start = mode == "highest_every_2_layers" and pos % 2 == 0
        pair_end = mode == "highest_every_2_layers" and (pos % 2 == 1 or pos == len(layers) - 1)
        nxt = {}
        for (spent, carry), (cost, assign) in outer.items():
            for (s_l, f), (c_l, a_l) in curves.items():
                if not _layer_ok(mode, f):
                    continue
                total = spent + s_l
                if total > problem.budget:
                    continue
                has_high = bool(f & _HIGH) or (carry and not pair_start)
                if pair_end and not has_high:
                    continue
                key = (total, has_high and not pair_end) if mode == "highest_every_2_layers" else (total, False)
                cand = (cost + c_l, assign + a_l)
                if _better(cand, nxt.get(key)):
                    nxt[key] = cand
        outer = nxt
        if not outer:
            break

    if not outer:
        raise InfeasibleError(
            f"constraint {mode!r} cannot be met within budget {problem.budget}", mode)
    best_key = min(outer, key=lambda k: (outer[k][0], -k[0], outer[k][1]))
    cost, assign = outer[best_key]
    return AllocationPlan(assign, float(cost), tuple(layer_of), None, mode)


def plan_for_budget(table, bpe, constraint_mode="highest_and_second", expert_weight=None) -> AllocationPlan:
    problem = AllocationProblem.from_table(table, bpe, constraint_mode, expert_weight)
    plan = solve(problem)
    return AllocationPlan(plan.bits, plan.objective, plan.layer_of, float(bpe), constraint_mode)


def objective_of(costs, cand_bits, bits) -> float:
    """Summed cost of an explicit assignment."""
    cand_bits = list(cand_bits)
    return float(sum(costs[i, cand_bits.index(b)] for i, b in enumerate(bits)))


def uniform_plan(n_layers: int, n_experts: int, bpe, bit_candidates=(1, 2, 3)) -> AllocationPlan:
    """Uniform baseline: every expert at ``bpe`` bits, or for ``x.5`` targets
    the first half of the layers at ``x + 0.5`` and the rest at ``x - 0.5``."""
    target = Fraction(str(bpe))
    cands = set(bit_candidates)
    layer_of = tuple(l for l in range(n_layers) for _ in range(n_experts))
    if target.denominator == 1 and int(target) in cands:
        bits = (int(target),) * len(layer_of)
    elif target.denominator == 2 and n_layers % 2 == 0:
        hi, lo = int(target + Fraction(1, 2)), int(target - Fraction(1, 2))
        if hi not in cands or lo not in cands:
            raise ValueError(f"bpe {bpe} needs candidates {lo} and {hi}")
        bits = tuple(hi if l < n_layers // 2 else lo for l in layer_of)
    else:
        raise ValueError(f"bpe {bpe} is not representable by the uniform scheme with {n_layers} layers")
    return AllocationPlan(bits, float("nan"), layer_of, float(bpe), "uniform")
