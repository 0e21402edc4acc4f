"""Baseline quality sweeps, shared with the acceptance suite."""

import numpy as np

from fedroute import classic_baseline
from fedroute.vrp_core import ALL_VARIANTS, check_feasibility, evaluate, generate_instance, variant_from_name
from oracles import brute_force_cvrp


def optimality_sweep(count=200, seed=7, max_n=5):
    """(number of instances solved to the brute-force optimum, count, worst shortfall)."""
    rng = np.random.default_rng(seed)
    spec = variant_from_name("CVRP")
    hits, below = 0, 0.0
    for _ in range(count):
        inst = generate_instance(spec, int(rng.integers(1, max_n + 1)), rng)
        opt = brute_force_cvrp(inst.depot, inst.coords, inst.demands, inst.capacity)
        cost = evaluate(inst, classic_baseline.solve(inst))
        below = max(below, opt - cost)
        hits += abs(cost - opt) <= 1e-9
    return hits, count, below


def feasibility_sweep(per_variant=100, n=10, seed=11):
    """(feasible solutions, total) over every variant."""
    rng = np.random.default_rng(seed)
    ok = total = 0
    for spec in ALL_VARIANTS:
        for _ in range(per_variant):
            inst = generate_instance(spec, n, rng)
            ok += check_feasibility(inst, classic_baseline.solve(inst)).feasible
            total += 1
    return ok, total
