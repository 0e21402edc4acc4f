"""Nearest-feasible-neighbour construction plus first-improvement local search.

This is the reference solver that optimality gaps are measured against. Every
move is re-checked with the same route feasibility rules used for scoring.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from .routing_env import BatchEnv
from .vrp_core import Instance, Solution, check_feasibility, route_length, route_violations

DEFAULT_BUDGET = 2000
_IMPROVE_TOL = 1e-12


def greedy_construct(instance: Instance) -> Solution:
    env = BatchEnv([instance], 1)
    actions = []
    while not env.done[0, 0]:
        mask = env.mask()[0, 0]
        cur = int(env.cur[0, 0])
        cand = np.flatnonzero(mask[1:]) + 1
        if len(cand):
            d = instance.dist[cur, cand]
            node = int(cand[np.argmin(d)])
        else:
            node = 0
        env.step(np.array([[node]]))
        actions.append(node)
    return Solution.from_actions(actions)


class _Search:
    def __init__(self, instance: Instance, routes: List[List[int]], budget: int, debug: bool):
        self.inst = instance
        self.routes = [list(r) for r in routes]
        self.costs = [route_length(instance, r) for r in self.routes]
        self.budget = budget
        self.evals = 0
        self.debug = debug

    def cost(self, route):
        return route_length(self.inst, route) if route else 0.0

    def feasible(self, route):
        return not route or not route_violations(self.inst, route)

    def spent(self):
        return self.evals >= self.budget

    def accept(self, changes):
        for k, r in changes:
            self.routes[k] = r
            self.costs[k] = self.cost(r)
        if self.debug:
            live = [r for r in self.routes if r]
            assert check_feasibility(self.inst, live).feasible, "accepted an infeasible move"

    def two_opt(self) -> bool:
        for k, r in enumerate(self.routes):
            m = len(r)
            for i in range(m - 1):
                for j in range(i + 1, m):
                    if self.spent():
                        return False
                    self.evals += 1
                    new = r[:i] + r[i:j + 1][::-1] + r[j + 1:]
                    c = self.cost(new)
                    if c < self.costs[k] - _IMPROVE_TOL and self.feasible(new):
                        self.accept([(k, new)])
                        return True
        return False

    def relocate(self) -> bool:
        R = len(self.routes)
        for a in range(R):
            ra = self.routes[a]
            for i, cust in enumerate(ra):
                rest = ra[:i] + ra[i + 1:]
                rest_cost = self.cost(rest)
                # R is the index of a fresh, empty route
                for b in range(R + 1):
                    if b == a:
                        continue
                    rb = self.routes[b] if b < R else []
                    if b == R and not rest:
                        continue
                    base = self.costs[a] + (self.costs[b] if b < R else 0.0)
                    for j in range(len(rb) + 1):
                        if self.spent():
                            return False
                        self.evals += 1
                        nb = rb[:j] + [cust] + rb[j:]
                        delta = rest_cost + self.cost(nb) - base
                        if delta < -_IMPROVE_TOL and self.feasible(nb) and self.feasible(rest):
                            if b == R:
                                self.routes.append([])
                                self.costs.append(0.0)
                            self.accept([(a, rest), (b, nb)])
                            return True
        return False

    def swap(self) -> bool:
        R = len(self.routes)
        for a in range(R):
            for b in range(a + 1, R):
                ra, rb = self.routes[a], self.routes[b]
                for i in range(len(ra)):
                    for j in range(len(rb)):
                        if self.spent():
                            return False
                        self.evals += 1
                        na = ra[:i] + [rb[j]] + ra[i + 1:]
                        nb = rb[:j] + [ra[i]] + rb[j + 1:]
                        delta = self.cost(na) + self.cost(nb) - self.costs[a] - self.costs[b]
                        if delta < -_IMPROVE_TOL and self.feasible(na) and self.feasible(nb):
                            self.accept([(a, na), (b, nb)])
                            return True
        return False

    def run(self):
        while not self.spent():
            if not (self.two_opt() or self.relocate() or self.swap()):
                break
            keep = [k for k, r in enumerate(self.routes) if r]
            self.routes = [self.routes[k] for k in keep]
            self.costs = [self.costs[k] for k in keep]
        return Solution([r for r in self.routes if r])


def local_search(instance: Instance, solution: Solution, iteration_budget: int = DEFAULT_BUDGET,
                 debug: bool = False) -> Solution:
    """First-improvement 2-opt, relocate and swap until no move helps or the budget is used.

    ``iteration_budget`` counts candidate move evaluations.
    """
    if not check_feasibility(instance, solution).feasible:
        raise ValueError("local search needs a feasible starting solution")
    return _Search(instance, solution.routes, iteration_budget, debug).run()


def solve(instance: Instance, budget: int = DEFAULT_BUDGET, debug: bool = False) -> Solution:
    return local_search(instance, greedy_construct(instance), budget, debug)


def gap(model_cost: float, ref_cost: float) -> float:
    """Percent by which ``model_cost`` exceeds ``ref_cost`` (negative if better)."""
    if not ref_cost > 0:
        raise ValueError("reference cost must be positive")
    return 100.0 * (model_cost - ref_cost) / ref_cost


def solve_costs(instances, budget: int = DEFAULT_BUDGET, workers: Optional[int] = None) -> np.ndarray:
    from .parallel import pmap
    from .vrp_core import evaluate

    return np.array(pmap(lambda inst: evaluate(inst, solve(inst, budget)), instances, workers))
