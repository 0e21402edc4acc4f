"""Vehicle routing variants, instances, evaluation and feasibility checks.

A variant is one combination of the four constraint flags on top of CVRP:
open routes (O), backhauls (B), duration limit (L) and time windows (TW).
Distances are Euclidean and time shares the distance unit (speed 1).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, List, Optional, Sequence

import numpy as np

# Generation defaults for desk-scale instances.
DURATION_LIMIT = 3.0
DEPOT_TW = (0.0, 3.0)
SERVICE_TIME = 0.2
TW_WIDTH = (0.15, 0.6)
BACKHAUL_PROB = 0.2

# Shared numerical slack for mask and feasibility comparisons.
FEAS_TOL = 1e-9


@dataclass(frozen=True, order=True)
class VariantSpec:
    open: bool = False
    backhaul: bool = False
    duration_limit: bool = False
    time_windows: bool = False

    @property
    def name(self) -> str:
        if not any(self.flags):
            return "CVRP"
        return (
            ("O" if self.open else "")
            + "VRP"
            + ("B" if self.backhaul else "")
            + ("L" if self.duration_limit else "")
            + ("TW" if self.time_windows else "")
        )

    @property
    def flags(self) -> tuple:
        return (self.open, self.backhaul, self.duration_limit, self.time_windows)

    def __str__(self) -> str:
        return self.name


def make_variant(open: bool, backhaul: bool, limit: bool, tw: bool) -> VariantSpec:
    return VariantSpec(bool(open), bool(backhaul), bool(limit), bool(tw))


ALL_VARIANTS: List[VariantSpec] = [
    make_variant(*flags) for flags in itertools.product((False, True), repeat=4)
]
_BY_NAME = {v.name: v for v in ALL_VARIANTS}


def variant_from_name(name: str) -> VariantSpec:
    try:
        return _BY_NAME[name.strip().upper()]
    except KeyError:
        raise ValueError(f"unknown VRP variant {name!r}") from None


PRETRAIN_VARIANTS: List[VariantSpec] = [
    variant_from_name(s) for s in ("CVRP", "OVRP", "VRPB", "VRPL", "VRPTW", "OVRPTW")
]
FINETUNE_VARIANTS: List[VariantSpec] = [
    variant_from_name(s)
    for s in (
        "OVRPB", "OVRPL", "VRPBL", "VRPBTW", "VRPLTW",
        "OVRPBL", "OVRPBTW", "OVRPLTW", "VRPBLTW", "OVRPBLTW",
    )
]


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between the last-axis points of ``a`` and ``b``.

    Written out component-wise so that every caller gets bit-identical values.
    """
    dx = a[..., :, None, 0] - b[..., None, :, 0]
    dy = a[..., :, None, 1] - b[..., None, :, 1]
    return np.sqrt(dx * dx + dy * dy)


@dataclass(frozen=True, eq=False)
class Instance:
    """One routing instance. Node 0 is the depot, customers are 1..n.

    ``tw_start``/``tw_end`` have length n+1 (index 0 is the depot window),
    ``service`` has length n. Optional fields are present iff the matching
    variant flag is set.
    """

    depot: np.ndarray
    coords: np.ndarray
    demands: np.ndarray
    spec: VariantSpec
    capacity: float = 1.0
    duration_limit: Optional[float] = None
    tw_start: Optional[np.ndarray] = None
    tw_end: Optional[np.ndarray] = None
    service: Optional[np.ndarray] = None
    linehaul_first: bool = False

    def __post_init__(self):
        n = len(self.coords)
        if self.depot.shape != (2,) or self.coords.shape != (n, 2):
            raise ValueError("depot must be (2,) and coords (n, 2)")
        if self.demands.shape != (n,):
            raise ValueError("demands must have one entry per customer")
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if (self.duration_limit is not None) != self.spec.duration_limit:
            raise ValueError("duration_limit present iff the L flag is set")
        has_tw = self.tw_start is not None
        if has_tw != self.spec.time_windows or (self.tw_end is not None) != has_tw \
                or (self.service is not None) != has_tw:
            raise ValueError("time-window fields present iff the TW flag is set")
        if not self.spec.backhaul and np.any(self.demands <= 0):
            raise ValueError("non-backhaul variants need strictly positive demands")
        if np.any(np.abs(self.demands) > self.capacity + FEAS_TOL):
            raise ValueError("customer demand exceeds vehicle capacity")
        for arr in (self.depot, self.coords, self.demands):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.coords)

    @cached_property
    def locations(self) -> np.ndarray:
        """(n+1, 2) array with the depot first."""
        loc = np.vstack([self.depot[None, :], self.coords])
        loc.setflags(write=False)
        return loc

    @cached_property
    def dist(self) -> np.ndarray:
        d = pairwise_distances(self.locations, self.locations)
        d.setflags(write=False)
        return d

    def node_demands(self) -> np.ndarray:
        return np.concatenate([[0.0], self.demands])

    def node_service(self) -> np.ndarray:
        if self.service is None:
            return np.zeros(self.n + 1)
        return np.concatenate([[0.0], self.service])


@dataclass
class Solution:
    """Routes of customer indices (1..n); the depot is implicit at both ends."""

    routes: List[List[int]] = field(default_factory=list)

    @classmethod
    def from_actions(cls, actions: Iterable[int]) -> "Solution":
        routes, cur = [], []
        for a in actions:
            a = int(a)
            if a == 0:
                if cur:
                    routes.append(cur)
                cur = []
            else:
                cur.append(a)
        if cur:
            routes.append(cur)
        return cls(routes)

    def customers(self) -> List[int]:
        return [c for r in self.routes for c in r]


@dataclass
class FeasibilityReport:
    violations: List[tuple] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations

    def kinds(self) -> set:
        return {v[1] for v in self.violations}


def _as_routes(solution) -> List[List[int]]:
    if isinstance(solution, Solution):
        return solution.routes
    return [list(r) for r in solution]


def _coverage_errors(n: int, routes: Sequence[Sequence[int]]) -> Optional[str]:
    seen = [c for r in routes for c in r]
    if len(seen) != len(set(seen)):
        return "duplicate customer"
    if set(seen) != set(range(1, n + 1)):
        return "solution does not cover customers 1..n exactly"
    return None


def route_length(instance: Instance, route: Sequence[int]) -> float:
    """Length of one route, return leg omitted for open variants."""
    d = instance.dist
    total, prev = 0.0, 0
    for c in route:
        total += d[prev, c]
        prev = c
    if not instance.spec.open:
        total += d[prev, 0]
    return total


def evaluate(instance: Instance, solution) -> float:
    """Total travel distance of ``solution``.

    Legs are accumulated in visiting order into a single running sum, which is
    the same order the construction environment uses.
    """
    routes = _as_routes(solution)
    err = _coverage_errors(instance.n, routes)
    if err:
        raise ValueError(err)
    d = instance.dist
    closed = not instance.spec.open
    total = 0.0
    for route in routes:
        prev = 0
        for c in route:
            total += d[prev, c]
            prev = c
        if closed:
            total += d[prev, 0]
    return float(total)


def route_violations(instance: Instance, route: Sequence[int]) -> List[tuple]:
    """(kind, magnitude) pairs for a single route."""
    out = []
    if not route:
        return [("coverage", 1.0)]
    dem = instance.demands
    c = instance.capacity
    deliveries = 0.0
    pickups = 0.0
    for j in route:
        if dem[j - 1] > 0:
            deliveries += dem[j - 1]
        else:
            pickups += -dem[j - 1]
    if deliveries > c + FEAS_TOL:
        out.append(("capacity", deliveries - c))
    if pickups > c + FEAS_TOL:
        out.append(("capacity", pickups - c))
    if instance.linehaul_first:
        seen_pickup = False
        for j in route:
            if dem[j - 1] < 0:
                seen_pickup = True
            elif seen_pickup:
                out.append(("precedence", 1.0))
                break
    if instance.duration_limit is not None:
        length = route_length(instance, route)
        if length > instance.duration_limit + FEAS_TOL:
            out.append(("duration", length - instance.duration_limit))
    if instance.spec.time_windows:
        d = instance.dist
        clock, prev = 0.0, 0
        worst = 0.0
        for j in route:
            start = max(clock + d[prev, j], instance.tw_start[j])
            worst = max(worst, start - instance.tw_end[j])
            clock = start + instance.service[j - 1]
            prev = j
        if not instance.spec.open:
            worst = max(worst, clock + d[prev, 0] - instance.tw_end[0])
        if worst > FEAS_TOL:
            out.append(("time_window", worst))
    return out


def check_feasibility(instance: Instance, solution) -> FeasibilityReport:
    routes = _as_routes(solution)
    report = FeasibilityReport()
    seen = [c for r in routes for c in r]
    dupes = len(seen) - len(set(seen))
    missing = len(set(range(1, instance.n + 1)) - set(seen))
    stray = len(set(seen) - set(range(1, instance.n + 1)))
    if dupes or missing or stray:
        report.violations.append((-1, "coverage", float(dupes + missing + stray)))
        routes = [[c for c in r if 1 <= c <= instance.n] for r in routes]
    for k, route in enumerate(routes):
        for kind, mag in route_violations(instance, route):
            report.violations.append((k, kind, float(mag)))
    return report


def demand_scale(n: int) -> float:
    if n <= 20:
        return 30.0
    if n <= 50:
        return 40.0
    return 50.0


def generate_instance(
    spec: VariantSpec, n: int, rng: np.random.Generator, linehaul_first: bool = False
) -> Instance:
    if n < 1:
        raise ValueError("need at least one customer")
    depot = rng.uniform(size=2)
    coords = rng.uniform(size=(n, 2))
    if spec.time_windows:
        # keep every single-customer round trip inside the depot window
        reach = (DEPOT_TW[1] - SERVICE_TIME) / 2.0
        while True:
            far = pairwise_distances(depot[None], coords)[0] > reach
            if not far.any():
                break
            coords[far] = rng.uniform(size=(int(far.sum()), 2))
    demands = rng.integers(1, 10, size=n) / demand_scale(n)
    if spec.backhaul:
        back = rng.random(n) < BACKHAUL_PROB
        if n >= 2 and (back.all() or not back.any()):
            back[rng.integers(n)] = not back[0]
        demands = np.where(back, -demands, demands)
    limit = DURATION_LIMIT if spec.duration_limit else None
    tw_start = tw_end = service = None
    if spec.time_windows:
        to_depot = pairwise_distances(depot[None], coords)[0]
        service = np.full(n, SERVICE_TIME)
        lo = to_depot
        hi = DEPOT_TW[1] - SERVICE_TIME - to_depot
        e = lo + rng.uniform(size=n) * (hi - lo)
        width = rng.uniform(*TW_WIDTH, size=n)
        tw_start = np.concatenate([[DEPOT_TW[0]], e])
        tw_end = np.concatenate([[DEPOT_TW[1]], e + width])
    return Instance(
        depot=depot,
        coords=coords,
        demands=demands,
        spec=spec,
        capacity=1.0,
        duration_limit=limit,
        tw_start=tw_start,
        tw_end=tw_end,
        service=service,
        linehaul_first=linehaul_first,
    )


def generate_dataset(spec: VariantSpec, n: int, size: int, rng: np.random.Generator,
                     linehaul_first: bool = False) -> List[Instance]:
    return [generate_instance(spec, n, rng, linehaul_first) for _ in range(size)]


def _symmetry(xy: np.ndarray, k: int) -> np.ndarray:
    x, y = xy[..., 0], xy[..., 1]
    out = {
        0: (x, y),
        1: (y, 1 - x),
        2: (1 - x, 1 - y),
        3: (1 - y, x),
        4: (1 - x, y),
        5: (x, 1 - y),
        6: (y, x),
        7: (1 - y, 1 - x),
    }[k]
    return np.stack(out, axis=-1)


def augment8(instance: Instance, k: int) -> Instance:
    """Apply the k-th symmetry of the unit square to all coordinates."""
    if k not in range(8):
        raise ValueError(f"augmentation index must be in 0..7, got {k!r}")
    if k == 0:
        return instance
    return replace(
        instance,
        depot=_symmetry(instance.depot, k),
        coords=_symmetry(instance.coords, k),
    )


__all__ = [
    "ALL_VARIANTS", "FINETUNE_VARIANTS", "PRETRAIN_VARIANTS", "FeasibilityReport",
    "Instance", "Solution", "VariantSpec", "augment8", "check_feasibility",
    "evaluate", "generate_dataset", "generate_instance", "make_variant",
    "route_length", "variant_from_name",
]

