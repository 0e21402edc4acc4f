"""Independent reference implementations used as test oracles.

These deliberately avoid the package's own helpers so a shared bug cannot
hide in both places.
"""

import itertools
import math

import numpy as np


def leg(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


def plain_route_cost(depot, coords, route, open_route=False):
    pts = [depot] + [coords[i - 1] for i in route]
    if not open_route:
        pts.append(depot)
    return sum(leg(p, q) for p, q in zip(pts, pts[1:]))


def brute_force_cvrp(depot, coords, demands, capacity=1.0, tol=1e-9):
    """Exact optimum over every customer order and every split into routes."""
    n = len(coords)
    best = math.inf
    for perm in itertools.permutations(range(1, n + 1)):
        for cuts in itertools.product((False, True), repeat=n - 1):
            routes, cur = [], [perm[0]]
            for c, cut in zip(perm[1:], cuts):
                if cut:
                    routes.append(cur)
                    cur = []
                cur.append(c)
            routes.append(cur)
            if any(sum(demands[i - 1] for i in r) > capacity + tol for r in routes):
                continue
            best = min(best, sum(plain_route_cost(depot, coords, r) for r in routes))
    return best


def brute_ties(ref, thetas, k, lam):
    """Loop-based ties merge: global top-k trim, sign election, disjoint mean."""
    ref = [float(x) for x in ref]
    m = len(ref)
    taus = []
    for th in thetas:
        tau = [float(a) - b for a, b in zip(th, ref)]
        keep = math.ceil(k * m / 100 - 1e-9)
        order = sorted(range(m), key=lambda i: (-abs(tau[i]), i))[:keep]
        taus.append([tau[i] if i in order else 0.0 for i in range(m)])
    out = []
    for i in range(m):
        s = sum(t[i] for t in taus)
        g = (s > 0) - (s < 0)
        agree = [t[i] for t in taus if t[i] != 0 and ((t[i] > 0) - (t[i] < 0)) == g]
        val = sum(agree) / len(agree) if g != 0 and agree else 0.0
        out.append(ref[i] + lam * val)
    return np.array(out)
