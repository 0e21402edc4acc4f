import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build_instance
from fedroute.vrp_core import (ALL_VARIANTS, FINETUNE_VARIANTS, PRETRAIN_VARIANTS, Instance,
                               Solution, augment8, check_feasibility, evaluate, generate_instance,
                               make_variant, route_length, variant_from_name)
from oracles import plain_route_cost

variant_idx = st.integers(0, 15)
seeds = st.integers(0, 2**32 - 1)


def test_variant_names():
    assert make_variant(False, False, False, False).name == "CVRP"
    assert make_variant(True, True, True, True).name == "OVRPBLTW"
    assert make_variant(False, True, False, True).name == "VRPBTW"


def test_variant_sets_partition_all_sixteen():
    assert len(set(ALL_VARIANTS)) == 16
    assert {v.name for v in PRETRAIN_VARIANTS} == {"CVRP", "OVRP", "VRPB", "VRPL", "VRPTW", "OVRPTW"}
    assert len(FINETUNE_VARIANTS) == 10
    assert set(PRETRAIN_VARIANTS) | set(FINETUNE_VARIANTS) == set(ALL_VARIANTS)
    assert not set(PRETRAIN_VARIANTS) & set(FINETUNE_VARIANTS)
    for v in ALL_VARIANTS:
        assert variant_from_name(v.name) == v


def test_generation_is_deterministic():
    spec = variant_from_name("CVRP")
    a = generate_instance(spec, 20, np.random.default_rng(7))
    b = generate_instance(spec, 20, np.random.default_rng(7))
    assert a.depot.tobytes() == b.depot.tobytes()
    assert a.coords.tobytes() == b.coords.tobytes()
    assert a.demands.tobytes() == b.demands.tobytes()


@pytest.mark.parametrize("seed", range(20))
def test_backhaul_instances_have_mixed_signs(seed):
    inst = generate_instance(variant_from_name("VRPB"), 20, np.random.default_rng(seed))
    assert (inst.demands < 0).any() and (inst.demands > 0).any()
    assert (np.abs(inst.demands) <= inst.capacity).all()


@pytest.mark.parametrize("seed", range(20))
def test_single_customer_trips_are_time_feasible(seed):
    inst = generate_instance(variant_from_name("VRPTW"), 20, np.random.default_rng(seed))
    for i in range(1, inst.n + 1):
        # independent simulation of depot -> i -> depot
        d0 = math.dist(inst.depot, inst.coords[i - 1])
        start = max(d0, inst.tw_start[i])
        assert start <= inst.tw_end[i]
        assert start + inst.service[i - 1] + d0 <= inst.tw_end[0]
        assert inst.tw_start[i] < inst.tw_end[i]


def test_backhaul_fraction_is_near_configured_rate():
    rng = np.random.default_rng(0)
    negs = [np.mean(generate_instance(variant_from_name("VRPB"), 50, rng).demands < 0)
            for _ in range(200)]
    assert 0.17 < np.mean(negs) < 0.23


@given(variant_idx, seeds, st.integers(1, 12))
@settings(max_examples=60, deadline=None)
def test_generated_instances_satisfy_type_invariants(k, seed, n):
    spec = ALL_VARIANTS[k]
    inst = generate_instance(spec, n, np.random.default_rng(seed))
    assert (inst.duration_limit is not None) == spec.duration_limit
    assert (inst.tw_start is not None) == spec.time_windows
    assert ((inst.coords >= 0) & (inst.coords <= 1)).all()
    if not spec.backhaul:
        assert (inst.demands > 0).all()
    elif n >= 2:
        assert (inst.demands < 0).any() and (inst.demands > 0).any()


def test_evaluate_hand_geometry():
    inst = build_instance([0, 0], [[0, 1], [1, 1]], [0.1, 0.1])
    assert evaluate(inst, Solution([[1, 2]])) == pytest.approx(2 + math.sqrt(2), abs=1e-12)
    opened = build_instance([0, 0], [[0, 1], [1, 1]], [0.1, 0.1], open=True)
    assert evaluate(opened, Solution([[1, 2]])) == pytest.approx(2.0, abs=1e-12)
    zero = build_instance([0, 0], [[0, 0]], [0.1])
    assert evaluate(zero, [[1]]) == 0.0


@pytest.mark.parametrize("routes", [[[1, 1, 2]], [[1]], [[1, 2], [2]], [[1, 2, 3]]])
def test_evaluate_rejects_bad_coverage(routes):
    inst = build_instance([0, 0], [[0, 1], [1, 1]], [0.1, 0.1])
    with pytest.raises(ValueError):
        evaluate(inst, routes)


def test_capacity_violation_magnitude():
    inst = build_instance([0, 0], [[0, 1], [1, 1]], [0.6, 0.5])
    rep = check_feasibility(inst, [[1, 2]])
    assert not rep.feasible
    (route, kind, mag), = rep.violations
    assert (route, kind) == (0, "capacity") and mag == pytest.approx(0.1, abs=1e-12)


def test_backhaul_two_sided_capacity():
    inst = build_instance([0, 0], [[0, 1], [1, 1], [1, 0]], [0.6, -0.7, -0.5], backhaul=True)
    rep = check_feasibility(inst, [[1, 2, 3]])
    assert rep.kinds() == {"capacity"}
    assert rep.violations[0][2] == pytest.approx(0.2)
    assert check_feasibility(inst, [[1, 2], [3]]).feasible


def test_linehaul_first_toggle():
    kw = dict(depot=[0, 0], coords=[[0, 1], [1, 1]], demands=[-0.2, 0.3], backhaul=True)
    assert check_feasibility(build_instance(**kw), [[1, 2]]).feasible
    rep = check_feasibility(build_instance(**kw, linehaul_first=True), [[1, 2]])
    assert rep.kinds() == {"precedence"}


def test_duration_violation_magnitude():
    inst = build_instance([0, 0], [[0, 1], [1, 1]], [0.1, 0.1], limit=3.0)
    rep = check_feasibility(inst, [[1, 2]])
    assert rep.kinds() == {"duration"}
    assert rep.violations[0][2] == pytest.approx(2 + math.sqrt(2) - 3, abs=1e-12)


def test_time_window_waiting_and_lateness():
    tw = [(0, 10), (3.0, 4.0), (1.0, 2.1)]
    inst = build_instance([0, 0], [[0, 1], [0, 2]], [0.1, 0.1], tw=tw, service=[0.5, 0.5])
    # reach 1 at t=1, wait until 3, leave 3.5, reach 2 at 4.5 > 2.1
    rep = check_feasibility(inst, [[1, 2]])
    assert rep.kinds() == {"time_window"}
    assert rep.violations[0][2] == pytest.approx(2.4)
    # reach 2 at 2.0, leave 2.5, reach 1 at 3.5 inside [3, 4]
    assert check_feasibility(inst, [[2, 1]]).feasible


def test_closed_tw_route_must_return_before_depot_close():
    inst = build_instance([0, 0], [[0, 1]], [0.1], tw=[(0, 2.0), (0, 5)], service=[0.5])
    assert check_feasibility(inst, [[1]]).kinds() == {"time_window"}


def test_coverage_violation_reported():
    inst = build_instance([0, 0], [[0, 1], [1, 1]], [0.1, 0.1])
    rep = check_feasibility(inst, [[1]])
    assert rep.kinds() == {"coverage"} and rep.violations[0][0] == -1


def test_instance_rejects_inconsistent_fields():
    with pytest.raises(ValueError):
        build_instance([0, 0], [[0, 1]], [-0.1])
    with pytest.raises(ValueError):
        Instance(np.zeros(2), np.zeros((1, 2)), np.array([0.1]), make_variant(False, False, True, False))
    with pytest.raises(ValueError):
        build_instance([0, 0], [[0, 1]], [1.5])


def test_reflection_formula():
    inst = build_instance([0.2, 0.7], [[0.2, 0.7]], [0.1])
    assert np.allclose(augment8(inst, 4).depot, [0.8, 0.7])
    assert augment8(inst, 0) is inst
    with pytest.raises(ValueError):
        augment8(inst, 8)


def test_eight_symmetries_are_distinct_isometries():
    inst = build_instance([0.1, 0.3], [[0.2, 0.9]], [0.1])
    images = {tuple(np.round(augment8(inst, k).coords[0], 12)) for k in range(8)}
    assert len(images) == 8


@given(variant_idx, seeds, st.integers(1, 9), st.integers(0, 7))
@settings(max_examples=80, deadline=None)
def test_augmentation_preserves_cost(k, seed, n, aug):
    rng = np.random.default_rng(seed)
    inst = generate_instance(ALL_VARIANTS[k], n, rng)
    perm = (rng.permutation(n) + 1).tolist()
    cuts = sorted(set(rng.integers(1, n + 1, size=2).tolist()))
    routes = [r for r in np.split(perm, cuts) if len(r)]
    sol = Solution([list(map(int, r)) for r in routes])
    other = augment8(inst, aug)
    assert abs(evaluate(other, sol) - evaluate(inst, sol)) <= 1e-12
    assert np.array_equal(other.demands, inst.demands)


@given(variant_idx, seeds, st.integers(1, 9))
@settings(max_examples=60, deadline=None)
def test_evaluate_matches_plain_sum(k, seed, n):
    rng = np.random.default_rng(seed)
    inst = generate_instance(ALL_VARIANTS[k], n, rng)
    perm = (rng.permutation(n) + 1).tolist()
    routes = [perm[: n // 2], perm[n // 2:]] if n > 1 else [perm]
    routes = [r for r in routes if r]
    expect = sum(plain_route_cost(inst.depot, inst.coords, r, inst.spec.open) for r in routes)
    assert evaluate(inst, routes) == pytest.approx(expect, abs=1e-12)


@given(seeds, st.integers(2, 9))
@settings(max_examples=60, deadline=None)
def test_duration_violation_implies_long_route(seed, n):
    rng = np.random.default_rng(seed)
    inst = generate_instance(variant_from_name("VRPL"), n, rng)
    perm = (rng.permutation(n) + 1).tolist()
    rep = check_feasibility(inst, [perm])
    if "duration" in rep.kinds():
        assert route_length(inst, perm) > inst.duration_limit
    else:
        assert route_length(inst, perm) <= inst.duration_limit + 1e-9
