import csv

import numpy as np
import pytest

from fedroute.fed_proto import (Client, FederationConfig, client_weights, federate, local_update,
                                num_selected, run_round, select_clients)
from fedroute.merge_ops import task_vector
from fedroute.parallel import derive_rng, num_workers
from fedroute.policy_net import init_params
from fedroute.rl_train import GeneratorSource, PoolSource
from fedroute.vrp_core import FINETUNE_VARIANTS, generate_dataset, variant_from_name

from fedcheck import SMALL_ARCH, SMALL_TRAIN, centralized_vs_federated, zero_lr_drift


@pytest.fixture(scope="module")
def theta0():
    return init_params(SMALL_ARCH, np.random.default_rng(0))


def test_select_clients_examples():
    rng = np.random.default_rng(0)
    assert select_clients(10, 1.0, rng) == list(range(1, 11))
    assert len(select_clients(10, 0.05, rng)) == 1
    a = select_clients(10, 0.3, np.random.default_rng(7))
    assert a == select_clients(10, 0.3, np.random.default_rng(7))
    assert len(set(a)) == 3 and all(1 <= i <= 10 for i in a)
    assert num_selected(10, 0.3) == 3
    with pytest.raises(ValueError):
        select_clients(0, 1.0, rng)


def test_selection_is_uniform():
    counts = np.zeros(5)
    rng = np.random.default_rng(1)
    for _ in range(5000):
        counts[np.array(select_clients(5, 0.4, rng)) - 1] += 1
    # each id is chosen with probability 2/5
    assert np.allclose(counts / 5000, 0.4, atol=0.03)


def test_config_validation():
    with pytest.raises(ValueError):
        FederationConfig(selection_ratio=0)
    with pytest.raises(ValueError):
        FederationConfig(aggregation="median")
    with pytest.raises(ValueError):
        FederationConfig(local_epochs=0)
    cfg = FederationConfig()
    assert cfg.rounds * cfg.local_epochs == 100


def test_client_weights():
    pools = [PoolSource(generate_dataset(FINETUNE_VARIANTS[0], 5, m, np.random.default_rng(m)))
             for m in (1, 3)]
    assert client_weights([Client(1, pools[0]), Client(2, pools[1])]).tolist() == [0.25, 0.75]
    gens = [Client(k, GeneratorSource(FINETUNE_VARIANTS[0], 5)) for k in (1, 2)]
    assert client_weights(gens).tolist() == [0.5, 0.5]


def test_local_update_leaves_server_copy(theta0):
    before = theta0.data.copy()
    client = Client(1, GeneratorSource(variant_from_name("VRPBTW"), 6))
    res = local_update(theta0, client, 1, 1e-3, np.random.default_rng(0), SMALL_TRAIN)
    assert np.array_equal(theta0.data, before)
    assert np.linalg.norm(task_vector(res.params.data, theta0.data)) > 0
    again = local_update(theta0, Client(1, GeneratorSource(variant_from_name("VRPBTW"), 6)), 1,
                         1e-3, np.random.default_rng(0), SMALL_TRAIN)
    assert np.array_equal(res.params.data, again.params.data)


def test_zero_lr_is_fixed_point_local(theta0):
    client = Client(1, GeneratorSource(FINETUNE_VARIANTS[3], 6))
    res = local_update(theta0, client, 2, 0.0, np.random.default_rng(0), SMALL_TRAIN)
    assert np.array_equal(res.params.data, theta0.data)


@pytest.mark.parametrize("aggregation", ["fedavg", "ties"])
def test_zero_lr_rounds_are_fixed_points(aggregation):
    assert zero_lr_drift(aggregation) == 0.0


def test_single_client_matches_centralized():
    g, c, moved = centralized_vs_federated()
    assert moved > 0
    assert g <= 1e-12 and c <= 1e-12


def test_zero_rounds(theta0):
    clients = [Client(k, GeneratorSource(FINETUNE_VARIANTS[k], 6)) for k in (1, 2)]
    res = federate(theta0, clients, FederationConfig(rounds=0), SMALL_TRAIN, 0)
    assert all(np.array_equal(p.data, theta0.data) for p in res.client_params.values())
    assert np.array_equal(res.global_params.data, theta0.data)
    assert res.records == []


def test_client_ids_must_be_ordered(theta0):
    clients = [Client(2, GeneratorSource(FINETUNE_VARIANTS[0], 6))]
    with pytest.raises(ValueError):
        federate(theta0, clients, FederationConfig(rounds=1), SMALL_TRAIN, 0)


def test_unselected_clients_keep_their_model(theta0):
    clients = [Client(k, GeneratorSource(FINETUNE_VARIANTS[k], 6)) for k in (1, 2, 3)]
    for c in clients:
        c.params = theta0.copy()
    cfg = FederationConfig(selection_ratio=0.3, local_epochs=1, rounds=1)
    _, records = run_round(theta0, clients, cfg, SMALL_TRAIN, 0, 0)
    chosen = {r.client_id for r in records}
    assert len(chosen) == 1
    for c in clients:
        changed = not np.array_equal(c.params.data, theta0.data)
        assert changed == (c.id in chosen)


def test_privacy_boundary(theta0):
    """Each client's sampler is only ever touched by that client's own epochs."""
    sources = [GeneratorSource(FINETUNE_VARIANTS[k], 6) for k in range(3)]
    clients = [Client(k + 1, s) for k, s in enumerate(sources)]
    cfg = FederationConfig(selection_ratio=0.5, local_epochs=2, rounds=3)
    res = federate(theta0, clients, cfg, SMALL_TRAIN, 4)
    per_epoch = SMALL_TRAIN.instances_per_epoch // SMALL_TRAIN.batch_size
    for c in clients:
        rounds = sum(1 for r in res.records if r.client_id == c.id)
        assert c.source.draws == rounds * cfg.local_epochs * per_epoch


def test_budget_parity(theta0):
    sources = [GeneratorSource(FINETUNE_VARIANTS[k], 6) for k in range(2)]
    clients = [Client(k + 1, s) for k, s in enumerate(sources)]
    for agg in ("fedavg", "ties"):
        for s in sources:
            s.draws = 0
        federate(theta0, clients, FederationConfig(local_epochs=2, rounds=2, aggregation=agg),
                 SMALL_TRAIN, 0)
        assert [s.draws for s in sources] == [2 * 2 * 2] * 2


def _run(theta0, seed):
    clients = [Client(k + 1, GeneratorSource(FINETUNE_VARIANTS[k], 6)) for k in range(3)]
    return federate(theta0, clients, FederationConfig(local_epochs=1, rounds=2), SMALL_TRAIN, seed)


def test_deterministic_and_thread_independent(theta0, monkeypatch):
    monkeypatch.setenv("FEDROUTE_THREADS", "1")
    a = _run(theta0, 9)
    monkeypatch.setenv("FEDROUTE_THREADS", "4")
    assert num_workers() == 4
    b = _run(theta0, 9)
    assert np.array_equal(a.global_params.data, b.global_params.data)
    for k in a.client_params:
        assert np.array_equal(a.client_params[k].data, b.client_params[k].data)
    c = _run(theta0, 10)
    assert not np.array_equal(a.global_params.data, c.global_params.data)


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("FEDROUTE_THREADS", "many")
    with pytest.raises(ValueError):
        num_workers()


def test_seed_derivation_decorrelates():
    a = derive_rng(0, 1, 2).random(4)
    assert np.array_equal(a, derive_rng(0, 1, 2).random(4))
    assert not np.array_equal(a, derive_rng(0, 2, 1).random(4))


def test_round_log_and_checkpoints(theta0, tmp_path):
    path = tmp_path / "rounds.csv"
    seen = []
    clients = [Client(k + 1, GeneratorSource(FINETUNE_VARIANTS[k], 6)) for k in range(2)]
    res = federate(theta0, clients, FederationConfig(local_epochs=1, rounds=2), SMALL_TRAIN, 0,
                   round_log=str(path), checkpoint=lambda t, c: seen.append((t, c.id)),
                   eval_fn=lambda t, th, cl: {"round": t})
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["round", "client_id", "variant", "trained_greedy_cost", "tau_norm",
                             "wall_time_s"]
    assert [(int(r["round"]), int(r["client_id"])) for r in rows] == [(0, 1), (0, 2), (1, 1), (1, 2)]
    assert rows[0]["variant"] == FINETUNE_VARIANTS[0].name
    assert all(float(r["tau_norm"]) > 0 for r in rows)
    assert seen == [(0, 1), (0, 2), (1, 1), (1, 2)]
    assert res.evals == [{"round": 0}, {"round": 1}]


def test_optimizer_state_persists_across_rounds(theta0):
    client = Client(1, GeneratorSource(FINETUNE_VARIANTS[0], 6))
    federate(theta0, [client], FederationConfig(local_epochs=1, rounds=2), SMALL_TRAIN, 0)
    assert client.opt_state is not None
    assert client.opt_state.t == 2 * SMALL_TRAIN.instances_per_epoch // SMALL_TRAIN.batch_size
