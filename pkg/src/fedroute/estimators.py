"""scikit-learn style wrappers over the functional API.

``X`` is always a sequence of :class:`~fedroute.vrp_core.Instance`; ``predict``
returns one :class:`~fedroute.vrp_core.Solution` per instance and ``score``
is the negative mean tour cost, so larger is better as sklearn expects.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import classic_baseline
from .experiment import greedy_costs
from .fed_proto import Client, FederationConfig, federate
from .policy_net import ArchConfig, ParamVector, build_layout, init_params, rollout_batch
from .rl_train import MixedSource, PoolSource, TrainConfig, train
from .validation import check_client_data, check_instances, check_params, group_by_variant
from .vrp_core import Solution, augment8, evaluate


def _decode(params: ParamVector, insts, augment: bool, num_starts: int) -> List[Solution]:
    out = []
    for inst in insts:
        best, best_cost = None, np.inf
        for k in range(8 if augment else 1):
            view = inst if k == 0 else augment8(inst, k)
            res = rollout_batch(params, [view], min(num_starts, inst.n), "greedy")
            p = int(res.cost[0].argmin())
            acts = res.actions[0, p]
            sol = Solution.from_actions(acts[acts >= 0])
            cost = evaluate(inst, sol)
            if cost < best_cost:
                best, best_cost = sol, cost
        out.append(best)
    return out


def _source(insts, rng):
    groups = group_by_variant(insts)
    pools = [PoolSource(g) for g in groups.values()]
    return pools[0] if len(pools) == 1 else MixedSource(pools, rng)


class PolicyRouter(BaseEstimator):
    """Attention policy trained with REINFORCE and the multi-start shared baseline."""

    def __init__(self, embed_dim=32, num_heads=4, num_layers=2, clip=10.0, epochs=10,
                 instances_per_epoch=256, batch_size=64, num_starts=8, lr=1e-3,
                 weight_decay=1e-6, augment=True, warm_start=None, random_state=0):
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.num_layers = num_layers
        self.clip = clip
        self.epochs = epochs
        self.instances_per_epoch = instances_per_epoch
        self.batch_size = batch_size
        self.num_starts = num_starts
        self.lr = lr
        self.weight_decay = weight_decay
        self.augment = augment
        self.warm_start = warm_start
        self.random_state = random_state

    def _arch(self):
        return ArchConfig(self.embed_dim, self.num_heads, self.num_layers, self.clip)

    def _train_cfg(self, n):
        return TrainConfig(self.batch_size, self.instances_per_epoch, self.num_starts, self.lr,
                           self.weight_decay, self.epochs, n, int(self.random_state or 0), False)

    def fit(self, X, y=None):
        insts = check_instances(X)
        rng = np.random.default_rng(self.random_state)
        arch = self._arch()
        if self.warm_start is not None:
            params = check_params(self.warm_start, build_layout(arch).total_len).copy()
        else:
            params = init_params(arch, rng)
        cfg = self._train_cfg(insts[0].n)
        params, _, tlog = train(params, _source(insts, rng), cfg, rng)
        self.params_ = params
        self.training_log_ = tlog.rows
        return self

    def predict(self, X) -> List[Solution]:
        check_is_fitted(self, "params_")
        return _decode(self.params_, check_instances(X, same_size=False), self.augment, self.num_starts)

    def costs(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        insts = check_instances(X)
        return greedy_costs(self.params_, insts, self.augment, num_starts=self.num_starts)

    def score(self, X, y=None) -> float:
        return -float(self.costs(X).mean())


class FederatedRouter(BaseEstimator):
    """Federated fine-tuning: ``fit`` takes one private dataset per client."""

    def __init__(self, init_params=None, rounds=20, local_epochs=5, local_lr=1e-3,
                 selection_ratio=1.0, aggregation="ties", keep_percent=20.0, scale=1.0,
                 instances_per_epoch=256, batch_size=64, num_starts=8, augment=True,
                 random_state=0):
        self.init_params = init_params
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.local_lr = local_lr
        self.selection_ratio = selection_ratio
        self.aggregation = aggregation
        self.keep_percent = keep_percent
        self.scale = scale
        self.instances_per_epoch = instances_per_epoch
        self.batch_size = batch_size
        self.num_starts = num_starts
        self.augment = augment
        self.random_state = random_state

    def fit(self, X, y=None):
        parts = check_client_data(X)
        theta0 = check_params(self.init_params)
        fed = FederationConfig(self.selection_ratio, self.local_epochs, self.local_lr, self.rounds,
                               self.aggregation, self.keep_percent, self.scale)
        tcfg = TrainConfig(self.batch_size, self.instances_per_epoch, self.num_starts,
                           self.local_lr, problem_size=parts[0][0].n, track_greedy=False)
        clients = [Client(k, PoolSource(p)) for k, p in enumerate(parts, 1)]
        res = federate(theta0, clients, fed, tcfg, int(self.random_state or 0))
        self.client_params_ = [res.client_params[k] for k in range(1, len(parts) + 1)]
        self.global_params_ = res.global_params
        self.records_ = res.records
        return self

    def _params(self, client):
        check_is_fitted(self, "global_params_")
        if client is None:
            return self.global_params_
        if not 0 <= client < len(self.client_params_):
            raise IndexError(f"client index {client} out of range")
        return self.client_params_[client]

    def predict(self, X, client: Optional[int] = None) -> List[Solution]:
        """Solutions from the global model, or from client ``client`` (0-based)."""
        return _decode(self._params(client), check_instances(X, same_size=False), self.augment,
                       self.num_starts)

    def score(self, X, y=None, client: Optional[int] = None) -> float:
        insts = check_instances(X)
        return -float(greedy_costs(self._params(client), insts, self.augment,
                                   num_starts=self.num_starts).mean())


class ClassicSolver(BaseEstimator):
    """Greedy construction plus local search; ``fit`` only validates."""

    def __init__(self, budget=classic_baseline.DEFAULT_BUDGET):
        self.budget = budget

    def fit(self, X=None, y=None):
        if X is not None:
            check_instances(X, same_size=False)
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        self.fitted_ = True
        return self

    def predict(self, X) -> List[Solution]:
        return [classic_baseline.solve(inst, self.budget) for inst in check_instances(X, same_size=False)]

    def score(self, X, y=None) -> float:
        insts = check_instances(X, same_size=False)
        return -float(np.mean([evaluate(i, s) for i, s in zip(insts, self.predict(insts))]))
