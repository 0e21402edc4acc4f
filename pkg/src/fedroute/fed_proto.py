"""Server/client federation loop: select, broadcast, fine-tune locally, aggregate.

Clients only ever exchange :class:`ParamVector` objects with the server. Each
client owns its instance source and optimizer state; ``local_update`` receives
a single client and never sees another client's data.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import merge_ops
from .parallel import derive_rng, pmap
from .policy_net import ParamVector
from .rl_train import (EpochStats, InstanceSource, OptState, TrainConfig, init_opt_state,
                       train_epoch)

AGGREGATORS = ("fedavg", "ties")


@dataclass
class FederationConfig:
    selection_ratio: float = 1.0
    local_epochs: int = 5
    local_lr: float = 1e-3
    rounds: int = 20
    aggregation: str = "ties"
    keep_percent: float = 20.0
    scale: float = 1.0
    data_cap: Optional[int] = None
    per_tensor_trim: bool = False

    def __post_init__(self):
        if not 0 < self.selection_ratio <= 1:
            raise ValueError("selection_ratio must be in (0, 1]")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.aggregation not in AGGREGATORS:
            raise ValueError(f"aggregation must be one of {AGGREGATORS}")
        if not 0 < self.keep_percent <= 100:
            raise ValueError("keep_percent must be in (0, 100]")
        if self.data_cap is not None and self.data_cap < 1:
            raise ValueError("data_cap must be positive")


@dataclass
class Client:
    id: int
    source: InstanceSource
    params: Optional[ParamVector] = None
    opt_state: Optional[OptState] = None
    weight: float = 1.0

    @property
    def variant(self) -> str:
        return self.source.label


@dataclass
class LocalResult:
    params: ParamVector
    opt_state: OptState
    stats: List[EpochStats]
    wall_time_s: float


def client_weights(clients: Sequence[Client]) -> np.ndarray:
    """|D_i| / sum |D_j| when every dataset is finite, else uniform."""
    sizes = [c.source.size for c in clients]
    if any(s is None for s in sizes):
        w = np.ones(len(clients))
    else:
        w = np.asarray(sizes, dtype=np.float64)
    return w / w.sum()


def num_selected(N: int, C: float) -> int:
    return max(math.ceil(round(C * N, 9)), 1)


def select_clients(N: int, C: float, rng: np.random.Generator) -> List[int]:
    """K = max(ceil(C N), 1) distinct ids from 1..N, uniformly without replacement."""
    if N < 1:
        raise ValueError("need at least one client")
    K = num_selected(N, C)
    if K > N:
        raise ValueError("selection ratio selects more clients than exist")
    return sorted(int(i) + 1 for i in rng.choice(N, size=K, replace=False))


def local_update(theta: ParamVector, client: Client, epochs: int, lr: float,
                 rng: np.random.Generator, train_cfg: TrainConfig) -> LocalResult:
    """Fine-tune a copy of ``theta`` on the client's own data for ``epochs`` epochs."""
    t0 = time.perf_counter()
    params = theta.copy()
    opt = client.opt_state
    if opt is None:
        opt = init_opt_state(params, lr, train_cfg.weight_decay)
    else:
        opt = opt.copy()
        opt.lr = lr
    stats = []
    for _ in range(epochs):
        params, opt, st = train_epoch(params, opt, client.source, train_cfg, rng)
        stats.append(st)
    return LocalResult(params, opt, stats, time.perf_counter() - t0)


def aggregate(theta: ParamVector, results: Sequence[ParamVector], weights: Sequence[float],
              cfg: FederationConfig) -> ParamVector:
    vectors = [r.data for r in results]
    if cfg.aggregation == "fedavg":
        # averaged in task-vector form so untouched clients give back theta bit for bit
        taus = [merge_ops.task_vector(v, theta.data) for v in vectors]
        return theta.with_data(theta.data + merge_ops.fed_avg(taus, weights))
    segments = None
    if cfg.per_tensor_trim:
        segments = [(a, b) for a, b, _ in theta.layout.offsets().values()]
    return theta.with_data(merge_ops.ties_merge(theta.data, vectors, cfg.keep_percent,
                                                cfg.scale, segments))


@dataclass
class RoundRecord:
    round: int
    client_id: int
    variant: str
    trained_greedy_cost: float
    tau_norm: float
    wall_time_s: float


def run_round(theta: ParamVector, clients: Sequence[Client], cfg: FederationConfig,
              train_cfg: TrainConfig, seed: int, round_idx: int):
    """One communication round; updates selected clients in place.

    Returns (new global params, list of RoundRecord).
    """
    N = len(clients)
    selected = select_clients(N, cfg.selection_ratio, derive_rng(seed, round_idx, 0))
    chosen = [clients[i - 1] for i in selected]

    def work(client):
        rng = derive_rng(seed, round_idx, client.id)
        return local_update(theta, client, cfg.local_epochs, cfg.local_lr, rng, train_cfg)

    results = pmap(work, chosen)
    records = []
    for client, res in zip(chosen, results):
        client.params = res.params
        client.opt_state = res.opt_state
        tau = merge_ops.task_vector(res.params.data, theta.data)
        records.append(RoundRecord(round_idx, client.id, client.variant,
                                   res.stats[-1].mean_greedy_cost,
                                   float(np.linalg.norm(tau)), res.wall_time_s))
    weights = client_weights(clients)[[i - 1 for i in selected]]
    new_theta = aggregate(theta, [r.params for r in results], weights, cfg)
    return new_theta, records


@dataclass
class FederationResult:
    client_params: Dict[int, ParamVector]
    global_params: ParamVector
    records: List[RoundRecord] = field(default_factory=list)
    evals: List[dict] = field(default_factory=list)


ROUND_LOG_COLUMNS = ("round", "client_id", "variant", "trained_greedy_cost", "tau_norm",
                     "wall_time_s")


def write_round_log(records: Sequence[RoundRecord], path: str) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(ROUND_LOG_COLUMNS)
        for r in records:
            w.writerow((r.round, r.client_id, r.variant, f"{r.trained_greedy_cost:.6f}",
                        f"{r.tau_norm:.6e}", f"{r.wall_time_s:.3f}"))


def federate(theta0: ParamVector, clients: Sequence[Client], cfg: FederationConfig,
             train_cfg: TrainConfig, seed: int,
             eval_fn: Optional[Callable[[int, ParamVector, Sequence[Client]], dict]] = None,
             round_log: Optional[str] = None,
             checkpoint: Optional[Callable[[int, Client], None]] = None) -> FederationResult:
    """Run ``cfg.rounds`` rounds starting every client from ``theta0``."""
    ids = [c.id for c in clients]
    if ids != list(range(1, len(clients) + 1)):
        raise ValueError("client ids must be 1..N in order")
    for c in clients:
        c.params = theta0.copy()
    theta = theta0.copy()
    result = FederationResult({}, theta)
    for t in range(cfg.rounds):
        theta, records = run_round(theta, clients, cfg, train_cfg, seed, t)
        result.records.extend(records)
        if round_log:
            write_round_log(records, round_log)
        if checkpoint is not None:
            for c in clients:
                checkpoint(t, c)
        if eval_fn is not None:
            result.evals.append(eval_fn(t, theta, clients))
    result.client_params = {c.id: c.params for c in clients}
    result.global_params = theta
    return result
