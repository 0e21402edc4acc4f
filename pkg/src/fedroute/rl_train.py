"""REINFORCE with the POMO shared baseline, AdamW, and training loops."""

from __future__ import annotations

import csv
import logging
import os
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .policy_net import ArchConfig, ParamVector, backward, init_params, rollout_batch
from .vrp_core import Instance, VariantSpec, generate_instance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    instances_per_epoch: int = 2048
    num_starts: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 1
    problem_size: int = 10
    seed: int = 0
    track_greedy: bool = True

    def __post_init__(self):
        for name in ("batch_size", "instances_per_epoch", "num_starts", "problem_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.instances_per_epoch % self.batch_size:
            raise ValueError("instances_per_epoch must be a multiple of batch_size")

    @property
    def starts(self) -> int:
        return min(self.num_starts, self.problem_size)


@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    weight_decay: float = 0.0

    def copy(self) -> "OptState":
        return replace(self, m=self.m.copy(), v=self.v.copy())


def init_opt_state(params: ParamVector, lr: float, weight_decay: float = 0.0) -> OptState:
    size = params.layout.total_len
    return OptState(np.zeros(size), np.zeros(size), lr=lr, weight_decay=weight_decay)


def opt_step(state: OptState, params: ParamVector, grad: np.ndarray) -> Tuple[ParamVector, OptState]:
    """One AdamW step with bias correction. Inputs are not modified."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape or len(params) != len(grad):
        raise ValueError("gradient layout does not match the optimizer state")
    if not np.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    theta = params.data
    new = theta - state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * theta)
    if not np.isfinite(new).all():
        raise FloatingPointError("optimizer produced non-finite parameters")
    return params.with_data(new), replace(state, m=m, v=v, t=t)


def pomo_weights(costs) -> np.ndarray:
    """Per-trajectory REINFORCE coefficients (L_j - mean L) / P along the last axis."""
    costs = np.asarray(costs, dtype=np.float64)
    P = costs.shape[-1]
    if P < 2:
        raise ValueError("the shared baseline needs at least two starts")
    return (costs - costs.mean(-1, keepdims=True)) / P


# instance sources ----------------------------------------------------------

class InstanceSource:
    """Base class; ``draws`` counts how often the source handed out data."""

    spec: VariantSpec
    n: int

    def __init__(self):
        self.draws = 0

    def draw(self, batch_size: int, rng: np.random.Generator) -> Tuple[VariantSpec, List[Instance]]:
        self.draws += 1
        return self._draw(batch_size, rng)

    @property
    def size(self) -> Optional[int]:
        return None

    @property
    def label(self) -> str:
        return self.spec.name


class GeneratorSource(InstanceSource):
    def __init__(self, spec: VariantSpec, n: int, linehaul_first: bool = False):
        super().__init__()
        self.spec, self.n, self.linehaul_first = spec, n, linehaul_first

    def _draw(self, batch_size, rng):
        return self.spec, [generate_instance(self.spec, self.n, rng, self.linehaul_first)
                           for _ in range(batch_size)]


class PoolSource(InstanceSource):
    """A fixed private dataset; batches are sampled from it without replacement."""

    def __init__(self, instances: Sequence[Instance]):
        super().__init__()
        if not instances:
            raise ValueError("empty dataset")
        self.instances = list(instances)
        self.spec, self.n = instances[0].spec, instances[0].n

    @property
    def size(self) -> int:
        return len(self.instances)

    def _draw(self, batch_size, rng):
        replace_ = batch_size > len(self.instances)
        idx = rng.choice(len(self.instances), size=batch_size, replace=replace_)
        return self.spec, [self.instances[i] for i in idx]


class MixedSource(InstanceSource):
    """Picks one member source uniformly per batch using its own generator."""

    def __init__(self, sources: Sequence[InstanceSource], choice_rng: np.random.Generator):
        super().__init__()
        self.sources = list(sources)
        self.choice_rng = choice_rng
        self.n = self.sources[0].n
        self.spec = self.sources[0].spec

    @property
    def label(self) -> str:
        return "MIX"

    @property
    def size(self):
        sizes = [s.size for s in self.sources]
        return None if any(s is None for s in sizes) else sum(sizes)

    def _draw(self, batch_size, rng):
        if len(self.sources) == 1:
            return self.sources[0].draw(batch_size, rng)
        k = int(self.choice_rng.integers(len(self.sources)))
        return self.sources[k].draw(batch_size, rng)


# training loops -------------------------------------------------------------

@dataclass
class EpochStats:
    mean_sample_cost: float
    mean_greedy_cost: float
    variant_counts: Counter = field(default_factory=Counter)
    wall_time_s: float = 0.0

    @property
    def variant_mix(self) -> str:
        return "|".join(f"{k}:{v}" for k, v in sorted(self.variant_counts.items()))


def batch_gradient(params: ParamVector, instances: Sequence[Instance], num_starts: int,
                   rng: np.random.Generator):
    """Sampled rollouts and the mean-over-instances POMO gradient."""
    res = rollout_batch(params, instances, num_starts, "sample", rng, keep_tape=True)
    w = pomo_weights(res.cost)
    grad = backward(params, res.tape, w) / len(instances)
    return grad, res


def train_epoch(params: ParamVector, opt_state: OptState, sampler: InstanceSource,
                cfg: TrainConfig, rng: np.random.Generator):
    t0 = time.perf_counter()
    sample_costs, greedy_costs = [], []
    counts: Counter = Counter()
    for _ in range(cfg.instances_per_epoch // cfg.batch_size):
        spec, insts = sampler.draw(cfg.batch_size, rng)
        counts[spec.name] += 1
        starts = min(cfg.num_starts, insts[0].n)
        if cfg.track_greedy:
            g = rollout_batch(params, insts, starts, "greedy")
            greedy_costs.append(g.cost.min(-1).mean())
        grad, res = batch_gradient(params, insts, starts, rng)
        sample_costs.append(res.cost.mean())
        params, opt_state = opt_step(opt_state, params, grad)
    stats = EpochStats(
        float(np.mean(sample_costs)),
        float(np.mean(greedy_costs)) if greedy_costs else float("nan"),
        counts,
        time.perf_counter() - t0,
    )
    return params, opt_state, stats


class TrainingLog:
    """Append-only CSV of epoch statistics."""

    COLUMNS = ("epoch", "variant_mix", "mean_sample_cost", "mean_greedy_cost", "wall_time_s")

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.rows: List[tuple] = []
        if path and not os.path.exists(path):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def append(self, epoch: int, stats: EpochStats) -> None:
        row = (epoch, stats.variant_mix, f"{stats.mean_sample_cost:.6f}",
               f"{stats.mean_greedy_cost:.6f}", f"{stats.wall_time_s:.3f}")
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)


def train(params: ParamVector, sampler: InstanceSource, cfg: TrainConfig, rng: np.random.Generator,
          opt_state: Optional[OptState] = None, log_path: Optional[str] = None):
    """Run ``cfg.epochs`` epochs; returns (params, opt_state, TrainingLog)."""
    if opt_state is None:
        opt_state = init_opt_state(params, cfg.lr, cfg.weight_decay)
    tlog = TrainingLog(log_path)
    for epoch in range(cfg.epochs):
        params, opt_state, stats = train_epoch(params, opt_state, sampler, cfg, rng)
        tlog.append(epoch, stats)
        log.info("epoch %d mix=%s sample=%.4f greedy=%.4f", epoch, stats.variant_mix,
                 stats.mean_sample_cost, stats.mean_greedy_cost)
    return params, opt_state, tlog


def pretrain(variants: Sequence[VariantSpec], cfg: TrainConfig, rng: np.random.Generator,
             arch: ArchConfig = ArchConfig(), params: Optional[ParamVector] = None,
             log_path: Optional[str] = None):
    """Centralised multi-variant training; one variant is drawn per batch.

    The variant draws come from a generator spawned off ``rng`` so the instance
    stream is the same as a plain single-variant run.
    """
    if not variants:
        raise ValueError("no pre-training variants given")
    choice_rng, init_rng = rng.spawn(2)
    if params is None:
        params = init_params(arch, init_rng)
    sampler = MixedSource([GeneratorSource(v, cfg.problem_size) for v in variants], choice_rng)
    params, _, tlog = train(params, sampler, cfg, rng, log_path=log_path)
    return params, tlog
